//! The genesis file: network id plus the ordered list of initial nodes.
//!
//! Stored as canonical JSON:
//!
//! ```json
//! {"network_id":"…","nodes":[{"client_endpoint":"http://127.0.0.1:9702",
//!   "node_did":"did:shr:…","node_name":"node1",
//!   "replication_endpoint":"http://127.0.0.1:9701",
//!   "verification_key":"<base64url, 32 bytes>"}]}
//! ```
//!
//! - `network_id`: free text naming the network.
//! - `nodes[i].node_name`: unique; node `i` leads view `v` when `v mod n = i`.
//! - `nodes[i].node_did`: `did:shr:` DID of the node's steward key.
//! - `nodes[i].verification_key`: the key behind `node_did`; signs
//!   replication messages.
//! - `nodes[i].replication_endpoint` / `client_endpoint`: `http://host:port`
//!   base URLs, all unique.
//!
//! The fingerprint is SHA-256 over the canonical bytes.

use std::collections::HashSet;
use std::path::Path;

use healthreg_core::crypto::sha256;
use healthreg_core::{canonical, Did, Digest, PublicKey};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenesisNode {
    pub node_name: String,
    pub node_did: Did,
    pub verification_key: PublicKey,
    pub replication_endpoint: String,
    pub client_endpoint: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenesisFile {
    pub network_id: String,
    pub nodes: Vec<GenesisNode>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GenesisError {
    #[error("genesis file lists no nodes")]
    Empty,
    #[error("duplicate node name or endpoint: {0}")]
    Duplicate(String),
    #[error("node {0}: DID does not match its verification key")]
    DidKeyMismatch(String),
    #[error("node {node}: endpoint `{endpoint}` is not an http://host:port URL")]
    BadEndpoint { node: String, endpoint: String },
    #[error("genesis file does not parse: {0}")]
    Parse(String),
}

/// `floor(n/2) + 1`, counting the leader itself.
pub fn quorum(n: usize) -> usize {
    n / 2 + 1
}

/// `host:port` part of an `http://host:port[/]` URL.
pub fn socket_addr_of(endpoint: &str) -> Option<&str> {
    let rest = endpoint.strip_prefix("http://")?;
    let host_port = rest.trim_end_matches('/');
    (!host_port.is_empty() && !host_port.contains('/') && host_port.contains(':')).then_some(host_port)
}

impl GenesisFile {
    pub fn validate(&self) -> Result<(), GenesisError> {
        if self.nodes.is_empty() {
            return Err(GenesisError::Empty);
        }
        let mut seen = HashSet::new();
        for node in &self.nodes {
            if *node.node_did.public_key() != node.verification_key {
                return Err(GenesisError::DidKeyMismatch(node.node_name.clone()));
            }
            for endpoint in [&node.replication_endpoint, &node.client_endpoint] {
                if socket_addr_of(endpoint).is_none() {
                    return Err(GenesisError::BadEndpoint {
                        node: node.node_name.clone(),
                        endpoint: endpoint.clone(),
                    });
                }
            }
            for unique in [
                format!("name:{}", node.node_name),
                format!("endpoint:{}", node.replication_endpoint),
                format!("endpoint:{}", node.client_endpoint),
            ] {
                if !seen.insert(unique.clone()) {
                    return Err(GenesisError::Duplicate(unique));
                }
            }
        }
        Ok(())
    }

    pub fn to_canonical(&self) -> Vec<u8> {
        canonical::to_vec(self).expect("genesis holds no floats")
    }

    pub fn fingerprint(&self) -> Digest {
        sha256(&self.to_canonical())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GenesisError> {
        let genesis: Self = serde_json::from_slice(bytes).map_err(|e| GenesisError::Parse(e.to_string()))?;
        genesis.validate()?;
        Ok(genesis)
    }

    pub fn load(path: &Path) -> Result<Self, GenesisError> {
        let bytes = std::fs::read(path).map_err(|e| GenesisError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_canonical())
    }

    pub fn quorum(&self) -> usize {
        quorum(self.nodes.len())
    }

    pub fn node(&self, name: &str) -> Option<&GenesisNode> {
        self.nodes.iter().find(|n| n.node_name == name)
    }

    pub fn leader_of(&self, view: u64) -> &GenesisNode {
        &self.nodes[(view % self.nodes.len() as u64) as usize]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use healthreg_core::KeyPair;

    pub(crate) fn sample(n: usize) -> GenesisFile {
        GenesisFile {
            network_id: "test".into(),
            nodes: (0..n)
                .map(|i| {
                    let keys = KeyPair::from_seed(&[i as u8 + 1; 32]);
                    GenesisNode {
                        node_name: format!("node{}", i + 1),
                        node_did: Did::from_public_key(&keys.public_key),
                        verification_key: keys.public_key,
                        replication_endpoint: format!("http://127.0.0.1:{}", 9700 + 2 * i),
                        client_endpoint: format!("http://127.0.0.1:{}", 9701 + 2 * i),
                    }
                })
                .collect(),
        }
    }

    #[test]
    fn quorum_table() {
        let table: Vec<usize> = [1, 2, 3, 4, 5, 7].iter().map(|&n| quorum(n)).collect();
        assert_eq!(table, vec![1, 2, 2, 3, 3, 4]);
    }

    #[test]
    fn fingerprint_is_stable_and_key_sensitive() {
        let g = sample(4);
        assert_eq!(g.fingerprint(), GenesisFile::from_bytes(&g.to_canonical()).unwrap().fingerprint());
        let mut edited = g.clone();
        let other = KeyPair::from_seed(&[99; 32]);
        edited.nodes[2].verification_key = other.public_key;
        edited.nodes[2].node_did = Did::from_public_key(&other.public_key);
        assert_ne!(g.fingerprint(), edited.fingerprint());
    }

    #[test]
    fn validation() {
        assert_eq!(sample(0).validate(), Err(GenesisError::Empty));
        let mut dup = sample(2);
        dup.nodes[1].node_name = "node1".into();
        assert!(matches!(dup.validate(), Err(GenesisError::Duplicate(_))));
        let mut mismatch = sample(2);
        mismatch.nodes[0].verification_key = mismatch.nodes[1].verification_key;
        assert!(matches!(mismatch.validate(), Err(GenesisError::DidKeyMismatch(_))));
        let mut bad = sample(1);
        bad.nodes[0].client_endpoint = "127.0.0.1:80".into();
        assert!(matches!(bad.validate(), Err(GenesisError::BadEndpoint { .. })));
    }

    #[test]
    fn leader_rotation() {
        let g = sample(3);
        assert_eq!(g.leader_of(0).node_name, "node1");
        assert_eq!(g.leader_of(4).node_name, "node2");
    }
}
