//! Multi-node networks on one machine, for demos and fault-injection
//! harnesses. Nodes run either in-process over [`LocalNetwork`] or as
//! HTTP servers on loopback ports.

use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use healthreg_core::crypto::sha256;
use healthreg_core::wallet::KdfParams;
use healthreg_core::{Did, KeyPair};

use crate::client::LedgerClient;
use crate::genesis::{GenesisFile, GenesisNode};
use crate::http::{HttpLedgerClient, HttpTransport, NodeServer};
use crate::local::LocalNetwork;
use crate::node::{Node, NodeConfig, NodeOptions, Transport};
use crate::{steward, NodeError};

pub const STEWARD_PASSPHRASE: &str = "cluster-steward";

enum Slot {
    Local(Option<Arc<Node>>),
    Http(Option<NodeServer>),
}

pub struct Cluster {
    pub genesis: GenesisFile,
    configs: Vec<NodeConfig>,
    options: NodeOptions,
    network: Option<Arc<LocalNetwork>>,
    http: Option<Arc<HttpTransport>>,
    slots: Vec<Slot>,
}

/// Deterministic steward key for node `i` of a harness network.
pub fn harness_node_key(i: usize) -> KeyPair {
    KeyPair::from_seed(&sha256(format!("harness-node-{i}").as_bytes()).0)
}

fn prepare(n: usize, dir: &Path, endpoints: Vec<(String, String)>) -> Result<(GenesisFile, Vec<NodeConfig>), NodeError> {
    std::fs::create_dir_all(dir)?;
    let mut nodes = Vec::new();
    let mut wallets = Vec::new();
    for (i, (replication_endpoint, client_endpoint)) in endpoints.into_iter().enumerate().take(n) {
        let keys = harness_node_key(i);
        let wallet_path = dir.join(format!("node{}.steward", i + 1));
        if !wallet_path.exists() {
            steward::create_steward_wallet(&wallet_path, STEWARD_PASSPHRASE, KdfParams::light(), &keys)?;
        }
        wallets.push(wallet_path);
        nodes.push(GenesisNode {
            node_name: format!("node{}", i + 1),
            node_did: Did::from_public_key(&keys.public_key),
            verification_key: keys.public_key,
            replication_endpoint,
            client_endpoint,
        });
    }
    let genesis = GenesisFile {
        network_id: format!("harness-{n}"),
        nodes,
    };
    genesis.validate()?;
    let configs = genesis
        .nodes
        .iter()
        .zip(wallets)
        .map(|(node, wallet)| NodeConfig {
            genesis: genesis.clone(),
            own_name: node.node_name.clone(),
            steward_wallet_path: wallet,
            data_dir: dir.join(&node.node_name),
        })
        .collect();
    Ok((genesis, configs))
}

/// Retries while a just-dropped handle still holds the wallet lock.
fn open_retrying(config: &NodeConfig, transport: Arc<dyn Transport>, options: &NodeOptions) -> Result<Arc<Node>, NodeError> {
    let deadline = Instant::now() + Duration::from_secs(5);
    loop {
        match Node::open(config, STEWARD_PASSPHRASE, transport.clone(), options.clone()) {
            Err(NodeError::WalletLocked) if Instant::now() < deadline => thread::sleep(Duration::from_millis(20)),
            other => return other,
        }
    }
}

fn bind_retrying(addr: &str) -> Result<TcpListener, NodeError> {
    let deadline = Instant::now() + Duration::from_secs(5);
    loop {
        match TcpListener::bind(addr) {
            Ok(l) => return Ok(l),
            Err(e) if e.kind() == std::io::ErrorKind::AddrInUse && Instant::now() < deadline => {
                thread::sleep(Duration::from_millis(20))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AddrInUse => return Err(NodeError::EndpointBusy(addr.into())),
            Err(e) => return Err(e.into()),
        }
    }
}

impl Cluster {
    /// `n` in-process nodes under `dir`.
    pub fn local(n: usize, dir: &Path, options: NodeOptions) -> Result<Self, NodeError> {
        let endpoints = (0..n)
            .map(|i| (format!("http://local:{}", 2 * i + 1), format!("http://local:{}", 2 * i + 2)))
            .collect();
        let (genesis, configs) = prepare(n, dir, endpoints)?;
        let network = LocalNetwork::new();
        let mut cluster = Self {
            genesis,
            configs,
            options,
            network: Some(network),
            http: None,
            slots: (0..n).map(|_| Slot::Local(None)).collect(),
        };
        for i in 0..n {
            cluster.restart(i)?;
        }
        Ok(cluster)
    }

    /// `n` nodes serving HTTP on free loopback ports.
    pub fn http(n: usize, dir: &Path, options: NodeOptions) -> Result<Self, NodeError> {
        let mut listeners = Vec::new();
        let mut endpoints = Vec::new();
        for _ in 0..n {
            let repl = TcpListener::bind("127.0.0.1:0")?;
            let client = TcpListener::bind("127.0.0.1:0")?;
            endpoints.push((
                format!("http://{}", repl.local_addr()?),
                format!("http://{}", client.local_addr()?),
            ));
            listeners.push((repl, client));
        }
        let (genesis, configs) = prepare(n, dir, endpoints)?;
        let transport = HttpTransport::new(options.ordering_timeout);
        let mut cluster = Self {
            genesis,
            configs,
            options,
            network: None,
            http: Some(transport.clone()),
            slots: (0..n).map(|_| Slot::Http(None)).collect(),
        };
        for (i, (repl, client)) in listeners.into_iter().enumerate() {
            let node = open_retrying(&cluster.configs[i], transport.clone(), &cluster.options)?;
            cluster.slots[i] = Slot::Http(Some(NodeServer::start_on(node, repl, client)?));
        }
        Ok(cluster)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn data_dir(&self, i: usize) -> &PathBuf {
        &self.configs[i].data_dir
    }

    pub fn config(&self, i: usize) -> &NodeConfig {
        &self.configs[i]
    }

    pub fn node(&self, i: usize) -> Option<Arc<Node>> {
        match &self.slots[i] {
            Slot::Local(node) => node.clone(),
            Slot::Http(server) => server.as_ref().map(|s| s.node().clone()),
        }
    }

    pub fn live(&self) -> Vec<Arc<Node>> {
        (0..self.len()).filter_map(|i| self.node(i)).collect()
    }

    pub fn local_network(&self) -> Option<&Arc<LocalNetwork>> {
        self.network.as_ref()
    }

    /// Stops node `i` and drops its handle.
    pub fn crash(&mut self, i: usize) {
        match &mut self.slots[i] {
            Slot::Local(node) => {
                if let Some(network) = &self.network {
                    network.crash(&self.configs[i].own_name);
                }
                *node = None;
            }
            Slot::Http(server) => {
                if let Some(server) = server.take() {
                    drop(server.shutdown());
                }
            }
        }
    }

    /// Reopens node `i` from its data directory; it replays its log and
    /// catches up with its peers.
    pub fn restart(&mut self, i: usize) -> Result<(), NodeError> {
        self.crash(i);
        if let Some(network) = self.network.clone() {
            let node = open_retrying(&self.configs[i], network.clone(), &self.options)?;
            network.register(node.clone());
            self.slots[i] = Slot::Local(Some(node));
        } else {
            let transport = self.http.clone().expect("http cluster");
            let own = &self.genesis.nodes[i];
            let repl = bind_retrying(crate::genesis::socket_addr_of(&own.replication_endpoint).expect("validated"))?;
            let client = bind_retrying(crate::genesis::socket_addr_of(&own.client_endpoint).expect("validated"))?;
            let node = open_retrying(&self.configs[i], transport, &self.options)?;
            self.slots[i] = Slot::Http(Some(NodeServer::start_on(node, repl, client)?));
        }
        Ok(())
    }

    /// A client for agents: the in-process handle of the first live node,
    /// or an HTTP client over every client endpoint.
    pub fn client(&self) -> Arc<dyn LedgerClient> {
        match &self.network {
            Some(_) => self.live().into_iter().next().expect("a live node"),
            None => Arc::new(HttpLedgerClient::new(
                self.genesis.nodes.iter().map(|n| n.client_endpoint.clone()).collect(),
            )),
        }
    }

    /// Whether all live nodes report the same height and root hash.
    pub fn converged(&self) -> bool {
        let live = self.live();
        live.windows(2)
            .all(|w| w[0].height() == w[1].height() && w[0].root_hash() == w[1].root_hash())
    }

    /// Waits for convergence, asking followers to catch up in between.
    pub fn wait_converged(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            if self.converged() {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            for node in self.live() {
                let _ = node.sync_with_leader();
            }
            thread::sleep(Duration::from_millis(20));
        }
    }
}

impl Drop for Cluster {
    fn drop(&mut self) {
        for i in 0..self.slots.len() {
            self.crash(i);
        }
        if let Some(network) = &self.network {
            network.shutdown();
        }
    }
}
