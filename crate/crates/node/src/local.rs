//! In-process transport for harnesses: nodes call each other directly, and
//! a node can be crashed (unregistered and dropped) and restarted from its
//! data directory.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use healthreg_core::ledger::LedgerTransaction;

use crate::client::{Receipt, SubmitError};
use crate::genesis::GenesisNode;
use crate::message::ReplicationMessage;
use crate::node::{Node, Transport};

type Tamper = dyn Fn(&str, &mut ReplicationMessage) + Send + Sync;

#[derive(Default)]
pub struct LocalNetwork {
    nodes: RwLock<HashMap<String, Arc<Node>>>,
    tamper: RwLock<Option<Box<Tamper>>>,
}

impl LocalNetwork {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn register(&self, node: Arc<Node>) {
        self.nodes.write().unwrap().insert(node.name().to_string(), node);
    }

    /// Unregisters `name` and hands back its handle; dropping the handle
    /// releases the node's wallet and files.
    pub fn crash(&self, name: &str) -> Option<Arc<Node>> {
        self.nodes.write().unwrap().remove(name)
    }

    pub fn node(&self, name: &str) -> Option<Arc<Node>> {
        self.nodes.read().unwrap().get(name).cloned()
    }

    pub fn live(&self) -> Vec<Arc<Node>> {
        let mut nodes: Vec<Arc<Node>> = self.nodes.read().unwrap().values().cloned().collect();
        nodes.sort_by(|a, b| a.name().cmp(b.name()));
        nodes
    }

    /// Installs a hook that may rewrite replies in transit; the first
    /// argument is the replying node.
    pub fn set_tamper(&self, tamper: Option<Box<Tamper>>) {
        *self.tamper.write().unwrap() = tamper;
    }

    pub fn shutdown(&self) {
        self.nodes.write().unwrap().clear();
    }
}

impl Transport for LocalNetwork {
    fn replicate(&self, to: &GenesisNode, msg: &ReplicationMessage) -> Result<ReplicationMessage, String> {
        let node = self.node(&to.node_name).ok_or_else(|| format!("{} is down", to.node_name))?;
        let mut reply = node.handle(msg.clone());
        if let Some(tamper) = self.tamper.read().unwrap().as_ref() {
            tamper(&to.node_name, &mut reply);
        }
        Ok(reply)
    }

    fn forward_submit(&self, to: &GenesisNode, tx: &LedgerTransaction) -> Result<Receipt, SubmitError> {
        let node = self.node(&to.node_name).ok_or_else(|| SubmitError::PeerUnavailable {
            detail: format!("{} is down", to.node_name),
        })?;
        node.submit_forwarded(tx.clone())
    }
}
