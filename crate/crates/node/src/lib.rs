//! Ledger replica: fixed-leader quorum replication of the transaction log,
//! persisted per node and bootstrapped from a genesis file.
//!
//! The leader of view `v` is genesis node `v mod n`. It positions each
//! submitted transaction at the chain head, sends PROPOSE to every peer and
//! commits once `floor(n/2) + 1` nodes (itself included) have acknowledged,
//! then sends COMMIT. Followers hold one pending proposal; they commit it on
//! COMMIT, or implicitly when the next PROPOSE chains from it. Lagging nodes
//! fetch committed ranges with CATCHUP_REQ. Leader changes are operator
//! driven (`promote`).

pub mod client;
pub mod cluster;
pub mod genesis;
pub mod http;
pub mod local;
pub mod message;
mod node;
pub mod steward;
mod store;

pub use client::{LedgerClient, NodeStatus, Receipt, SubmitError};
pub use genesis::{quorum, GenesisError, GenesisFile, GenesisNode};
pub use http::{HttpLedgerClient, HttpTransport, NodeServer};
pub use local::LocalNetwork;
pub use message::{ReplicationKind, ReplicationMessage};
pub use node::{CatchUpError, CommitObserver, Node, NodeConfig, NodeOptions, Transport};

use std::path::PathBuf;

use healthreg_core::wallet::WalletError;

#[derive(Debug, thiserror::Error)]
pub enum NodeError {
    #[error("persisted data belongs to a different genesis file")]
    GenesisMismatch,
    #[error("steward wallet is in use by another process")]
    WalletLocked,
    #[error("endpoint {0} is busy or unusable")]
    EndpointBusy(String),
    #[error(transparent)]
    Genesis(#[from] GenesisError),
    #[error("node `{0}` is not listed in the genesis file")]
    NotInGenesis(String),
    #[error("steward wallet {0} does not exist")]
    WalletMissing(PathBuf),
    #[error("steward wallet key does not match the genesis verification key")]
    KeyMismatch,
    #[error("wallet: {0}")]
    Wallet(WalletError),
    #[error("store: {0}")]
    Store(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl From<WalletError> for NodeError {
    fn from(e: WalletError) -> Self {
        match e {
            WalletError::Locked => NodeError::WalletLocked,
            other => NodeError::Wallet(other),
        }
    }
}

impl NodeError {
    pub fn code(&self) -> &'static str {
        match self {
            NodeError::GenesisMismatch => "GENESIS_MISMATCH",
            NodeError::WalletLocked => "WALLET_LOCKED",
            NodeError::EndpointBusy(_) => "ENDPOINT_BUSY",
            NodeError::Genesis(_) => "BAD_GENESIS",
            NodeError::NotInGenesis(_) => "NOT_IN_GENESIS",
            NodeError::WalletMissing(_) => "WALLET_MISSING",
            NodeError::KeyMismatch => "KEY_MISMATCH",
            NodeError::Wallet(e) => e.code(),
            NodeError::Store(_) => "STORE",
            NodeError::Io(_) => "IO",
        }
    }
}
