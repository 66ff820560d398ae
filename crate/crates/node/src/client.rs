//! Client-side view of a node: submit, read, status.

use healthreg_core::ledger::{LedgerRead, LedgerTransaction, Rejection};
use healthreg_core::Digest;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub seq_no: u64,
    pub root_hash: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeStatus {
    pub name: String,
    pub network_id: String,
    pub fingerprint: Digest,
    pub height: u64,
    pub root_hash: Digest,
    pub view: u64,
    pub leader: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[serde(tag = "error", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SubmitError {
    #[error("rejected: {0}")]
    Rejected(Rejection),
    #[error("no quorum: {acks} of {quorum} acknowledgements")]
    NoQuorum { acks: usize, quorum: usize },
    #[error("not the leader; submit to {leader} at {endpoint}")]
    NotLeaderRedirect { leader: String, endpoint: String },
    #[error("peer unavailable: {detail}")]
    PeerUnavailable { detail: String },
    #[error("network fingerprint mismatch")]
    GenesisMismatch,
    #[error("bad request: {detail}")]
    BadRequest { detail: String },
}

impl SubmitError {
    pub fn code(&self) -> &'static str {
        match self {
            SubmitError::Rejected(_) => "REJECTED",
            SubmitError::NoQuorum { .. } => "NO_QUORUM",
            SubmitError::NotLeaderRedirect { .. } => "NOT_LEADER_REDIRECT",
            SubmitError::PeerUnavailable { .. } => "PEER_UNAVAILABLE",
            SubmitError::GenesisMismatch => "GENESIS_MISMATCH",
            SubmitError::BadRequest { .. } => "BAD_REQUEST",
        }
    }
}

/// What agents need from the ledger network. Reads come through
/// [`LedgerRead`].
pub trait LedgerClient: LedgerRead + Send + Sync {
    fn submit(&self, tx: LedgerTransaction) -> Result<Receipt, SubmitError>;
    fn status(&self) -> Result<NodeStatus, SubmitError>;
}
