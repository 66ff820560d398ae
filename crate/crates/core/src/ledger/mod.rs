//! Public registry: DID, schema, credential-definition and revocation
//! records, the signed transaction log that carries them, and the
//! deterministic state machine folding that log.

mod records;
mod state;
mod transaction;

pub use records::*;
pub use state::{chain_head, chain_next, LedgerState, NotFound, Query, Record, Rejection, Resolved};
pub use transaction::{LedgerTransaction, TxPayload, TxType};

use crate::bytes::Digest;

/// An in-memory committed log with its materialized state.
#[derive(Debug, Clone, Default)]
pub struct Ledger {
    log: Vec<LedgerTransaction>,
    state: LedgerState,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn state(&self) -> &LedgerState {
        &self.state
    }

    pub fn log(&self) -> &[LedgerTransaction] {
        &self.log
    }

    pub fn height(&self) -> u64 {
        self.state.height
    }

    pub fn root_hash(&self) -> Digest {
        self.state.root_hash
    }

    /// Positions `tx` at the chain head, validates and commits it.
    pub fn submit(&mut self, mut tx: LedgerTransaction) -> Result<LedgerTransaction, Rejection> {
        tx.seq_no = self.state.height + 1;
        tx.prev_hash = self.state.root_hash;
        self.append(tx.clone())?;
        Ok(tx)
    }

    /// Appends an already-positioned transaction.
    pub fn append(&mut self, tx: LedgerTransaction) -> Result<(), Rejection> {
        self.state.validate_transaction(&tx)?;
        self.state = self.state.apply_transaction(&tx);
        self.log.push(tx);
        Ok(())
    }
}

/// Read access to committed ledger records.
pub trait LedgerRead {
    fn resolve(&self, query: &Query) -> Result<Resolved, ReadError>;
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReadError {
    #[error("not found")]
    NotFound,
    #[error("ledger unavailable: {0}")]
    Unavailable(String),
}

impl LedgerRead for LedgerState {
    fn resolve(&self, query: &Query) -> Result<Resolved, ReadError> {
        LedgerState::resolve(self, query).map_err(|_| ReadError::NotFound)
    }
}

impl LedgerRead for Ledger {
    fn resolve(&self, query: &Query) -> Result<Resolved, ReadError> {
        LedgerRead::resolve(&self.state, query)
    }
}

impl<T: LedgerRead + ?Sized> LedgerRead for &T {
    fn resolve(&self, query: &Query) -> Result<Resolved, ReadError> {
        (**self).resolve(query)
    }
}

#[cfg(test)]
mod tests;
