//! Signed node-to-node replication messages.

use healthreg_core::crypto::{self, KeyPair};
use healthreg_core::ledger::LedgerTransaction;
use healthreg_core::{canonical, Digest, Signature};
use serde::{Deserialize, Serialize};

use crate::genesis::GenesisFile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReplicationKind {
    Propose,
    Ack,
    Commit,
    CatchupReq,
    CatchupResp,
}

/// One replication request or reply.
///
/// - PROPOSE / COMMIT carry `tx` at `seq_no`.
/// - ACK answers PROPOSE and COMMIT; `accepted = false` plus `detail` is a
///   refusal.
/// - CATCHUP_REQ asks for transactions from `seq_no` on; CATCHUP_RESP
///   returns at most one batch in `txs`, with `seq_no` set to the
///   responder's height and `pending` set to its uncommitted proposal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicationMessage {
    pub kind: ReplicationKind,
    pub view: u64,
    pub seq_no: u64,
    pub sender: String,
    pub fingerprint: Digest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tx: Option<LedgerTransaction>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub txs: Vec<LedgerTransaction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pending: Option<LedgerTransaction>,
    #[serde(default = "yes", skip_serializing_if = "is_true")]
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    pub signature: Signature,
}

fn yes() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

impl ReplicationMessage {
    pub fn new(kind: ReplicationKind, view: u64, seq_no: u64, sender: &str, fingerprint: Digest) -> Self {
        Self {
            kind,
            view,
            seq_no,
            sender: sender.to_string(),
            fingerprint,
            tx: None,
            txs: Vec::new(),
            pending: None,
            accepted: true,
            detail: None,
            signature: Signature([0u8; 64]),
        }
    }

    pub fn with_tx(mut self, tx: LedgerTransaction) -> Self {
        self.tx = Some(tx);
        self
    }

    pub fn refused(mut self, detail: impl Into<String>) -> Self {
        self.accepted = false;
        self.detail = Some(detail.into());
        self
    }

    /// Canonical encoding of every field except `signature`.
    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut value = serde_json::to_value(self).expect("serializable");
        value.as_object_mut().expect("object").remove("signature");
        canonical::to_vec(&value).expect("no floats")
    }

    pub fn sign(mut self, keys: &KeyPair) -> Self {
        self.signature = keys.sign(&self.signing_bytes());
        self
    }

    /// Checks fingerprint and the sender's genesis-listed key.
    pub fn authenticate(&self, genesis: &GenesisFile, fingerprint: &Digest) -> Result<(), &'static str> {
        if self.fingerprint != *fingerprint {
            return Err("GENESIS_MISMATCH");
        }
        let Some(sender) = genesis.node(&self.sender) else {
            return Err("UNKNOWN_SENDER");
        };
        if !crypto::verify(&sender.verification_key, &self.signing_bytes(), &self.signature) {
            return Err("BAD_SIGNATURE");
        }
        Ok(())
    }
}
