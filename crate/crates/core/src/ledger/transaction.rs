use serde::{Deserialize, Serialize};

use super::records::{CredDefRecord, DidRecord, RevocationRegistryRecord, RevocationUpdate, SchemaRecord};
use crate::bytes::{Digest, Signature};
use crate::canonical;
use crate::crypto::KeyPair;
use crate::did::Did;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TxType {
    Nym,
    Schema,
    CredDef,
    RevocInit,
    RevocUpdate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "tx_type", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TxPayload {
    Nym(DidRecord),
    Schema(SchemaRecord),
    CredDef(CredDefRecord),
    RevocInit(RevocationRegistryRecord),
    RevocUpdate(RevocationUpdate),
}

impl TxPayload {
    pub fn tx_type(&self) -> TxType {
        match self {
            TxPayload::Nym(_) => TxType::Nym,
            TxPayload::Schema(_) => TxType::Schema,
            TxPayload::CredDef(_) => TxType::CredDef,
            TxPayload::RevocInit(_) => TxType::RevocInit,
            TxPayload::RevocUpdate(_) => TxType::RevocUpdate,
        }
    }
}

/// A ledger write. `seq_no` and `prev_hash` are zero until the ordering
/// leader assigns them; the signature covers only `tx_type`, `payload` and
/// `submitter_did`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerTransaction {
    pub seq_no: u64,
    #[serde(flatten)]
    pub body: TxPayload,
    pub submitter_did: Did,
    pub signature: Signature,
    pub prev_hash: Digest,
}

#[derive(Serialize)]
struct SigningView<'a> {
    #[serde(flatten)]
    body: &'a TxPayload,
    submitter_did: &'a Did,
}

impl LedgerTransaction {
    pub fn signed(body: TxPayload, submitter_did: Did, keys: &KeyPair) -> Self {
        let mut tx = Self {
            seq_no: 0,
            body,
            submitter_did,
            signature: Signature([0u8; 64]),
            prev_hash: Digest::ZERO,
        };
        tx.signature = keys.sign(&tx.signing_bytes());
        tx
    }

    pub fn tx_type(&self) -> TxType {
        self.body.tx_type()
    }

    /// Canonical encoding of the signed portion.
    pub fn signing_bytes(&self) -> Vec<u8> {
        canonical::to_vec(&SigningView {
            body: &self.body,
            submitter_did: &self.submitter_did,
        })
        .expect("ledger records never contain floats")
    }

    /// Canonical encoding of the whole transaction; the hash-chain input.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical::to_vec(self).expect("ledger records never contain floats")
    }
}
