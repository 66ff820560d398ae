use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::records::*;
use super::transaction::{LedgerTransaction, TxPayload};
use crate::bytes::Digest;
use crate::crypto::{self, sha256_concat};
use crate::did::Did;

/// Why a transaction was refused.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[serde(tag = "reason", content = "detail", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Rejection {
    #[error("submitter is not registered on the ledger")]
    UnknownSubmitter,
    #[error("signature does not verify against the submitter key")]
    BadSignature,
    #[error("record id already exists: {0}")]
    DuplicateId(String),
    #[error("referenced record not found: {0}")]
    MissingDependency(String),
    #[error("submitter role does not permit this write: {0}")]
    UnauthorizedRole(String),
    #[error("revocation update clears previously revoked bits")]
    BitmapRegression,
    #[error("malformed transaction: {0}")]
    Malformed(String),
    #[error("seq_no or prev_hash does not extend the chain head")]
    ChainMismatch,
}

impl Rejection {
    pub fn code(&self) -> &'static str {
        match self {
            Rejection::UnknownSubmitter => "UNKNOWN_SUBMITTER",
            Rejection::BadSignature => "BAD_SIGNATURE",
            Rejection::DuplicateId(_) => "DUPLICATE_ID",
            Rejection::MissingDependency(_) => "MISSING_DEPENDENCY",
            Rejection::UnauthorizedRole(_) => "UNAUTHORIZED_ROLE",
            Rejection::BitmapRegression => "BITMAP_REGRESSION",
            Rejection::Malformed(_) => "MALFORMED",
            Rejection::ChainMismatch => "CHAIN_MISMATCH",
        }
    }
}

/// Lookup key for [`LedgerState::resolve`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Query {
    Did(Did),
    Schema(String),
    CredDef(String),
    RevocRegistry(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "record", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Record {
    Did(DidRecord),
    Schema(SchemaRecord),
    CredDef(CredDefRecord),
    RevocRegistry(RevocationRegistryRecord),
}

/// A record plus the (height, root_hash) it was read at.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolved {
    pub record: Record,
    pub height: u64,
    pub root_hash: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("not found")]
pub struct NotFound;

/// Materialized view of a committed log prefix.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerState {
    pub dids: BTreeMap<Did, DidRecord>,
    pub schemas: BTreeMap<String, SchemaRecord>,
    pub cred_defs: BTreeMap<String, CredDefRecord>,
    pub revocations: BTreeMap<String, RevocationRegistryRecord>,
    pub height: u64,
    pub root_hash: Digest,
}

fn malformed(msg: impl Into<String>) -> Rejection {
    Rejection::Malformed(msg.into())
}

fn valid_version(v: &str) -> bool {
    let parts: Vec<&str> = v.split('.').collect();
    (2..=3).contains(&parts.len())
        && parts.iter().all(|p| !p.is_empty() && p.bytes().all(|b| b.is_ascii_digit()))
}

impl LedgerState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Folds validate+apply over `txs`, stopping at the first rejection.
    pub fn replay<'a>(txs: impl IntoIterator<Item = &'a LedgerTransaction>) -> Result<Self, (u64, Rejection)> {
        let mut state = Self::new();
        for tx in txs {
            state.validate_transaction(tx).map_err(|r| (tx.seq_no, r))?;
            state = state.apply_transaction(tx);
        }
        Ok(state)
    }

    /// Checks a transaction positioned at `height + 1` against this state.
    pub fn validate_transaction(&self, tx: &LedgerTransaction) -> Result<(), Rejection> {
        if tx.seq_no != self.height + 1 || tx.prev_hash != self.root_hash {
            return Err(Rejection::ChainMismatch);
        }
        self.validate_content(tx)
    }

    /// All validation rules except chain position. Used by the ordering
    /// leader before it assigns `seq_no`.
    pub fn validate_content(&self, tx: &LedgerTransaction) -> Result<(), Rejection> {
        // genesis NYM: the very first transaction self-registers an AUTHORITY
        if self.height == 0 {
            // DIDs are self-certifying, so the signature is checkable before
            // the submitter exists on the ledger
            if !crypto::verify(tx.submitter_did.public_key(), &tx.signing_bytes(), &tx.signature) {
                return Err(Rejection::BadSignature);
            }
            return match &tx.body {
                TxPayload::Nym(rec) if rec.role == Role::Authority && rec.did == tx.submitter_did => {
                    self.check_nym_shape(rec)
                }
                _ => Err(Rejection::UnknownSubmitter),
            };
        }

        let submitter = self.dids.get(&tx.submitter_did).ok_or(Rejection::UnknownSubmitter)?;
        if !crypto::verify(&submitter.verification_key, &tx.signing_bytes(), &tx.signature) {
            return Err(Rejection::BadSignature);
        }

        match &tx.body {
            TxPayload::Nym(rec) => {
                self.check_nym_shape(rec)?;
                if rec.role > Role::Member && submitter.role != Role::Authority {
                    return Err(Rejection::UnauthorizedRole(format!("{:?} NYM requires AUTHORITY", rec.role)));
                }
                if self.dids.contains_key(&rec.did) {
                    return Err(Rejection::DuplicateId(rec.did.to_string()));
                }
            }
            TxPayload::Schema(rec) => {
                if submitter.role != Role::Authority {
                    return Err(Rejection::UnauthorizedRole("SCHEMA requires AUTHORITY".into()));
                }
                if rec.name.is_empty() || rec.name.contains(':') {
                    return Err(malformed("schema name must be nonempty and colon-free"));
                }
                if !valid_version(&rec.version) {
                    return Err(malformed(format!("bad schema version `{}`", rec.version)));
                }
                if rec.schema_id != SchemaRecord::derive_id(&rec.name, &rec.version, &tx.submitter_did) {
                    return Err(malformed("schema_id does not match name:version:author"));
                }
                if rec.attribute_names.is_empty() || rec.attribute_names.iter().any(|a| a.is_empty()) {
                    return Err(malformed("attribute names must be nonempty"));
                }
                if !rec.attribute_names.windows(2).all(|w| w[0] < w[1]) {
                    return Err(malformed("attribute names must be unique and sorted"));
                }
                if self.schemas.contains_key(&rec.schema_id) {
                    return Err(Rejection::DuplicateId(rec.schema_id.clone()));
                }
            }
            TxPayload::CredDef(rec) => {
                if submitter.role < Role::Steward {
                    return Err(Rejection::UnauthorizedRole("CRED_DEF requires STEWARD or AUTHORITY".into()));
                }
                if rec.issuer_did != tx.submitter_did {
                    return Err(Rejection::UnauthorizedRole("issuer_did must be the submitter".into()));
                }
                if rec.commitment_spec != CommitmentSpec::default() {
                    return Err(malformed("unsupported commitment spec"));
                }
                if !self.schemas.contains_key(&rec.schema_id) {
                    return Err(Rejection::MissingDependency(rec.schema_id.clone()));
                }
                if rec.cred_def_id != CredDefRecord::derive_id(&rec.schema_id, &rec.issuer_did) {
                    return Err(malformed("cred_def_id does not match issuer/cred-def/schema"));
                }
                // id is a function of (schema_id, issuer_did), so this also
                // enforces one cred-def per pair
                if self.cred_defs.contains_key(&rec.cred_def_id) {
                    return Err(Rejection::DuplicateId(rec.cred_def_id.clone()));
                }
            }
            TxPayload::RevocInit(rec) => {
                let cred_def = self
                    .cred_defs
                    .get(&rec.cred_def_id)
                    .ok_or_else(|| Rejection::MissingDependency(rec.cred_def_id.clone()))?;
                if cred_def.issuer_did != tx.submitter_did {
                    return Err(Rejection::UnauthorizedRole("only the cred-def issuer may create its registry".into()));
                }
                let prefix = format!("{}/revoc/", rec.cred_def_id);
                if !rec.registry_id.strip_prefix(&prefix).is_some_and(|tag| !tag.is_empty()) {
                    return Err(malformed("registry_id must be <cred_def_id>/revoc/<tag>"));
                }
                if rec.capacity == 0 || !rec.revoked_bitmap.fits(rec.capacity) {
                    return Err(malformed("capacity must be positive and bitmap sized to it"));
                }
                if rec.revoked_bitmap.count_ones() != 0 || rec.update_seq != 0 {
                    return Err(malformed("new registry must start empty at update_seq 0"));
                }
                if self.revocations.contains_key(&rec.registry_id) {
                    return Err(Rejection::DuplicateId(rec.registry_id.clone()));
                }
            }
            TxPayload::RevocUpdate(update) => {
                let registry = self
                    .revocations
                    .get(&update.registry_id)
                    .ok_or_else(|| Rejection::MissingDependency(update.registry_id.clone()))?;
                let issuer = self.cred_defs.get(&registry.cred_def_id).map(|c| &c.issuer_did);
                if issuer != Some(&tx.submitter_did) {
                    return Err(Rejection::UnauthorizedRole("only the cred-def issuer may update its registry".into()));
                }
                if !update.revoked_bitmap.fits(registry.capacity) {
                    return Err(malformed("bitmap length does not match registry capacity"));
                }
                if !update.revoked_bitmap.covers(&registry.revoked_bitmap) {
                    return Err(Rejection::BitmapRegression);
                }
            }
        }
        Ok(())
    }

    fn check_nym_shape(&self, rec: &DidRecord) -> Result<(), Rejection> {
        if rec.did.public_key() != &rec.verification_key {
            return Err(malformed("DID identifier is not derived from verification_key"));
        }
        Ok(())
    }

    /// Applies a validated transaction. Callers must have run
    /// [`validate_transaction`](Self::validate_transaction) first.
    pub fn apply_transaction(&self, tx: &LedgerTransaction) -> LedgerState {
        let mut next = self.clone();
        match &tx.body {
            TxPayload::Nym(rec) => {
                next.dids.insert(rec.did.clone(), rec.clone());
            }
            TxPayload::Schema(rec) => {
                next.schemas.insert(rec.schema_id.clone(), rec.clone());
            }
            TxPayload::CredDef(rec) => {
                next.cred_defs.insert(rec.cred_def_id.clone(), rec.clone());
            }
            TxPayload::RevocInit(rec) => {
                next.revocations.insert(rec.registry_id.clone(), rec.clone());
            }
            TxPayload::RevocUpdate(update) => {
                if let Some(reg) = next.revocations.get_mut(&update.registry_id) {
                    reg.revoked_bitmap = update.revoked_bitmap.clone();
                    reg.update_seq += 1;
                }
            }
        }
        next.height += 1;
        next.root_hash = chain_next(&self.root_hash, tx);
        next
    }

    pub fn resolve(&self, query: &Query) -> Result<Resolved, NotFound> {
        let record = match query {
            Query::Did(did) => self.dids.get(did).cloned().map(Record::Did),
            Query::Schema(id) => self.schemas.get(id).cloned().map(Record::Schema),
            Query::CredDef(id) => self.cred_defs.get(id).cloned().map(Record::CredDef),
            Query::RevocRegistry(id) => self.revocations.get(id).cloned().map(Record::RevocRegistry),
        }
        .ok_or(NotFound)?;
        Ok(Resolved {
            record,
            height: self.height,
            root_hash: self.root_hash,
        })
    }
}

/// Next hash-chain head: SHA-256(previous head ‖ canonical tx bytes).
pub fn chain_next(prev: &Digest, tx: &LedgerTransaction) -> Digest {
    sha256_concat(&[prev.as_bytes(), &tx.canonical_bytes()])
}

/// Recomputes the chain head over a log, also checking each `prev_hash`.
pub fn chain_head<'a>(txs: impl IntoIterator<Item = &'a LedgerTransaction>) -> Option<Digest> {
    let mut head = Digest::ZERO;
    for (i, tx) in txs.into_iter().enumerate() {
        if tx.prev_hash != head || tx.seq_no != i as u64 + 1 {
            return None;
        }
        head = chain_next(&head, tx);
    }
    Some(head)
}
