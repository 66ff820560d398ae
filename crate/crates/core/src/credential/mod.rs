//! Salted-hash credentials with selective disclosure.
//!
//! The issuer commits to every attribute as
//! `SHA-256(canonical {"name", "salt", "value"})` and signs the ordered
//! commitment list. A holder discloses an attribute by revealing its value
//! and salt; everything else stays a bare commitment. Presentations are
//! signed by each credential's pairwise holder key over the verifier nonce.

mod presentation;

pub use presentation::*;

use std::collections::{BTreeMap, BTreeSet};

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::bytes::{Digest, Salt, Signature};
use crate::canonical;
use crate::crypto::{self, sha256, KeyPair};
use crate::did::Did;
use crate::ledger::{
    CredDefRecord, LedgerRead, LedgerTransaction, Query, Record, Resolved, RevocationRegistryRecord,
    RevocationUpdate, SchemaRecord, TxPayload,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CredentialError {
    #[error("attribute set does not match schema (missing {missing:?}, extra {extra:?})")]
    AttributeMismatch { missing: Vec<String>, extra: Vec<String> },
    #[error("revocation index {index} exceeds registry capacity {capacity}")]
    RegistryFull { index: u32, capacity: u32 },
    #[error("cred-def {cred_def} is not defined over schema {schema}")]
    SchemaMismatch { cred_def: String, schema: String },
    #[error("request cannot be satisfied: {0:?}")]
    UnsatisfiableRequest(Vec<String>),
    #[error("no holder key for {0}")]
    MissingHolderKey(String),
    #[error("revocation index {index} out of range for capacity {capacity}")]
    IndexOutOfRange { index: u32, capacity: u32 },
}

impl CredentialError {
    pub fn code(&self) -> &'static str {
        match self {
            CredentialError::AttributeMismatch { .. } => "ATTRIBUTE_MISMATCH",
            CredentialError::RegistryFull { .. } => "REGISTRY_FULL",
            CredentialError::SchemaMismatch { .. } => "SCHEMA_MISMATCH",
            CredentialError::UnsatisfiableRequest(_) => "UNSATISFIABLE_REQUEST",
            CredentialError::MissingHolderKey(_) => "MISSING_HOLDER_KEY",
            CredentialError::IndexOutOfRange { .. } => "INDEX_OUT_OF_RANGE",
        }
    }
}

#[derive(Serialize)]
struct CommitmentInput<'a> {
    name: &'a str,
    salt: &'a Salt,
    value: &'a str,
}

/// `SHA-256(canonical {"name": name, "salt": b64url(salt), "value": value})`.
pub fn commit_attribute(name: &str, value: &str, salt: &Salt) -> Digest {
    let bytes = canonical::to_vec(&CommitmentInput { name, salt, value }).expect("strings only");
    sha256(&bytes)
}

/// One entry of a credential's signed commitment list. The salt is kept
/// apart (in [`Credential::salts`]) so it never travels for undisclosed
/// attributes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeCommitment {
    pub name: String,
    pub commitment: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RevocationRef {
    pub registry_id: String,
    pub index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credential {
    pub cred_def_id: String,
    pub schema_id: String,
    pub holder_did: Did,
    pub attribute_values: BTreeMap<String, String>,
    pub salts: BTreeMap<String, Salt>,
    pub commitments: Vec<AttributeCommitment>,
    pub revocation: RevocationRef,
    pub issuer_signature: Signature,
}

#[derive(Serialize)]
pub(crate) struct IssuerSigned<'a> {
    pub cred_def_id: &'a str,
    pub schema_id: &'a str,
    pub holder_did: &'a Did,
    pub commitments: &'a [AttributeCommitment],
    pub revocation: &'a RevocationRef,
}

impl IssuerSigned<'_> {
    pub fn bytes(&self) -> Vec<u8> {
        canonical::to_vec(self).expect("no floats")
    }
}

impl Credential {
    pub(crate) fn issuer_signed(&self) -> IssuerSigned<'_> {
        IssuerSigned {
            cred_def_id: &self.cred_def_id,
            schema_id: &self.schema_id,
            holder_did: &self.holder_did,
            commitments: &self.commitments,
            revocation: &self.revocation,
        }
    }

    pub fn attribute_names(&self) -> impl Iterator<Item = &str> {
        self.commitments.iter().map(|c| c.name.as_str())
    }

    /// Offline consistency: commitments recompute from values and salts and
    /// the issuer signature verifies under `issuance_key`.
    pub fn check(&self, cred_def: &CredDefRecord, schema: &SchemaRecord) -> Result<(), String> {
        if cred_def.cred_def_id != self.cred_def_id || cred_def.schema_id != self.schema_id {
            return Err("credential does not belong to this cred-def".into());
        }
        if schema.schema_id != self.schema_id {
            return Err("credential does not belong to this schema".into());
        }
        let names: Vec<&str> = self.attribute_names().collect();
        let schema_names: Vec<&str> = schema.attribute_names.iter().map(String::as_str).collect();
        if names != schema_names {
            return Err("commitment list does not follow the schema attribute order".into());
        }
        let value_names: Vec<&str> = self.attribute_values.keys().map(String::as_str).collect();
        let salt_names: Vec<&str> = self.salts.keys().map(String::as_str).collect();
        if value_names != schema_names || salt_names != schema_names {
            return Err("attribute values or salts do not match the schema".into());
        }
        for c in &self.commitments {
            if commit_attribute(&c.name, &self.attribute_values[&c.name], &self.salts[&c.name]) != c.commitment {
                return Err(format!("commitment for `{}` does not recompute", c.name));
            }
        }
        if !crypto::verify(&cred_def.issuance_key, &self.issuer_signed().bytes(), &self.issuer_signature) {
            return Err("issuer signature does not verify".into());
        }
        Ok(())
    }

    /// [`check`](Self::check) with the cred-def, schema and registry fetched
    /// from the ledger.
    pub fn verify_against_ledger(&self, ledger: &dyn LedgerRead) -> Result<(), String> {
        let cred_def = match ledger.resolve(&Query::CredDef(self.cred_def_id.clone())) {
            Ok(r) => match r.record {
                Record::CredDef(c) => c,
                _ => return Err("unexpected record kind".into()),
            },
            Err(e) => return Err(format!("cred-def lookup failed: {e}")),
        };
        let schema = match ledger.resolve(&Query::Schema(self.schema_id.clone())) {
            Ok(r) => match r.record {
                Record::Schema(s) => s,
                _ => return Err("unexpected record kind".into()),
            },
            Err(e) => return Err(format!("schema lookup failed: {e}")),
        };
        match ledger.resolve(&Query::RevocRegistry(self.revocation.registry_id.clone())) {
            Ok(Resolved {
                record: Record::RevocRegistry(reg),
                ..
            }) if reg.cred_def_id == self.cred_def_id && self.revocation.index < reg.capacity => {}
            _ => return Err("revocation registry does not match".into()),
        }
        self.check(&cred_def, &schema)
    }
}

/// Where a new credential's revocation bit lives.
#[derive(Debug, Clone, Copy)]
pub struct RevocationSlot<'a> {
    pub registry: &'a RevocationRegistryRecord,
    pub index: u32,
}

/// Issues a credential with fresh per-attribute salts from `rng`.
///
/// The signature is made with `issuer_keys` as given; the holder checks it
/// against the ledger-published issuance key.
pub fn issue_credential<R: RngCore + CryptoRng + ?Sized>(
    issuer_keys: &KeyPair,
    cred_def: &CredDefRecord,
    schema: &SchemaRecord,
    holder_did: &Did,
    values: &BTreeMap<String, String>,
    slot: RevocationSlot<'_>,
    rng: &mut R,
) -> Result<Credential, CredentialError> {
    if cred_def.schema_id != schema.schema_id {
        return Err(CredentialError::SchemaMismatch {
            cred_def: cred_def.cred_def_id.clone(),
            schema: schema.schema_id.clone(),
        });
    }
    let wanted: BTreeSet<&str> = schema.attribute_names.iter().map(String::as_str).collect();
    let given: BTreeSet<&str> = values.keys().map(String::as_str).collect();
    if wanted != given {
        return Err(CredentialError::AttributeMismatch {
            missing: wanted.difference(&given).map(|s| s.to_string()).collect(),
            extra: given.difference(&wanted).map(|s| s.to_string()).collect(),
        });
    }
    if slot.index >= slot.registry.capacity {
        return Err(CredentialError::RegistryFull {
            index: slot.index,
            capacity: slot.registry.capacity,
        });
    }

    let mut salts = BTreeMap::new();
    let mut commitments = Vec::with_capacity(schema.attribute_names.len());
    for name in &schema.attribute_names {
        let mut salt = Salt([0u8; 16]);
        rng.fill_bytes(&mut salt.0);
        commitments.push(AttributeCommitment {
            name: name.clone(),
            commitment: commit_attribute(name, &values[name], &salt),
        });
        salts.insert(name.clone(), salt);
    }
    let mut credential = Credential {
        cred_def_id: cred_def.cred_def_id.clone(),
        schema_id: schema.schema_id.clone(),
        holder_did: holder_did.clone(),
        attribute_values: values.clone(),
        salts,
        commitments,
        revocation: RevocationRef {
            registry_id: slot.registry.registry_id.clone(),
            index: slot.index,
        },
        issuer_signature: Signature([0u8; 64]),
    };
    credential.issuer_signature = issuer_keys.sign(&credential.issuer_signed().bytes());
    Ok(credential)
}

/// Result of [`revoke`]. `already_revoked` is a warning only: the
/// transaction is still valid and leaves the bitmap unchanged.
#[derive(Debug, Clone)]
pub struct Revocation {
    pub tx: LedgerTransaction,
    pub already_revoked: bool,
}

/// Builds the REVOC_UPDATE that sets bit `index`.
pub fn revoke(
    issuer_keys: &KeyPair,
    issuer_did: &Did,
    registry: &RevocationRegistryRecord,
    index: u32,
) -> Result<Revocation, CredentialError> {
    if index >= registry.capacity {
        return Err(CredentialError::IndexOutOfRange {
            index,
            capacity: registry.capacity,
        });
    }
    let already_revoked = registry.is_revoked(index);
    let mut bitmap = registry.revoked_bitmap.clone();
    bitmap.set(index);
    let tx = LedgerTransaction::signed(
        TxPayload::RevocUpdate(RevocationUpdate {
            registry_id: registry.registry_id.clone(),
            revoked_bitmap: bitmap,
        }),
        issuer_did.clone(),
        issuer_keys,
    );
    Ok(Revocation { tx, already_revoked })
}
