use std::collections::BTreeMap;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use super::{commit_attribute, AttributeCommitment, Credential, CredentialError, IssuerSigned, RevocationRef};
use crate::bytes::{Nonce, Salt, Signature};
use crate::canonical;
use crate::crypto::{self, KeyPair};
use crate::did::Did;
use crate::ledger::{CredDefRecord, LedgerRead, Query, Record, RevocationRegistryRecord, SchemaRecord};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestedCredential {
    pub schema_id: String,
    pub attribute_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cred_def_id: Option<String>,
}

impl RequestedCredential {
    pub fn matches(&self, credential: &Credential) -> bool {
        credential.schema_id == self.schema_id
            && self.cred_def_id.as_ref().is_none_or(|id| id == &credential.cred_def_id)
            && self.attribute_names.iter().all(|a| credential.attribute_values.contains_key(a))
    }

    fn describe(&self) -> String {
        format!("{}[{}]", self.schema_id, self.attribute_names.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofRequest {
    pub nonce: Nonce,
    pub requested: Vec<RequestedCredential>,
    pub verifier_did: Did,
}

impl ProofRequest {
    pub fn new<R: RngCore + CryptoRng + ?Sized>(
        verifier_did: Did,
        requested: Vec<RequestedCredential>,
        rng: &mut R,
    ) -> Self {
        let mut nonce = Nonce([0u8; 16]);
        rng.fill_bytes(&mut nonce.0);
        Self {
            nonce,
            requested,
            verifier_did,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisclosedAttribute {
    pub value: String,
    pub salt: Salt,
}

/// One source credential inside a presentation, answering the request item
/// at the same position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresentedCredential {
    pub cred_def_id: String,
    pub schema_id: String,
    pub holder_did: Did,
    pub revocation: RevocationRef,
    pub commitments: Vec<AttributeCommitment>,
    pub issuer_signature: Signature,
    pub disclosed: BTreeMap<String, DisclosedAttribute>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Presentation {
    pub credentials: Vec<PresentedCredential>,
    pub nonce: Nonce,
    /// One per entry of `credentials`, by that credential's holder DID key.
    pub holder_signatures: Vec<Signature>,
}

#[derive(Serialize)]
struct HolderSigned<'a> {
    credentials: &'a [PresentedCredential],
    nonce: &'a Nonce,
    verifier_did: &'a Did,
}

impl Presentation {
    fn holder_signed_bytes(&self, verifier_did: &Did) -> Vec<u8> {
        canonical::to_vec(&HolderSigned {
            credentials: &self.credentials,
            nonce: &self.nonce,
            verifier_did,
        })
        .expect("no floats")
    }
}

/// Indices of `credentials` that can answer `item`.
pub fn find_candidates(credentials: &[Credential], item: &RequestedCredential) -> Vec<usize> {
    credentials
        .iter()
        .enumerate()
        .filter(|(_, c)| item.matches(c))
        .map(|(i, _)| i)
        .collect()
}

/// Answers `request` using the first matching credential for each item.
pub fn build_presentation(
    credentials: &[Credential],
    request: &ProofRequest,
    holder_keys: &dyn Fn(&Did) -> Option<KeyPair>,
) -> Result<Presentation, CredentialError> {
    let mut chosen = Vec::with_capacity(request.requested.len());
    let mut unmet = Vec::new();
    for item in &request.requested {
        match find_candidates(credentials, item).first() {
            Some(&i) => chosen.push(&credentials[i]),
            None => unmet.push(item.describe()),
        }
    }
    if !unmet.is_empty() {
        return Err(CredentialError::UnsatisfiableRequest(unmet));
    }
    assemble_presentation(&chosen, request, holder_keys)
}

/// Answers `request` with an explicit credential per item.
pub fn assemble_presentation(
    chosen: &[&Credential],
    request: &ProofRequest,
    holder_keys: &dyn Fn(&Did) -> Option<KeyPair>,
) -> Result<Presentation, CredentialError> {
    if chosen.len() != request.requested.len() {
        return Err(CredentialError::UnsatisfiableRequest(vec!["one credential per requested item".into()]));
    }
    let mut unmet = Vec::new();
    let mut credentials = Vec::with_capacity(chosen.len());
    for (credential, item) in chosen.iter().zip(&request.requested) {
        if !item.matches(credential) {
            unmet.push(item.describe());
            continue;
        }
        let disclosed = item
            .attribute_names
            .iter()
            .map(|name| {
                (
                    name.clone(),
                    DisclosedAttribute {
                        value: credential.attribute_values[name].clone(),
                        salt: credential.salts[name],
                    },
                )
            })
            .collect();
        credentials.push(PresentedCredential {
            cred_def_id: credential.cred_def_id.clone(),
            schema_id: credential.schema_id.clone(),
            holder_did: credential.holder_did.clone(),
            revocation: credential.revocation.clone(),
            commitments: credential.commitments.clone(),
            issuer_signature: credential.issuer_signature,
            disclosed,
        });
    }
    if !unmet.is_empty() {
        return Err(CredentialError::UnsatisfiableRequest(unmet));
    }
    let mut presentation = Presentation {
        credentials,
        nonce: request.nonce,
        holder_signatures: Vec::new(),
    };
    let message = presentation.holder_signed_bytes(&request.verifier_did);
    for entry in &presentation.credentials {
        let keys = holder_keys(&entry.holder_did)
            .filter(|k| &k.public_key == entry.holder_did.public_key())
            .ok_or_else(|| CredentialError::MissingHolderKey(entry.holder_did.to_string()))?;
        presentation.holder_signatures.push(keys.sign(&message));
    }
    Ok(presentation)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Valid,
    Invalid,
}

pub const CHECK_ISSUER_SIGNATURE: &str = "issuer-signature";
pub const CHECK_COMMITMENT_RECOMPUTE: &str = "commitment-recompute";
pub const CHECK_HOLDER_BINDING: &str = "holder-binding";
pub const CHECK_NONCE: &str = "nonce";
pub const CHECK_REVOCATION: &str = "revocation";
pub const CHECK_LEDGER_RESOLUTION: &str = "ledger-resolution";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Check {
    pub check_name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub verdict: Verdict,
    pub checks: Vec<Check>,
}

impl VerificationReport {
    pub fn is_valid(&self) -> bool {
        self.verdict == Verdict::Valid
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.check_name == name)
    }

    pub fn failed(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.pass).map(|c| c.check_name.as_str()).collect()
    }
}

/// Accumulates pass/fail per named check across presentation entries.
struct Tally {
    order: Vec<&'static str>,
    failures: BTreeMap<&'static str, Vec<String>>,
}

impl Tally {
    fn new(order: &[&'static str]) -> Self {
        Self {
            order: order.to_vec(),
            failures: BTreeMap::new(),
        }
    }

    fn fail(&mut self, check: &'static str, detail: impl Into<String>) {
        self.failures.entry(check).or_default().push(detail.into());
    }

    fn report(self) -> VerificationReport {
        let checks: Vec<Check> = self
            .order
            .iter()
            .map(|name| match self.failures.get(name) {
                Some(details) => Check {
                    check_name: name.to_string(),
                    pass: false,
                    detail: details.join("; "),
                },
                None => Check {
                    check_name: name.to_string(),
                    pass: true,
                    detail: "ok".into(),
                },
            })
            .collect();
        let verdict = if checks.iter().all(|c| c.pass) {
            Verdict::Valid
        } else {
            Verdict::Invalid
        };
        VerificationReport { verdict, checks }
    }
}

struct LedgerView {
    cred_def: CredDefRecord,
    schema: SchemaRecord,
    registry: RevocationRegistryRecord,
}

fn fetch(ledger: &dyn LedgerRead, entry: &PresentedCredential) -> Result<LedgerView, String> {
    let cred_def = match ledger.resolve(&Query::CredDef(entry.cred_def_id.clone())) {
        Ok(r) => match r.record {
            Record::CredDef(c) => c,
            _ => return Err(format!("{}: wrong record kind", entry.cred_def_id)),
        },
        Err(e) => return Err(format!("cred-def {}: {e}", entry.cred_def_id)),
    };
    let schema = match ledger.resolve(&Query::Schema(entry.schema_id.clone())) {
        Ok(r) => match r.record {
            Record::Schema(s) => s,
            _ => return Err(format!("{}: wrong record kind", entry.schema_id)),
        },
        Err(e) => return Err(format!("schema {}: {e}", entry.schema_id)),
    };
    let registry = match ledger.resolve(&Query::RevocRegistry(entry.revocation.registry_id.clone())) {
        Ok(r) => match r.record {
            Record::RevocRegistry(reg) => reg,
            _ => return Err(format!("{}: wrong record kind", entry.revocation.registry_id)),
        },
        Err(e) => return Err(format!("registry {}: {e}", entry.revocation.registry_id)),
    };
    if cred_def.schema_id != schema.schema_id {
        return Err("cred-def is not defined over the presented schema".into());
    }
    if registry.cred_def_id != cred_def.cred_def_id {
        return Err("revocation registry belongs to another cred-def".into());
    }
    Ok(LedgerView {
        cred_def,
        schema,
        registry,
    })
}

/// Runs all six checks and reports each one; never short-circuits.
pub fn verify_presentation(
    presentation: &Presentation,
    request: &ProofRequest,
    ledger: &dyn LedgerRead,
) -> VerificationReport {
    let mut tally = Tally::new(&[
        CHECK_ISSUER_SIGNATURE,
        CHECK_COMMITMENT_RECOMPUTE,
        CHECK_HOLDER_BINDING,
        CHECK_NONCE,
        CHECK_REVOCATION,
        CHECK_LEDGER_RESOLUTION,
    ]);

    if presentation.nonce != request.nonce {
        tally.fail(CHECK_NONCE, "presentation nonce differs from the request nonce");
    }
    if presentation.credentials.len() != request.requested.len() {
        tally.fail(
            CHECK_LEDGER_RESOLUTION,
            format!("{} entries for {} requested items", presentation.credentials.len(), request.requested.len()),
        );
    }

    // holder binding: every entry's pairwise key signs the whole presentation
    let message = presentation.holder_signed_bytes(&request.verifier_did);
    if presentation.holder_signatures.len() != presentation.credentials.len() {
        tally.fail(CHECK_HOLDER_BINDING, "holder signature count mismatch");
    } else {
        for (i, (entry, sig)) in presentation.credentials.iter().zip(&presentation.holder_signatures).enumerate() {
            if !crypto::verify(entry.holder_did.public_key(), &message, sig) {
                tally.fail(CHECK_HOLDER_BINDING, format!("entry {i}: holder signature invalid"));
            }
        }
    }

    for (i, (entry, item)) in presentation.credentials.iter().zip(&request.requested).enumerate() {
        // disclosed values must recompute to the signed commitments
        let mut wanted: Vec<&String> = item.attribute_names.iter().collect();
        wanted.sort();
        wanted.dedup();
        let given: Vec<&String> = entry.disclosed.keys().collect();
        if wanted != given {
            tally.fail(CHECK_COMMITMENT_RECOMPUTE, format!("entry {i}: disclosed set differs from request"));
        }
        for (name, attr) in &entry.disclosed {
            let commitment = entry.commitments.iter().find(|c| &c.name == name);
            match commitment {
                Some(c) if commit_attribute(name, &attr.value, &attr.salt) == c.commitment => {}
                Some(_) => tally.fail(CHECK_COMMITMENT_RECOMPUTE, format!("entry {i}: `{name}` does not recompute")),
                None => tally.fail(CHECK_COMMITMENT_RECOMPUTE, format!("entry {i}: `{name}` has no commitment")),
            }
        }

        if entry.schema_id != item.schema_id
            || item.cred_def_id.as_ref().is_some_and(|id| id != &entry.cred_def_id)
        {
            tally.fail(CHECK_LEDGER_RESOLUTION, format!("entry {i}: does not match the requested schema/issuer"));
        }

        let view = match fetch(ledger, entry) {
            Ok(view) => view,
            Err(e) => {
                tally.fail(CHECK_LEDGER_RESOLUTION, format!("entry {i}: {e}"));
                tally.fail(CHECK_ISSUER_SIGNATURE, format!("entry {i}: issuance key unavailable"));
                tally.fail(CHECK_REVOCATION, format!("entry {i}: registry unavailable"));
                continue;
            }
        };

        let names: Vec<&str> = entry.commitments.iter().map(|c| c.name.as_str()).collect();
        let schema_names: Vec<&str> = view.schema.attribute_names.iter().map(String::as_str).collect();
        if names != schema_names {
            tally.fail(CHECK_LEDGER_RESOLUTION, format!("entry {i}: commitments do not follow the schema"));
        }

        let signed = IssuerSigned {
            cred_def_id: &entry.cred_def_id,
            schema_id: &entry.schema_id,
            holder_did: &entry.holder_did,
            commitments: &entry.commitments,
            revocation: &entry.revocation,
        };
        if !crypto::verify(&view.cred_def.issuance_key, &signed.bytes(), &entry.issuer_signature) {
            tally.fail(CHECK_ISSUER_SIGNATURE, format!("entry {i}: issuer signature invalid"));
        }

        let index = entry.revocation.index;
        if index >= view.registry.capacity {
            tally.fail(CHECK_REVOCATION, format!("entry {i}: index {index} outside registry"));
        } else if view.registry.is_revoked(index) {
            tally.fail(CHECK_REVOCATION, format!("entry {i}: credential revoked"));
        }
    }

    tally.report()
}
