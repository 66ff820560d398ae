//! Declarative scenario scripts and their runner.
//!
//! A scenario names a cast of agents and an ordered list of steps, each with
//! its expected outcome. Running one produces a transcript, one line per
//! step, holding the protocol message kinds exchanged, the ledger height and
//! root hash after the step, and the observed outcome. Transcripts contain
//! no timing and are a function of the seed.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use healthreg_agent::events::EventKind;
use healthreg_agent::wire::LocalHub;
use healthreg_agent::{Agent, AgentConfig, AgentError, ConsentPolicy, MessageKind, Outcome};
use healthreg_core::credential::{RequestedCredential, VerificationReport};
use healthreg_core::crypto::sha256;
use healthreg_core::ledger::Role;
use healthreg_core::wallet::{KdfParams, Wallet};
use healthreg_core::{Did, Digest};
use healthreg_node::LedgerClient;

use crate::catalog::catalog;

pub const SCENARIO_NAMES: [&str; 7] = [
    "allergy_admission",
    "clinical_note_sharing",
    "immunization_boarding",
    "lab_result_referral",
    "prescription_purchase",
    "procedure_history",
    "vital_signs_monitoring",
];

const SCRIPTS: [&str; 7] = [
    include_str!("../scenarios/allergy_admission.json"),
    include_str!("../scenarios/clinical_note_sharing.json"),
    include_str!("../scenarios/immunization_boarding.json"),
    include_str!("../scenarios/lab_result_referral.json"),
    include_str!("../scenarios/prescription_purchase.json"),
    include_str!("../scenarios/procedure_history.json"),
    include_str!("../scenarios/vital_signs_monitoring.json"),
];

const WALLET_PASSPHRASE: &str = "scenario-wallet";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CastRole {
    Authority,
    Issuer,
    Holder,
    Verifier,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CastMember {
    pub role: CastRole,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ConsentChoice {
    Approve,
    Decline,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Step {
    /// First ledger write: the actor's self-signed AUTHORITY NYM.
    Bootstrap { actor: String },
    /// Registers every catalog schema under the actor's DID.
    PublishSchemas { actor: String },
    Register { actor: String, target: String, role: Role },
    CredDef { actor: String, schema: String },
    Connect { inviter: String, invitee: String },
    Consent { actor: String, policy: ConsentChoice },
    Issue {
        issuer: String,
        holder: String,
        schema: String,
        values: BTreeMap<String, String>,
        #[serde(rename = "as")]
        alias: String,
        expect: String,
    },
    /// Proof request over the verifier-holder connection.
    Request {
        verifier: String,
        holder: String,
        schema: String,
        attributes: Vec<String>,
        expect: String,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        failed: Vec<String>,
    },
    /// Out-of-band presentation carried in a QR payload.
    PresentQr {
        holder: String,
        verifier: String,
        schema: String,
        attributes: Vec<String>,
        expect: String,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        failed: Vec<String>,
    },
    Revoke { issuer: String, credential: String },
    AssertHeld { holder: String, count: usize },
}

impl Step {
    pub fn op(&self) -> &'static str {
        match self {
            Step::Bootstrap { .. } => "bootstrap",
            Step::PublishSchemas { .. } => "publish_schemas",
            Step::Register { .. } => "register",
            Step::CredDef { .. } => "cred_def",
            Step::Connect { .. } => "connect",
            Step::Consent { .. } => "consent",
            Step::Issue { .. } => "issue",
            Step::Request { .. } => "request",
            Step::PresentQr { .. } => "present_qr",
            Step::Revoke { .. } => "revoke",
            Step::AssertHeld { .. } => "assert_held",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub cast: Vec<CastMember>,
    pub steps: Vec<Step>,
}

pub fn builtin_scenarios() -> Vec<Scenario> {
    SCRIPTS
        .iter()
        .map(|s| serde_json::from_str(s).expect("bundled scenario parses"))
        .collect()
}

pub fn scenario(name: &str) -> Option<Scenario> {
    builtin_scenarios().into_iter().find(|s| s.name == name)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptLine {
    pub step: usize,
    pub op: String,
    /// (sender label, kind) in wire order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub messages: Vec<(String, MessageKind)>,
    pub outcome: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed_checks: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credential_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qr_bytes: Option<usize>,
    pub height: u64,
    pub root_hash: Digest,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("step {step}: expected {expected}, got {actual}")]
pub struct ScenarioError {
    pub step: usize,
    pub expected: String,
    pub actual: String,
}

impl ScenarioError {
    pub fn code(&self) -> &'static str {
        "SCENARIO_FAILED"
    }
}

pub struct ScenarioRun {
    pub transcript: Vec<TranscriptLine>,
    pub result: Result<(), ScenarioError>,
    /// Every pairwise DID used by any connection during the run.
    pub connection_dids: Vec<Did>,
}

impl ScenarioRun {
    pub fn passed(&self) -> bool {
        self.result.is_ok()
    }

    /// The transcript as line-delimited JSON.
    pub fn ldjson(&self) -> String {
        self.transcript
            .iter()
            .map(|l| serde_json::to_string(l).expect("transcript lines serialize") + "\n")
            .collect()
    }
}

struct Observed {
    messages: Vec<(String, MessageKind)>,
    outcome: String,
    failed_checks: Vec<String>,
    credential_id: Option<String>,
    qr_bytes: Option<usize>,
}

impl Observed {
    fn outcome(outcome: &str) -> Self {
        Self {
            messages: Vec::new(),
            outcome: outcome.to_string(),
            failed_checks: Vec::new(),
            credential_id: None,
            qr_bytes: None,
        }
    }
}

fn fail(step: usize, expected: impl Into<String>, actual: impl Into<String>) -> ScenarioError {
    ScenarioError {
        step,
        expected: expected.into(),
        actual: actual.into(),
    }
}

struct Runner {
    ledger: Arc<dyn LedgerClient>,
    agents: BTreeMap<String, Arc<Agent>>,
    /// (inviter, invitee) → connection id, shared by both ends.
    connections: HashMap<(String, String), String>,
    credentials: HashMap<String, (String, String)>,
    authority: Option<Did>,
}

fn agent_seed(seed: u64, label: &str) -> u64 {
    let d = sha256(format!("{seed}/{label}").as_bytes());
    u64::from_be_bytes(d.0[..8].try_into().expect("8 bytes"))
}

/// Kinds sent on `thread` by two agents, interleaved in wire order. Both
/// ends of a thread strictly alternate, starting with `first`.
fn thread_messages(first: (&str, &Agent), second: (&str, &Agent), thread: &str) -> Vec<(String, MessageKind)> {
    let sent = |agent: &Agent| -> Vec<MessageKind> {
        agent
            .events()
            .since(0)
            .into_iter()
            .filter(|e| e.thread_id.as_deref() == Some(thread))
            .filter_map(|e| match e.kind {
                EventKind::MessageSent { kind } => Some(kind),
                _ => None,
            })
            .collect()
    };
    let (a, b) = (sent(first.1), sent(second.1));
    let mut out = Vec::new();
    for i in 0..a.len().max(b.len()) {
        if let Some(k) = a.get(i) {
            out.push((first.0.to_string(), *k));
        }
        if let Some(k) = b.get(i) {
            out.push((second.0.to_string(), *k));
        }
    }
    out
}

fn report_outcome(report: &VerificationReport) -> (String, Vec<String>) {
    let verdict = serde_json::to_value(report.verdict)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default();
    (verdict, report.failed().into_iter().map(str::to_string).collect())
}

impl Runner {
    fn agent(&self, step: usize, label: &str) -> Result<&Arc<Agent>, ScenarioError> {
        self.agents
            .get(label)
            .ok_or_else(|| fail(step, format!("cast member {label}"), "unknown label"))
    }

    fn schema_id(&self, step: usize, name: &str) -> Result<String, ScenarioError> {
        let authority = self
            .authority
            .as_ref()
            .ok_or_else(|| fail(step, "schemas published", "no authority yet"))?;
        catalog()
            .get(name)
            .map(|s| s.record(authority).schema_id)
            .ok_or_else(|| fail(step, format!("catalog schema {name}"), "unknown schema"))
    }

    fn connection(&self, step: usize, a: &str, b: &str) -> Result<String, ScenarioError> {
        self.connections
            .get(&(a.to_string(), b.to_string()))
            .or_else(|| self.connections.get(&(b.to_string(), a.to_string())))
            .cloned()
            .ok_or_else(|| fail(step, format!("connection {a}-{b}"), "not connected"))
    }

    fn infra(step: usize, what: &str, e: AgentError) -> ScenarioError {
        fail(step, what.to_string(), format!("{}: {e}", e.code()))
    }

    fn run_step(&mut self, i: usize, step: &Step) -> Result<Observed, ScenarioError> {
        match step {
            Step::Bootstrap { actor } => {
                let agent = self.agent(i, actor)?;
                agent.bootstrap_authority().map_err(|e| Self::infra(i, "authority NYM", e))?;
                self.authority = agent.public_did();
                Ok(Observed::outcome("OK"))
            }
            Step::PublishSchemas { actor } => {
                let agent = self.agent(i, actor)?;
                for s in catalog().schemas {
                    let attrs: Vec<&str> = s.attributes.iter().map(String::as_str).collect();
                    agent
                        .publish_schema(&s.name, &s.version, &attrs)
                        .map_err(|e| Self::infra(i, "schema registered", e))?;
                }
                Ok(Observed::outcome("OK"))
            }
            Step::Register { actor, target, role } => {
                let did = self
                    .agent(i, target)?
                    .ensure_public_did()
                    .map_err(|e| Self::infra(i, "public DID", e))?;
                self.agent(i, actor)?
                    .register_nym(&did, *role)
                    .map_err(|e| Self::infra(i, "NYM registered", e))?;
                Ok(Observed::outcome("OK"))
            }
            Step::CredDef { actor, schema } => {
                let schema_id = self.schema_id(i, schema)?;
                self.agent(i, actor)?
                    .publish_cred_def(&schema_id, None)
                    .map_err(|e| Self::infra(i, "cred-def published", e))?;
                Ok(Observed::outcome("OK"))
            }
            Step::Connect { inviter, invitee } => {
                let (a, b) = (self.agent(i, inviter)?.clone(), self.agent(i, invitee)?.clone());
                let invitation = a.create_invitation(None).map_err(|e| Self::infra(i, "invitation", e))?;
                let id = b.connect(&invitation, None).map_err(|e| Self::infra(i, "COMPLETE", e))?;
                // the inviter finishes on the invitee's ACK
                a.wait(&id).map_err(|e| Self::infra(i, "COMPLETE", e))?;
                self.connections.insert((inviter.clone(), invitee.clone()), id.clone());
                let mut messages = vec![(inviter.clone(), MessageKind::Invitation)];
                messages.extend(thread_messages((invitee, &b), (inviter, &a), &id));
                Ok(Observed {
                    messages,
                    ..Observed::outcome("COMPLETE")
                })
            }
            Step::Consent { actor, policy } => {
                let policy = match policy {
                    ConsentChoice::Approve => ConsentPolicy::ApproveAll,
                    ConsentChoice::Decline => ConsentPolicy::DeclineAll,
                };
                self.agent(i, actor)?.set_consent(Arc::new(policy));
                Ok(Observed::outcome("OK"))
            }
            Step::Issue {
                issuer,
                holder,
                schema,
                values,
                alias,
                expect,
            } => {
                let schema_id = self.schema_id(i, schema)?;
                let conn = self.connection(i, issuer, holder)?;
                let (a, b) = (self.agent(i, issuer)?.clone(), self.agent(i, holder)?.clone());
                let thread = a
                    .start_offer(&conn, &schema_id, values.clone())
                    .map_err(|e| Self::infra(i, expect, e))?;
                let (outcome, credential_id) = match a.wait(&thread) {
                    Ok(Outcome::CredentialIssued { credential_id }) => ("ISSUED".to_string(), Some(credential_id)),
                    Ok(other) => return Err(fail(i, expect.clone(), format!("{other:?}"))),
                    Err(e) if e.is_protocol() => (e.code().to_string(), None),
                    Err(e) => return Err(Self::infra(i, expect, e)),
                };
                if let Some(id) = &credential_id {
                    self.credentials.insert(alias.clone(), (issuer.clone(), id.clone()));
                }
                Ok(Observed {
                    messages: thread_messages((issuer, &a), (holder, &b), &thread),
                    credential_id,
                    ..Observed::outcome(&outcome)
                })
            }
            Step::Request {
                verifier,
                holder,
                schema,
                attributes,
                expect,
                ..
            } => {
                let requested = vec![RequestedCredential {
                    schema_id: self.schema_id(i, schema)?,
                    attribute_names: attributes.clone(),
                    cred_def_id: None,
                }];
                let conn = self.connection(i, verifier, holder)?;
                let (v, h) = (self.agent(i, verifier)?.clone(), self.agent(i, holder)?.clone());
                let thread = v
                    .start_proof_request(&conn, requested)
                    .map_err(|e| Self::infra(i, expect, e))?;
                let mut observed = match v.wait(&thread) {
                    Ok(Outcome::Verified { report }) => {
                        let (verdict, failed) = report_outcome(&report);
                        Observed {
                            failed_checks: failed,
                            ..Observed::outcome(&verdict)
                        }
                    }
                    Ok(other) => return Err(fail(i, expect.clone(), format!("{other:?}"))),
                    Err(e) if e.is_protocol() => {
                        // a refused request must leave the verifier with nothing
                        let verified = v.events().since(0).into_iter().any(|e| {
                            e.thread_id.as_deref() == Some(thread.as_str())
                                && matches!(e.kind, EventKind::VerificationCompleted { .. })
                        });
                        if verified {
                            return Err(fail(i, "no data received", "verifier saw a presentation"));
                        }
                        Observed::outcome(e.code())
                    }
                    Err(e) => return Err(Self::infra(i, expect, e)),
                };
                observed.messages = thread_messages((verifier, &v), (holder, &h), &thread);
                Ok(observed)
            }
            Step::PresentQr {
                holder,
                verifier,
                schema,
                attributes,
                expect,
                ..
            } => {
                let requested = vec![RequestedCredential {
                    schema_id: self.schema_id(i, schema)?,
                    attribute_names: attributes.clone(),
                    cred_def_id: None,
                }];
                let (v, h) = (self.agent(i, verifier)?, self.agent(i, holder)?);
                let request = v.create_oob_request(requested).map_err(|e| Self::infra(i, expect, e))?;
                let text = h.present_qr(&request, None).map_err(|e| Self::infra(i, expect, e))?;
                let report = v.verify_qr(&text).map_err(|e| Self::infra(i, expect, e))?;
                let (verdict, failed) = report_outcome(&report);
                Ok(Observed {
                    failed_checks: failed,
                    qr_bytes: Some(text.len()),
                    ..Observed::outcome(&verdict)
                })
            }
            Step::Revoke { issuer, credential } => {
                let (owner, id) = self
                    .credentials
                    .get(credential)
                    .cloned()
                    .ok_or_else(|| fail(i, format!("credential {credential}"), "never issued"))?;
                if &owner != issuer {
                    return Err(fail(i, format!("issued by {issuer}"), format!("issued by {owner}")));
                }
                self.agent(i, issuer)?.revoke(&id).map_err(|e| Self::infra(i, "REVOKED", e))?;
                Ok(Observed {
                    credential_id: Some(id),
                    ..Observed::outcome("REVOKED")
                })
            }
            Step::AssertHeld { holder, count } => {
                let held = self.agent(i, holder)?.credentials().len();
                if held != *count {
                    return Err(fail(i, format!("HELD {count}"), format!("HELD {held}")));
                }
                Ok(Observed::outcome(&format!("HELD {held}")))
            }
        }
    }
}

fn expectation(step: &Step) -> Option<(&str, &[String])> {
    match step {
        Step::Issue { expect, .. } => Some((expect, &[])),
        Step::Request { expect, failed, .. } | Step::PresentQr { expect, failed, .. } => Some((expect, failed)),
        _ => None,
    }
}

/// Runs `scenario` against `ledger`, which must be empty. Agents keep their
/// wallets under `workdir`. `seed` overrides the script's seed.
pub fn run_scenario(
    scenario: &Scenario,
    ledger: Arc<dyn LedgerClient>,
    workdir: &Path,
    seed: Option<u64>,
) -> ScenarioRun {
    let seed = seed.unwrap_or(scenario.seed);
    let hub = LocalHub::new();
    let mut run = ScenarioRun {
        transcript: Vec::new(),
        result: Ok(()),
        connection_dids: Vec::new(),
    };
    let mut runner = Runner {
        ledger: ledger.clone(),
        agents: BTreeMap::new(),
        connections: HashMap::new(),
        credentials: HashMap::new(),
        authority: None,
    };
    if let Err(e) = std::fs::create_dir_all(workdir) {
        run.result = Err(ScenarioError {
            step: 0,
            expected: "a writable workdir".into(),
            actual: format!("{}: {e}", workdir.display()),
        });
        return run;
    }
    for member in &scenario.cast {
        let opened = Wallet::open_with(
            workdir.join(format!("{}.wallet", member.label)),
            WALLET_PASSPHRASE,
            KdfParams::light(),
        )
        .map_err(AgentError::from)
        .and_then(|wallet| {
            let endpoint = format!("local://{}", member.label);
            let config = AgentConfig::new(&member.label, &endpoint).seed(agent_seed(seed, &member.label));
            Agent::open(config, wallet, ledger.clone(), hub.clone())
        });
        match opened {
            Ok(agent) => {
                agent.set_consent(Arc::new(ConsentPolicy::ApproveAll));
                hub.register(agent.endpoint(), agent.inbox());
                runner.agents.insert(member.label.clone(), agent);
            }
            Err(e) => {
                run.result = Err(Runner::infra(0, &format!("agent {}", member.label), e));
                return run;
            }
        }
    }

    for (i, step) in scenario.steps.iter().enumerate() {
        let observed = runner.run_step(i, step);
        let status = runner.ledger.status();
        let (height, root_hash) = status.map(|s| (s.height, s.root_hash)).unwrap_or((0, Digest([0; 32])));
        let (observed, error) = match observed {
            Ok(o) => {
                let error = expectation(step).and_then(|(expect, failed)| {
                    let actual = if failed.is_empty() {
                        o.outcome.clone()
                    } else {
                        format!("{} {:?}", o.outcome, o.failed_checks)
                    };
                    let wanted = if failed.is_empty() {
                        expect.to_string()
                    } else {
                        format!("{expect} {failed:?}")
                    };
                    (actual != wanted).then(|| fail(i, wanted, actual))
                });
                (o, error)
            }
            Err(e) => (Observed::outcome("SCENARIO_FAILED"), Some(e)),
        };
        run.transcript.push(TranscriptLine {
            step: i,
            op: step.op().to_string(),
            messages: observed.messages,
            outcome: observed.outcome,
            failed_checks: observed.failed_checks,
            credential_id: observed.credential_id,
            qr_bytes: observed.qr_bytes,
            height,
            root_hash,
            ok: error.is_none(),
        });
        if let Some(e) = error {
            run.result = Err(e);
            break;
        }
    }

    for agent in runner.agents.values() {
        for c in agent.connections() {
            run.connection_dids.push(c.my_did.clone());
            run.connection_dids.extend(c.their_did.clone());
        }
    }
    run
}
