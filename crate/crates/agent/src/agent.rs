use std::collections::{BTreeMap, HashMap};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex, RwLock, Weak};
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use healthreg_core::credential::{
    assemble_presentation, find_candidates, issue_credential, revoke, verify_presentation, Credential,
    CredentialError, Presentation, ProofRequest, RequestedCredential, RevocationSlot, VerificationReport,
};
use healthreg_core::crypto::sha256;
use healthreg_core::ledger::{
    CredDefRecord, DidRecord, LedgerTransaction, Query, ReadError, Record, RevocationRegistryRecord,
    Role, SchemaRecord, TxPayload, DEFAULT_REGISTRY_CAPACITY,
};
use healthreg_core::wallet::{RecordKind, Wallet, WalletError, WalletRecord};
use healthreg_core::{Did, Digest, KeyPair, Nonce, PublicKey};
use healthreg_node::{LedgerClient, Receipt, SubmitError};

use crate::consent::{Consent, ConsentDecision, ConsentPolicy, PendingItem, PendingKind};
use crate::envelope::{self, EnvelopeError, Kid};
use crate::events::{Event, EventKind, EventLog};
use crate::message::*;
use crate::protocol::{self, Flow, Side, Stage};
use crate::qr::{self, QrError, QrKind};
use crate::records::*;
use crate::wire::{DeliveryError, Inbox, Wire};

pub const DEFAULT_FLOW_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{code}: {detail}")]
pub struct Problem {
    pub code: String,
    pub detail: String,
}

impl Problem {
    pub fn new(code: &str, detail: impl Into<String>) -> Self {
        Self {
            code: code.to_string(),
            detail: detail.into(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    /// A protocol-level negative outcome, reported by either side.
    #[error(transparent)]
    Problem(#[from] Problem),
    #[error("timed out waiting on thread {0}")]
    Timeout(String),
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("ledger write failed: {0}")]
    Ledger(#[from] SubmitError),
    #[error("ledger lookup failed: {0}")]
    LedgerRead(#[from] ReadError),
    #[error(transparent)]
    Wallet(#[from] WalletError),
    #[error(transparent)]
    Delivery(#[from] DeliveryError),
    #[error(transparent)]
    Credential(#[from] CredentialError),
    #[error(transparent)]
    Qr(#[from] QrError),
}

impl AgentError {
    pub fn code(&self) -> &str {
        match self {
            AgentError::Problem(p) => &p.code,
            AgentError::Timeout(_) => "TIMEOUT",
            AgentError::Envelope(e) => e.code(),
            AgentError::NotFound(_) => "NOT_FOUND",
            AgentError::BadRequest(_) => "BAD_REQUEST",
            AgentError::Ledger(e) => e.code(),
            AgentError::LedgerRead(_) => "LEDGER_LOOKUP_FAILED",
            AgentError::Wallet(e) => e.code(),
            AgentError::Delivery(_) => "DELIVERY_FAILED",
            AgentError::Credential(e) => e.code(),
            AgentError::Qr(e) => e.code(),
        }
    }

    /// Negative outcomes of a protocol run (declines, invalid material), as
    /// opposed to infrastructure failures.
    pub fn is_protocol(&self) -> bool {
        matches!(
            self,
            AgentError::Problem(_) | AgentError::Envelope(_) | AgentError::Credential(_) | AgentError::Qr(_)
        )
    }
}

fn problem(code: &str, detail: impl Into<String>) -> AgentError {
    AgentError::Problem(Problem::new(code, detail))
}

/// How a finished thread ended well.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    Connected { connection_id: String },
    CredentialIssued { credential_id: String },
    CredentialStored { credential_id: String },
    Verified { report: VerificationReport },
    Presented { report: Option<VerificationReport> },
}

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub label: String,
    /// Where peers deliver envelopes to this agent.
    pub endpoint: String,
    /// Seed for all agent randomness (keys, ids, nonces, salts). `None`
    /// seeds from the OS.
    pub seed: Option<u64>,
    pub flow_timeout: Duration,
    /// Network fingerprint; `None` asks the ledger.
    pub fingerprint: Option<Digest>,
}

impl AgentConfig {
    pub fn new(label: &str, endpoint: &str) -> Self {
        Self {
            label: label.to_string(),
            endpoint: endpoint.to_string(),
            seed: None,
            flow_timeout: DEFAULT_FLOW_TIMEOUT,
            fingerprint: None,
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Route {
    Invitation(String),
    Connection(String),
}

#[derive(Debug, Clone)]
struct Outbound {
    endpoint: String,
    bytes: Vec<u8>,
}

#[derive(Debug, Clone)]
enum ThreadData {
    Connect,
    OfferOut {
        cred_def_id: String,
        values: BTreeMap<String, String>,
        credential_id: Option<String>,
    },
    OfferIn(CredOffer),
    RequestOut(ProofRequest),
    RequestIn(ProofRequest),
}

#[derive(Debug, Clone)]
struct ThreadState {
    flow: Flow,
    side: Side,
    stage: Stage,
    connection_id: String,
    data: ThreadData,
    last_received: Option<Digest>,
    last_sent: Option<Outbound>,
    outcome: Option<Result<Outcome, Problem>>,
}

/// A credential held in the wallet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredCredential {
    pub credential_id: String,
    pub credential: Credential,
}

/// What the messaging API lists for a held credential.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CredentialView {
    pub credential_id: String,
    pub schema_id: String,
    pub cred_def_id: String,
    pub attributes: BTreeMap<String, String>,
}

/// A cred-def this agent issues under.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CredDefView {
    pub cred_def_id: String,
    pub schema_id: String,
    pub attribute_names: Vec<String>,
    pub registry_id: String,
    pub capacity: u32,
    pub issued: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvitationView {
    pub invitation_id: String,
    pub label: String,
    pub url: String,
    pub expired: bool,
}

/// Presentation payload carried in a QR code.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QrPresentation {
    pub presentation: Presentation,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// Stable id of an issued credential.
pub fn credential_id(credential: &Credential) -> String {
    format!("cred-{}", hex(&sha256(credential.issuer_signature.as_bytes()).0[..8]))
}

/// Parses an invitation given as URL text or as a QR payload.
pub fn parse_invitation(text: &str) -> Result<Invitation, AgentError> {
    let text = text.trim();
    if text.starts_with(INVITATION_URL_PREFIX) {
        return Invitation::from_url(text).map_err(|e| AgentError::Qr(QrError::MalformedPayload(e.0)));
    }
    Ok(qr::decode(text, QrKind::Invitation)?)
}

/// An SSI agent: one wallet, pairwise connections to peer agents, and the
/// issuer, holder and verifier sides of the credential protocols.
///
/// Inbound envelopes are queued and handled one at a time on a worker
/// thread; local calls (starting flows, consent answers) are serialized with
/// that processing. Blocking flow calls wait up to the flow timeout for the
/// thread to finish.
pub struct Agent {
    label: String,
    endpoint: String,
    fingerprint: Digest,
    flow_timeout: Duration,
    wallet: Wallet,
    ledger: Arc<dyn LedgerClient>,
    wire: Arc<dyn Wire>,
    rng: Mutex<ChaCha20Rng>,
    routes: Mutex<HashMap<Kid, Route>>,
    process: Mutex<()>,
    threads: Mutex<HashMap<String, ThreadState>>,
    thread_done: Condvar,
    events: EventLog,
    consent: RwLock<Arc<dyn Consent>>,
    pending: Mutex<BTreeMap<String, (PendingItem, Instant)>>,
    issuance_override: Mutex<Option<KeyPair>>,
    oob_requests: Mutex<HashMap<Nonce, ProofRequest>>,
    work: Mutex<mpsc::Sender<Vec<u8>>>,
}

impl std::fmt::Debug for Agent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Agent").field("label", &self.label).field("endpoint", &self.endpoint).finish_non_exhaustive()
    }
}

impl Agent {
    /// Starts an agent over an open wallet. Consent defaults to queueing
    /// every item for an explicit answer.
    pub fn open(
        config: AgentConfig,
        wallet: Wallet,
        ledger: Arc<dyn LedgerClient>,
        wire: Arc<dyn Wire>,
    ) -> Result<Arc<Self>, AgentError> {
        let fingerprint = match config.fingerprint {
            Some(fp) => fp,
            None => ledger.status()?.fingerprint,
        };
        let rng = match config.seed {
            Some(seed) => ChaCha20Rng::seed_from_u64(seed),
            None => ChaCha20Rng::from_entropy(),
        };
        let (tx, rx) = mpsc::channel::<Vec<u8>>();
        let agent = Arc::new(Self {
            label: config.label,
            endpoint: config.endpoint,
            fingerprint,
            flow_timeout: config.flow_timeout,
            wallet,
            ledger,
            wire,
            rng: Mutex::new(rng),
            routes: Mutex::new(HashMap::new()),
            process: Mutex::new(()),
            threads: Mutex::new(HashMap::new()),
            thread_done: Condvar::new(),
            events: EventLog::default(),
            consent: RwLock::new(Arc::new(ConsentPolicy::Queue)),
            pending: Mutex::new(BTreeMap::new()),
            issuance_override: Mutex::new(None),
            oob_requests: Mutex::new(HashMap::new()),
            work: Mutex::new(tx),
        });
        agent.load_routes()?;

        let weak: Weak<Agent> = Arc::downgrade(&agent);
        thread::Builder::new()
            .name(format!("agent-{}", agent.label))
            .spawn(move || loop {
                match rx.recv_timeout(Duration::from_millis(200)) {
                    Ok(bytes) => {
                        let Some(agent) = weak.upgrade() else { break };
                        if let Err(e) = agent.receive(&bytes) {
                            log::debug!("{}: inbound message refused: {e}", agent.label);
                        }
                    }
                    Err(mpsc::RecvTimeoutError::Timeout) if weak.strong_count() > 0 => {}
                    Err(_) => break,
                }
            })
            .map_err(|e| AgentError::BadRequest(format!("cannot start worker: {e}")))?;
        Ok(agent)
    }

    fn load_routes(&self) -> Result<(), AgentError> {
        let mut routes = self.routes.lock().unwrap();
        for r in self.wallet.search(Some(RecordKind::Connection), &[("purpose", "invitation")]) {
            let rec: InvitationRecord = r.decode()?;
            if !rec.expired {
                routes.insert(envelope::kid_of(&rec.keys.public_key), Route::Invitation(rec.invitation.invitation_id));
            }
        }
        for r in self.wallet.search(Some(RecordKind::Connection), &[("purpose", "connection")]) {
            let conn: Connection = r.decode()?;
            routes.insert(envelope::kid_of(&conn.my_keys.public_key), Route::Connection(conn.connection_id));
        }
        Ok(())
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn fingerprint(&self) -> Digest {
        self.fingerprint
    }

    pub fn flow_timeout(&self) -> Duration {
        self.flow_timeout
    }

    pub fn wallet(&self) -> &Wallet {
        &self.wallet
    }

    pub fn ledger(&self) -> &Arc<dyn LedgerClient> {
        &self.ledger
    }

    pub fn events(&self) -> &EventLog {
        &self.events
    }

    pub fn set_consent(&self, consent: Arc<dyn Consent>) {
        *self.consent.write().unwrap() = consent;
    }

    /// Signs issued credentials with `keys` instead of the ledger-published
    /// issuance key. Fault-injection hook.
    pub fn set_issuance_key_override(&self, keys: Option<KeyPair>) {
        *self.issuance_override.lock().unwrap() = keys;
    }

    /// A handle that queues envelope bytes for this agent's worker.
    pub fn inbox(&self) -> Inbox {
        let tx = Mutex::new(self.work.lock().unwrap().clone());
        Arc::new(move |bytes| {
            let _ = tx.lock().unwrap().send(bytes);
        })
    }

    fn fresh_id(&self, prefix: &str) -> String {
        let mut b = [0u8; 8];
        self.rng.lock().unwrap().fill_bytes(&mut b);
        format!("{prefix}-{}", hex(&b))
    }

    fn fresh_keys(&self) -> KeyPair {
        KeyPair::generate(&mut *self.rng.lock().unwrap())
    }

    fn emit(&self, thread_id: Option<&str>, kind: EventKind) {
        self.events.push(thread_id, kind);
    }

    // ---- wallet helpers

    pub fn connection(&self, connection_id: &str) -> Result<Connection, AgentError> {
        self.wallet
            .get(&connection_record_id(connection_id))
            .ok_or_else(|| AgentError::NotFound(format!("connection {connection_id}")))?
            .decode()
            .map_err(Into::into)
    }

    pub fn connections(&self) -> Vec<Connection> {
        self.wallet
            .search(Some(RecordKind::Connection), &[("purpose", "connection")])
            .iter()
            .filter_map(|r| r.decode().ok())
            .collect()
    }

    fn save_connection(&self, conn: &Connection, new: bool) -> Result<(), AgentError> {
        let mut record = WalletRecord::new(connection_record_id(&conn.connection_id), RecordKind::Connection, conn)?
            .tag("purpose", "connection")
            .tag("state", conn.state.as_str())
            .tag("label", conn.alias.clone())
            .tag("thread_id", conn.connection_id.clone());
        if let Some(did) = &conn.their_did {
            record = record.tag("their_did", did.to_string());
        }
        if new {
            self.wallet.put(record)?;
        } else {
            self.wallet.update(record)?;
        }
        self.emit(
            Some(&conn.connection_id),
            EventKind::ConnectionState {
                connection_id: conn.connection_id.clone(),
                state: conn.state.as_str().into(),
            },
        );
        Ok(())
    }

    fn invitation_record(&self, invitation_id: &str) -> Result<InvitationRecord, AgentError> {
        self.wallet
            .get(&invitation_record_id(invitation_id))
            .ok_or_else(|| AgentError::NotFound(format!("invitation {invitation_id}")))?
            .decode()
            .map_err(Into::into)
    }

    pub fn invitations(&self) -> Vec<InvitationView> {
        self.wallet
            .search(Some(RecordKind::Connection), &[("purpose", "invitation")])
            .iter()
            .filter_map(|r| r.decode::<InvitationRecord>().ok())
            .map(|r| InvitationView {
                invitation_id: r.invitation.invitation_id.clone(),
                label: r.invitation.label.clone(),
                url: r.invitation.to_url(),
                expired: r.expired,
            })
            .collect()
    }

    pub fn credentials(&self) -> Vec<StoredCredential> {
        self.wallet
            .search(Some(RecordKind::Credential), &[])
            .iter()
            .filter_map(|r| r.decode().ok())
            .collect()
    }

    pub fn credential_views(&self) -> Vec<CredentialView> {
        self.credentials()
            .into_iter()
            .map(|c| CredentialView {
                credential_id: c.credential_id,
                schema_id: c.credential.schema_id.clone(),
                cred_def_id: c.credential.cred_def_id.clone(),
                attributes: c.credential.attribute_values,
            })
            .collect()
    }

    fn nonce_log(&self) -> NonceLog {
        self.wallet
            .get(NONCE_LOG_RECORD)
            .and_then(|r| r.decode().ok())
            .unwrap_or_default()
    }

    fn nonce_consumed(&self, nonce: &Nonce) -> bool {
        self.nonce_log().consumed.contains(nonce)
    }

    fn consume_nonce(&self, nonce: Nonce) -> Result<(), AgentError> {
        let mut log = self.nonce_log();
        let new = self.wallet.get(NONCE_LOG_RECORD).is_none();
        log.consumed.insert(nonce);
        let record = WalletRecord::new(NONCE_LOG_RECORD, RecordKind::NonceLog, &log)?;
        if new {
            self.wallet.put(record)?;
        } else {
            self.wallet.update(record)?;
        }
        Ok(())
    }

    fn holder_keys(&self, did: &Did) -> Option<KeyPair> {
        self.connections().into_iter().find(|c| &c.my_did == did).map(|c| c.my_keys)
    }

    // ---- threads

    fn thread(&self, thread_id: &str) -> Option<ThreadState> {
        self.threads.lock().unwrap().get(thread_id).cloned()
    }

    fn put_thread(&self, thread_id: &str, state: ThreadState) {
        self.threads.lock().unwrap().insert(thread_id.to_string(), state);
        self.thread_done.notify_all();
    }

    pub fn thread_stage(&self, thread_id: &str) -> Option<Stage> {
        self.thread(thread_id).map(|t| t.stage)
    }

    /// Blocks until `thread_id` finishes or the flow timeout passes.
    pub fn wait(&self, thread_id: &str) -> Result<Outcome, AgentError> {
        self.wait_for(thread_id, self.flow_timeout)
    }

    pub fn wait_for(&self, thread_id: &str, timeout: Duration) -> Result<Outcome, AgentError> {
        let threads = self.threads.lock().unwrap();
        let (threads, _) = self
            .thread_done
            .wait_timeout_while(threads, timeout, |t| {
                t.get(thread_id).is_some_and(|s| s.outcome.is_none())
            })
            .unwrap();
        match threads.get(thread_id) {
            None => Err(AgentError::NotFound(format!("thread {thread_id}"))),
            Some(ThreadState { outcome: Some(Ok(o)), .. }) => Ok(o.clone()),
            Some(ThreadState { outcome: Some(Err(p)), .. }) => Err(AgentError::Problem(p.clone())),
            Some(_) => Err(AgentError::Timeout(thread_id.to_string())),
        }
    }

    // ---- sending

    fn seal(&self, from: &KeyPair, to: &PublicKey, endpoint: &str, msg: &ProtocolMessage) -> Result<Outbound, AgentError> {
        let bytes = envelope::seal(from, to, msg, &mut *self.rng.lock().unwrap())?;
        self.emit(Some(&msg.thread_id), EventKind::MessageSent { kind: msg.kind() });
        if let Payload::ProblemReport(p) = &msg.payload {
            self.emit(Some(&msg.thread_id), EventKind::ProblemSent { code: p.code.clone() });
        }
        Ok(Outbound {
            endpoint: endpoint.to_string(),
            bytes,
        })
    }

    fn dispatch(&self, out: &Outbound) -> Result<(), AgentError> {
        self.wire.deliver(&out.endpoint, out.bytes.clone()).map_err(Into::into)
    }

    /// Delivery failures inside message handling are only logged: the peer
    /// retries, or the waiting side times out.
    fn dispatch_logged(&self, out: &Outbound) {
        if let Err(e) = self.dispatch(out) {
            log::warn!("{}: {e}", self.label);
        }
    }

    fn send_on(&self, conn: &Connection, msg: &ProtocolMessage) -> Result<Outbound, AgentError> {
        self.seal(&conn.my_keys, &conn.their_key, &conn.their_endpoint, msg)
    }

    /// Sends an arbitrary message on an established connection, bypassing
    /// the local state machine. For fault-injection harnesses.
    pub fn send_raw(&self, connection_id: &str, msg: ProtocolMessage) -> Result<(), AgentError> {
        let conn = self.connection(connection_id)?;
        let out = self.send_on(&conn, &msg)?;
        self.dispatch(&out)
    }

    /// Re-sends the last message of an unfinished thread, for example an
    /// EXCHANGE_REQUEST whose response was lost.
    pub fn retry(&self, thread_id: &str) -> Result<(), AgentError> {
        let t = self.thread(thread_id).ok_or_else(|| AgentError::NotFound(format!("thread {thread_id}")))?;
        if t.stage.is_terminal() {
            return Err(AgentError::BadRequest(format!("thread {thread_id} already finished")));
        }
        match &t.last_sent {
            Some(out) => self.dispatch(out),
            None => Err(AgentError::BadRequest("nothing to resend".into())),
        }
    }

    // ---- inbound

    /// Processes one envelope synchronously. Errors describe why the message
    /// was refused; a PROBLEM_REPORT has already been sent where possible.
    pub fn receive(&self, bytes: &[u8]) -> Result<(), AgentError> {
        let followup = {
            let _serial = self.process.lock().unwrap();
            self.receive_serialized(bytes)?
        };
        if let Some(item) = followup {
            self.consult(item);
        }
        Ok(())
    }

    fn reject_envelope(&self, e: EnvelopeError) -> AgentError {
        self.emit(None, EventKind::EnvelopeRejected { detail: e.0.to_string() });
        AgentError::Envelope(e)
    }

    fn receive_serialized(&self, bytes: &[u8]) -> Result<Option<PendingItem>, AgentError> {
        let kid = envelope::peek_kid(bytes).ok_or_else(|| self.reject_envelope(EnvelopeError("unparseable envelope")))?;
        let route = self.routes.lock().unwrap().get(&kid).cloned();
        let Some(route) = route else {
            return Err(self.reject_envelope(EnvelopeError("no key for this recipient")));
        };
        match route {
            Route::Invitation(id) => {
                let inv = self.invitation_record(&id)?;
                let (sender, msg) = envelope::open(bytes, &inv.keys).map_err(|e| self.reject_envelope(e))?;
                self.emit(Some(&msg.thread_id), EventKind::MessageReceived { kind: msg.kind() });
                self.on_invitation_message(inv, sender, msg).map(|_| None)
            }
            Route::Connection(id) => {
                let conn = self.connection(&id)?;
                let (sender, msg) = envelope::open(bytes, &conn.my_keys).map_err(|e| self.reject_envelope(e))?;
                if sender != conn.their_key {
                    return Err(self.reject_envelope(EnvelopeError("sender is not this connection's peer")));
                }
                self.emit(Some(&msg.thread_id), EventKind::MessageReceived { kind: msg.kind() });
                self.on_connection_message(conn, msg)
            }
        }
    }

    fn out_of_order(&self, conn: &Connection, msg: &ProtocolMessage) -> AgentError {
        if msg.kind() == MessageKind::ProblemReport {
            // never answer a problem report
            return problem("OUT_OF_ORDER", "problem report on a finished or unknown thread");
        }
        let detail = format!("{} not expected here", msg.kind());
        if let Ok(out) = self.send_on(conn, &ProtocolMessage::problem(&msg.thread_id, "OUT_OF_ORDER", &detail)) {
            self.dispatch_logged(&out);
        }
        problem("OUT_OF_ORDER", detail)
    }

    fn on_invitation_message(&self, inv: InvitationRecord, sender: PublicKey, msg: ProtocolMessage) -> Result<(), AgentError> {
        let Payload::ExchangeRequest(req) = &msg.payload else {
            if let Payload::ProblemReport(p) = &msg.payload {
                self.emit(Some(&msg.thread_id), EventKind::ProblemReceived { code: p.code.clone() });
            }
            return Err(problem("OUT_OF_ORDER", format!("{} sent to an invitation key", msg.kind())));
        };
        if sender != req.key {
            return Err(self.reject_envelope(EnvelopeError("sender is not the key named in the request")));
        }
        let digest = msg.digest();
        let existing = self.thread(&msg.thread_id);
        if let Some(t) = &existing {
            if t.last_received == Some(digest) {
                if let Some(out) = &t.last_sent {
                    self.dispatch_logged(out);
                }
                return Ok(());
            }
        }
        let reply_problem = |code: &str, detail: String| -> AgentError {
            let msg = ProtocolMessage::problem(&msg.thread_id, code, &detail);
            if let Ok(out) = self.seal(&inv.keys, &req.key, &req.endpoint, &msg) {
                self.dispatch_logged(&out);
            }
            problem(code, detail)
        };
        if protocol::on_receive(Flow::Connection, Side::Receiver, existing.map(|t| t.stage), msg.kind()).is_none() {
            return Err(reply_problem("OUT_OF_ORDER", "exchange thread already in progress".into()));
        }
        if req.fingerprint != self.fingerprint {
            return Err(reply_problem("NETWORK_MISMATCH", "requester is on a different ledger network".into()));
        }
        if req.invitation_id != inv.invitation.invitation_id || inv.expired {
            return Err(reply_problem("INVITATION_EXPIRED", "invitation is unknown or expired".into()));
        }
        if Did::from_public_key(&req.key) != req.did {
            return Err(reply_problem("BAD_REQUEST", "DID is not derived from the offered key".into()));
        }
        if self.connections().iter().any(|c| c.their_did.as_ref() == Some(&req.did)) {
            return Err(reply_problem("DUPLICATE_CONNECTION", "already connected to this DID".into()));
        }
        if self.wallet.get(&connection_record_id(&msg.thread_id)).is_some() {
            return Err(reply_problem("BAD_REQUEST", "thread id already used".into()));
        }

        let my_keys = self.fresh_keys();
        let conn = Connection {
            connection_id: msg.thread_id.clone(),
            alias: req.label.clone(),
            my_did: Did::from_public_key(&my_keys.public_key),
            my_keys,
            their_did: Some(req.did.clone()),
            their_key: req.key,
            their_endpoint: req.endpoint.clone(),
            state: ConnectionState::Requested,
            invitation_id: inv.invitation.invitation_id.clone(),
        };
        self.save_connection(&conn, true)?;
        self.routes
            .lock()
            .unwrap()
            .insert(envelope::kid_of(&conn.my_keys.public_key), Route::Connection(conn.connection_id.clone()));
        let response = ProtocolMessage::new(
            &msg.thread_id,
            Payload::ExchangeResponse(ExchangeResponse {
                label: self.label.clone(),
                did: conn.my_did.clone(),
                key: conn.my_keys.public_key,
                endpoint: self.endpoint.clone(),
            }),
        );
        let out = self.seal(&inv.keys, &req.key, &req.endpoint, &response)?;
        self.put_thread(
            &msg.thread_id,
            ThreadState {
                flow: Flow::Connection,
                side: Side::Receiver,
                stage: Stage::ResponseSent,
                connection_id: conn.connection_id.clone(),
                data: ThreadData::Connect,
                last_received: Some(digest),
                last_sent: Some(out.clone()),
                outcome: None,
            },
        );
        self.dispatch_logged(&out);
        Ok(())
    }

    fn on_connection_message(&self, mut conn: Connection, msg: ProtocolMessage) -> Result<Option<PendingItem>, AgentError> {
        let kind = msg.kind();
        let existing = self.thread(&msg.thread_id);

        // a re-sent presentation is refused before anything else looks at it
        if let (Payload::ProofPresentation(_), Some(t)) = (&msg.payload, &existing) {
            if let ThreadData::RequestOut(request) = &t.data {
                if self.nonce_consumed(&request.nonce) {
                    let out = self.send_on(
                        &conn,
                        &ProtocolMessage::problem(&msg.thread_id, "NONCE_REUSED", "nonce already answered"),
                    )?;
                    self.dispatch_logged(&out);
                    return Err(problem("NONCE_REUSED", "presentation for an already answered request"));
                }
            }
        }

        let digest = msg.digest();
        if let Some(t) = &existing {
            if t.last_received == Some(digest) && t.connection_id == conn.connection_id {
                if let Some(out) = &t.last_sent {
                    self.dispatch_logged(out);
                }
                return Ok(None);
            }
        }

        if matches!(kind, MessageKind::ExchangeRequest | MessageKind::Invitation) {
            return Err(self.out_of_order(&conn, &msg));
        }
        let (flow, side, stage) = match &existing {
            Some(t) if t.connection_id != conn.connection_id => return Err(self.out_of_order(&conn, &msg)),
            Some(t) => (t.flow, t.side, Some(t.stage)),
            None => match protocol::flow_opened_by(kind) {
                Some(flow) => (flow, Side::Receiver, None),
                None => {
                    if let Payload::ProblemReport(p) = &msg.payload {
                        self.emit(Some(&msg.thread_id), EventKind::ProblemReceived { code: p.code.clone() });
                    }
                    return Err(self.out_of_order(&conn, &msg));
                }
            },
        };
        if protocol::on_receive(flow, side, stage, kind).is_none() {
            if let Payload::ProblemReport(p) = &msg.payload {
                self.emit(Some(&msg.thread_id), EventKind::ProblemReceived { code: p.code.clone() });
            }
            return Err(self.out_of_order(&conn, &msg));
        }
        if flow != Flow::Connection && conn.state != ConnectionState::Complete {
            return Err(self.out_of_order(&conn, &msg));
        }

        let thread_id = msg.thread_id.clone();
        match msg.payload {
            Payload::ProblemReport(p) => {
                self.emit(Some(&thread_id), EventKind::ProblemReceived { code: p.code.clone() });
                let mut t = existing.expect("problem reports only advance known threads");
                t.stage = Stage::Abandoned;
                t.last_received = Some(digest);
                t.outcome = Some(Err(Problem::new(&p.code, p.detail)));
                self.pending.lock().unwrap().remove(&thread_id);
                self.put_thread(&thread_id, t);
                Ok(None)
            }
            Payload::ExchangeResponse(r) => {
                let mut t = existing.expect("responses only advance known threads");
                if Did::from_public_key(&r.key) != r.did {
                    let detail = "DID is not derived from the offered key";
                    let out = self.send_on(&conn, &ProtocolMessage::problem(&thread_id, "BAD_REQUEST", detail))?;
                    t.stage = Stage::Abandoned;
                    t.outcome = Some(Err(Problem::new("BAD_REQUEST", detail)));
                    self.put_thread(&thread_id, t);
                    self.dispatch_logged(&out);
                    return Err(problem("BAD_REQUEST", detail));
                }
                conn.their_did = Some(r.did);
                conn.their_key = r.key;
                conn.their_endpoint = r.endpoint;
                conn.state = ConnectionState::Complete;
                self.save_connection(&conn, false)?;
                let out = self.send_on(&conn, &ProtocolMessage::new(&thread_id, Payload::Ack(Ack::default())))?;
                t.stage = Stage::Complete;
                t.last_received = Some(digest);
                t.last_sent = Some(out.clone());
                t.outcome = Some(Ok(Outcome::Connected {
                    connection_id: conn.connection_id.clone(),
                }));
                self.put_thread(&thread_id, t);
                self.dispatch_logged(&out);
                Ok(None)
            }
            Payload::Ack(ack) => {
                let mut t = existing.expect("acks only advance known threads");
                t.stage = Stage::Complete;
                t.last_received = Some(digest);
                t.outcome = Some(Ok(match (&t.flow, &t.data) {
                    (Flow::Connection, _) => {
                        conn.state = ConnectionState::Complete;
                        self.save_connection(&conn, false)?;
                        Outcome::Connected {
                            connection_id: conn.connection_id.clone(),
                        }
                    }
                    (Flow::Issuance, ThreadData::OfferOut { credential_id, .. }) => Outcome::CredentialIssued {
                        credential_id: credential_id.clone().unwrap_or_default(),
                    },
                    _ => Outcome::Presented { report: ack.report },
                }));
                self.put_thread(&thread_id, t);
                Ok(None)
            }
            Payload::CredOffer(offer) => {
                let item = PendingItem {
                    thread_id: thread_id.clone(),
                    kind: PendingKind::Offer,
                    connection_id: conn.connection_id.clone(),
                    peer_label: conn.alias.clone(),
                    schema_ids: vec![offer.schema_id.clone()],
                    cred_def_id: Some(offer.cred_def_id.clone()),
                    attribute_names: offer.attribute_names.clone(),
                    requested: Vec::new(),
                    candidates: Vec::new(),
                    received_at: now_ms(),
                };
                self.put_thread(
                    &thread_id,
                    ThreadState {
                        flow,
                        side,
                        stage: Stage::OfferReceived,
                        connection_id: conn.connection_id.clone(),
                        data: ThreadData::OfferIn(offer),
                        last_received: Some(digest),
                        last_sent: None,
                        outcome: None,
                    },
                );
                Ok(Some(item))
            }
            Payload::CredRequest(req) => {
                let mut t = existing.expect("requests only advance known threads");
                t.last_received = Some(digest);
                let result = self.on_cred_request(&conn, &thread_id, &mut t, req);
                let out = t.last_sent.clone();
                self.put_thread(&thread_id, t);
                if let Some(out) = out {
                    self.dispatch_logged(&out);
                }
                result.map(|_| None)
            }
            Payload::CredIssue(issue) => {
                let mut t = existing.expect("issues only advance known threads");
                t.last_received = Some(digest);
                let result = self.on_cred_issue(&conn, &thread_id, &mut t, issue.credential);
                let out = t.last_sent.clone();
                self.put_thread(&thread_id, t);
                if let Some(out) = out {
                    self.dispatch_logged(&out);
                }
                result.map(|_| None)
            }
            Payload::ProofRequest(body) => {
                let request = body.request;
                let held = self.credentials();
                let creds: Vec<Credential> = held.iter().map(|c| c.credential.clone()).collect();
                let candidates: Vec<Vec<String>> = request
                    .requested
                    .iter()
                    .map(|item| find_candidates(&creds, item).into_iter().map(|i| held[i].credential_id.clone()).collect())
                    .collect();
                let mut t = ThreadState {
                    flow,
                    side,
                    stage: Stage::RequestReceived,
                    connection_id: conn.connection_id.clone(),
                    data: ThreadData::RequestIn(request.clone()),
                    last_received: Some(digest),
                    last_sent: None,
                    outcome: None,
                };
                if Some(&request.verifier_did) != conn.their_did.as_ref() || candidates.iter().any(Vec::is_empty) {
                    let code = if candidates.iter().any(Vec::is_empty) {
                        "UNSATISFIABLE_REQUEST"
                    } else {
                        "BAD_REQUEST"
                    };
                    let out = self.send_on(&conn, &ProtocolMessage::problem(&thread_id, code, ""))?;
                    t.stage = Stage::Abandoned;
                    t.last_sent = Some(out.clone());
                    t.outcome = Some(Err(Problem::new(code, "")));
                    self.put_thread(&thread_id, t);
                    self.dispatch_logged(&out);
                    return Err(problem(code, "proof request cannot be answered"));
                }
                let mut names: Vec<String> = request.requested.iter().flat_map(|r| r.attribute_names.clone()).collect();
                names.sort();
                names.dedup();
                let item = PendingItem {
                    thread_id: thread_id.clone(),
                    kind: PendingKind::ProofRequest,
                    connection_id: conn.connection_id.clone(),
                    peer_label: conn.alias.clone(),
                    schema_ids: request.requested.iter().map(|r| r.schema_id.clone()).collect(),
                    cred_def_id: None,
                    attribute_names: names,
                    requested: request.requested.clone(),
                    candidates,
                    received_at: now_ms(),
                };
                self.put_thread(&thread_id, t);
                Ok(Some(item))
            }
            Payload::ProofPresentation(body) => {
                let mut t = existing.expect("presentations only advance known threads");
                let ThreadData::RequestOut(request) = &t.data else {
                    return Err(problem("OUT_OF_ORDER", "no proof request on this thread"));
                };
                self.consume_nonce(request.nonce)?;
                let report = verify_presentation(&body.presentation, request, &*self.ledger);
                self.emit(
                    Some(&thread_id),
                    EventKind::VerificationCompleted {
                        verdict: report.verdict,
                        failed: report.failed().into_iter().map(str::to_string).collect(),
                    },
                );
                let out = self.send_on(
                    &conn,
                    &ProtocolMessage::new(&thread_id, Payload::Ack(Ack { report: Some(report.clone()) })),
                )?;
                t.stage = Stage::Complete;
                t.last_received = Some(digest);
                t.last_sent = Some(out.clone());
                t.outcome = Some(Ok(Outcome::Verified { report }));
                self.put_thread(&thread_id, t);
                self.dispatch_logged(&out);
                Ok(None)
            }
            Payload::ExchangeRequest(_) | Payload::Invitation(_) => unreachable!("filtered above"),
        }
    }

    fn resolve_cred_def(&self, cred_def_id: &str) -> Result<CredDefRecord, AgentError> {
        match self.ledger.resolve(&Query::CredDef(cred_def_id.to_string()))?.record {
            Record::CredDef(c) => Ok(c),
            _ => Err(AgentError::LedgerRead(ReadError::NotFound)),
        }
    }

    fn resolve_schema(&self, schema_id: &str) -> Result<SchemaRecord, AgentError> {
        match self.ledger.resolve(&Query::Schema(schema_id.to_string()))?.record {
            Record::Schema(s) => Ok(s),
            _ => Err(AgentError::LedgerRead(ReadError::NotFound)),
        }
    }

    fn resolve_registry(&self, registry_id: &str) -> Result<RevocationRegistryRecord, AgentError> {
        match self.ledger.resolve(&Query::RevocRegistry(registry_id.to_string()))?.record {
            Record::RevocRegistry(r) => Ok(r),
            _ => Err(AgentError::LedgerRead(ReadError::NotFound)),
        }
    }

    fn on_cred_request(
        &self,
        conn: &Connection,
        thread_id: &str,
        t: &mut ThreadState,
        req: CredRequest,
    ) -> Result<(), AgentError> {
        let ThreadData::OfferOut { cred_def_id, values, .. } = t.data.clone() else {
            return Err(problem("OUT_OF_ORDER", "no offer on this thread"));
        };
        let fail = |t: &mut ThreadState, code: &str, detail: String| -> Result<(), AgentError> {
            let out = self.send_on(conn, &ProtocolMessage::problem(thread_id, code, &detail))?;
            t.last_sent = Some(out);
            t.stage = Stage::Abandoned;
            t.outcome = Some(Err(Problem::new(code, detail.clone())));
            Err(problem(code, detail))
        };
        if req.cred_def_id != cred_def_id || Some(&req.holder_did) != conn.their_did.as_ref() {
            return fail(t, "BAD_REQUEST", "request does not match the offer or connection".into());
        }
        let mut state: IssuerState = self
            .wallet
            .get(&issuer_record_id(&cred_def_id))
            .ok_or_else(|| AgentError::NotFound(format!("issuer state for {cred_def_id}")))?
            .decode()?;
        let looked_up = (|| {
            Ok::<_, AgentError>((
                self.resolve_cred_def(&cred_def_id)?,
                self.resolve_schema(&state.schema_id)?,
                self.resolve_registry(&state.registry_id)?,
            ))
        })();
        let (cred_def, schema, registry) = match looked_up {
            Ok(v) => v,
            Err(e) => return fail(t, "LEDGER_LOOKUP_FAILED", e.to_string()),
        };
        let keys = self
            .issuance_override
            .lock()
            .unwrap()
            .clone()
            .unwrap_or_else(|| state.issuance_keys.clone());
        let index = state.next_index;
        let issued = issue_credential(
            &keys,
            &cred_def,
            &schema,
            &req.holder_did,
            &values,
            RevocationSlot { registry: &registry, index },
            &mut *self.rng.lock().unwrap(),
        );
        let credential = match issued {
            Ok(c) => c,
            Err(e) => return fail(t, e.code(), e.to_string()),
        };
        let id = credential_id(&credential);
        state.next_index += 1;
        state.issued.push(IssuedEntry {
            credential_id: id.clone(),
            index,
            connection_id: conn.connection_id.clone(),
        });
        self.save_issuer_state(&state, false)?;
        self.emit(
            Some(thread_id),
            EventKind::CredentialIssued {
                credential_id: id.clone(),
                index,
            },
        );
        let out = self.send_on(conn, &ProtocolMessage::new(thread_id, Payload::CredIssue(CredIssue { credential })))?;
        t.stage = Stage::CredentialSent;
        t.last_sent = Some(out);
        if let ThreadData::OfferOut { credential_id, .. } = &mut t.data {
            *credential_id = Some(id);
        }
        Ok(())
    }

    fn on_cred_issue(
        &self,
        conn: &Connection,
        thread_id: &str,
        t: &mut ThreadState,
        credential: Credential,
    ) -> Result<(), AgentError> {
        let ThreadData::OfferIn(offer) = t.data.clone() else {
            return Err(problem("OUT_OF_ORDER", "no offer on this thread"));
        };
        let mut names: Vec<&str> = credential.attribute_values.keys().map(String::as_str).collect();
        let mut offered: Vec<&str> = offer.attribute_names.iter().map(String::as_str).collect();
        names.sort();
        offered.sort();
        let check = if credential.holder_did != conn.my_did {
            Err(("CREDENTIAL_INVALID", "credential is bound to another holder DID".to_string()))
        } else if credential.cred_def_id != offer.cred_def_id || credential.schema_id != offer.schema_id || names != offered {
            Err(("CREDENTIAL_INVALID", "credential does not match the offer".to_string()))
        } else {
            match self.ledger.resolve(&Query::CredDef(credential.cred_def_id.clone())) {
                Err(ReadError::Unavailable(e)) => Err(("LEDGER_LOOKUP_FAILED", e)),
                _ => credential.verify_against_ledger(&*self.ledger).map_err(|e| ("CREDENTIAL_INVALID", e)),
            }
        };
        if let Err((code, detail)) = check {
            let out = self.send_on(conn, &ProtocolMessage::problem(thread_id, code, &detail))?;
            t.stage = Stage::Abandoned;
            t.last_sent = Some(out);
            t.outcome = Some(Err(Problem::new(code, detail.clone())));
            return Err(problem(code, detail));
        }
        let id = credential_id(&credential);
        let record = WalletRecord::new(
            credential_record_id(&id),
            RecordKind::Credential,
            &StoredCredential {
                credential_id: id.clone(),
                credential: credential.clone(),
            },
        )?
        .tag("schema_id", credential.schema_id.clone())
        .tag("cred_def_id", credential.cred_def_id.clone())
        .tag("thread_id", thread_id);
        match self.wallet.put(record) {
            Ok(()) | Err(WalletError::DuplicateId(_)) => {}
            Err(e) => return Err(e.into()),
        }
        self.emit(Some(&thread_id), EventKind::CredentialStored { credential_id: id.clone() });
        let out = self.send_on(conn, &ProtocolMessage::new(thread_id, Payload::Ack(Ack::default())))?;
        t.stage = Stage::Complete;
        t.last_sent = Some(out);
        t.outcome = Some(Ok(Outcome::CredentialStored { credential_id: id }));
        Ok(())
    }

    // ---- consent

    fn consult(&self, item: PendingItem) {
        let consent = self.consent.read().unwrap().clone();
        let decision = consent.decide(&item);
        let thread_id = item.thread_id.clone();
        let result = match decision {
            ConsentDecision::Approve(selection) => self.approve(&thread_id, selection),
            ConsentDecision::Decline => self.decline(&thread_id),
            ConsentDecision::Defer => {
                let kind = match item.kind {
                    PendingKind::Offer => "OFFER",
                    PendingKind::ProofRequest => "PROOF_REQUEST",
                };
                self.pending.lock().unwrap().insert(thread_id.clone(), (item, Instant::now()));
                self.emit(Some(&thread_id), EventKind::PendingAdded { pending: kind.into() });
                Ok(())
            }
        };
        if let Err(e) = result {
            log::info!("{}: consent answer on {thread_id} failed: {e}", self.label);
        }
    }

    /// Items awaiting an approve/decline answer.
    pub fn pending(&self) -> Vec<PendingItem> {
        self.pending.lock().unwrap().values().map(|(item, _)| item.clone()).collect()
    }

    fn take_pending(&self, thread_id: &str) -> Result<(), AgentError> {
        let entry = self.pending.lock().unwrap().remove(thread_id);
        if let Some((_, at)) = entry {
            self.emit(Some(thread_id), EventKind::PendingResolved);
            if at.elapsed() > self.flow_timeout {
                let mut threads = self.threads.lock().unwrap();
                if let Some(t) = threads.get_mut(thread_id) {
                    t.stage = Stage::Abandoned;
                    t.outcome = Some(Err(Problem::new("TIMEOUT", "answered after the flow timeout")));
                }
                self.thread_done.notify_all();
                return Err(AgentError::Timeout(thread_id.to_string()));
            }
        }
        Ok(())
    }

    fn consent_thread(&self, thread_id: &str) -> Result<(ThreadState, Connection), AgentError> {
        let t = self.thread(thread_id).ok_or_else(|| AgentError::NotFound(format!("thread {thread_id}")))?;
        if !matches!(t.stage, Stage::OfferReceived | Stage::RequestReceived) {
            return Err(AgentError::NotFound(format!("nothing awaiting consent on {thread_id}")));
        }
        let conn = self.connection(&t.connection_id)?;
        Ok((t, conn))
    }

    /// Approves a received offer or proof request. For proof requests,
    /// `selection` names one held credential per requested item.
    pub fn approve(&self, thread_id: &str, selection: Option<Vec<String>>) -> Result<(), AgentError> {
        let _serial = self.process.lock().unwrap();
        let (mut t, conn) = self.consent_thread(thread_id)?;
        self.take_pending(thread_id)?;
        let msg = match &t.data {
            ThreadData::OfferIn(offer) => ProtocolMessage::new(
                thread_id,
                Payload::CredRequest(CredRequest {
                    cred_def_id: offer.cred_def_id.clone(),
                    holder_did: conn.my_did.clone(),
                }),
            ),
            ThreadData::RequestIn(request) => {
                let presentation = match self.build_presentation(request, selection.as_deref()) {
                    Ok(p) => p,
                    Err(e) => {
                        self.pending.lock().unwrap().remove(thread_id);
                        let code = e.code().to_string();
                        let out = self.send_on(&conn, &ProtocolMessage::problem(thread_id, &code, e.to_string()))?;
                        t.stage = Stage::Abandoned;
                        t.last_sent = Some(out.clone());
                        t.outcome = Some(Err(Problem::new(&code, e.to_string())));
                        self.put_thread(thread_id, t);
                        self.dispatch_logged(&out);
                        return Err(e);
                    }
                };
                self.emit(Some(thread_id), EventKind::ConsentApproved);
                let msg = ProtocolMessage::new(
                    thread_id,
                    Payload::ProofPresentation(ProofPresentationBody { presentation }),
                );
                let out = self.send_on(&conn, &msg)?;
                self.emit(Some(thread_id), EventKind::PresentationSent);
                t.stage = protocol::on_consent(t.stage, true).expect("consent stage");
                t.last_sent = Some(out.clone());
                self.put_thread(thread_id, t);
                return self.dispatch(&out);
            }
            _ => return Err(AgentError::NotFound(format!("nothing awaiting consent on {thread_id}"))),
        };
        self.emit(Some(thread_id), EventKind::ConsentApproved);
        let out = self.send_on(&conn, &msg)?;
        t.stage = protocol::on_consent(t.stage, true).expect("consent stage");
        t.last_sent = Some(out.clone());
        self.put_thread(thread_id, t);
        self.dispatch(&out)
    }

    /// Declines a received offer (OFFER_DECLINED) or proof request
    /// (PRESENTATION_DECLINED).
    pub fn decline(&self, thread_id: &str) -> Result<(), AgentError> {
        let _serial = self.process.lock().unwrap();
        let (mut t, conn) = self.consent_thread(thread_id)?;
        self.take_pending(thread_id)?;
        let code = match t.data {
            ThreadData::OfferIn(_) => "OFFER_DECLINED",
            _ => "PRESENTATION_DECLINED",
        };
        self.emit(Some(thread_id), EventKind::ConsentDeclined);
        let out = self.send_on(&conn, &ProtocolMessage::problem(thread_id, code, "holder declined"))?;
        t.stage = Stage::Abandoned;
        t.last_sent = Some(out.clone());
        t.outcome = Some(Err(Problem::new(code, "holder declined")));
        self.put_thread(thread_id, t);
        self.dispatch(&out)
    }

    fn build_presentation(&self, request: &ProofRequest, selection: Option<&[String]>) -> Result<Presentation, AgentError> {
        let held = self.credentials();
        let creds: Vec<Credential> = held.iter().map(|c| c.credential.clone()).collect();
        let chosen: Vec<&Credential> = match selection {
            Some(ids) => ids
                .iter()
                .map(|id| {
                    held.iter()
                        .find(|c| &c.credential_id == id)
                        .map(|c| &c.credential)
                        .ok_or_else(|| AgentError::NotFound(format!("credential {id}")))
                })
                .collect::<Result<_, _>>()?,
            None => {
                let mut chosen = Vec::new();
                for item in &request.requested {
                    match find_candidates(&creds, item).first() {
                        Some(&i) => chosen.push(&held[i].credential),
                        None => {
                            return Err(CredentialError::UnsatisfiableRequest(vec![item.schema_id.clone()]).into())
                        }
                    }
                }
                chosen
            }
        };
        Ok(assemble_presentation(&chosen, request, &|did| self.holder_keys(did))?)
    }

    // ---- flows

    /// A fresh invitation with its own key, usable until expired.
    pub fn create_invitation(&self, label: Option<&str>) -> Result<Invitation, AgentError> {
        let _serial = self.process.lock().unwrap();
        let keys = self.fresh_keys();
        let invitation = Invitation {
            invitation_id: self.fresh_id("inv"),
            fingerprint: self.fingerprint,
            label: label.unwrap_or(&self.label).to_string(),
            key: keys.public_key,
            endpoint: self.endpoint.clone(),
        };
        let record = WalletRecord::new(
            invitation_record_id(&invitation.invitation_id),
            RecordKind::Connection,
            &InvitationRecord {
                invitation: invitation.clone(),
                keys: keys.clone(),
                expired: false,
            },
        )?
        .tag("purpose", "invitation")
        .tag("state", ConnectionState::Invited.as_str());
        self.wallet.put(record)?;
        self.routes
            .lock()
            .unwrap()
            .insert(envelope::kid_of(&keys.public_key), Route::Invitation(invitation.invitation_id.clone()));
        self.emit(
            Some(&invitation.invitation_id),
            EventKind::InvitationCreated {
                invitation_id: invitation.invitation_id.clone(),
            },
        );
        self.emit(Some(&invitation.invitation_id), EventKind::MessageSent { kind: MessageKind::Invitation });
        Ok(invitation)
    }

    pub fn expire_invitation(&self, invitation_id: &str) -> Result<(), AgentError> {
        let _serial = self.process.lock().unwrap();
        let mut rec = self.invitation_record(invitation_id)?;
        rec.expired = true;
        self.routes.lock().unwrap().remove(&envelope::kid_of(&rec.keys.public_key));
        let record = WalletRecord::new(invitation_record_id(invitation_id), RecordKind::Connection, &rec)?
            .tag("purpose", "invitation")
            .tag("state", "EXPIRED");
        self.wallet.update(record)?;
        Ok(())
    }

    pub fn invitation_qr(&self, invitation_id: &str) -> Result<String, AgentError> {
        let rec = self.invitation_record(invitation_id)?;
        Ok(qr::encode(QrKind::Invitation, &rec.invitation)?)
    }

    /// Sends an EXCHANGE_REQUEST for `invitation` and returns the new
    /// connection id (also the exchange thread id) without waiting.
    pub fn start_connect(&self, invitation: &Invitation, alias: Option<&str>) -> Result<String, AgentError> {
        let _serial = self.process.lock().unwrap();
        if invitation.fingerprint != self.fingerprint {
            return Err(problem("NETWORK_MISMATCH", "invitation is for a different ledger network"));
        }
        let my_keys = self.fresh_keys();
        let connection_id = self.fresh_id("conn");
        let conn = Connection {
            connection_id: connection_id.clone(),
            alias: alias.unwrap_or(&invitation.label).to_string(),
            my_did: Did::from_public_key(&my_keys.public_key),
            my_keys,
            their_did: None,
            their_key: invitation.key,
            their_endpoint: invitation.endpoint.clone(),
            state: ConnectionState::Requested,
            invitation_id: invitation.invitation_id.clone(),
        };
        self.save_connection(&conn, true)?;
        self.routes
            .lock()
            .unwrap()
            .insert(envelope::kid_of(&conn.my_keys.public_key), Route::Connection(connection_id.clone()));
        let msg = ProtocolMessage::new(
            &connection_id,
            Payload::ExchangeRequest(ExchangeRequest {
                invitation_id: invitation.invitation_id.clone(),
                label: self.label.clone(),
                did: conn.my_did.clone(),
                key: conn.my_keys.public_key,
                endpoint: self.endpoint.clone(),
                fingerprint: self.fingerprint,
            }),
        );
        let out = self.send_on(&conn, &msg)?;
        self.put_thread(
            &connection_id,
            ThreadState {
                flow: Flow::Connection,
                side: Side::Opener,
                stage: protocol::initial(Flow::Connection),
                connection_id: connection_id.clone(),
                data: ThreadData::Connect,
                last_received: None,
                last_sent: Some(out.clone()),
                outcome: None,
            },
        );
        self.dispatch(&out)?;
        Ok(connection_id)
    }

    /// Connects through `invitation` and waits for the exchange to finish.
    pub fn connect(&self, invitation: &Invitation, alias: Option<&str>) -> Result<String, AgentError> {
        let id = self.start_connect(invitation, alias)?;
        self.wait(&id)?;
        Ok(id)
    }

    fn issuer_state_for_schema(&self, schema_id: &str) -> Result<IssuerState, AgentError> {
        self.wallet
            .search(Some(RecordKind::Keypair), &[("purpose", "issuance"), ("schema_id", schema_id)])
            .first()
            .ok_or_else(|| AgentError::NotFound(format!("no credential definition for schema {schema_id}")))?
            .decode()
            .map_err(Into::into)
    }

    fn complete_connection(&self, connection_id: &str) -> Result<Connection, AgentError> {
        let conn = self.connection(connection_id)?;
        if conn.state != ConnectionState::Complete {
            return Err(AgentError::BadRequest(format!("connection {connection_id} is not complete")));
        }
        Ok(conn)
    }

    /// Sends a CRED_OFFER for `schema_id` with `values` and returns the
    /// thread id.
    pub fn start_offer(
        &self,
        connection_id: &str,
        schema_id: &str,
        values: BTreeMap<String, String>,
    ) -> Result<String, AgentError> {
        let _serial = self.process.lock().unwrap();
        let conn = self.complete_connection(connection_id)?;
        let state = self.issuer_state_for_schema(schema_id)?;
        let given: Vec<&String> = values.keys().collect();
        let wanted: Vec<&String> = state.attribute_names.iter().collect();
        if given != wanted {
            return Err(AgentError::Credential(CredentialError::AttributeMismatch {
                missing: state.attribute_names.iter().filter(|a| !values.contains_key(*a)).cloned().collect(),
                extra: values.keys().filter(|k| !state.attribute_names.contains(k)).cloned().collect(),
            }));
        }
        let thread_id = self.fresh_id("issue");
        let msg = ProtocolMessage::new(
            &thread_id,
            Payload::CredOffer(CredOffer {
                cred_def_id: state.cred_def_id.clone(),
                schema_id: state.schema_id.clone(),
                attribute_names: state.attribute_names.clone(),
            }),
        );
        let out = self.send_on(&conn, &msg)?;
        self.put_thread(
            &thread_id,
            ThreadState {
                flow: Flow::Issuance,
                side: Side::Opener,
                stage: protocol::initial(Flow::Issuance),
                connection_id: conn.connection_id.clone(),
                data: ThreadData::OfferOut {
                    cred_def_id: state.cred_def_id,
                    values,
                    credential_id: None,
                },
                last_received: None,
                last_sent: Some(out.clone()),
                outcome: None,
            },
        );
        self.dispatch(&out)?;
        Ok(thread_id)
    }

    /// Runs an issuance over `connection_id` and returns the credential id.
    pub fn issue(
        &self,
        connection_id: &str,
        schema_id: &str,
        values: BTreeMap<String, String>,
    ) -> Result<String, AgentError> {
        let thread_id = self.start_offer(connection_id, schema_id, values)?;
        match self.wait(&thread_id)? {
            Outcome::CredentialIssued { credential_id } => Ok(credential_id),
            other => Err(AgentError::BadRequest(format!("unexpected outcome {other:?}"))),
        }
    }

    /// Sends a PROOF_REQUEST with a fresh nonce and returns the thread id.
    pub fn start_proof_request(
        &self,
        connection_id: &str,
        requested: Vec<RequestedCredential>,
    ) -> Result<String, AgentError> {
        let _serial = self.process.lock().unwrap();
        if requested.is_empty() {
            return Err(AgentError::BadRequest("empty proof request".into()));
        }
        let conn = self.complete_connection(connection_id)?;
        let request = ProofRequest::new(conn.my_did.clone(), requested, &mut *self.rng.lock().unwrap());
        let thread_id = self.fresh_id("proof");
        let msg = ProtocolMessage::new(
            &thread_id,
            Payload::ProofRequest(ProofRequestBody {
                request: request.clone(),
            }),
        );
        let out = self.send_on(&conn, &msg)?;
        self.put_thread(
            &thread_id,
            ThreadState {
                flow: Flow::Presentation,
                side: Side::Opener,
                stage: protocol::initial(Flow::Presentation),
                connection_id: conn.connection_id.clone(),
                data: ThreadData::RequestOut(request),
                last_received: None,
                last_sent: Some(out.clone()),
                outcome: None,
            },
        );
        self.dispatch(&out)?;
        Ok(thread_id)
    }

    /// Requests a proof over `connection_id` and returns the verification
    /// report.
    pub fn request_proof(
        &self,
        connection_id: &str,
        requested: Vec<RequestedCredential>,
    ) -> Result<VerificationReport, AgentError> {
        let thread_id = self.start_proof_request(connection_id, requested)?;
        match self.wait(&thread_id)? {
            Outcome::Verified { report } => Ok(report),
            other => Err(AgentError::BadRequest(format!("unexpected outcome {other:?}"))),
        }
    }

    /// The request this agent sent on a presentation thread.
    pub fn sent_request(&self, thread_id: &str) -> Option<ProofRequest> {
        match self.thread(thread_id)?.data {
            ThreadData::RequestOut(r) => Some(r),
            _ => None,
        }
    }

    // ---- out-of-band (QR) presentations

    /// A proof request to be answered with a QR presentation.
    pub fn create_oob_request(&self, requested: Vec<RequestedCredential>) -> Result<ProofRequest, AgentError> {
        if requested.is_empty() {
            return Err(AgentError::BadRequest("empty proof request".into()));
        }
        let verifier = match self.public_identity() {
            Ok(id) => id.did,
            Err(_) => Did::from_public_key(&self.fresh_keys().public_key),
        };
        let request = ProofRequest::new(verifier, requested, &mut *self.rng.lock().unwrap());
        self.oob_requests.lock().unwrap().insert(request.nonce, request.clone());
        Ok(request)
    }

    /// Answers `request` as a QR payload. Calling this is the holder's
    /// consent to disclose the requested attributes.
    pub fn present_qr(&self, request: &ProofRequest, selection: Option<Vec<String>>) -> Result<String, AgentError> {
        let _serial = self.process.lock().unwrap();
        let thread_id = format!("oob-{}", request.nonce.to_b64());
        let presentation = self.build_presentation(request, selection.as_deref())?;
        let text = qr::encode(QrKind::Presentation, &QrPresentation { presentation })?;
        self.emit(Some(&thread_id), EventKind::ConsentApproved);
        self.emit(Some(&thread_id), EventKind::PresentationSent);
        Ok(text)
    }

    /// Verifies a QR presentation against the request it answers.
    pub fn verify_qr(&self, text: &str) -> Result<VerificationReport, AgentError> {
        let _serial = self.process.lock().unwrap();
        let payload: QrPresentation = qr::decode(text, QrKind::Presentation)?;
        let nonce = payload.presentation.nonce;
        let thread_id = format!("oob-{}", nonce.to_b64());
        if self.nonce_consumed(&nonce) {
            self.emit(Some(&thread_id), EventKind::ProblemSent { code: "NONCE_REUSED".into() });
            return Err(problem("NONCE_REUSED", "nonce already answered"));
        }
        let request = self
            .oob_requests
            .lock()
            .unwrap()
            .remove(&nonce)
            .ok_or_else(|| problem("UNKNOWN_REQUEST", "no outstanding request with this nonce"))?;
        self.consume_nonce(nonce)?;
        let report = verify_presentation(&payload.presentation, &request, &*self.ledger);
        self.emit(
            Some(&thread_id),
            EventKind::VerificationCompleted {
                verdict: report.verdict,
                failed: report.failed().into_iter().map(str::to_string).collect(),
            },
        );
        Ok(report)
    }

    // ---- ledger identity and issuer setup

    fn public_identity(&self) -> Result<PublicIdentity, AgentError> {
        self.wallet
            .get(PUBLIC_DID_RECORD)
            .ok_or_else(|| AgentError::NotFound("public DID".into()))?
            .decode()
            .map_err(Into::into)
    }

    pub fn public_did(&self) -> Option<Did> {
        self.public_identity().ok().map(|i| i.did)
    }

    /// This agent's ledger DID, minted on first use. Registering it is up to
    /// an authority ([`register_nym`](Self::register_nym)).
    pub fn ensure_public_did(&self) -> Result<Did, AgentError> {
        if let Ok(id) = self.public_identity() {
            return Ok(id.did);
        }
        let keys = self.fresh_keys();
        let id = PublicIdentity {
            did: Did::from_public_key(&keys.public_key),
            keys,
        };
        let record = WalletRecord::new(PUBLIC_DID_RECORD, RecordKind::Keypair, &id)?.tag("purpose", "public");
        self.wallet.put(record)?;
        Ok(id.did)
    }

    /// Signs `payload` with the public DID and submits it.
    pub fn submit(&self, payload: TxPayload) -> Result<Receipt, AgentError> {
        let id = self.public_identity()?;
        let tx = LedgerTransaction::signed(payload, id.did.clone(), &id.keys);
        let tx_type = serde_json::to_value(tx.tx_type()).ok().and_then(|v| v.as_str().map(str::to_string));
        let receipt = self.ledger.submit(tx)?;
        self.emit(
            None,
            EventKind::LedgerWrite {
                tx_type: tx_type.unwrap_or_default(),
                seq_no: receipt.seq_no,
            },
        );
        Ok(receipt)
    }

    /// Opens an empty ledger with this agent's public DID as its AUTHORITY.
    pub fn bootstrap_authority(&self) -> Result<Receipt, AgentError> {
        let did = self.ensure_public_did()?;
        self.submit(TxPayload::Nym(DidRecord {
            verification_key: *did.public_key(),
            did,
            agent_endpoint: None,
            role: Role::Authority,
        }))
    }

    /// Registers another agent's public DID (requires this agent to hold a
    /// sufficient role).
    pub fn register_nym(&self, did: &Did, role: Role) -> Result<Receipt, AgentError> {
        self.submit(TxPayload::Nym(DidRecord {
            did: did.clone(),
            verification_key: *did.public_key(),
            agent_endpoint: None,
            role,
        }))
    }

    pub fn publish_schema(&self, name: &str, version: &str, attributes: &[&str]) -> Result<SchemaRecord, AgentError> {
        let did = self.public_identity()?.did;
        let record = SchemaRecord::new(name, version, &did, attributes);
        self.submit(TxPayload::Schema(record.clone()))?;
        Ok(record)
    }

    fn save_issuer_state(&self, state: &IssuerState, new: bool) -> Result<(), AgentError> {
        let record = WalletRecord::new(issuer_record_id(&state.cred_def_id), RecordKind::Keypair, state)?
            .tag("purpose", "issuance")
            .tag("schema_id", state.schema_id.clone())
            .tag("cred_def_id", state.cred_def_id.clone())
            .tag("registry_id", state.registry_id.clone());
        if new {
            self.wallet.put(record)?;
        } else {
            self.wallet.update(record)?;
        }
        Ok(())
    }

    /// Publishes a cred-def for `schema_id` under a fresh issuance key,
    /// plus its revocation registry.
    pub fn publish_cred_def(&self, schema_id: &str, capacity: Option<u32>) -> Result<CredDefRecord, AgentError> {
        let id = self.public_identity()?;
        let schema = self.resolve_schema(schema_id)?;
        let issuance_keys = self.fresh_keys();
        let cred_def = CredDefRecord::new(schema_id, &id.did, issuance_keys.public_key);
        let capacity = capacity.unwrap_or(DEFAULT_REGISTRY_CAPACITY);
        let registry = RevocationRegistryRecord::new(&cred_def.cred_def_id, "1", capacity);
        self.submit(TxPayload::CredDef(cred_def.clone()))?;
        self.submit(TxPayload::RevocInit(registry.clone()))?;
        self.save_issuer_state(
            &IssuerState {
                cred_def_id: cred_def.cred_def_id.clone(),
                schema_id: schema_id.to_string(),
                attribute_names: schema.attribute_names,
                issuance_keys,
                registry_id: registry.registry_id,
                capacity,
                next_index: 0,
                issued: Vec::new(),
            },
            true,
        )?;
        Ok(cred_def)
    }

    pub fn cred_defs(&self) -> Vec<CredDefView> {
        let mut views: Vec<CredDefView> = self
            .wallet
            .search(Some(RecordKind::Keypair), &[("purpose", "issuance")])
            .iter()
            .filter_map(|r| r.decode::<IssuerState>().ok())
            .map(|s| CredDefView {
                cred_def_id: s.cred_def_id,
                schema_id: s.schema_id,
                attribute_names: s.attribute_names,
                registry_id: s.registry_id,
                capacity: s.capacity,
                issued: s.next_index,
            })
            .collect();
        views.sort_by(|a, b| a.cred_def_id.cmp(&b.cred_def_id));
        views
    }

    /// Revokes a credential this agent issued.
    pub fn revoke(&self, credential_id: &str) -> Result<Receipt, AgentError> {
        let identity = self.public_identity()?;
        let (state, entry) = self
            .wallet
            .search(Some(RecordKind::Keypair), &[("purpose", "issuance")])
            .iter()
            .filter_map(|r| r.decode::<IssuerState>().ok())
            .find_map(|s| {
                let entry = s.issued.iter().find(|e| e.credential_id == credential_id).cloned();
                entry.map(|e| (s, e))
            })
            .ok_or_else(|| AgentError::NotFound(format!("issued credential {credential_id}")))?;
        let registry = self.resolve_registry(&state.registry_id)?;
        let revocation = revoke(&identity.keys, &identity.did, &registry, entry.index)?;
        let receipt = self.ledger.submit(revocation.tx)?;
        self.emit(
            None,
            EventKind::Revoked {
                credential_id: credential_id.to_string(),
                seq_no: receipt.seq_no,
            },
        );
        Ok(receipt)
    }

    /// Events with `seq >= since`.
    pub fn events_since(&self, since: u64) -> Vec<Event> {
        self.events.since(since)
    }
}
