//! Local messaging API for a wallet UI: JSON over HTTP with a bearer token,
//! plus a server-sent event stream of agent events.
//!
//! Errors are `{"error": CODE, "detail": text}`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Weak};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};
use tiny_http::{Header, Method, Request, Response, Server, StatusCode};

use healthreg_core::credential::{ProofRequest, RequestedCredential};
use healthreg_core::ledger::Role;
use healthreg_core::wallet::WalletError;
use healthreg_core::Did;

use crate::agent::{parse_invitation, Agent, AgentError};
use crate::qr::QrError;
use crate::records::ConnectionView;

const MAX_BODY: u64 = 1 << 20;

struct ApiError {
    status: u16,
    code: String,
    detail: String,
}

impl ApiError {
    fn new(status: u16, code: &str, detail: impl Into<String>) -> Self {
        Self {
            status,
            code: code.to_string(),
            detail: detail.into(),
        }
    }
}

impl From<AgentError> for ApiError {
    fn from(e: AgentError) -> Self {
        let status = match &e {
            AgentError::NotFound(_) => 404,
            AgentError::BadRequest(_) => 400,
            AgentError::Qr(QrError::PayloadTooLarge(_)) => 413,
            AgentError::Qr(_) => 400,
            AgentError::Timeout(_) => 504,
            AgentError::Problem(_) | AgentError::Envelope(_) | AgentError::Credential(_) => 422,
            AgentError::Ledger(_) | AgentError::LedgerRead(_) | AgentError::Delivery(_) => 502,
            AgentError::Wallet(WalletError::DuplicateId(_)) => 409,
            AgentError::Wallet(_) => 500,
        };
        Self::new(status, e.code(), e.to_string())
    }
}

type Reply = Result<Value, ApiError>;

fn to_value<T: serde::Serialize>(v: T) -> Reply {
    serde_json::to_value(v).map_err(|e| ApiError::new(500, "INTERNAL", e.to_string()))
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    let body = if body.is_empty() { b"{}".as_slice() } else { body };
    serde_json::from_slice(body).map_err(|e| ApiError::new(400, "BAD_REQUEST", e.to_string()))
}

fn header(name: &str, value: &str) -> Header {
    Header::from_bytes(name.as_bytes(), value.as_bytes()).expect("static header")
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

#[derive(Deserialize)]
struct NewInvitation {
    label: Option<String>,
}

#[derive(Deserialize)]
struct NewConnection {
    /// Invitation URL or QR payload text.
    invitation: String,
    alias: Option<String>,
}

#[derive(Deserialize, Default)]
struct Approval {
    credential_ids: Option<Vec<String>>,
}

#[derive(Deserialize)]
struct IssueBody {
    connection_id: String,
    schema_id: String,
    values: BTreeMap<String, String>,
}

#[derive(Deserialize)]
struct ProofBody {
    connection_id: String,
    requested: Vec<RequestedCredential>,
}

#[derive(Deserialize)]
struct OobBody {
    requested: Vec<RequestedCredential>,
}

#[derive(Deserialize)]
struct PresentQr {
    request: ProofRequest,
    credential_ids: Option<Vec<String>>,
}

#[derive(Deserialize)]
struct VerifyQr {
    qr: String,
}

#[derive(Deserialize)]
struct NymBody {
    did: Did,
    role: Role,
}

#[derive(Deserialize)]
struct SchemaBody {
    name: String,
    version: String,
    attributes: Vec<String>,
}

#[derive(Deserialize)]
struct CredDefBody {
    schema_id: String,
    capacity: Option<u32>,
}

#[derive(Deserialize)]
struct RevokeBody {
    credential_id: String,
}

fn route(agent: &Agent, method: &Method, path: &[&str], query: &str, body: &[u8]) -> Reply {
    match (method, path) {
        (Method::Get, ["status"]) => Ok(json!({
            "label": agent.label(),
            "endpoint": agent.endpoint(),
            "public_did": agent.public_did(),
            "fingerprint": agent.fingerprint(),
        })),
        (Method::Get, ["invitations"]) => to_value(agent.invitations()),
        (Method::Post, ["invitations"]) => {
            let req: NewInvitation = parse(body)?;
            let invitation = agent.create_invitation(req.label.as_deref())?;
            let qr = agent.invitation_qr(&invitation.invitation_id)?;
            Ok(json!({"invitation_id": invitation.invitation_id, "url": invitation.to_url(), "qr": qr}))
        }
        (Method::Get, ["invitations", id, "qr"]) => Ok(json!({"qr": agent.invitation_qr(id)?})),
        (Method::Get, ["connections"]) => {
            to_value(agent.connections().iter().map(ConnectionView::from).collect::<Vec<_>>())
        }
        (Method::Post, ["connections"]) => {
            let req: NewConnection = parse(body)?;
            let invitation = parse_invitation(&req.invitation)?;
            let id = agent.connect(&invitation, req.alias.as_deref())?;
            to_value(ConnectionView::from(&agent.connection(&id)?))
        }
        (Method::Get, ["credentials"]) => to_value(agent.credential_views()),
        (Method::Get, ["pending"]) => to_value(agent.pending()),
        (Method::Post, ["pending", thread, "approve"]) => {
            let req: Approval = parse(body)?;
            agent.approve(thread, req.credential_ids)?;
            Ok(json!({"thread_id": thread, "approved": true}))
        }
        (Method::Post, ["pending", thread, "decline"]) => {
            agent.decline(thread)?;
            Ok(json!({"thread_id": thread, "approved": false}))
        }
        (Method::Post, ["issue"]) => {
            let req: IssueBody = parse(body)?;
            let credential_id = agent.issue(&req.connection_id, &req.schema_id, req.values)?;
            Ok(json!({"credential_id": credential_id}))
        }
        (Method::Post, ["proof-requests"]) => {
            let req: ProofBody = parse(body)?;
            to_value(agent.request_proof(&req.connection_id, req.requested)?)
        }
        (Method::Post, ["proof-requests", "oob"]) => {
            let req: OobBody = parse(body)?;
            to_value(agent.create_oob_request(req.requested)?)
        }
        (Method::Post, ["presentations", "qr"]) => {
            let req: PresentQr = parse(body)?;
            Ok(json!({"qr": agent.present_qr(&req.request, req.credential_ids)?}))
        }
        (Method::Post, ["presentations", "verify-qr"]) => {
            let req: VerifyQr = parse(body)?;
            to_value(agent.verify_qr(&req.qr)?)
        }
        (Method::Post, ["revoke"]) => {
            let req: RevokeBody = parse(body)?;
            to_value(agent.revoke(&req.credential_id)?)
        }
        (Method::Get, ["cred-defs"]) => to_value(agent.cred_defs()),
        (Method::Post, ["ledger", "bootstrap"]) => to_value(agent.bootstrap_authority()?),
        (Method::Post, ["ledger", "public-did"]) => Ok(json!({"did": agent.ensure_public_did()?})),
        (Method::Post, ["ledger", "nyms"]) => {
            let req: NymBody = parse(body)?;
            to_value(agent.register_nym(&req.did, req.role)?)
        }
        (Method::Post, ["ledger", "schemas"]) => {
            let req: SchemaBody = parse(body)?;
            let attributes: Vec<&str> = req.attributes.iter().map(String::as_str).collect();
            to_value(agent.publish_schema(&req.name, &req.version, &attributes)?)
        }
        (Method::Post, ["ledger", "cred-defs"]) => {
            let req: CredDefBody = parse(body)?;
            to_value(agent.publish_cred_def(&req.schema_id, req.capacity)?)
        }
        (Method::Get, ["events", "log"]) => to_value(agent.events_since(since(query))),
        _ => Err(ApiError::new(404, "NOT_FOUND", "no such route")),
    }
}

fn since(query: &str) -> u64 {
    query
        .split('&')
        .find_map(|kv| kv.strip_prefix("since="))
        .and_then(|v| v.parse().ok())
        .unwrap_or(0)
}

/// Writes `GET /events` as server-sent events until the client goes away,
/// the agent stops or the server shuts down.
fn stream_events(request: Request, agent: Weak<Agent>, stop: Arc<AtomicBool>, mut next: u64) {
    let head = Response::new(
        StatusCode(200),
        vec![header("Content-Type", "text/event-stream"), header("Cache-Control", "no-cache")],
        std::io::empty(),
        None,
        None,
    );
    // the upgrade path flushes the head and hands over the socket, so each
    // event goes out as soon as it is written
    let mut socket = request.upgrade("sse", head);
    let mut buf = Vec::new();
    while !stop.load(Ordering::SeqCst) {
        let Some(agent) = agent.upgrade() else { break };
        let events = agent.events().wait_since(next, Duration::from_millis(500));
        drop(agent);
        buf.clear();
        if events.is_empty() {
            buf.extend_from_slice(b": keep-alive\n\n");
        }
        for e in events {
            next = e.seq + 1;
            buf.extend_from_slice(b"data: ");
            if serde_json::to_writer(&mut buf, &e).is_err() {
                return;
            }
            buf.extend_from_slice(b"\n\n");
        }
        if socket.write_all(&buf).and_then(|_| socket.flush()).is_err() {
            break;
        }
    }
}

fn handle(agent: Weak<Agent>, token: &str, stop: Arc<AtomicBool>, mut request: Request) {
    let authorized = request
        .headers()
        .iter()
        .find(|h| h.field.equiv("Authorization"))
        .and_then(|h| h.value.as_str().strip_prefix("Bearer "))
        .is_some_and(|t| constant_time_eq(t.trim().as_bytes(), token.as_bytes()));
    let url = request.url().to_string();
    let (path, query) = url.split_once('?').unwrap_or((&url, ""));
    let segments: Vec<&str> = path.split('/').filter(|s| !s.is_empty()).collect();
    let method = request.method().clone();

    let result = if !authorized {
        Err(ApiError::new(401, "UNAUTHORIZED", "missing or wrong bearer token"))
    } else if let Some(agent) = agent.upgrade() {
        if method == Method::Get && segments == ["events"] {
            stream_events(request, Arc::downgrade(&agent), stop, since(query));
            return;
        }
        let mut body = Vec::new();
        match request.as_reader().take(MAX_BODY).read_to_end(&mut body) {
            Ok(_) => route(&agent, &method, &segments, query, &body),
            Err(e) => Err(ApiError::new(400, "BAD_REQUEST", e.to_string())),
        }
    } else {
        Err(ApiError::new(503, "UNAVAILABLE", "agent stopped"))
    };

    let (status, value) = match result {
        Ok(v) => (200, v),
        Err(e) => (e.status, json!({"error": e.code, "detail": e.detail})),
    };
    let response = Response::from_data(serde_json::to_vec(&value).unwrap_or_default())
        .with_status_code(status)
        .with_header(header("Content-Type", "application/json"));
    let _ = request.respond(response);
}

/// The messaging API bound to one agent.
pub struct ApiServer {
    server: Arc<Server>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
    endpoint: String,
}

impl ApiServer {
    /// Serves the API on `listener`; every request must carry
    /// `Authorization: Bearer <token>`.
    pub fn start(listener: TcpListener, agent: &Arc<Agent>, token: &str) -> std::io::Result<Self> {
        let endpoint = format!("http://{}", listener.local_addr()?);
        let server = Arc::new(Server::from_listener(listener, None).map_err(std::io::Error::other)?);
        let stop = Arc::new(AtomicBool::new(false));
        let thread = {
            let server = server.clone();
            let stop = stop.clone();
            let agent = Arc::downgrade(agent);
            let token = token.to_string();
            thread::spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    let Ok(Some(request)) = server.recv_timeout(Duration::from_millis(100)) else {
                        continue;
                    };
                    let (agent, token, stop) = (agent.clone(), token.clone(), stop.clone());
                    thread::spawn(move || handle(agent, &token, stop, request));
                }
            })
        };
        Ok(Self {
            server,
            stop,
            thread: Some(thread),
            endpoint,
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

impl Drop for ApiServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
