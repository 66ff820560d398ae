//! HTTP transport. Client endpoint routes:
//!
//! - `POST /submit`: body `LedgerTransaction` → `Receipt`, or an error body
//!   `{"error": CODE, ...}`. Header `x-forwarded: 1` marks a follower's
//!   forward; such submits are never forwarded again.
//! - `POST /read`: body `Query` → `Resolved`, or 404 `{"error":"NOT_FOUND"}`.
//! - `GET /status` → `NodeStatus`.
//! - `POST /promote`: body `{"view": k}` → `NodeStatus`.
//!
//! Replication endpoint: `POST /replicate` with a `ReplicationMessage` body,
//! answered by one.

use std::net::TcpListener;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use healthreg_core::ledger::{LedgerRead, LedgerTransaction, Query, ReadError, Resolved};
use serde::{Deserialize, Serialize};
use tiny_http::{Header, Method, Request, Response, Server};

use crate::client::{LedgerClient, NodeStatus, Receipt, SubmitError};
use crate::genesis::{socket_addr_of, GenesisNode};
use crate::message::ReplicationMessage;
use crate::node::{Node, Transport};
use crate::NodeError;

const SYNC_INTERVAL: Duration = Duration::from_millis(500);

fn http_agent(timeout: Duration) -> ureq::Agent {
    // no pooling: a crashed peer must fail fast on a fresh connect instead
    // of stalling on a dead keep-alive socket
    ureq::AgentBuilder::new()
        .timeout_connect(Duration::from_millis(500))
        .timeout(timeout)
        .max_idle_connections(0)
        .build()
}

fn url(base: &str, path: &str) -> String {
    format!("{}{path}", base.trim_end_matches('/'))
}

fn submit_error_status(e: &SubmitError) -> u16 {
    match e {
        SubmitError::Rejected(_) => 422,
        SubmitError::NoQuorum { .. } => 503,
        SubmitError::NotLeaderRedirect { .. } => 409,
        SubmitError::PeerUnavailable { .. } => 502,
        SubmitError::GenesisMismatch => 409,
        SubmitError::BadRequest { .. } => 400,
    }
}

fn decode_submit_error(resp: ureq::Response) -> SubmitError {
    let status = resp.status();
    let body = resp.into_string().unwrap_or_default();
    serde_json::from_str(&body).unwrap_or_else(|_| SubmitError::PeerUnavailable {
        detail: format!("HTTP {status}: {body}"),
    })
}

fn transport_error(e: ureq::Error) -> SubmitError {
    match e {
        ureq::Error::Status(_, resp) => decode_submit_error(resp),
        ureq::Error::Transport(t) => SubmitError::PeerUnavailable { detail: t.to_string() },
    }
}

/// Node-to-node transport over HTTP.
pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Arc<Self> {
        Arc::new(Self {
            agent: http_agent(timeout),
        })
    }
}

impl Transport for HttpTransport {
    fn replicate(&self, to: &GenesisNode, msg: &ReplicationMessage) -> Result<ReplicationMessage, String> {
        self.agent
            .post(&url(&to.replication_endpoint, "/replicate"))
            .send_json(msg)
            .map_err(|e| e.to_string())?
            .into_json()
            .map_err(|e| e.to_string())
    }

    fn forward_submit(&self, to: &GenesisNode, tx: &LedgerTransaction) -> Result<Receipt, SubmitError> {
        self.agent
            .post(&url(&to.client_endpoint, "/submit"))
            .set("x-forwarded", "1")
            .send_json(tx)
            .map_err(transport_error)?
            .into_json()
            .map_err(|e| SubmitError::PeerUnavailable { detail: e.to_string() })
    }
}

/// Ledger client over the client endpoints of a list of nodes. Requests go
/// to the first node that answers.
pub struct HttpLedgerClient {
    endpoints: Vec<String>,
    agent: ureq::Agent,
}

impl HttpLedgerClient {
    pub fn new(endpoints: Vec<String>) -> Self {
        Self {
            endpoints,
            agent: http_agent(Duration::from_secs(10)),
        }
    }

    fn call<T: serde::de::DeserializeOwned>(
        &self,
        method: &str,
        path: &str,
        body: Option<serde_json::Value>,
    ) -> Result<T, SubmitError> {
        let mut last = SubmitError::PeerUnavailable {
            detail: "no endpoints configured".into(),
        };
        for endpoint in &self.endpoints {
            let request = self.agent.request(method, &url(endpoint, path));
            let result = match &body {
                Some(b) => request.send_json(b.clone()),
                None => request.call(),
            };
            match result {
                Ok(resp) => {
                    return resp
                        .into_json()
                        .map_err(|e| SubmitError::PeerUnavailable { detail: e.to_string() })
                }
                Err(ureq::Error::Status(_, resp)) => return Err(decode_submit_error(resp)),
                Err(e) => last = transport_error(e),
            }
        }
        Err(last)
    }

    pub fn promote(&self, view: u64) -> Result<NodeStatus, SubmitError> {
        self.call("POST", "/promote", Some(serde_json::json!({ "view": view })))
    }
}

impl LedgerRead for HttpLedgerClient {
    fn resolve(&self, query: &Query) -> Result<Resolved, ReadError> {
        let mut last = "no endpoints configured".to_string();
        for endpoint in &self.endpoints {
            match self.agent.post(&url(endpoint, "/read")).send_json(query) {
                Ok(resp) => return resp.into_json().map_err(|e| ReadError::Unavailable(e.to_string())),
                Err(ureq::Error::Status(404, _)) => return Err(ReadError::NotFound),
                Err(ureq::Error::Status(code, resp)) => {
                    return Err(ReadError::Unavailable(format!(
                        "HTTP {code}: {}",
                        resp.into_string().unwrap_or_default()
                    )))
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(ReadError::Unavailable(last))
    }
}

impl LedgerClient for HttpLedgerClient {
    fn submit(&self, tx: LedgerTransaction) -> Result<Receipt, SubmitError> {
        self.call("POST", "/submit", Some(serde_json::to_value(&tx).expect("serializable")))
    }

    fn status(&self) -> Result<NodeStatus, SubmitError> {
        self.call("GET", "/status", None)
    }
}

#[derive(Serialize, Deserialize)]
struct PromoteBody {
    view: u64,
}

fn json_response<T: Serialize>(status: u16, body: &T) -> Response<std::io::Cursor<Vec<u8>>> {
    let bytes = serde_json::to_vec(body).expect("serializable");
    Response::from_data(bytes)
        .with_status_code(status)
        .with_header(Header::from_bytes("content-type", "application/json").expect("static header"))
}

fn read_body<T: serde::de::DeserializeOwned>(request: &mut Request) -> Result<T, SubmitError> {
    let mut body = Vec::new();
    request
        .as_reader()
        .read_to_end(&mut body)
        .map_err(|e| SubmitError::BadRequest { detail: e.to_string() })?;
    serde_json::from_slice(&body).map_err(|e| SubmitError::BadRequest { detail: e.to_string() })
}

fn respond(request: Request, result: Result<impl Serialize, SubmitError>) {
    let response = match result {
        Ok(body) => json_response(200, &body),
        Err(e) => json_response(submit_error_status(&e), &e),
    };
    let _ = request.respond(response);
}

fn handle_client(node: &Node, mut request: Request) {
    let path = request.url().split('?').next().unwrap_or("").to_string();
    match (request.method().clone(), path.as_str()) {
        (Method::Post, "/submit") => {
            let forwarded = request
                .headers()
                .iter()
                .any(|h| h.field.equiv("x-forwarded") && h.value.as_str() == "1");
            let result = read_body::<LedgerTransaction>(&mut request).and_then(|tx| {
                if forwarded {
                    node.submit_forwarded(tx)
                } else {
                    node.submit(tx)
                }
            });
            respond(request, result);
        }
        (Method::Post, "/read") => match read_body::<Query>(&mut request) {
            Ok(query) => match node.read(&query) {
                Ok(resolved) => respond(request, Ok(resolved)),
                Err(_) => {
                    let _ = request.respond(json_response(404, &serde_json::json!({ "error": "NOT_FOUND" })));
                }
            },
            Err(e) => respond(request, Err::<(), _>(e)),
        },
        (Method::Get, "/status") => respond(request, Ok(node.status())),
        (Method::Post, "/promote") => {
            let result = read_body::<PromoteBody>(&mut request).and_then(|b| node.promote(b.view));
            respond(request, result);
        }
        _ => {
            let _ = request.respond(json_response(404, &serde_json::json!({ "error": "NOT_FOUND" })));
        }
    }
}

fn handle_replication(node: &Node, mut request: Request) {
    if request.method() != &Method::Post || request.url() != "/replicate" {
        let _ = request.respond(json_response(404, &serde_json::json!({ "error": "NOT_FOUND" })));
        return;
    }
    match read_body::<ReplicationMessage>(&mut request) {
        Ok(msg) => {
            let reply = node.handle(msg);
            let _ = request.respond(json_response(200, &reply));
        }
        Err(e) => respond(request, Err::<(), _>(e)),
    }
}

fn bind(endpoint: &str) -> Result<TcpListener, NodeError> {
    let addr = socket_addr_of(endpoint).ok_or_else(|| NodeError::EndpointBusy(endpoint.to_string()))?;
    TcpListener::bind(addr).map_err(|e| match e.kind() {
        std::io::ErrorKind::AddrInUse => NodeError::EndpointBusy(endpoint.to_string()),
        _ => NodeError::Io(e),
    })
}

/// A node serving its client and replication endpoints, plus a background
/// catch-up loop for followers.
pub struct NodeServer {
    node: Arc<Node>,
    servers: Vec<Arc<Server>>,
    threads: Vec<JoinHandle<()>>,
    stop: Arc<AtomicBool>,
}

impl NodeServer {
    /// Binds the endpoints listed for this node in the genesis file.
    pub fn start(node: Arc<Node>) -> Result<Self, NodeError> {
        let own = node.genesis().node(node.name()).expect("validated at open").clone();
        let replication = bind(&own.replication_endpoint)?;
        let client = bind(&own.client_endpoint)?;
        Self::start_on(node, replication, client)
    }

    pub fn start_on(node: Arc<Node>, replication: TcpListener, client: TcpListener) -> Result<Self, NodeError> {
        let stop = Arc::new(AtomicBool::new(false));
        let mut servers = Vec::new();
        let mut threads = Vec::new();
        let handlers: [(TcpListener, fn(&Node, Request)); 2] =
            [(replication, handle_replication), (client, handle_client)];
        for (listener, handler) in handlers {
            let server = Arc::new(
                Server::from_listener(listener, None).map_err(|e| NodeError::Io(std::io::Error::other(e.to_string())))?,
            );
            servers.push(server.clone());
            let node = node.clone();
            threads.push(thread::spawn(move || {
                while let Ok(request) = server.recv() {
                    let node = node.clone();
                    thread::spawn(move || handler(&node, request));
                }
            }));
        }
        {
            let (node, stop) = (node.clone(), stop.clone());
            threads.push(thread::spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    thread::sleep(SYNC_INTERVAL);
                    if let Err(e) = node.sync_with_leader() {
                        log::debug!("{}: periodic sync: {e}", node.name());
                    }
                }
            }));
        }
        log::info!("{}: serving", node.name());
        Ok(Self {
            node,
            servers,
            threads,
            stop,
        })
    }

    pub fn node(&self) -> &Arc<Node> {
        &self.node
    }

    /// Stops serving and waits for the accept loops to exit. Dropping the
    /// returned node handle releases its wallet and data directory.
    pub fn shutdown(mut self) -> Arc<Node> {
        self.stop_threads();
        self.node.clone()
    }

    fn stop_threads(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for server in &self.servers {
            server.unblock();
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        self.servers.clear();
    }
}

impl Drop for NodeServer {
    fn drop(&mut self) {
        self.stop_threads();
    }
}
