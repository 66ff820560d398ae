//! Envelope delivery between agents: an in-process hub for harnesses and
//! direct HTTP POSTs to `<endpoint>/inbox` with retry.

use std::collections::HashMap;
use std::io::Read;
use std::net::TcpListener;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

/// Accepts raw envelope bytes for one agent.
pub type Inbox = Arc<dyn Fn(Vec<u8>) + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("delivery to {endpoint} failed: {detail}")]
pub struct DeliveryError {
    pub endpoint: String,
    pub detail: String,
}

pub trait Wire: Send + Sync {
    fn deliver(&self, endpoint: &str, bytes: Vec<u8>) -> Result<(), DeliveryError>;
}

/// What a [`LocalHub`] filter sees for each delivery.
#[derive(Debug, Clone, Copy)]
pub struct Transit<'a> {
    /// Position among all deliveries through the hub.
    pub index: usize,
    pub to: &'a str,
}

pub type Filter = Box<dyn FnMut(Transit<'_>, &mut Vec<u8>) -> bool + Send>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Captured {
    pub to: String,
    pub bytes: Vec<u8>,
}

/// In-process transport. Every envelope is recorded as sent; an optional
/// filter may rewrite it or drop it (by returning `false`) before it
/// reaches the recipient's inbox.
#[derive(Default)]
pub struct LocalHub {
    inboxes: Mutex<HashMap<String, Inbox>>,
    captured: Mutex<Vec<Captured>>,
    filter: Mutex<Option<Filter>>,
}

impl LocalHub {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn register(&self, endpoint: &str, inbox: Inbox) {
        self.inboxes.lock().unwrap().insert(endpoint.to_string(), inbox);
    }

    pub fn unregister(&self, endpoint: &str) {
        self.inboxes.lock().unwrap().remove(endpoint);
    }

    pub fn set_filter(&self, filter: Option<Filter>) {
        *self.filter.lock().unwrap() = filter;
    }

    /// Every envelope sent so far, as the sender produced it.
    pub fn captured(&self) -> Vec<Captured> {
        self.captured.lock().unwrap().clone()
    }

    pub fn clear_captured(&self) {
        self.captured.lock().unwrap().clear();
    }
}

impl Wire for LocalHub {
    fn deliver(&self, endpoint: &str, mut bytes: Vec<u8>) -> Result<(), DeliveryError> {
        let index = {
            let mut captured = self.captured.lock().unwrap();
            captured.push(Captured {
                to: endpoint.to_string(),
                bytes: bytes.clone(),
            });
            captured.len() - 1
        };
        let inbox = self.inboxes.lock().unwrap().get(endpoint).cloned().ok_or_else(|| DeliveryError {
            endpoint: endpoint.to_string(),
            detail: "no agent at this endpoint".into(),
        })?;
        if let Some(filter) = self.filter.lock().unwrap().as_mut() {
            if !filter(Transit { index, to: endpoint }, &mut bytes) {
                log::debug!("hub dropped delivery {index} to {endpoint}");
                return Ok(());
            }
        }
        inbox(bytes);
        Ok(())
    }
}

/// POSTs envelopes to `<endpoint>/inbox`, retrying with the given backoff.
pub struct HttpWire {
    agent: ureq::Agent,
    backoff: Vec<Duration>,
}

impl HttpWire {
    /// One attempt plus one retry per `backoff` entry.
    pub fn new(timeout: Duration, backoff: Vec<Duration>) -> Arc<Self> {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        Arc::new(Self { agent, backoff })
    }

    /// Retries after 1 s, 2 s and 4 s.
    pub fn standard() -> Arc<Self> {
        Self::new(
            Duration::from_secs(5),
            vec![Duration::from_secs(1), Duration::from_secs(2), Duration::from_secs(4)],
        )
    }
}

impl Wire for HttpWire {
    fn deliver(&self, endpoint: &str, bytes: Vec<u8>) -> Result<(), DeliveryError> {
        let url = format!("{}/inbox", endpoint.trim_end_matches('/'));
        let mut last = String::new();
        for attempt in 0..=self.backoff.len() {
            if attempt > 0 {
                thread::sleep(self.backoff[attempt - 1]);
            }
            match self.agent.post(&url).set("content-type", "application/json").send_bytes(&bytes) {
                Ok(_) => return Ok(()),
                // the recipient answered; retrying would not change its mind
                Err(ureq::Error::Status(code, _)) if (400..500).contains(&code) => {
                    return Err(DeliveryError {
                        endpoint: endpoint.to_string(),
                        detail: format!("HTTP {code}"),
                    })
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(DeliveryError {
            endpoint: endpoint.to_string(),
            detail: last,
        })
    }
}

const MAX_ENVELOPE: u64 = 4 << 20;

/// Serves `POST /inbox` and hands the body to `inbox` without waiting for it
/// to be processed.
pub struct InboxServer {
    server: Arc<tiny_http::Server>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
    endpoint: String,
}

impl InboxServer {
    pub fn start(listener: TcpListener, inbox: Inbox) -> std::io::Result<Self> {
        let endpoint = format!("http://{}", listener.local_addr()?);
        let server = Arc::new(tiny_http::Server::from_listener(listener, None).map_err(std::io::Error::other)?);
        let stop = Arc::new(AtomicBool::new(false));
        let thread = {
            let server = server.clone();
            let stop = stop.clone();
            thread::spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    let Ok(Some(mut request)) = server.recv_timeout(Duration::from_millis(100)) else {
                        continue;
                    };
                    let status = if request.method() != &tiny_http::Method::Post || request.url() != "/inbox" {
                        404
                    } else {
                        let mut body = Vec::new();
                        match request.as_reader().take(MAX_ENVELOPE).read_to_end(&mut body) {
                            Ok(_) => {
                                inbox(body);
                                202
                            }
                            Err(_) => 400,
                        }
                    };
                    let _ = request.respond(tiny_http::Response::empty(status));
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

impl Drop for InboxServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
