//! Append-only log of agent state changes, streamed to UIs.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use healthreg_core::credential::Verdict;

use crate::message::MessageKind;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    MessageSent { kind: MessageKind },
    MessageReceived { kind: MessageKind },
    InvitationCreated { invitation_id: String },
    ConnectionState { connection_id: String, state: String },
    PendingAdded { pending: String },
    PendingResolved,
    ConsentApproved,
    ConsentDeclined,
    CredentialIssued { credential_id: String, index: u32 },
    CredentialStored { credential_id: String },
    PresentationSent,
    VerificationCompleted { verdict: Verdict, failed: Vec<String> },
    ProblemSent { code: String },
    ProblemReceived { code: String },
    EnvelopeRejected { detail: String },
    Revoked { credential_id: String, seq_no: u64 },
    LedgerWrite { tx_type: String, seq_no: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thread_id: Option<String>,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Default)]
pub struct EventLog {
    events: Mutex<Vec<Event>>,
    grew: Condvar,
}

impl EventLog {
    pub fn push(&self, thread_id: Option<&str>, kind: EventKind) {
        let mut events = self.events.lock().unwrap();
        let seq = events.len() as u64;
        events.push(Event {
            seq,
            thread_id: thread_id.map(str::to_string),
            kind,
        });
        self.grew.notify_all();
    }

    /// Events with `seq >= since`.
    pub fn since(&self, since: u64) -> Vec<Event> {
        let events = self.events.lock().unwrap();
        events.get(since as usize..).map(<[Event]>::to_vec).unwrap_or_default()
    }

    /// Like [`since`](Self::since) but blocks up to `timeout` for at least
    /// one event.
    pub fn wait_since(&self, since: u64, timeout: Duration) -> Vec<Event> {
        let events = self.events.lock().unwrap();
        let (events, _) = self
            .grew
            .wait_timeout_while(events, timeout, |e| e.len() as u64 <= since)
            .unwrap();
        events.get(since as usize..).map(<[Event]>::to_vec).unwrap_or_default()
    }

    pub fn len(&self) -> u64 {
        self.events.lock().unwrap().len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Checks that every CREDENTIAL_STORED and PRESENTATION_SENT event follows a
/// CONSENT_APPROVED event on the same thread.
pub fn consent_gate_holds(events: &[Event]) -> bool {
    let mut approved = std::collections::HashSet::new();
    for e in events {
        match &e.kind {
            EventKind::ConsentApproved => {
                approved.insert(e.thread_id.clone());
            }
            EventKind::CredentialStored { .. } | EventKind::PresentationSent => {
                if !approved.contains(&e.thread_id) {
                    return false;
                }
            }
            _ => {}
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wire_shape() {
        let log = EventLog::default();
        log.push(Some("t1"), EventKind::MessageSent { kind: MessageKind::CredOffer });
        let v = serde_json::to_value(&log.since(0)[0]).unwrap();
        assert_eq!(v, serde_json::json!({"seq": 0, "thread_id": "t1", "event": "MESSAGE_SENT", "kind": "CRED_OFFER"}));
    }

    #[test]
    fn gate_detects_unapproved_storage() {
        let log = EventLog::default();
        log.push(Some("a"), EventKind::ConsentApproved);
        log.push(Some("a"), EventKind::CredentialStored { credential_id: "c".into() });
        assert!(consent_gate_holds(&log.since(0)));
        log.push(Some("b"), EventKind::PresentationSent);
        assert!(!consent_gate_holds(&log.since(0)));
    }

    #[test]
    fn wait_returns_on_timeout_without_events() {
        let log = EventLog::default();
        assert!(log.wait_since(0, Duration::from_millis(10)).is_empty());
    }
}
