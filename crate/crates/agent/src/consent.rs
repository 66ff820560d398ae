//! Holder-side consent. Every received offer or proof request becomes a
//! [`PendingItem`] handed to the agent's [`Consent`] callback, which approves,
//! declines or defers it to the pending queue (answered later through the
//! messaging API or a prompt).

use serde::{Deserialize, Serialize};

use healthreg_core::credential::RequestedCredential;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PendingKind {
    Offer,
    ProofRequest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingItem {
    pub thread_id: String,
    pub kind: PendingKind,
    pub connection_id: String,
    /// Label of the issuer or verifier, as given during the connection.
    pub peer_label: String,
    pub schema_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cred_def_id: Option<String>,
    /// Offered attributes, or the requested ones across all items.
    pub attribute_names: Vec<String>,
    /// For proof requests: the request items and, per item, the ids of the
    /// wallet credentials that can answer it.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub requested: Vec<RequestedCredential>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<Vec<String>>,
    /// Unix time in milliseconds.
    pub received_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConsentDecision {
    /// For proof requests, optionally one credential id per requested item;
    /// `None` picks the first candidate of each.
    Approve(Option<Vec<String>>),
    Decline,
    Defer,
}

pub trait Consent: Send + Sync {
    fn decide(&self, item: &PendingItem) -> ConsentDecision;
}

impl<F> Consent for F
where
    F: Fn(&PendingItem) -> ConsentDecision + Send + Sync,
{
    fn decide(&self, item: &PendingItem) -> ConsentDecision {
        self(item)
    }
}

/// Fixed policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsentPolicy {
    ApproveAll,
    DeclineAll,
    /// Queue everything for an explicit approve/decline call.
    Queue,
}

impl Consent for ConsentPolicy {
    fn decide(&self, _: &PendingItem) -> ConsentDecision {
        match self {
            ConsentPolicy::ApproveAll => ConsentDecision::Approve(None),
            ConsentPolicy::DeclineAll => ConsentDecision::Decline,
            ConsentPolicy::Queue => ConsentDecision::Defer,
        }
    }
}
