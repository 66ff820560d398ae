//! Protocol messages and invitations.

use serde::{Deserialize, Serialize};

use healthreg_core::credential::{Credential, Presentation, ProofRequest, VerificationReport};
use healthreg_core::bytes::{b64_decode, b64_encode};
use healthreg_core::{canonical, Did, Digest, PublicKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageKind {
    Invitation,
    ExchangeRequest,
    ExchangeResponse,
    CredOffer,
    CredRequest,
    CredIssue,
    ProofRequest,
    ProofPresentation,
    Ack,
    ProblemReport,
}

impl MessageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::Invitation => "INVITATION",
            MessageKind::ExchangeRequest => "EXCHANGE_REQUEST",
            MessageKind::ExchangeResponse => "EXCHANGE_RESPONSE",
            MessageKind::CredOffer => "CRED_OFFER",
            MessageKind::CredRequest => "CRED_REQUEST",
            MessageKind::CredIssue => "CRED_ISSUE",
            MessageKind::ProofRequest => "PROOF_REQUEST",
            MessageKind::ProofPresentation => "PROOF_PRESENTATION",
            MessageKind::Ack => "ACK",
            MessageKind::ProblemReport => "PROBLEM_REPORT",
        }
    }
}

impl std::fmt::Display for MessageKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const INVITATION_URL_PREFIX: &str = "healthreg://invite?c=";

/// Out-of-band connection offer. The key is fresh per invitation and only
/// used to receive EXCHANGE_REQUESTs and sign the EXCHANGE_RESPONSE.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Invitation {
    pub invitation_id: String,
    pub fingerprint: Digest,
    pub label: String,
    pub key: PublicKey,
    pub endpoint: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed invitation: {0}")]
pub struct InvitationError(pub String);

impl Invitation {
    pub fn to_url(&self) -> String {
        let json = canonical::to_vec(self).expect("no floats");
        format!("{INVITATION_URL_PREFIX}{}", b64_encode(&json))
    }

    pub fn from_url(url: &str) -> Result<Self, InvitationError> {
        let encoded = url
            .strip_prefix(INVITATION_URL_PREFIX)
            .ok_or_else(|| InvitationError("missing URL prefix".into()))?;
        let json = b64_decode(encoded).map_err(|e| InvitationError(e.to_string()))?;
        canonical::from_slice(&json).map_err(|e| InvitationError(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExchangeRequest {
    pub invitation_id: String,
    pub label: String,
    pub did: Did,
    pub key: PublicKey,
    pub endpoint: String,
    pub fingerprint: Digest,
}

/// Sent from the invitation key, which authenticates the inviter's new
/// pairwise identity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExchangeResponse {
    pub label: String,
    pub did: Did,
    pub key: PublicKey,
    pub endpoint: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CredOffer {
    pub cred_def_id: String,
    pub schema_id: String,
    pub attribute_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CredRequest {
    pub cred_def_id: String,
    pub holder_did: Did,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CredIssue {
    pub credential: Credential,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofRequestBody {
    pub request: ProofRequest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofPresentationBody {
    pub presentation: Presentation,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<VerificationReport>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemReport {
    pub code: String,
    #[serde(default)]
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "body", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Payload {
    Invitation(Invitation),
    ExchangeRequest(ExchangeRequest),
    ExchangeResponse(ExchangeResponse),
    CredOffer(CredOffer),
    CredRequest(CredRequest),
    CredIssue(CredIssue),
    ProofRequest(ProofRequestBody),
    ProofPresentation(ProofPresentationBody),
    Ack(Ack),
    ProblemReport(ProblemReport),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolMessage {
    pub thread_id: String,
    #[serde(flatten)]
    pub payload: Payload,
}

impl ProtocolMessage {
    pub fn new(thread_id: impl Into<String>, payload: Payload) -> Self {
        Self {
            thread_id: thread_id.into(),
            payload,
        }
    }

    pub fn problem(thread_id: impl Into<String>, code: &str, detail: impl Into<String>) -> Self {
        Self::new(
            thread_id,
            Payload::ProblemReport(ProblemReport {
                code: code.into(),
                detail: detail.into(),
            }),
        )
    }

    pub fn kind(&self) -> MessageKind {
        match &self.payload {
            Payload::Invitation(_) => MessageKind::Invitation,
            Payload::ExchangeRequest(_) => MessageKind::ExchangeRequest,
            Payload::ExchangeResponse(_) => MessageKind::ExchangeResponse,
            Payload::CredOffer(_) => MessageKind::CredOffer,
            Payload::CredRequest(_) => MessageKind::CredRequest,
            Payload::CredIssue(_) => MessageKind::CredIssue,
            Payload::ProofRequest(_) => MessageKind::ProofRequest,
            Payload::ProofPresentation(_) => MessageKind::ProofPresentation,
            Payload::Ack(_) => MessageKind::Ack,
            Payload::ProblemReport(_) => MessageKind::ProblemReport,
        }
    }

    pub fn digest(&self) -> Digest {
        healthreg_core::crypto::sha256(&canonical::to_vec(self).expect("no floats"))
    }
}
