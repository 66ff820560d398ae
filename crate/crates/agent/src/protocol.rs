//! Per-thread protocol automata. Pure: the agent consults [`on_receive`]
//! before acting on any inbound message and answers kinds that have no
//! transition with PROBLEM_REPORT `OUT_OF_ORDER`.

use serde::{Deserialize, Serialize};

use crate::message::MessageKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Flow {
    Connection,
    Issuance,
    Presentation,
}

/// Which end of a thread this agent is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Side {
    /// Sent the first message: the invitee, issuer or verifier.
    Opener,
    /// The inviter, holder or prover.
    Receiver,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stage {
    // connection
    ExchangeSent,
    ResponseSent,
    // issuance
    OfferSent,
    OfferReceived,
    RequestSent,
    CredentialSent,
    // presentation
    ProofRequested,
    RequestReceived,
    PresentationSent,
    // terminal
    Complete,
    Abandoned,
}

impl Stage {
    pub fn is_terminal(self) -> bool {
        matches!(self, Stage::Complete | Stage::Abandoned)
    }
}

/// Stage a thread enters when this agent opens it.
pub fn initial(flow: Flow) -> Stage {
    match flow {
        Flow::Connection => Stage::ExchangeSent,
        Flow::Issuance => Stage::OfferSent,
        Flow::Presentation => Stage::ProofRequested,
    }
}

/// Stage after receiving `kind` in `stage` (`None`: thread unknown here),
/// or `None` when `kind` is out of order.
pub fn on_receive(flow: Flow, side: Side, stage: Option<Stage>, kind: MessageKind) -> Option<Stage> {
    use MessageKind as K;
    use Stage as S;
    if kind == K::ProblemReport {
        return match stage {
            Some(s) if !s.is_terminal() => Some(S::Abandoned),
            _ => None,
        };
    }
    match (flow, side, stage, kind) {
        (Flow::Connection, Side::Opener, Some(S::ExchangeSent), K::ExchangeResponse) => Some(S::Complete),
        (Flow::Connection, Side::Receiver, None, K::ExchangeRequest) => Some(S::ResponseSent),
        (Flow::Connection, Side::Receiver, Some(S::ResponseSent), K::Ack) => Some(S::Complete),

        (Flow::Issuance, Side::Opener, Some(S::OfferSent), K::CredRequest) => Some(S::CredentialSent),
        (Flow::Issuance, Side::Opener, Some(S::CredentialSent), K::Ack) => Some(S::Complete),
        (Flow::Issuance, Side::Receiver, None, K::CredOffer) => Some(S::OfferReceived),
        (Flow::Issuance, Side::Receiver, Some(S::RequestSent), K::CredIssue) => Some(S::Complete),

        (Flow::Presentation, Side::Opener, Some(S::ProofRequested), K::ProofPresentation) => Some(S::Complete),
        (Flow::Presentation, Side::Receiver, None, K::ProofRequest) => Some(S::RequestReceived),
        (Flow::Presentation, Side::Receiver, Some(S::PresentationSent), K::Ack) => Some(S::Complete),
        _ => None,
    }
}

/// Stage after the local consent decision on a receiving thread.
pub fn on_consent(stage: Stage, approved: bool) -> Option<Stage> {
    match (stage, approved) {
        (Stage::OfferReceived, true) => Some(Stage::RequestSent),
        (Stage::RequestReceived, true) => Some(Stage::PresentationSent),
        (Stage::OfferReceived | Stage::RequestReceived, false) => Some(Stage::Abandoned),
        _ => None,
    }
}

/// Flow a thread-opening message belongs to.
pub fn flow_opened_by(kind: MessageKind) -> Option<Flow> {
    match kind {
        MessageKind::ExchangeRequest => Some(Flow::Connection),
        MessageKind::CredOffer => Some(Flow::Issuance),
        MessageKind::ProofRequest => Some(Flow::Presentation),
        _ => None,
    }
}

/// Message kinds of one complete issuance, from invitation to the storage
/// acknowledgement, as seen on the wire.
pub const ISSUANCE_PATH: [MessageKind; 8] = [
    MessageKind::Invitation,
    MessageKind::ExchangeRequest,
    MessageKind::ExchangeResponse,
    MessageKind::Ack,
    MessageKind::CredOffer,
    MessageKind::CredRequest,
    MessageKind::CredIssue,
    MessageKind::Ack,
];

/// Message kinds of one complete proof exchange over an existing
/// connection.
pub const PRESENTATION_PATH: [MessageKind; 3] =
    [MessageKind::ProofRequest, MessageKind::ProofPresentation, MessageKind::Ack];

/// Replays (sender, kind) steps through both ends of a `flow` thread, with
/// the receiver consenting at once, and reports whether both ends finish in
/// `Complete`.
pub fn is_complete_path(flow: Flow, steps: &[(Side, MessageKind)]) -> bool {
    let Some(&(Side::Opener, first)) = steps.first() else {
        return false;
    };
    if flow_opened_by(first) != Some(flow) {
        return false;
    }
    let mut opener = Some(initial(flow));
    let mut receiver: Option<Stage> = None;
    for &(sender, kind) in steps {
        let (side, stage) = match sender {
            Side::Opener => (Side::Receiver, &mut receiver),
            Side::Receiver => (Side::Opener, &mut opener),
        };
        let Some(mut next) = on_receive(flow, side, *stage, kind) else {
            return false;
        };
        if let Some(after) = on_consent(next, true) {
            next = after;
        }
        *stage = Some(next);
    }
    opener == Some(Stage::Complete) && receiver == Some(Stage::Complete)
}
