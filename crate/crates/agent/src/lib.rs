//! Peer-to-peer SSI agents: pairwise connections over encrypted envelopes,
//! credential issuance and presentation with holder consent, QR payloads
//! for out-of-band exchange, and the local messaging API a wallet UI talks
//! to.

pub mod agent;
pub mod api;
pub mod consent;
pub mod envelope;
pub mod events;
pub mod message;
pub mod protocol;
pub mod qr;
pub mod records;
pub mod wire;

pub use agent::{
    credential_id, parse_invitation, Agent, AgentConfig, AgentError, CredDefView, CredentialView, InvitationView, Outcome,
    Problem, QrPresentation, StoredCredential, DEFAULT_FLOW_TIMEOUT,
};
pub use consent::{Consent, ConsentDecision, ConsentPolicy, PendingItem, PendingKind};
pub use events::{Event, EventKind, EventLog};
pub use message::{Invitation, MessageKind, Payload, ProtocolMessage};
pub use records::{Connection, ConnectionState, ConnectionView};
pub use api::ApiServer;
pub use wire::{HttpWire, InboxServer, LocalHub, Wire};
