//! Wallet record bodies owned by the agent.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use healthreg_core::{Did, KeyPair, Nonce, PublicKey};

use crate::message::Invitation;

pub const PUBLIC_DID_RECORD: &str = "public-did";
pub const NONCE_LOG_RECORD: &str = "nonce-log";

pub fn connection_record_id(connection_id: &str) -> String {
    format!("connection:{connection_id}")
}

pub fn invitation_record_id(invitation_id: &str) -> String {
    format!("invitation:{invitation_id}")
}

pub fn issuer_record_id(cred_def_id: &str) -> String {
    format!("issuer:{cred_def_id}")
}

pub fn credential_record_id(credential_id: &str) -> String {
    format!("credential:{credential_id}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ConnectionState {
    Invited,
    Requested,
    Complete,
}

impl ConnectionState {
    pub fn as_str(self) -> &'static str {
        match self {
            ConnectionState::Invited => "INVITED",
            ConnectionState::Requested => "REQUESTED",
            ConnectionState::Complete => "COMPLETE",
        }
    }
}

/// One pairwise relationship. `their_key` is the invitation key until the
/// inviter's EXCHANGE_RESPONSE names its pairwise key.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Connection {
    pub connection_id: String,
    pub alias: String,
    pub my_did: Did,
    pub my_keys: KeyPair,
    #[serde(default)]
    pub their_did: Option<Did>,
    pub their_key: PublicKey,
    pub their_endpoint: String,
    pub state: ConnectionState,
    pub invitation_id: String,
}

/// What the messaging API shows for a connection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectionView {
    pub connection_id: String,
    pub alias: String,
    pub my_did: Did,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub their_did: Option<Did>,
    pub state: ConnectionState,
}

impl From<&Connection> for ConnectionView {
    fn from(c: &Connection) -> Self {
        Self {
            connection_id: c.connection_id.clone(),
            alias: c.alias.clone(),
            my_did: c.my_did.clone(),
            their_did: c.their_did.clone(),
            state: c.state,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvitationRecord {
    pub invitation: Invitation,
    pub keys: KeyPair,
    #[serde(default)]
    pub expired: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PublicIdentity {
    pub did: Did,
    pub keys: KeyPair,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssuedEntry {
    pub credential_id: String,
    pub index: u32,
    pub connection_id: String,
}

/// Issuer-side state for one cred-def: its issuance key and the revocation
/// index allocation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IssuerState {
    pub cred_def_id: String,
    pub schema_id: String,
    pub attribute_names: Vec<String>,
    pub issuance_keys: KeyPair,
    pub registry_id: String,
    pub capacity: u32,
    pub next_index: u32,
    #[serde(default)]
    pub issued: Vec<IssuedEntry>,
}

/// Verifier nonces already answered.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct NonceLog {
    pub consumed: BTreeSet<Nonce>,
}
