//! Core data model for a self-sovereign health registry: canonical
//! encoding, keys and DIDs, the public ledger state machine, salted-hash
//! credentials with selective disclosure, and the encrypted wallet.

pub mod bytes;
pub mod canonical;
pub mod credential;
pub mod crypto;
pub mod did;
pub mod ledger;
pub mod wallet;
pub mod workload;

pub use bytes::{Digest, Nonce, PublicKey, Salt, Signature};
pub use crypto::KeyPair;
pub use did::{generate_did, Did, DidError};
