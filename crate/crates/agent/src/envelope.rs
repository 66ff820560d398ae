//! Sender-authenticated encryption of one [`ProtocolMessage`] for one
//! recipient key.
//!
//! Wire form, canonical JSON with base64url (unpadded) binary fields:
//!
//! ```text
//! {"ct":..,"epk":..,"kid":..,"nonce":..,"v":1}
//! ```
//!
//! * `kid`: first 16 bytes of SHA-256 over the recipient's Ed25519 key.
//! * `epk`: ephemeral X25519 public key.
//! * `nonce`: 24-byte XChaCha20-Poly1305 nonce.
//! * `ct`: ciphertext of canonical `{"message","sender_key","sig"}` under
//!   HKDF-SHA256(ikm = X25519(esk, recipient), salt = epk || recipient Ed25519
//!   key, info = "healthreg-envelope-v1"), with the canonical header
//!   `{"epk","kid","nonce","v"}` as associated data.
//!
//! `sig` is the sender's Ed25519 signature over
//! `"healthreg-envelope" || epk || recipient key || canonical(message)`, which
//! binds the sender to this exact envelope.

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{XChaCha20Poly1305, XNonce};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use healthreg_core::bytes::b64;
use healthreg_core::crypto::{self, sha256};
use healthreg_core::{canonical, KeyPair, PublicKey, Signature};

use crate::message::ProtocolMessage;

pub const ENVELOPE_VERSION: u8 = 1;
const HKDF_INFO: &[u8] = b"healthreg-envelope-v1";
const SIG_DOMAIN: &[u8] = b"healthreg-envelope";

pub type Kid = [u8; 16];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("envelope authentication failed: {0}")]
pub struct EnvelopeError(pub &'static str);

impl EnvelopeError {
    pub fn code(&self) -> &'static str {
        "ENVELOPE_AUTH_FAILURE"
    }
}

/// Routing hint for `key`.
pub fn kid_of(key: &PublicKey) -> Kid {
    let mut kid = [0u8; 16];
    kid.copy_from_slice(&sha256(key.as_bytes()).0[..16]);
    kid
}

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(with = "b64")]
    epk: Vec<u8>,
    #[serde(with = "b64")]
    kid: Vec<u8>,
    #[serde(with = "b64")]
    nonce: Vec<u8>,
    v: u8,
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    #[serde(with = "b64")]
    ct: Vec<u8>,
    #[serde(flatten)]
    header: Header,
}

#[derive(Serialize, Deserialize)]
struct Inner {
    message: ProtocolMessage,
    sender_key: PublicKey,
    sig: Signature,
}

fn signed_bytes(epk: &[u8], recipient: &PublicKey, message: &ProtocolMessage) -> Vec<u8> {
    let mut out = SIG_DOMAIN.to_vec();
    out.extend_from_slice(epk);
    out.extend_from_slice(recipient.as_bytes());
    out.extend_from_slice(&canonical::to_vec(message).expect("no floats"));
    out
}

fn derive_key(shared: &[u8; 32], epk: &[u8], recipient: &PublicKey) -> [u8; 32] {
    let mut salt = epk.to_vec();
    salt.extend_from_slice(recipient.as_bytes());
    let mut key = [0u8; 32];
    Hkdf::<Sha256>::new(Some(&salt), shared)
        .expand(HKDF_INFO, &mut key)
        .expect("32 bytes is a valid HKDF length");
    key
}

/// Encrypts `message` from `sender` to `recipient`. Returns the wire bytes.
pub fn seal<R: RngCore + CryptoRng + ?Sized>(
    sender: &KeyPair,
    recipient: &PublicKey,
    message: &ProtocolMessage,
    rng: &mut R,
) -> Result<Vec<u8>, EnvelopeError> {
    let their_x = crypto::x25519_public(recipient).ok_or(EnvelopeError("recipient key is not a curve point"))?;
    let mut esk_bytes = [0u8; 32];
    rng.fill_bytes(&mut esk_bytes);
    let esk = x25519_dalek::StaticSecret::from(esk_bytes);
    let epk = x25519_dalek::PublicKey::from(&esk).to_bytes();
    let shared = esk.diffie_hellman(&x25519_dalek::PublicKey::from(their_x));
    if !shared.was_contributory() {
        return Err(EnvelopeError("low-order recipient key"));
    }
    let key = derive_key(shared.as_bytes(), &epk, recipient);

    let mut nonce = [0u8; 24];
    rng.fill_bytes(&mut nonce);
    let header = Header {
        epk: epk.to_vec(),
        kid: kid_of(recipient).to_vec(),
        nonce: nonce.to_vec(),
        v: ENVELOPE_VERSION,
    };
    let aad = canonical::to_vec(&header).expect("no floats");
    let inner = Inner {
        message: message.clone(),
        sender_key: sender.public_key,
        sig: sender.sign(&signed_bytes(&epk, recipient, message)),
    };
    let plaintext = canonical::to_vec(&inner).expect("no floats");
    let ct = XChaCha20Poly1305::new((&key).into())
        .encrypt(XNonce::from_slice(&nonce), Payload { msg: &plaintext, aad: &aad })
        .map_err(|_| EnvelopeError("encryption failed"))?;
    Ok(canonical::to_vec(&Envelope { ct, header }).expect("no floats"))
}

/// Recipient hint of an envelope, without decrypting it.
pub fn peek_kid(bytes: &[u8]) -> Option<Kid> {
    let env: Envelope = serde_json::from_slice(bytes).ok()?;
    env.header.kid.try_into().ok()
}

/// Decrypts with `recipient` and authenticates the sender. Returns the
/// sender's static key and the message.
pub fn open(bytes: &[u8], recipient: &KeyPair) -> Result<(PublicKey, ProtocolMessage), EnvelopeError> {
    let env: Envelope = serde_json::from_slice(bytes).map_err(|_| EnvelopeError("unparseable envelope"))?;
    if canonical::to_vec(&env).ok().as_deref() != Some(bytes) {
        return Err(EnvelopeError("envelope is not canonical"));
    }
    let header = &env.header;
    if header.v != ENVELOPE_VERSION {
        return Err(EnvelopeError("unsupported envelope version"));
    }
    if header.kid != kid_of(&recipient.public_key) {
        return Err(EnvelopeError("not addressed to this key"));
    }
    let epk: [u8; 32] = header.epk.clone().try_into().map_err(|_| EnvelopeError("bad epk"))?;
    let nonce: [u8; 24] = header.nonce.clone().try_into().map_err(|_| EnvelopeError("bad nonce"))?;

    let secret = x25519_dalek::StaticSecret::from(recipient.x25519_secret());
    let shared = secret.diffie_hellman(&x25519_dalek::PublicKey::from(epk));
    if !shared.was_contributory() {
        return Err(EnvelopeError("low-order ephemeral key"));
    }
    let key = derive_key(shared.as_bytes(), &epk, &recipient.public_key);
    let aad = canonical::to_vec(header).expect("no floats");
    let plaintext = XChaCha20Poly1305::new((&key).into())
        .decrypt(XNonce::from_slice(&nonce), Payload { msg: &env.ct, aad: &aad })
        .map_err(|_| EnvelopeError("ciphertext does not authenticate"))?;
    let inner: Inner = serde_json::from_slice(&plaintext).map_err(|_| EnvelopeError("bad inner payload"))?;
    if !crypto::verify(
        &inner.sender_key,
        &signed_bytes(&epk, &recipient.public_key, &inner.message),
        &inner.sig,
    ) {
        return Err(EnvelopeError("sender signature does not verify"));
    }
    Ok((inner.sender_key, inner.message))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::message::{Ack, Payload as Body};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn msg() -> ProtocolMessage {
        ProtocolMessage::new("thread-1", Body::Ack(Ack::default()))
    }

    #[test]
    fn round_trip_authenticates_sender() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let alice = KeyPair::generate(&mut rng);
        let bob = KeyPair::generate(&mut rng);
        let wire = seal(&alice, &bob.public_key, &msg(), &mut rng).unwrap();
        let (sender, m) = open(&wire, &bob).unwrap();
        assert_eq!(sender, alice.public_key);
        assert_eq!(m, msg());
        assert_eq!(peek_kid(&wire), Some(kid_of(&bob.public_key)));
    }

    #[test]
    fn wrong_recipient_fails() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let alice = KeyPair::generate(&mut rng);
        let bob = KeyPair::generate(&mut rng);
        let eve = KeyPair::generate(&mut rng);
        let wire = seal(&alice, &bob.public_key, &msg(), &mut rng).unwrap();
        assert!(open(&wire, &eve).is_err());
    }

    #[test]
    fn every_single_byte_flip_is_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let alice = KeyPair::generate(&mut rng);
        let bob = KeyPair::generate(&mut rng);
        let wire = seal(&alice, &bob.public_key, &msg(), &mut rng).unwrap();
        for i in 0..wire.len() {
            let mut bad = wire.clone();
            bad[i] ^= 0x01;
            assert!(open(&bad, &bob).is_err(), "flip at {i} accepted");
        }
    }

    #[test]
    fn forged_sender_signature_fails() {
        // re-encrypt a valid inner payload whose sender_key was swapped
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let alice = KeyPair::generate(&mut rng);
        let mallory = KeyPair::generate(&mut rng);
        let bob = KeyPair::generate(&mut rng);
        let wire = seal(&alice, &bob.public_key, &msg(), &mut rng).unwrap();
        let env: Envelope = serde_json::from_slice(&wire).unwrap();
        let epk: [u8; 32] = env.header.epk.clone().try_into().unwrap();
        let secret = x25519_dalek::StaticSecret::from(bob.x25519_secret());
        let key = derive_key(secret.diffie_hellman(&epk.into()).as_bytes(), &epk, &bob.public_key);
        let aad = canonical::to_vec(&env.header).unwrap();
        let cipher = XChaCha20Poly1305::new((&key).into());
        let nonce = XNonce::from_slice(&env.header.nonce);
        let mut inner: Inner =
            serde_json::from_slice(&cipher.decrypt(nonce, Payload { msg: &env.ct, aad: &aad }).unwrap()).unwrap();
        inner.sender_key = mallory.public_key;
        let ct = cipher
            .encrypt(nonce, Payload { msg: &canonical::to_vec(&inner).unwrap(), aad: &aad })
            .unwrap();
        let forged = canonical::to_vec(&Envelope { ct, header: env.header }).unwrap();
        assert_eq!(open(&forged, &bob).unwrap_err().code(), "ENVELOPE_AUTH_FAILURE");
    }
}
