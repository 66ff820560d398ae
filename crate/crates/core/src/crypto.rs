use ed25519_dalek::{Signer as _, SigningKey, VerifyingKey};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use zeroize::Zeroize;

use crate::bytes::{Digest, PublicKey, Signature};

pub fn sha256(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

/// SHA-256 over the concatenation of `parts`.
pub fn sha256_concat(parts: &[&[u8]]) -> Digest {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part);
    }
    Digest(hasher.finalize().into())
}

/// An Ed25519 signing key pair. The secret half is the 32-byte seed.
#[derive(Clone, Serialize, Deserialize)]
pub struct KeyPair {
    pub public_key: PublicKey,
    secret_key: SecretSeed,
}

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
struct SecretSeed(crate::bytes::Digest);

impl Drop for SecretSeed {
    fn drop(&mut self) {
        self.0 .0.zeroize();
    }
}

impl KeyPair {
    pub fn from_seed(seed: &[u8; 32]) -> Self {
        let signing = SigningKey::from_bytes(seed);
        Self {
            public_key: PublicKey(signing.verifying_key().to_bytes()),
            secret_key: SecretSeed(Digest(*seed)),
        }
    }

    pub fn generate<R: RngCore + CryptoRng + ?Sized>(rng: &mut R) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        let pair = Self::from_seed(&seed);
        seed.zeroize();
        pair
    }

    pub fn seed(&self) -> &[u8; 32] {
        &self.secret_key.0 .0
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        let signing = SigningKey::from_bytes(self.seed());
        Signature(signing.sign(message).to_bytes())
    }

    /// The clamped X25519 scalar corresponding to this signing key.
    pub fn x25519_secret(&self) -> [u8; 32] {
        SigningKey::from_bytes(self.seed()).to_scalar_bytes()
    }
}

impl std::fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyPair").field("public_key", &self.public_key).finish_non_exhaustive()
    }
}

impl PartialEq for KeyPair {
    fn eq(&self, other: &Self) -> bool {
        self.public_key == other.public_key && self.secret_key == other.secret_key
    }
}

impl Eq for KeyPair {}

/// Strict Ed25519 verification (rejects non-canonical and small-order encodings).
pub fn verify(public_key: &PublicKey, message: &[u8], signature: &Signature) -> bool {
    let Ok(key) = VerifyingKey::from_bytes(public_key.as_bytes()) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(signature.as_bytes());
    key.verify_strict(message, &sig).is_ok()
}

/// Montgomery form of an Ed25519 public key, for X25519 key agreement.
pub fn x25519_public(public_key: &PublicKey) -> Option<[u8; 32]> {
    VerifyingKey::from_bytes(public_key.as_bytes())
        .ok()
        .map(|k| k.to_montgomery().to_bytes())
}
