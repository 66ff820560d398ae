//! Fixed-size byte newtypes that serialize as unpadded base64url text.

use std::fmt;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub fn b64_encode(bytes: &[u8]) -> String {
    URL_SAFE_NO_PAD.encode(bytes)
}

pub fn b64_decode(text: &str) -> Result<Vec<u8>, base64::DecodeError> {
    URL_SAFE_NO_PAD.decode(text)
}

macro_rules! fixed_bytes {
    ($(#[$meta:meta])* $name:ident, $len:expr) => {
        $(#[$meta])*
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub [u8; $len]);

        impl $name {
            pub const LEN: usize = $len;

            pub fn as_bytes(&self) -> &[u8; $len] {
                &self.0
            }

            pub fn from_slice(bytes: &[u8]) -> Option<Self> {
                <[u8; $len]>::try_from(bytes).ok().map(Self)
            }

            pub fn to_b64(&self) -> String {
                b64_encode(&self.0)
            }

            pub fn from_b64(text: &str) -> Option<Self> {
                b64_decode(text).ok().and_then(|b| Self::from_slice(&b))
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), self.to_b64())
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_b64())
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_b64())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let text = String::deserialize(d)?;
                Self::from_b64(&text).ok_or_else(|| {
                    serde::de::Error::custom(concat!("expected base64url ", stringify!($len), " bytes"))
                })
            }
        }
    };
}

fixed_bytes!(
    /// SHA-256 output.
    Digest, 32
);
fixed_bytes!(
    /// Ed25519 public key.
    PublicKey, 32
);
fixed_bytes!(
    /// Ed25519 signature.
    Signature, 64
);
fixed_bytes!(
    /// Per-attribute commitment salt.
    Salt, 16
);
fixed_bytes!(
    /// Verifier challenge.
    Nonce, 16
);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);
}

impl Default for Digest {
    fn default() -> Self {
        Self::ZERO
    }
}

/// Serde adapter for variable-length byte fields.
pub mod b64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::b64_encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        super::b64_decode(&text).map_err(serde::de::Error::custom)
    }
}
