use std::fmt;
use std::str::FromStr;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::bytes::PublicKey;
use crate::crypto::KeyPair;

/// Method tag for every DID minted by this registry.
pub const DID_METHOD: &str = "shr";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DidError {
    #[error("seed must be 32 bytes, got {0}")]
    BadSeedLength(usize),
    #[error("malformed DID `{0}`")]
    Malformed(String),
}

/// A self-certifying identifier: `did:shr:<base58(public key)>`.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Did {
    identifier: String,
    key: PublicKey,
}

impl Did {
    pub fn from_public_key(key: &PublicKey) -> Self {
        Self {
            identifier: bs58::encode(key.as_bytes()).into_string(),
            key: *key,
        }
    }

    pub fn method(&self) -> &str {
        DID_METHOD
    }

    pub fn identifier(&self) -> &str {
        &self.identifier
    }

    /// The public key the identifier was derived from.
    pub fn public_key(&self) -> &PublicKey {
        &self.key
    }
}

impl fmt::Display for Did {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "did:{}:{}", DID_METHOD, self.identifier)
    }
}

impl fmt::Debug for Did {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Did({self})")
    }
}

impl FromStr for Did {
    type Err = DidError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let malformed = || DidError::Malformed(s.to_string());
        let rest = s.strip_prefix("did:").ok_or_else(malformed)?;
        let (method, identifier) = rest.split_once(':').ok_or_else(malformed)?;
        if method != DID_METHOD {
            return Err(malformed());
        }
        let bytes = bs58::decode(identifier).into_vec().map_err(|_| malformed())?;
        let key = PublicKey::from_slice(&bytes).ok_or_else(malformed)?;
        let did = Did::from_public_key(&key);
        // reject non-canonical base58 (e.g. extra leading '1's)
        if did.identifier != identifier {
            return Err(malformed());
        }
        Ok(did)
    }
}

impl Serialize for Did {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Did {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Mints a DID. With a seed the result is deterministic; without one, keys
/// come from `rng`.
pub fn generate_did<R: RngCore + CryptoRng + ?Sized>(
    seed: Option<&[u8]>,
    rng: &mut R,
) -> Result<(Did, KeyPair), DidError> {
    let keys = match seed {
        Some(seed) => {
            let seed: [u8; 32] = seed.try_into().map_err(|_| DidError::BadSeedLength(seed.len()))?;
            KeyPair::from_seed(&seed)
        }
        None => KeyPair::generate(rng),
    };
    Ok((Did::from_public_key(&keys.public_key), keys))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn seeded_generation_is_deterministic() {
        let mut rng = rand::thread_rng();
        let (a, ka) = generate_did(Some(&[3u8; 32]), &mut rng).unwrap();
        let (b, kb) = generate_did(Some(&[3u8; 32]), &mut rng).unwrap();
        assert_eq!(a, b);
        assert_eq!(ka.public_key, kb.public_key);
    }

    #[test]
    fn unseeded_generation_differs() {
        let mut rng = rand::thread_rng();
        let (a, _) = generate_did(None, &mut rng).unwrap();
        let (b, _) = generate_did(None, &mut rng).unwrap();
        assert_ne!(a.identifier(), b.identifier());
    }

    #[test]
    fn bad_seed_length() {
        let mut rng = rand::thread_rng();
        assert_eq!(generate_did(Some(&[0u8; 31]), &mut rng).unwrap_err(), DidError::BadSeedLength(31));
    }

    #[test]
    fn parse_rejects_other_methods_and_short_keys() {
        assert!("did:sov:abc".parse::<Did>().is_err());
        assert!("did:shr:2".parse::<Did>().is_err());
        assert!("shr:abc".parse::<Did>().is_err());
    }

    proptest! {
        #[test]
        fn string_form_round_trips(key in any::<[u8; 32]>()) {
            let did = Did::from_public_key(&PublicKey(key));
            let text = did.to_string();
            prop_assert!(text.starts_with("did:shr:"));
            let back: Did = text.parse().unwrap();
            prop_assert_eq!(back.public_key().0, key);
            prop_assert_eq!(back, did);
        }
    }
}
