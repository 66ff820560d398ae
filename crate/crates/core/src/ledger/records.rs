use serde::{Deserialize, Serialize};

use crate::bytes::{b64, PublicKey};
use crate::did::Did;

/// Write-permission lattice: AUTHORITY > STEWARD > MEMBER.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    Member,
    Steward,
    Authority,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DidRecord {
    pub did: Did,
    pub verification_key: PublicKey,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_endpoint: Option<String>,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaRecord {
    pub schema_id: String,
    pub name: String,
    pub version: String,
    pub attribute_names: Vec<String>,
}

impl SchemaRecord {
    pub fn derive_id(name: &str, version: &str, author: &Did) -> String {
        format!("{name}:{version}:{author}")
    }

    /// Builds a record with sorted, deduplicated attribute names.
    pub fn new(name: &str, version: &str, author: &Did, attributes: &[&str]) -> Self {
        let mut attribute_names: Vec<String> = attributes.iter().map(|a| a.to_string()).collect();
        attribute_names.sort();
        attribute_names.dedup();
        Self {
            schema_id: Self::derive_id(name, version, author),
            name: name.to_string(),
            version: version.to_string(),
            attribute_names,
        }
    }
}

pub const DIGEST_SHA256: &str = "sha-256";
pub const SALT_LENGTH: u32 = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitmentSpec {
    pub digest_algorithm: String,
    pub salt_length: u32,
}

impl Default for CommitmentSpec {
    fn default() -> Self {
        Self {
            digest_algorithm: DIGEST_SHA256.to_string(),
            salt_length: SALT_LENGTH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CredDefRecord {
    pub cred_def_id: String,
    pub schema_id: String,
    pub issuer_did: Did,
    pub issuance_key: PublicKey,
    pub commitment_spec: CommitmentSpec,
}

impl CredDefRecord {
    pub fn derive_id(schema_id: &str, issuer: &Did) -> String {
        format!("{issuer}/cred-def/{schema_id}")
    }

    pub fn new(schema_id: &str, issuer: &Did, issuance_key: PublicKey) -> Self {
        Self {
            cred_def_id: Self::derive_id(schema_id, issuer),
            schema_id: schema_id.to_string(),
            issuer_did: issuer.clone(),
            issuance_key,
            commitment_spec: CommitmentSpec::default(),
        }
    }
}

pub const DEFAULT_REGISTRY_CAPACITY: u32 = 1024;

/// Fixed-length bit sequence. Bit `i` lives in byte `i / 8` at position
/// `i % 8`, least significant bit first; padding bits past the capacity are
/// always zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Bitmap(#[serde(with = "b64")] pub Vec<u8>);

impl Bitmap {
    pub fn zeroed(capacity: u32) -> Self {
        Self(vec![0u8; Self::byte_len(capacity)])
    }

    pub fn byte_len(capacity: u32) -> usize {
        (capacity as usize).div_ceil(8)
    }

    pub fn get(&self, index: u32) -> bool {
        let (byte, bit) = (index as usize / 8, index % 8);
        self.0.get(byte).is_some_and(|b| b & (1 << bit) != 0)
    }

    pub fn set(&mut self, index: u32) {
        let (byte, bit) = (index as usize / 8, index % 8);
        self.0[byte] |= 1 << bit;
    }

    /// Whether the bitmap is a valid encoding for `capacity` bits.
    pub fn fits(&self, capacity: u32) -> bool {
        if self.0.len() != Self::byte_len(capacity) {
            return false;
        }
        let tail = capacity % 8;
        tail == 0 || self.0.last().is_none_or(|b| b >> tail == 0)
    }

    /// True iff every bit set in `other` is also set here.
    pub fn covers(&self, other: &Bitmap) -> bool {
        self.0.len() == other.0.len() && self.0.iter().zip(&other.0).all(|(a, b)| a & b == *b)
    }

    pub fn ones(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.0.len() as u32 * 8).filter(|i| self.get(*i))
    }

    pub fn count_ones(&self) -> u32 {
        self.0.iter().map(|b| b.count_ones()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevocationRegistryRecord {
    pub registry_id: String,
    pub cred_def_id: String,
    pub capacity: u32,
    pub revoked_bitmap: Bitmap,
    pub update_seq: u64,
}

impl RevocationRegistryRecord {
    pub fn derive_id(cred_def_id: &str, tag: &str) -> String {
        format!("{cred_def_id}/revoc/{tag}")
    }

    pub fn new(cred_def_id: &str, tag: &str, capacity: u32) -> Self {
        Self {
            registry_id: Self::derive_id(cred_def_id, tag),
            cred_def_id: cred_def_id.to_string(),
            capacity,
            revoked_bitmap: Bitmap::zeroed(capacity),
            update_seq: 0,
        }
    }

    pub fn is_revoked(&self, index: u32) -> bool {
        self.revoked_bitmap.get(index)
    }
}

/// Payload of a REVOC_UPDATE: the registry's complete bitmap after the
/// update. Accepted only when it covers the current bitmap.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevocationUpdate {
    pub registry_id: String,
    pub revoked_bitmap: Bitmap,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bitmap_bit_layout_is_lsb_first() {
        let mut map = Bitmap::zeroed(12);
        assert_eq!(map.0.len(), 2);
        map.set(0);
        map.set(9);
        assert_eq!(map.0, vec![0b0000_0001, 0b0000_0010]);
        assert!(map.get(9) && !map.get(8));
        assert_eq!(map.ones().collect::<Vec<_>>(), vec![0, 9]);
    }

    #[test]
    fn bitmap_fits_rejects_padding_bits() {
        assert!(Bitmap(vec![0, 0x0f]).fits(12));
        assert!(!Bitmap(vec![0, 0x10]).fits(12));
        assert!(!Bitmap(vec![0]).fits(12));
    }

    #[test]
    fn covers_is_bitwise_superset() {
        let a = Bitmap(vec![0b1010]);
        assert!(a.covers(&Bitmap(vec![0b1000])));
        assert!(!a.covers(&Bitmap(vec![0b0001])));
    }

    #[test]
    fn roles_are_ordered() {
        assert!(Role::Authority > Role::Steward && Role::Steward > Role::Member);
    }
}
