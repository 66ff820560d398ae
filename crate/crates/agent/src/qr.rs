//! Text payloads for QR codes: invitations and presentations.
//!
//! `base64url( version || kind || digest4 || deflate(canonical JSON) )` where
//! `digest4` is the first four bytes of SHA-256 over the canonical JSON.
//! Rendering the code itself is left to the UI.

use std::io::{Read, Write};

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use healthreg_core::bytes::{b64_decode, b64_encode};
use healthreg_core::canonical;
use healthreg_core::crypto::sha256;

pub const QR_VERSION: u8 = 1;
/// Byte-mode capacity of a version-40 QR code at the lowest error
/// correction level.
pub const QR_CAPACITY: usize = 2953;
const MAX_INFLATED: u64 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum QrKind {
    Invitation,
    Presentation,
}

impl QrKind {
    fn byte(self) -> u8 {
        match self {
            QrKind::Invitation => 1,
            QrKind::Presentation => 2,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            1 => Some(QrKind::Invitation),
            2 => Some(QrKind::Presentation),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum QrError {
    #[error("payload is {0} bytes, above the {QR_CAPACITY}-byte QR capacity")]
    PayloadTooLarge(usize),
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
    #[error("unsupported payload version {0}")]
    VersionUnsupported(u8),
}

impl QrError {
    pub fn code(&self) -> &'static str {
        match self {
            QrError::PayloadTooLarge(_) => "PAYLOAD_TOO_LARGE",
            QrError::MalformedPayload(_) => "MALFORMED_PAYLOAD",
            QrError::VersionUnsupported(_) => "VERSION_UNSUPPORTED",
        }
    }
}

fn malformed(detail: impl Into<String>) -> QrError {
    QrError::MalformedPayload(detail.into())
}

pub fn encode<T: Serialize>(kind: QrKind, body: &T) -> Result<String, QrError> {
    let json = canonical::to_vec(body).map_err(|e| malformed(e.to_string()))?;
    let mut raw = vec![QR_VERSION, kind.byte()];
    raw.extend_from_slice(&sha256(&json).0[..4]);
    let mut deflate = DeflateEncoder::new(raw, Compression::best());
    deflate.write_all(&json).expect("writing to memory");
    let raw = deflate.finish().expect("writing to memory");
    let text = b64_encode(&raw);
    if text.len() > QR_CAPACITY {
        return Err(QrError::PayloadTooLarge(text.len()));
    }
    Ok(text)
}

/// Decodes the kind and canonical JSON body of a payload.
pub fn decode_raw(text: &str) -> Result<(QrKind, Vec<u8>), QrError> {
    if text.len() > QR_CAPACITY {
        return Err(QrError::PayloadTooLarge(text.len()));
    }
    let raw = b64_decode(text.trim()).map_err(|e| malformed(e.to_string()))?;
    if raw.len() < 6 {
        return Err(malformed("payload too short"));
    }
    if raw[0] != QR_VERSION {
        return Err(QrError::VersionUnsupported(raw[0]));
    }
    let kind = QrKind::from_byte(raw[1]).ok_or_else(|| malformed(format!("unknown kind {}", raw[1])))?;
    let mut json = Vec::new();
    DeflateDecoder::new(&raw[6..])
        .take(MAX_INFLATED)
        .read_to_end(&mut json)
        .map_err(|e| malformed(e.to_string()))?;
    if sha256(&json).0[..4] != raw[2..6] {
        return Err(malformed("digest mismatch"));
    }
    Ok((kind, json))
}

/// Decodes a payload that must be of `kind`.
pub fn decode<T: DeserializeOwned>(text: &str, kind: QrKind) -> Result<T, QrError> {
    let (found, json) = decode_raw(text)?;
    if found != kind {
        return Err(malformed(format!("expected {kind:?}, found {found:?}")));
    }
    canonical::from_slice(&json).map_err(|e| malformed(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trip() {
        let body = json!({"a": "b", "n": [1, 2, 3]});
        let text = encode(QrKind::Presentation, &body).unwrap();
        let back: serde_json::Value = decode(&text, QrKind::Presentation).unwrap();
        assert_eq!(back, body);
        assert_eq!(decode_raw(&text).unwrap().0, QrKind::Presentation);
    }

    #[test]
    fn every_truncation_is_malformed() {
        let text = encode(QrKind::Invitation, &json!({"label": "clinic", "pad": "x".repeat(40)})).unwrap();
        for cut in 1..text.len() {
            let err = decode::<serde_json::Value>(&text[..text.len() - cut], QrKind::Invitation).unwrap_err();
            assert_eq!(err.code(), "MALFORMED_PAYLOAD", "cut {cut}");
        }
    }

    #[test]
    fn version_and_kind_checks() {
        let text = encode(QrKind::Invitation, &json!({})).unwrap();
        let mut raw = b64_decode(&text).unwrap();
        raw[0] = 9;
        assert_eq!(decode_raw(&b64_encode(&raw)).unwrap_err(), QrError::VersionUnsupported(9));
        assert_eq!(
            decode::<serde_json::Value>(&text, QrKind::Presentation).unwrap_err().code(),
            "MALFORMED_PAYLOAD"
        );
    }

    #[test]
    fn oversized_payload_is_refused() {
        // incompressible content
        let noise: String = (0..4000u32).map(|i| format!("{:08x}", i.wrapping_mul(2654435761))).collect();
        assert_eq!(encode(QrKind::Presentation, &json!({ "n": noise })).unwrap_err().code(), "PAYLOAD_TOO_LARGE");
    }
}
