//! Canonical text encoding shared by every persisted or hashed structure.
//!
//! The encoding is compact JSON produced from Rust structs:
//!
//! - object keys appear in struct declaration order (documented per type),
//! - no insignificant whitespace,
//! - integers in base 10,
//! - byte fields as lowercase hex strings.
//!
//! Decoding is strict: a byte string is accepted only if re-encoding the
//! decoded value reproduces it exactly. Hashes and signatures are computed
//! over these bytes, so two encodings of the same value can never coexist.

use std::fmt;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("malformed encoding: {0}")]
    Malformed(String),
    #[error("encoding is not canonical")]
    NonCanonical,
}

/// Encodes `value` into its canonical bytes.
pub fn to_canonical<T: Serialize>(value: &T) -> Vec<u8> {
    // Serializing these plain data types never fails.
    serde_json::to_vec(value).expect("canonical encoding is infallible for ledger types")
}

/// Encodes `value` into canonical text.
pub fn to_canonical_string<T: Serialize>(value: &T) -> String {
    String::from_utf8(to_canonical(value)).expect("canonical encoding is UTF-8")
}

/// Decodes canonical bytes, rejecting any input that is not the exact
/// canonical encoding of the decoded value.
pub fn from_canonical<T: Serialize + DeserializeOwned>(bytes: &[u8]) -> Result<T, CodecError> {
    let value: T = serde_json::from_slice(bytes).map_err(|e| CodecError::Malformed(e.to_string()))?;
    if to_canonical(&value) != bytes {
        return Err(CodecError::NonCanonical);
    }
    Ok(value)
}

pub fn sha256(bytes: &[u8]) -> Digest {
    Digest(Sha256::digest(bytes).into())
}

/// SHA-256 over the canonical encoding of `value`.
pub fn digest_of<T: Serialize>(value: &T) -> Digest {
    sha256(&to_canonical(value))
}

/// A 32-byte SHA-256 digest, encoded as 64 lowercase hex characters.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, CodecError> {
        let raw = decode_lower_hex(s)?;
        let arr: [u8; 32] = raw.try_into().map_err(|_| CodecError::Malformed("digest must be 32 bytes".into()))?;
        Ok(Digest(arr))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Digest::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// Only lowercase hex is accepted so the text form of a byte string is unique.
pub fn decode_lower_hex(s: &str) -> Result<Vec<u8>, CodecError> {
    if s.bytes().any(|b| b.is_ascii_uppercase()) {
        return Err(CodecError::NonCanonical);
    }
    hex::decode(s).map_err(|e| CodecError::Malformed(e.to_string()))
}

/// `#[serde(with = "hex_bytes")]` for `Vec<u8>` fields.
pub mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(deserializer)?;
        super::decode_lower_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// `#[serde(with = "hex_array8")]` for `[u8; 8]` fields.
pub mod hex_array8 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8; 8], serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<[u8; 8], D::Error> {
        let s = String::deserialize(deserializer)?;
        let raw = super::decode_lower_hex(&s).map_err(serde::de::Error::custom)?;
        raw.try_into().map_err(|_| serde::de::Error::custom("expected 8 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Sample {
        name: String,
        count: u64,
        #[serde(with = "hex_bytes")]
        blob: Vec<u8>,
        digest: Digest,
    }

    fn sample() -> Sample {
        Sample { name: "a\"b".into(), count: 42, blob: vec![0xde, 0xad], digest: Digest::ZERO }
    }

    #[test]
    fn encoding_layout_is_fixed() {
        let text = to_canonical_string(&sample());
        assert_eq!(text, format!(r#"{{"name":"a\"b","count":42,"blob":"dead","digest":"{}"}}"#, "0".repeat(64)));
    }

    #[test]
    fn rejects_non_canonical_variants() {
        let canonical = to_canonical(&sample());
        assert_eq!(from_canonical::<Sample>(&canonical).unwrap(), sample());

        let spaced = String::from_utf8(canonical.clone()).unwrap().replace(":42", ": 42");
        assert_eq!(from_canonical::<Sample>(spaced.as_bytes()), Err(CodecError::NonCanonical));
        let upper = String::from_utf8(canonical).unwrap().replace("dead", "DEAD");
        assert!(from_canonical::<Sample>(upper.as_bytes()).is_err());
        let escaped = r#"{"name":"a\u0022b","count":42,"blob":"dead","digest":"0000000000000000000000000000000000000000000000000000000000000000"}"#;
        assert_eq!(from_canonical::<Sample>(escaped.as_bytes()), Err(CodecError::NonCanonical));
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(sha256(b"abc").to_hex(), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
