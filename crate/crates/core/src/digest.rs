//! SHA-256 helpers for provenance digests.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Hex SHA-256 of raw bytes.
pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// Hex SHA-256 of the canonical JSON serialization of `value`.
///
/// Struct fields serialize in declaration order and maps used in digested
/// values are `BTreeMap`s, so the encoding is stable across runs.
pub fn json_digest<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("digested values serialize");
    sha256_hex(bytes)
}
