//! Canonical JSON serialization and the digests built on it.
//!
//! Commitments (theme sets, prediction sets, sealed labels, journal entries)
//! are SHA-256 over a canonical form: object keys sorted by byte order, UTF-8,
//! no insignificant whitespace. Key ordering is done here rather than relying
//! on `serde_json`'s map type so the digest does not depend on crate features.

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Name of the digest used for every commitment in the crate.
pub const DIGEST_ALGORITHM: &str = "sha256";

/// Serializes `value` to canonical JSON.
pub fn to_canonical_json<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    let value = serde_json::to_value(value)?;
    let mut out = String::new();
    write_canonical(&value, &mut out);
    Ok(out)
}

fn write_canonical(value: &Value, out: &mut String) {
    match value {
        Value::Object(map) => {
            let mut entries: Vec<(&String, &Value)> = map.iter().collect();
            entries.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
            out.push('{');
            for (i, (key, val)) in entries.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                // a bare string never fails to serialize
                out.push_str(&serde_json::to_string(key).expect("string key"));
                out.push(':');
                write_canonical(val, out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        scalar => out.push_str(&scalar.to_string()),
    }
}

/// Lowercase hex SHA-256 of raw bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Lowercase hex SHA-256 of the canonical JSON form of `value`.
pub fn digest<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    Ok(sha256_hex(to_canonical_json(value)?.as_bytes()))
}
