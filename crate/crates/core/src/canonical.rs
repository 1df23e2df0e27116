//! Canonical JSON: lexicographically sorted object keys, no insignificant
//! whitespace, floats in shortest round-trip form.
//!
//! `serde_json::Value` keeps object keys in a `BTreeMap`, so going through a
//! `Value` is enough to sort every level.

use serde::Serialize;
use sha2::{Digest, Sha256};

pub type Digest32 = [u8; 32];

pub fn to_canonical_value<T: Serialize + ?Sized>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).expect("query and response types always serialize")
}

pub fn to_canonical_bytes<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    serde_json::to_vec(&to_canonical_value(value)).expect("json values always serialize")
}

pub fn to_canonical_string<T: Serialize + ?Sized>(value: &T) -> String {
    String::from_utf8(to_canonical_bytes(value)).expect("serde_json emits utf-8")
}

pub fn sha256(bytes: &[u8]) -> Digest32 {
    Sha256::digest(bytes).into()
}

/// SHA-256 over `parts` joined by the unit separator byte 0x1F.
pub fn sha256_joined(parts: &[&[u8]]) -> Digest32 {
    let mut hasher = Sha256::new();
    for (i, part) in parts.iter().enumerate() {
        if i > 0 {
            hasher.update([0x1F]);
        }
        hasher.update(part);
    }
    hasher.finalize().into()
}

pub fn hex(digest: &[u8]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn keys_are_sorted_at_every_level() {
        let v = json!({"b": 1, "a": {"z": [1, {"y": 2, "x": 3}], "c": 0.1}});
        assert_eq!(to_canonical_string(&v), r#"{"a":{"c":0.1,"z":[1,{"x":3,"y":2}]},"b":1}"#);
    }

    #[test]
    fn floats_round_trip_exactly() {
        for x in [0.1, 1.0 / 3.0, 1e-300, 0.7 + 0.2, f64::MAX] {
            let s = to_canonical_string(&x);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits());
            let back: f64 = serde_json::from_str(&s).unwrap();
            assert_eq!(back.to_bits(), x.to_bits());
        }
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(hex(&sha256(b"abc")), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert_eq!(sha256_joined(&[b"a", b"b"]), sha256(b"a\x1fb"));
    }
}
