//! Deterministic CBOR helpers shared by the wire formats.

use ciborium::value::Value;

pub(crate) fn to_vec(value: &Value) -> Vec<u8> {
    let mut out = Vec::new();
    ciborium::ser::into_writer(value, &mut out).expect("cbor serialization into Vec");
    out
}

/// A map value whose entries are in canonical key order (by encoded key bytes).
pub(crate) fn sorted_map(mut entries: Vec<(Value, Value)>) -> Value {
    entries.sort_by_cached_key(|(k, _)| to_vec(k));
    Value::Map(entries)
}

/// Serializes any serde value to CBOR bytes.
pub(crate) fn encode<T: serde::Serialize>(value: &T) -> Vec<u8> {
    let mut out = Vec::new();
    ciborium::ser::into_writer(value, &mut out).expect("cbor serialization into Vec");
    out
}

/// Decodes exactly one CBOR item, rejecting trailing bytes.
pub(crate) fn decode<T: serde::de::DeserializeOwned>(raw: &[u8]) -> Result<T, String> {
    let mut reader = raw;
    let v = ciborium::de::from_reader(&mut reader).map_err(|e| e.to_string())?;
    if !reader.is_empty() {
        return Err("trailing bytes".into());
    }
    Ok(v)
}
