//! Deterministic CBOR for attestation payloads.
//!
//! Maps are definite-length with keys sorted by their encoded bytes
//! (length-first, then bytewise). Decoding rejects any input that does not
//! re-encode to exactly the same bytes, so `encode(decode(x)) == x` holds
//! for everything that decodes.

use ciborium::value::{Integer, Value};

pub(crate) use crate::cbor::{sorted_map, to_vec};

use super::{AttestationError, AttestationPayload, Nonce, PcrSet, PCR_LEN};

const PAYLOAD_KEYS: [&str; 8] = [
    "cabundle",
    "certificate",
    "module_id",
    "nonce",
    "pcrs",
    "public_key",
    "timestamp",
    "user_data",
];

fn malformed(msg: impl Into<String>) -> AttestationError {
    AttestationError::MalformedDocument(msg.into())
}

fn opt_bytes(v: Option<&[u8]>) -> Value {
    v.map_or(Value::Null, |b| Value::Bytes(b.to_vec()))
}

fn payload_value(p: &AttestationPayload) -> Value {
    let pcrs = sorted_map(
        p.pcrs
            .registers()
            .iter()
            .enumerate()
            .map(|(i, r)| {
                (
                    Value::Integer(Integer::from(i as u64)),
                    Value::Bytes(r.to_vec()),
                )
            })
            .collect(),
    );
    sorted_map(vec![
        (
            "cabundle".into(),
            Value::Array(p.cabundle.iter().map(|c| Value::Bytes(c.clone())).collect()),
        ),
        ("certificate".into(), Value::Bytes(p.certificate.clone())),
        ("module_id".into(), Value::Text(p.module_id.clone())),
        (
            "nonce".into(),
            opt_bytes(p.nonce.as_ref().map(|n| &n.as_bytes()[..])),
        ),
        ("pcrs".into(), pcrs),
        ("public_key".into(), opt_bytes(p.public_key.as_deref())),
        (
            "timestamp".into(),
            Value::Integer(Integer::from(p.timestamp)),
        ),
        ("user_data".into(), opt_bytes(p.user_data.as_deref())),
    ])
}

/// Encodes the signed payload. Fails only if a bounded field is oversized.
pub fn canonical_encode(payload: &AttestationPayload) -> Result<Vec<u8>, AttestationError> {
    payload.check_bounds()?;
    Ok(to_vec(&payload_value(payload)))
}

pub(crate) fn parse_value(raw: &[u8]) -> Result<Value, AttestationError> {
    let mut reader = raw;
    let value: Value =
        ciborium::de::from_reader(&mut reader).map_err(|e| malformed(format!("cbor: {e}")))?;
    if !reader.is_empty() {
        return Err(malformed("trailing bytes after document"));
    }
    Ok(value)
}

fn take_map(value: Value, expected: &[&str]) -> Result<Vec<(String, Value)>, AttestationError> {
    let Value::Map(entries) = value else {
        return Err(malformed("expected a map"));
    };
    let mut out = Vec::with_capacity(entries.len());
    for (k, v) in entries {
        match k {
            Value::Text(k) if expected.contains(&k.as_str()) => out.push((k, v)),
            other => return Err(malformed(format!("unexpected key {other:?}"))),
        }
    }
    if out.len() != expected.len() {
        return Err(malformed(format!(
            "expected {} keys, found {}",
            expected.len(),
            out.len()
        )));
    }
    Ok(out)
}

fn as_bytes(v: Value, what: &str) -> Result<Vec<u8>, AttestationError> {
    match v {
        Value::Bytes(b) => Ok(b),
        _ => Err(malformed(format!("{what}: expected byte string"))),
    }
}

fn as_opt_bytes(v: Value, what: &str) -> Result<Option<Vec<u8>>, AttestationError> {
    match v {
        Value::Null => Ok(None),
        other => as_bytes(other, what).map(Some),
    }
}

fn as_pcr(v: Value) -> Result<[u8; PCR_LEN], AttestationError> {
    as_bytes(v, "pcr")?
        .try_into()
        .map_err(|_| malformed(format!("pcr must be {PCR_LEN} bytes")))
}

fn decode_pcrs(v: Value) -> Result<PcrSet, AttestationError> {
    let Value::Map(entries) = v else {
        return Err(malformed("pcrs: expected map"));
    };
    if entries.len() != 3 {
        return Err(malformed("pcrs: expected exactly 3 registers"));
    }
    let mut slots: [Option<[u8; PCR_LEN]>; 3] = [None, None, None];
    for (k, v) in entries {
        let idx = k
            .as_integer()
            .and_then(|i| u8::try_from(i).ok())
            .filter(|i| *i < 3)
            .ok_or_else(|| malformed("pcrs: bad register index"))?;
        slots[idx as usize] = Some(as_pcr(v)?);
    }
    match slots {
        [Some(a), Some(b), Some(c)] => Ok(PcrSet::new(a, b, c)),
        _ => Err(malformed("pcrs: duplicate register index")),
    }
}

/// Strict inverse of [`canonical_encode`].
pub fn canonical_decode(raw: &[u8]) -> Result<AttestationPayload, AttestationError> {
    let value = parse_value(raw)?;
    let mut p = AttestationPayload {
        module_id: String::new(),
        timestamp: 0,
        pcrs: PcrSet::new([0; PCR_LEN], [0; PCR_LEN], [0; PCR_LEN]),
        certificate: Vec::new(),
        cabundle: Vec::new(),
        nonce: None,
        user_data: None,
        public_key: None,
    };
    for (k, v) in take_map(value, &PAYLOAD_KEYS)? {
        match k.as_str() {
            "cabundle" => {
                let Value::Array(items) = v else {
                    return Err(malformed("cabundle: expected array"));
                };
                p.cabundle = items
                    .into_iter()
                    .map(|c| as_bytes(c, "cabundle entry"))
                    .collect::<Result<_, _>>()?;
            }
            "certificate" => p.certificate = as_bytes(v, "certificate")?,
            "module_id" => match v {
                Value::Text(t) => p.module_id = t,
                _ => return Err(malformed("module_id: expected text")),
            },
            "nonce" => {
                p.nonce = as_opt_bytes(v, "nonce")?
                    .map(|b| Nonce::from_slice(&b))
                    .transpose()
                    .map_err(|e| malformed(e.to_string()))?
            }
            "pcrs" => p.pcrs = decode_pcrs(v)?,
            "public_key" => p.public_key = as_opt_bytes(v, "public_key")?,
            "timestamp" => {
                p.timestamp = v
                    .as_integer()
                    .and_then(|i| u64::try_from(i).ok())
                    .ok_or_else(|| malformed("timestamp: expected unsigned integer"))?
            }
            "user_data" => p.user_data = as_opt_bytes(v, "user_data")?,
            _ => unreachable!("take_map filters keys"),
        }
    }
    p.check_bounds().map_err(|e| malformed(e.to_string()))?;
    if canonical_encode(&p)? != raw {
        return Err(malformed("encoding is not canonical"));
    }
    Ok(p)
}

pub(crate) fn encode_envelope(payload: &[u8], signature: &[u8]) -> Vec<u8> {
    to_vec(&sorted_map(vec![
        ("payload".into(), Value::Bytes(payload.to_vec())),
        ("signature".into(), Value::Bytes(signature.to_vec())),
    ]))
}

pub(crate) fn decode_envelope(raw: &[u8]) -> Result<(Vec<u8>, Vec<u8>), AttestationError> {
    let mut payload = None;
    let mut signature = None;
    for (k, v) in take_map(parse_value(raw)?, &["payload", "signature"])? {
        match k.as_str() {
            "payload" => payload = Some(as_bytes(v, "payload")?),
            _ => signature = Some(as_bytes(v, "signature")?),
        }
    }
    let (Some(payload), Some(signature)) = (payload, signature) else {
        return Err(malformed("duplicate envelope key"));
    };
    if encode_envelope(&payload, &signature) != raw {
        return Err(malformed("envelope is not canonical"));
    }
    Ok((payload, signature))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn sample_payload(rng: &mut ChaCha8Rng) -> AttestationPayload {
        let mut ud = vec![0u8; rng.gen_range(0..64)];
        rng.fill(&mut ud[..]);
        AttestationPayload {
            module_id: format!("i-{:016x}-enc", rng.gen::<u64>()),
            timestamp: 1_700_000_000_000 + rng.gen_range(0..1_000_000_000),
            pcrs: PcrSet::random(rng),
            certificate: vec![0x30, 0x82, 1, 2, 3],
            cabundle: vec![vec![0x30, 1], vec![0x30, 2]],
            nonce: rng.gen_bool(0.8).then(|| Nonce::random_from(rng)),
            user_data: rng.gen_bool(0.8).then_some(ud),
            public_key: rng.gen_bool(0.5).then(|| vec![7u8; 32]),
        }
    }

    #[test]
    fn encoding_is_deterministic_and_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let p = sample_payload(&mut rng);
            let a = canonical_encode(&p).unwrap();
            assert_eq!(a, canonical_encode(&p).unwrap());
            assert_eq!(canonical_decode(&a).unwrap(), p);
        }
    }

    #[test]
    fn keys_are_in_canonical_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let raw = canonical_encode(&sample_payload(&mut rng)).unwrap();
        let Value::Map(entries) = parse_value(&raw).unwrap() else {
            panic!("not a map")
        };
        let keys: Vec<Vec<u8>> = entries.iter().map(|(k, _)| to_vec(k)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert_eq!(raw[0], 0xa8, "definite-length map of 8 entries");
    }

    #[test]
    fn timestamp_change_only_touches_timestamp_bytes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = sample_payload(&mut rng);
        let mut q = p.clone();
        q.timestamp = p.timestamp + 1;
        let a = canonical_encode(&p).unwrap();
        let b = canonical_encode(&q).unwrap();
        assert_eq!(a.len(), b.len());

        // Locate the timestamp value: the key text followed by a 0x1b (u64) header.
        let key = to_vec(&Value::Text("timestamp".into()));
        let at = a.windows(key.len()).position(|w| w == key).unwrap() + key.len();
        assert_eq!(a[at], 0x1b);
        let value_range = at + 1..at + 9;
        for (i, (x, y)) in a.iter().zip(&b).enumerate() {
            if x != y {
                assert!(
                    value_range.contains(&i),
                    "byte {i} differs outside timestamp"
                );
            }
        }
        assert_ne!(a, b);
    }

    #[test]
    fn rejects_non_canonical_and_oversized() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = sample_payload(&mut rng);
        let raw = canonical_encode(&p).unwrap();

        // Swap two map entries: still valid CBOR, no longer canonical.
        let Value::Map(mut entries) = parse_value(&raw).unwrap() else {
            unreachable!()
        };
        entries.swap(0, 1);
        let shuffled = to_vec(&Value::Map(entries));
        assert!(matches!(
            canonical_decode(&shuffled),
            Err(AttestationError::MalformedDocument(_))
        ));

        let mut trailing = raw.clone();
        trailing.push(0);
        assert!(canonical_decode(&trailing).is_err());

        p.user_data = Some(vec![0; 1025]);
        assert!(matches!(
            canonical_encode(&p),
            Err(AttestationError::OversizedField {
                field: "user_data",
                len: 1025
            })
        ));
        p.user_data = Some(vec![0; 1024]);
        assert!(canonical_encode(&p).is_ok());
    }

    #[test]
    fn encoding_injective_over_random_corpus() {
        use sha2::{Digest, Sha256};
        use std::collections::HashSet;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut seen = HashSet::new();
        for _ in 0..100_000 {
            let p = sample_payload(&mut rng);
            let digest: [u8; 32] = Sha256::digest(canonical_encode(&p).unwrap()).into();
            assert!(seen.insert(digest));
        }
    }
}
