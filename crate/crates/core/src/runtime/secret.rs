//! Signature-gated ingestion of provider data into a running enclave.
//!
//! The body of `POST /enclave/secret` is canonical CBOR
//! `{"kind": text, "payload": bstr, "signature": bstr}` where the signature
//! is Ed25519 over the CBOR array `[kind, payload]`. The payload must decode
//! as exactly one record type; anything else is refused.

use std::sync::{Arc, RwLock};

use ciborium::value::Value;
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cbor::{sorted_map, to_vec};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SecretError {
    #[error("secret body is not a well-formed envelope")]
    MalformedBody,
    #[error("signature does not verify under the provider key")]
    BadSignature,
    #[error("payload is not a valid `{expected}` record")]
    WrongKind { expected: &'static str },
}

/// A record type the gate may admit.
pub trait SecretKind: DeserializeOwned + Send + Sync + 'static {
    const KIND: &'static str;
}

/// Example admissible record: hosts to refuse service to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenyList {
    pub entries: Vec<String>,
}

impl SecretKind for DenyList {
    const KIND: &'static str = "deny-list";
}

/// Type-erased view the runtime uses to route the ingestion endpoint.
pub trait SecretIngestor: Send + Sync {
    fn accepted_kind(&self) -> &'static str;
    fn ingest(&self, body: &[u8]) -> Result<(), SecretError>;
}

/// Admits one record type, signed by one hard-coded provider key.
pub struct SecretGate<T> {
    provider_public_key: VerifyingKey,
    state: RwLock<Option<Arc<T>>>,
}

impl<T: SecretKind> SecretGate<T> {
    pub fn new(provider_public_key: VerifyingKey) -> Self {
        Self {
            provider_public_key,
            state: RwLock::new(None),
        }
    }

    /// The currently installed record, if any. Readers see either the old
    /// or the new record, never a mix.
    pub fn current(&self) -> Option<Arc<T>> {
        self.state.read().expect("secret state poisoned").clone()
    }

    pub fn ingest_parts(
        &self,
        kind: &str,
        payload: &[u8],
        signature: &[u8],
    ) -> Result<(), SecretError> {
        let sig = Signature::from_slice(signature).map_err(|_| SecretError::BadSignature)?;
        self.provider_public_key
            .verify(&signed_message(kind, payload), &sig)
            .map_err(|_| SecretError::BadSignature)?;
        let wrong = || SecretError::WrongKind { expected: T::KIND };
        if kind != T::KIND {
            return Err(wrong());
        }
        let mut reader = payload;
        let record: T = ciborium::de::from_reader(&mut reader).map_err(|_| wrong())?;
        if !reader.is_empty() {
            return Err(wrong());
        }
        *self.state.write().expect("secret state poisoned") = Some(Arc::new(record));
        Ok(())
    }
}

impl<T: SecretKind> SecretIngestor for SecretGate<T> {
    fn accepted_kind(&self) -> &'static str {
        T::KIND
    }

    fn ingest(&self, body: &[u8]) -> Result<(), SecretError> {
        let (kind, payload, signature) = decode_envelope(body)?;
        self.ingest_parts(&kind, &payload, &signature)
    }
}

fn signed_message(kind: &str, payload: &[u8]) -> Vec<u8> {
    to_vec(&Value::Array(vec![
        Value::Text(kind.to_string()),
        Value::Bytes(payload.to_vec()),
    ]))
}

fn decode_envelope(body: &[u8]) -> Result<(String, Vec<u8>, Vec<u8>), SecretError> {
    let mut reader = body;
    let value: Value =
        ciborium::de::from_reader(&mut reader).map_err(|_| SecretError::MalformedBody)?;
    if !reader.is_empty() {
        return Err(SecretError::MalformedBody);
    }
    let Value::Map(entries) = value else {
        return Err(SecretError::MalformedBody);
    };
    let (mut kind, mut payload, mut signature) = (None, None, None);
    for (k, v) in entries {
        match (k.as_text(), v) {
            (Some("kind"), Value::Text(t)) if kind.is_none() => kind = Some(t),
            (Some("payload"), Value::Bytes(b)) if payload.is_none() => payload = Some(b),
            (Some("signature"), Value::Bytes(b)) if signature.is_none() => signature = Some(b),
            _ => return Err(SecretError::MalformedBody),
        }
    }
    match (kind, payload, signature) {
        (Some(k), Some(p), Some(s)) => Ok((k, p, s)),
        _ => Err(SecretError::MalformedBody),
    }
}

/// Builds a signed ingestion body for `record` (provider side).
pub fn seal_secret<T: Serialize>(key: &SigningKey, kind: &str, record: &T) -> Vec<u8> {
    let mut payload = Vec::new();
    ciborium::ser::into_writer(record, &mut payload).expect("cbor serialization into Vec");
    seal_raw(key, kind, &payload)
}

/// Like [`seal_secret`] but over arbitrary payload bytes.
pub fn seal_raw(key: &SigningKey, kind: &str, payload: &[u8]) -> Vec<u8> {
    let signature = key.sign(&signed_message(kind, payload));
    to_vec(&sorted_map(vec![
        ("kind".into(), Value::Text(kind.to_string())),
        ("payload".into(), Value::Bytes(payload.to_vec())),
        (
            "signature".into(),
            Value::Bytes(signature.to_bytes().to_vec()),
        ),
    ]))
}
