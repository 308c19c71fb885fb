//! Attestation documents: format, the simulated hypervisor that signs them,
//! and the client-side verifier.
//!
//! A document binds the enclave's measurements (PCR0..2) to caller-chosen
//! fields: a freshness nonce, opaque user data (normally the fingerprint of
//! the enclave's TLS certificate) and an optional public key. The simulated
//! hypervisor signs the canonical CBOR encoding of those fields with ECDSA
//! P-384 under a leaf certificate that chains to a pinned test root.

mod encoding;
mod pki;
mod verify;

use std::fmt;

use rand::{CryptoRng, RngCore};

pub use encoding::{canonical_decode, canonical_encode};
pub use pki::{nsm_issue, HypervisorIdentity, TestPki, TrustAnchor, TRUST_ROOT_ENV};
pub use verify::{
    verify_document, verify_document_at, verify_signature_chain, Check, VerificationReport,
};

/// Width of a single measurement register (SHA-384).
pub const PCR_LEN: usize = 48;
/// Nonce width: 160 bits.
pub const NONCE_LEN: usize = 20;
/// Upper bound on `user_data` and `public_key`.
pub const MAX_FIELD_LEN: usize = 1024;

#[derive(Debug, thiserror::Error)]
pub enum AttestationError {
    #[error("field `{field}` is {len} bytes, limit is {MAX_FIELD_LEN}")]
    OversizedField { field: &'static str, len: usize },
    #[error("hypervisor identity has no signing key")]
    SignerUnavailable,
    #[error("malformed attestation document: {0}")]
    MalformedDocument(String),
    #[error("invalid nonce: {0}")]
    InvalidNonce(String),
    #[error("pki error: {0}")]
    Pki(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// The three measurement registers modeled by the simulator.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct PcrSet {
    /// Image.
    pub pcr0: [u8; PCR_LEN],
    /// Kernel and bootstrap.
    pub pcr1: [u8; PCR_LEN],
    /// Application.
    pub pcr2: [u8; PCR_LEN],
}

impl PcrSet {
    pub fn new(pcr0: [u8; PCR_LEN], pcr1: [u8; PCR_LEN], pcr2: [u8; PCR_LEN]) -> Self {
        Self { pcr0, pcr1, pcr2 }
    }

    pub fn random<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut p = Self::new([0; PCR_LEN], [0; PCR_LEN], [0; PCR_LEN]);
        rng.fill_bytes(&mut p.pcr0);
        rng.fill_bytes(&mut p.pcr1);
        rng.fill_bytes(&mut p.pcr2);
        p
    }

    pub fn registers(&self) -> [&[u8; PCR_LEN]; 3] {
        [&self.pcr0, &self.pcr1, &self.pcr2]
    }

    pub fn register_mut(&mut self, index: usize) -> Option<&mut [u8; PCR_LEN]> {
        match index {
            0 => Some(&mut self.pcr0),
            1 => Some(&mut self.pcr1),
            2 => Some(&mut self.pcr2),
            _ => None,
        }
    }
}

impl fmt::Debug for PcrSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PcrSet")
            .field("pcr0", &hex::encode(self.pcr0))
            .field("pcr1", &hex::encode(self.pcr1))
            .field("pcr2", &hex::encode(self.pcr2))
            .finish()
    }
}

/// A 160-bit freshness value.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Nonce([u8; NONCE_LEN]);

impl Nonce {
    pub fn new(bytes: [u8; NONCE_LEN]) -> Self {
        Self(bytes)
    }

    /// Draws a nonce from the operating system's CSPRNG.
    pub fn random() -> Self {
        Self::random_from(&mut rand::rngs::OsRng)
    }

    pub fn random_from<R: RngCore + CryptoRng + ?Sized>(rng: &mut R) -> Self {
        let mut b = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut b);
        Self(b)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, AttestationError> {
        let arr: [u8; NONCE_LEN] = bytes.try_into().map_err(|_| {
            AttestationError::InvalidNonce(format!(
                "expected {NONCE_LEN} bytes, got {}",
                bytes.len()
            ))
        })?;
        Ok(Self(arr))
    }

    pub fn from_hex(s: &str) -> Result<Self, AttestationError> {
        let raw = hex::decode(s).map_err(|e| AttestationError::InvalidNonce(e.to_string()))?;
        Self::from_slice(&raw)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn as_bytes(&self) -> &[u8; NONCE_LEN] {
        &self.0
    }
}

impl fmt::Debug for Nonce {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Nonce({})", self.to_hex())
    }
}

/// The signed portion of an attestation document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestationPayload {
    pub module_id: String,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
    pub pcrs: PcrSet,
    /// DER of the signing leaf certificate.
    pub certificate: Vec<u8>,
    /// DER certificates from the root down to the leaf's issuer.
    pub cabundle: Vec<Vec<u8>>,
    pub nonce: Option<Nonce>,
    pub user_data: Option<Vec<u8>>,
    pub public_key: Option<Vec<u8>>,
}

impl AttestationPayload {
    pub(crate) fn check_bounds(&self) -> Result<(), AttestationError> {
        for (field, v) in [
            ("user_data", &self.user_data),
            ("public_key", &self.public_key),
        ] {
            if let Some(v) = v {
                if v.len() > MAX_FIELD_LEN {
                    return Err(AttestationError::OversizedField {
                        field,
                        len: v.len(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// A payload plus the hypervisor's signature over its canonical encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestationDocument {
    pub payload: AttestationPayload,
    /// Fixed-width (r || s) ECDSA P-384 signature.
    pub signature: Vec<u8>,
}

impl AttestationDocument {
    /// Canonical CBOR: `{"payload": bstr, "signature": bstr}`.
    pub fn to_bytes(&self) -> Result<Vec<u8>, AttestationError> {
        let payload = canonical_encode(&self.payload)?;
        Ok(encoding::encode_envelope(&payload, &self.signature))
    }

    pub fn from_bytes(raw: &[u8]) -> Result<Self, AttestationError> {
        let (payload, signature) = encoding::decode_envelope(raw)?;
        Ok(Self {
            payload: canonical_decode(&payload)?,
            signature,
        })
    }

    pub fn nonce(&self) -> Option<&Nonce> {
        self.payload.nonce.as_ref()
    }

    pub fn user_data(&self) -> Option<&[u8]> {
        self.payload.user_data.as_deref()
    }

    pub fn public_key(&self) -> Option<&[u8]> {
        self.payload.public_key.as_deref()
    }

    pub fn pcrs(&self) -> &PcrSet {
        &self.payload.pcrs
    }
}

/// SHA-256 of a DER certificate; the value an enclave places in `user_data`.
pub fn certificate_fingerprint(der: &[u8]) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    Sha256::digest(der).into()
}
