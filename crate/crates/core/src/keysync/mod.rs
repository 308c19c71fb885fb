//! Key synchronization between enclaves of the same image.
//!
//! A booting enclave looks up `_enclaved._tcp.<fqdn>`. With no answers it
//! becomes the origin and generates [`KeyMaterial`]; otherwise it picks one
//! peer at random and runs the three-step exchange:
//!
//! 1. `GET /enclave/nonce` returns the origin's nonce.
//! 2. `POST /enclave/sync` carries the joiner's attestation document with
//!    `nonce` = origin nonce, `public_key` = ephemeral X25519 key and
//!    `user_data` = the joiner's own nonce.
//! 3. The origin answers with its own document: `nonce` = joiner nonce,
//!    `user_data` = HPKE-sealed key material.
//!
//! Both sides require the peer's PCRs to equal their own.

mod discovery;
mod nonce_cache;
mod protocol;

use std::fmt;

use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};
use zeroize::Zeroizing;

pub use discovery::{
    discover, discover_with, srv_name, Backoff, DnsResolver, Resolver, ResolverError, SrvRecordSet,
    SrvTarget, StaticResolver,
};
pub use nonce_cache::{NonceRejection, SyncNonceCache, NONCE_TTL};
pub use protocol::{
    bootstrap_keys, install_routes, request_keys, BootstrapRole, HttpSyncTransport, KeySyncServer,
    LocalTransport, OriginCheck, RequestCheck, SyncTransport, NONCE_PATH, SYNC_PATH,
};

use crate::attestation::AttestationError;

#[derive(Debug, thiserror::Error)]
pub enum KeySyncError {
    #[error("resolver failure: {0}")]
    ResolverFailure(String),
    #[error("origin verification failed: {0:?}")]
    OriginVerificationFailed(OriginCheck),
    #[error("could not decrypt key material")]
    DecryptionFailed,
    #[error("key request rejected: {0:?}")]
    RequestVerificationFailed(RequestCheck),
    #[error("origin holds no key material")]
    NoKeyMaterial,
    #[error("transport: {0}")]
    Transport(String),
    #[error(transparent)]
    Attestation(#[from] AttestationError),
}

pub const SECRET_LEN: usize = 32;
const ENCODED_LEN: usize = SECRET_LEN + 32 + 8;

/// The secret shared by all enclaves of one deployment.
#[derive(Clone, PartialEq, Eq)]
pub struct KeyMaterial {
    secret: Zeroizing<[u8; SECRET_LEN]>,
    key_id: [u8; 32],
    created_at: u64,
}

impl fmt::Debug for KeyMaterial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyMaterial")
            .field("key_id", &hex::encode(self.key_id))
            .field("created_at", &self.created_at)
            .finish_non_exhaustive()
    }
}

impl KeyMaterial {
    pub fn generate<R: RngCore + CryptoRng + ?Sized>(rng: &mut R, created_at: u64) -> Self {
        let mut secret = Zeroizing::new([0u8; SECRET_LEN]);
        rng.fill_bytes(&mut secret[..]);
        Self::from_secret(*secret, created_at)
    }

    pub fn from_secret(secret: [u8; SECRET_LEN], created_at: u64) -> Self {
        Self {
            key_id: Sha256::digest(secret).into(),
            secret: Zeroizing::new(secret),
            created_at,
        }
    }

    pub fn secret(&self) -> &[u8; SECRET_LEN] {
        &self.secret
    }

    /// SHA-256 of the secret.
    pub fn key_id(&self) -> &[u8; 32] {
        &self.key_id
    }

    pub fn created_at(&self) -> u64 {
        self.created_at
    }

    pub(crate) fn encode(&self) -> Zeroizing<Vec<u8>> {
        let mut out = Zeroizing::new(Vec::with_capacity(ENCODED_LEN));
        out.extend_from_slice(&self.secret[..]);
        out.extend_from_slice(&self.key_id);
        out.extend_from_slice(&self.created_at.to_be_bytes());
        out
    }

    /// Parses `secret || key_id || created_at` and re-checks the key ID.
    pub(crate) fn decode(raw: &[u8]) -> Option<Self> {
        if raw.len() != ENCODED_LEN {
            return None;
        }
        let secret: [u8; SECRET_LEN] = raw[..SECRET_LEN].try_into().ok()?;
        let created_at = u64::from_be_bytes(raw[64..].try_into().ok()?);
        let km = Self::from_secret(secret, created_at);
        (km.key_id[..] == raw[SECRET_LEN..64]).then_some(km)
    }
}
