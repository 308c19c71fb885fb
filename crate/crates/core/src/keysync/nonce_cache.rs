use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crate::attestation::Nonce;
use crate::clock::Clock;

/// How long an origin honors a nonce it handed out.
pub const NONCE_TTL: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum NonceRejection {
    #[error("nonce was never issued or was already used")]
    Unknown,
    #[error("nonce expired")]
    Expired,
}

/// Nonces issued by an origin enclave, each usable at most once within the TTL.
pub struct SyncNonceCache {
    entries: Mutex<HashMap<Nonce, u64>>,
    ttl_ms: u64,
    clock: Arc<dyn Clock>,
}

impl SyncNonceCache {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Self::with_ttl(clock, NONCE_TTL)
    }

    pub fn with_ttl(clock: Arc<dyn Clock>, ttl: Duration) -> Self {
        Self {
            entries: Mutex::new(HashMap::new()),
            ttl_ms: ttl.as_millis() as u64,
            clock,
        }
    }

    /// Mints and records a fresh nonce; expired entries are purged on the way.
    pub fn issue(&self) -> Nonce {
        let now = self.clock.now_ms();
        let nonce = Nonce::random();
        let mut entries = self.entries.lock().expect("nonce cache poisoned");
        let ttl = self.ttl_ms;
        entries.retain(|_, issued| now.saturating_sub(*issued) <= ttl);
        entries.insert(nonce, now);
        nonce
    }

    /// Removes `nonce` and reports whether it was live. Check and removal
    /// happen under one lock, so concurrent consumers see at most one success.
    pub fn consume(&self, nonce: &Nonce) -> Result<(), NonceRejection> {
        let now = self.clock.now_ms();
        let issued = self
            .entries
            .lock()
            .expect("nonce cache poisoned")
            .remove(nonce)
            .ok_or(NonceRejection::Unknown)?;
        if now.saturating_sub(issued) > self.ttl_ms {
            return Err(NonceRejection::Expired);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("nonce cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
