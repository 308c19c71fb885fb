//! Bootstrapping the runtime's randomness from the hypervisor.

use std::sync::Mutex;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use super::RuntimeError;

/// Bytes that must be drawn from the hypervisor before any key is generated.
pub const MIN_SEED_BYTES: usize = 64;

/// The hypervisor's randomness interface. Returns how many bytes were written.
pub trait HypervisorRandomness {
    fn read(&mut self, buf: &mut [u8]) -> usize;
}

/// Production source.
#[derive(Debug, Default, Clone, Copy)]
pub struct OsRandomness;

impl HypervisorRandomness for OsRandomness {
    fn read(&mut self, buf: &mut [u8]) -> usize {
        rand::rngs::OsRng.fill_bytes(buf);
        buf.len()
    }
}

/// Deterministic stream for tests.
pub struct SeededRandomness(ChaCha20Rng);

impl SeededRandomness {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha20Rng::seed_from_u64(seed))
    }
}

impl HypervisorRandomness for SeededRandomness {
    fn read(&mut self, buf: &mut [u8]) -> usize {
        self.0.fill_bytes(buf);
        buf.len()
    }
}

/// A source that yields at most `limit` bytes in total.
pub struct LimitedRandomness<S> {
    inner: S,
    remaining: usize,
}

impl<S> LimitedRandomness<S> {
    pub fn new(inner: S, limit: usize) -> Self {
        Self {
            inner,
            remaining: limit,
        }
    }
}

impl<S: HypervisorRandomness> HypervisorRandomness for LimitedRandomness<S> {
    fn read(&mut self, buf: &mut [u8]) -> usize {
        let n = buf.len().min(self.remaining);
        let got = self.inner.read(&mut buf[..n]);
        self.remaining -= got;
        got
    }
}

/// The runtime's randomness provider once seeded.
pub struct EntropyPool {
    rng: Mutex<ChaCha20Rng>,
}

impl std::fmt::Debug for EntropyPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("EntropyPool(..)")
    }
}

impl EntropyPool {
    /// Draws [`MIN_SEED_BYTES`] from `source` and mixes them with local OS
    /// randomness into a fresh ChaCha20 state.
    pub fn seed(source: &mut dyn HypervisorRandomness) -> Result<Self, RuntimeError> {
        let mut buf = [0u8; MIN_SEED_BYTES];
        let mut got = 0;
        while got < MIN_SEED_BYTES {
            let n = source.read(&mut buf[got..]);
            if n == 0 {
                break;
            }
            got += n;
        }
        if got < MIN_SEED_BYTES {
            return Err(RuntimeError::EntropyUnavailable { got });
        }
        let mut local = [0u8; 32];
        rand::rngs::OsRng.fill_bytes(&mut local);
        let seed: [u8; 32] = Sha256::new()
            .chain_update(b"enclaved entropy pool v1")
            .chain_update(buf)
            .chain_update(local)
            .finalize()
            .into();
        Ok(Self {
            rng: Mutex::new(ChaCha20Rng::from_seed(seed)),
        })
    }

    /// An independent generator derived from the pool.
    pub fn fork(&self) -> ChaCha20Rng {
        let mut seed = [0u8; 32];
        self.rng
            .lock()
            .expect("entropy pool poisoned")
            .fill_bytes(&mut seed);
        ChaCha20Rng::from_seed(seed)
    }

    pub fn fill(&self, buf: &mut [u8]) {
        self.rng
            .lock()
            .expect("entropy pool poisoned")
            .fill_bytes(buf);
    }
}
