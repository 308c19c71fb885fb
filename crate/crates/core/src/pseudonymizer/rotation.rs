use std::net::IpAddr;
use std::sync::Arc;
use std::time::Duration;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::cryptopan::{CryptoPan, PrefixCipherKey};
use super::digest::{hmac_pseudonymize, HmacKey};
use super::Pseudonym;
use crate::clock::Clock;

pub const DEFAULT_ROTATION: Duration = Duration::from_secs(21 * 24 * 3600);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PseudonymMode {
    #[default]
    CryptoPan,
    Hmac,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RotationSchedule {
    period: Duration,
}

impl Default for RotationSchedule {
    fn default() -> Self {
        Self {
            period: DEFAULT_ROTATION,
        }
    }
}

impl RotationSchedule {
    pub fn new(period: Duration) -> Option<Self> {
        (!period.is_zero()).then_some(Self { period })
    }

    pub fn period(&self) -> Duration {
        self.period
    }
}

enum ActiveKey {
    Prefix {
        key: PrefixCipherKey,
        pan: Box<CryptoPan>,
    },
    Hmac(HmacKey),
}

impl ActiveKey {
    fn generate(mode: PseudonymMode, rng: &mut dyn RngCore) -> Self {
        match mode {
            PseudonymMode::CryptoPan => {
                let key = PrefixCipherKey::generate(&mut RngAdapter(rng));
                let pan = Box::new(CryptoPan::new(&key));
                ActiveKey::Prefix { key, pan }
            }
            PseudonymMode::Hmac => ActiveKey::Hmac(HmacKey::generate(&mut RngAdapter(rng))),
        }
    }

    fn bytes(&self) -> Vec<u8> {
        match self {
            ActiveKey::Prefix { key, .. } => key.to_bytes().to_vec(),
            ActiveKey::Hmac(k) => k.as_bytes().to_vec(),
        }
    }
}

// The rotator owns a boxed RNG seeded from the enclave pool; key types want
// `CryptoRng`, which the pool-derived generators are.
struct RngAdapter<'a>(&'a mut dyn RngCore);

impl RngCore for RngAdapter<'_> {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.0.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.0.try_fill_bytes(dest)
    }
}

impl rand::CryptoRng for RngAdapter<'_> {}

/// Holds the current pseudonymization key and replaces it every period.
pub struct KeyRotator {
    mode: PseudonymMode,
    schedule: RotationSchedule,
    clock: Arc<dyn Clock>,
    rng: Box<dyn RngCore + Send>,
    key: ActiveKey,
    key_id_hash: [u8; 32],
    epoch_start_ms: u64,
    rotations: u64,
}

impl KeyRotator {
    /// `rng` must be cryptographically secure outside of tests.
    pub fn new(
        mode: PseudonymMode,
        schedule: RotationSchedule,
        clock: Arc<dyn Clock>,
        mut rng: Box<dyn RngCore + Send>,
    ) -> Self {
        let key = ActiveKey::generate(mode, rng.as_mut());
        let key_id_hash = Sha256::digest(key.bytes()).into();
        let epoch_start_ms = clock.now_ms();
        Self {
            mode,
            schedule,
            clock,
            rng,
            key,
            key_id_hash,
            epoch_start_ms,
            rotations: 0,
        }
    }

    pub fn mode(&self) -> PseudonymMode {
        self.mode
    }

    /// SHA-256 over the raw bytes of the current key.
    pub fn key_id_hash(&self) -> [u8; 32] {
        self.key_id_hash
    }

    pub fn rotations(&self) -> u64 {
        self.rotations
    }

    /// Replaces the key if a period boundary has passed. Several elapsed
    /// periods still count as one rotation: no record was seen in between.
    pub fn rotate_if_due(&mut self) -> bool {
        let period = self.schedule.period.as_millis() as u64;
        let elapsed = self.clock.now_ms().saturating_sub(self.epoch_start_ms);
        if elapsed < period {
            return false;
        }
        self.epoch_start_ms += (elapsed / period) * period;
        // Dropping the old key zeroizes it.
        self.key = ActiveKey::generate(self.mode, self.rng.as_mut());
        self.key_id_hash = Sha256::digest(self.key.bytes()).into();
        self.rotations += 1;
        tracing::info!(rotations = self.rotations, "pseudonymization key rotated");
        true
    }

    pub fn pseudonymize(&mut self, addr: IpAddr) -> Pseudonym {
        self.rotate_if_due();
        match &self.key {
            ActiveKey::Prefix { pan, .. } => Pseudonym::Address(pan.pseudonymize(addr)),
            ActiveKey::Hmac(k) => Pseudonym::Digest(hmac_pseudonymize(k, addr)),
        }
    }

    /// Serialized rotator state: mode, epoch start and current key.
    pub fn snapshot(&self) -> Vec<u8> {
        let mut out = vec![self.mode as u8];
        out.extend_from_slice(&self.epoch_start_ms.to_be_bytes());
        out.extend_from_slice(&self.key.bytes());
        out.extend_from_slice(&self.key_id_hash);
        out
    }
}
