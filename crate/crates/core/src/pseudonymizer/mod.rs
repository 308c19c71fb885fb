//! Client IP pseudonymization for abuse-detection telemetry.
//!
//! Mirrored requests arrive on `POST /report` with the original client
//! address in `X-Client-Addr`. Each address is pseudonymized under the
//! current rotation key, queued, and released in shuffled batches to a back
//! end reached through the SOCKS egress.

mod batch;
mod cryptopan;
mod digest;
mod extract;
mod rotation;

use std::net::IpAddr;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use bytes::Bytes;
use http::{Method, Request, Response, StatusCode};
use rand::RngCore;
use serde::{Deserialize, Serialize, Serializer};

pub use batch::{BatchPolicy, Batcher};
pub use cryptopan::{common_prefix_len, CryptoPan, PrefixCipherKey, PREFIX_KEY_LEN};
pub use digest::{hmac_pseudonymize, HmacKey, HMAC_KEY_LEN};
pub use extract::{extract_client_ip, ExtractError, CLIENT_ADDR_HEADER};
pub use rotation::{KeyRotator, PseudonymMode, RotationSchedule, DEFAULT_ROTATION};

use crate::clock::Clock;
use crate::egress::{deliver_with_retry, BatchSink, DeliveryStats};
use crate::http::text;
use crate::runtime::{EnclaveBuilder, RuntimeError};

pub const REPORT_PATH: &str = "/report";

/// A pseudonymized address: still an address under Crypto-PAn, an opaque
/// digest under HMAC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pseudonym {
    Address(IpAddr),
    Digest([u8; 32]),
}

impl Serialize for Pseudonym {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Pseudonym::Address(ip) => s.collect_str(ip),
            Pseudonym::Digest(d) => s.serialize_bytes(d),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PseudonymRecord {
    pub pseudonym: Pseudonym,
    #[serde(serialize_with = "as_bytes")]
    pub key_id_hash: [u8; 32],
    /// Arrival time rounded down to the batch window.
    pub observed_at: u64,
}

fn as_bytes<S: Serializer>(v: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
    s.serialize_bytes(v)
}

/// One CBOR array per batch.
pub fn encode_batch(records: &[PseudonymRecord]) -> Vec<u8> {
    crate::cbor::encode(&records)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudonymizerConfig {
    pub backend_url: String,
    pub batch_min_count: usize,
    pub batch_min_age_minutes: u64,
    pub rotation_days: u64,
    pub mode: PseudonymMode,
}

impl Default for PseudonymizerConfig {
    fn default() -> Self {
        Self {
            backend_url: String::new(),
            batch_min_count: 100,
            batch_min_age_minutes: 5,
            rotation_days: 21,
            mode: PseudonymMode::CryptoPan,
        }
    }
}

impl PseudonymizerConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, RuntimeError> {
        toml::from_str(s).map_err(|e| RuntimeError::InvalidConfig(e.to_string()))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, RuntimeError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn policy(&self) -> Result<BatchPolicy, RuntimeError> {
        BatchPolicy::new(
            self.batch_min_count,
            Duration::from_secs(self.batch_min_age_minutes * 60),
        )
        .ok_or_else(|| RuntimeError::InvalidConfig("batch thresholds must be positive".into()))
    }

    pub fn schedule(&self) -> Result<RotationSchedule, RuntimeError> {
        RotationSchedule::new(Duration::from_secs(self.rotation_days * 24 * 3600))
            .ok_or_else(|| RuntimeError::InvalidConfig("rotation_days must be positive".into()))
    }
}

struct State {
    rotator: KeyRotator,
    batcher: Batcher<PseudonymRecord>,
}

/// Rotation, pseudonymization and batching behind one lock, so each record
/// is produced under exactly one key and lands in exactly one batch.
pub struct Pseudonymizer {
    state: Mutex<State>,
    clock: Arc<dyn Clock>,
    window_ms: u64,
    rejected: AtomicU64,
    pub delivery: DeliveryStats,
}

impl Pseudonymizer {
    pub fn new(
        mode: PseudonymMode,
        policy: BatchPolicy,
        schedule: RotationSchedule,
        clock: Arc<dyn Clock>,
        key_rng: Box<dyn RngCore + Send>,
        shuffle_rng: Box<dyn RngCore + Send>,
    ) -> Self {
        Self {
            state: Mutex::new(State {
                rotator: KeyRotator::new(mode, schedule, clock.clone(), key_rng),
                batcher: Batcher::new(policy, clock.clone(), shuffle_rng),
            }),
            window_ms: (policy.min_age.as_millis() as u64).max(1),
            clock,
            rejected: AtomicU64::new(0),
            delivery: DeliveryStats::default(),
        }
    }

    fn state(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().expect("pseudonymizer state poisoned")
    }

    /// Pseudonymizes and queues one address; returns a batch if one is due.
    pub fn record(&self, addr: IpAddr) -> Option<Vec<PseudonymRecord>> {
        let now = self.clock.now_ms();
        let mut st = self.state();
        let pseudonym = st.rotator.pseudonymize(addr);
        let rec = PseudonymRecord {
            pseudonym,
            key_id_hash: st.rotator.key_id_hash(),
            observed_at: now - now % self.window_ms,
        };
        st.batcher.push(rec)
    }

    /// Handles a mirrored request's headers.
    pub fn report(
        &self,
        headers: &http::HeaderMap,
    ) -> Result<Option<Vec<PseudonymRecord>>, ExtractError> {
        match extract_client_ip(headers) {
            Ok(addr) => Ok(self.record(addr)),
            Err(e) => {
                self.rejected.fetch_add(1, Ordering::Relaxed);
                Err(e)
            }
        }
    }

    /// Timer path: releases the queue if age alone has made it due, and
    /// rotates the key on schedule even when idle.
    pub fn poll(&self) -> Option<Vec<PseudonymRecord>> {
        let mut st = self.state();
        st.rotator.rotate_if_due();
        st.batcher.poll()
    }

    pub fn queued(&self) -> usize {
        self.state().batcher.len()
    }

    pub fn key_id_hash(&self) -> [u8; 32] {
        self.state().rotator.key_id_hash()
    }

    /// Requests refused for a missing, malformed or duplicated header.
    pub fn rejected(&self) -> u64 {
        self.rejected.load(Ordering::Relaxed)
    }

    /// Everything the service holds: rotator state and the queued records.
    pub fn snapshot(&self) -> Vec<u8> {
        let st = self.state();
        let mut out = st.rotator.snapshot();
        out.extend_from_slice(&encode_batch(st.batcher.queued()));
        out
    }
}

async fn forward(svc: Arc<Pseudonymizer>, sink: Arc<dyn BatchSink>, batch: Vec<PseudonymRecord>) {
    let body = Bytes::from(encode_batch(&batch));
    deliver_with_retry(sink.as_ref(), body, &svc.delivery).await;
}

/// Registers `POST /report`. Batches that become due are forwarded on a
/// spawned task.
pub fn install_route(
    builder: &mut EnclaveBuilder,
    svc: Arc<Pseudonymizer>,
    sink: Arc<dyn BatchSink>,
) -> Result<(), RuntimeError> {
    builder.add_route(Method::POST, REPORT_PATH, move |req: &Request<Bytes>| {
        report_response(&svc, &sink, req)
    })
}

fn report_response(
    svc: &Arc<Pseudonymizer>,
    sink: &Arc<dyn BatchSink>,
    req: &Request<Bytes>,
) -> Response<Bytes> {
    match svc.report(req.headers()) {
        Ok(batch) => {
            if let Some(batch) = batch {
                tokio::spawn(forward(svc.clone(), sink.clone(), batch));
            }
            text(StatusCode::NO_CONTENT, "")
        }
        Err(e) => text(StatusCode::BAD_REQUEST, &e.to_string()),
    }
}

/// Polls the batcher every `every` and forwards what is due.
pub fn spawn_flush_timer(
    svc: Arc<Pseudonymizer>,
    sink: Arc<dyn BatchSink>,
    every: Duration,
) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(every);
        loop {
            tick.tick().await;
            if let Some(batch) = svc.poll() {
                forward(svc.clone(), sink.clone(), batch).await;
            }
        }
    })
}
