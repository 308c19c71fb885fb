//! k-anonymity shuffler for client measurements.
//!
//! Measurements are buffered in memory. Every interval the buffer is swapped
//! out, groups whose crowd key occurs fewer than `k` times are dropped, and
//! the survivors are shuffled, stripped of arrival times and forwarded.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use bytes::Bytes;
use http::{Method, Request, Response, StatusCode};
use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::egress::{deliver_with_retry, BatchSink, DeliveryStats};
use crate::http::text;
use crate::runtime::{EnclaveBuilder, RuntimeError};

pub const MEASUREMENT_PATH: &str = "/measurement";
pub const MAX_PAYLOAD: usize = 64 * 1024;
pub const DEFAULT_BUFFER_CAP: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ShufflerError {
    #[error("crowd key is empty")]
    EmptyCrowdKey,
    #[error("payload of {len} bytes exceeds {MAX_PAYLOAD}")]
    OversizedPayload { len: usize },
    #[error("buffer is full")]
    BufferFull,
    #[error("malformed measurement")]
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MeasurementRecord {
    #[serde(with = "serde_bytes")]
    pub crowd_key: Vec<u8>,
    #[serde(with = "serde_bytes")]
    pub payload: Vec<u8>,
    pub received_at: u64,
}

impl MeasurementRecord {
    pub fn new(
        crowd_key: Vec<u8>,
        payload: Vec<u8>,
        received_at: u64,
    ) -> Result<Self, ShufflerError> {
        if crowd_key.is_empty() {
            return Err(ShufflerError::EmptyCrowdKey);
        }
        if payload.len() > MAX_PAYLOAD {
            return Err(ShufflerError::OversizedPayload { len: payload.len() });
        }
        Ok(Self {
            crowd_key,
            payload,
            received_at,
        })
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Submission {
    #[serde(with = "serde_bytes")]
    crowd_key: Vec<u8>,
    #[serde(with = "serde_bytes")]
    payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShufflerConfig {
    pub k: usize,
    pub interval_seconds: u64,
    #[serde(default)]
    pub backend_url: String,
    #[serde(default = "default_cap")]
    pub buffer_cap: usize,
}

fn default_cap() -> usize {
    DEFAULT_BUFFER_CAP
}

impl ShufflerConfig {
    pub fn new(k: usize, interval: Duration) -> Result<Self, RuntimeError> {
        let c = Self {
            k,
            interval_seconds: interval.as_secs(),
            backend_url: String::new(),
            buffer_cap: DEFAULT_BUFFER_CAP,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), RuntimeError> {
        if self.k == 0 {
            return Err(RuntimeError::InvalidConfig("k must be at least 1".into()));
        }
        if self.interval_seconds == 0 || self.buffer_cap == 0 {
            return Err(RuntimeError::InvalidConfig(
                "interval_seconds and buffer_cap must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self, RuntimeError> {
        let c: Self = toml::from_str(s).map_err(|e| RuntimeError::InvalidConfig(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, RuntimeError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn interval(&self) -> Duration {
        Duration::from_secs(self.interval_seconds)
    }
}

/// Drops every crowd-key group smaller than `k`, shuffles the rest and zeroes
/// arrival times. Returns the batch and the number of records dropped.
pub fn threshold_and_shuffle<R: RngCore + ?Sized>(
    records: Vec<MeasurementRecord>,
    k: usize,
    rng: &mut R,
) -> (Vec<MeasurementRecord>, usize) {
    let mut counts: HashMap<&[u8], usize> = HashMap::new();
    for r in &records {
        *counts.entry(&r.crowd_key).or_default() += 1;
    }
    let keep: std::collections::HashSet<Vec<u8>> = counts
        .into_iter()
        .filter(|&(_, n)| n >= k)
        .map(|(key, _)| key.to_vec())
        .collect();
    let total = records.len();
    let mut out: Vec<_> = records
        .into_iter()
        .filter(|r| keep.contains(&r.crowd_key))
        .map(|mut r| {
            r.received_at = 0;
            r
        })
        .collect();
    out.shuffle(rng);
    let dropped = total - out.len();
    (out, dropped)
}

pub struct Shuffler {
    config: ShufflerConfig,
    clock: Arc<dyn Clock>,
    buffer: Mutex<Vec<MeasurementRecord>>,
    rng: Mutex<Box<dyn RngCore + Send>>,
    discarded: AtomicU64,
    pub delivery: DeliveryStats,
}

impl Shuffler {
    /// `rng` drives the output permutation; use a CSPRNG in production.
    pub fn new(
        config: ShufflerConfig,
        clock: Arc<dyn Clock>,
        rng: Box<dyn RngCore + Send>,
    ) -> Self {
        Self {
            config,
            clock,
            buffer: Mutex::new(Vec::new()),
            rng: Mutex::new(rng),
            discarded: AtomicU64::new(0),
            delivery: DeliveryStats::default(),
        }
    }

    pub fn config(&self) -> &ShufflerConfig {
        &self.config
    }

    pub fn ingest(&self, crowd_key: Vec<u8>, payload: Vec<u8>) -> Result<usize, ShufflerError> {
        let rec = MeasurementRecord::new(crowd_key, payload, self.clock.now_ms())?;
        let mut buf = self.buffer.lock().expect("buffer poisoned");
        if buf.len() >= self.config.buffer_cap {
            return Err(ShufflerError::BufferFull);
        }
        buf.push(rec);
        Ok(buf.len())
    }

    /// Parses a CBOR `{crowd_key, payload}` body and buffers it.
    pub fn ingest_cbor(&self, body: &[u8]) -> Result<usize, ShufflerError> {
        let s: Submission = crate::cbor::decode(body).map_err(|_| ShufflerError::Malformed)?;
        self.ingest(s.crowd_key, s.payload)
    }

    pub fn buffered(&self) -> usize {
        self.buffer.lock().expect("buffer poisoned").len()
    }

    /// Records dropped for falling below the threshold, summed over flushes.
    pub fn discarded(&self) -> u64 {
        self.discarded.load(Ordering::Relaxed)
    }

    pub fn flush(&self) -> Vec<MeasurementRecord> {
        let taken = std::mem::take(&mut *self.buffer.lock().expect("buffer poisoned"));
        let mut rng = self.rng.lock().expect("rng poisoned");
        let (out, dropped) = threshold_and_shuffle(taken, self.config.k, &mut **rng);
        self.discarded.fetch_add(dropped as u64, Ordering::Relaxed);
        out
    }
}

pub fn encode_batch(records: &[MeasurementRecord]) -> Vec<u8> {
    crate::cbor::encode(&records)
}

/// Registers `POST /measurement`.
pub fn install_route(builder: &mut EnclaveBuilder, svc: Arc<Shuffler>) -> Result<(), RuntimeError> {
    builder.add_route(
        Method::POST,
        MEASUREMENT_PATH,
        move |req: &Request<Bytes>| measurement_response(&svc, req),
    )
}

fn measurement_response(svc: &Shuffler, req: &Request<Bytes>) -> Response<Bytes> {
    match svc.ingest_cbor(req.body()) {
        Ok(_) => text(StatusCode::ACCEPTED, ""),
        Err(ShufflerError::BufferFull) => text(StatusCode::SERVICE_UNAVAILABLE, "buffer full"),
        Err(ShufflerError::OversizedPayload { .. }) => {
            text(StatusCode::PAYLOAD_TOO_LARGE, "payload too large")
        }
        Err(e) => text(StatusCode::BAD_REQUEST, &e.to_string()),
    }
}

/// Flushes every configured interval and forwards non-empty batches.
pub fn spawn_flush_timer(
    svc: Arc<Shuffler>,
    sink: Arc<dyn BatchSink>,
) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(svc.config.interval());
        tick.tick().await;
        loop {
            tick.tick().await;
            let batch = svc.flush();
            if !batch.is_empty() {
                let body = Bytes::from(encode_batch(&batch));
                deliver_with_retry(sink.as_ref(), body, &svc.delivery).await;
            }
        }
    })
}
