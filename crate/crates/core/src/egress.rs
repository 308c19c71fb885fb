//! Delivery of application batches to a back end through the SOCKS egress.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use async_trait::async_trait;
use bytes::Bytes;

use crate::http::HttpClient;
use crate::transport::{socks_connect, Connector, Target, TargetHost};

#[derive(Debug, thiserror::Error)]
pub enum DeliveryError {
    #[error("invalid back-end url {0:?}")]
    InvalidUrl(String),
    #[error("back end unreachable: {0}")]
    Unreachable(String),
    #[error("back end answered {0}")]
    Rejected(u16),
}

#[async_trait]
pub trait BatchSink: Send + Sync {
    async fn deliver(&self, body: Bytes) -> Result<(), DeliveryError>;
}

/// `http://host[:port]/path` reached via CONNECT on the egress proxy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendUrl {
    pub target: Target,
    pub path: String,
}

impl std::str::FromStr for BackendUrl {
    type Err = DeliveryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DeliveryError::InvalidUrl(s.to_string());
        let uri: http::Uri = s.parse().map_err(|_| bad())?;
        if uri.scheme_str() != Some("http") {
            return Err(bad());
        }
        let host = uri.host().ok_or_else(bad)?;
        let host = host.trim_start_matches('[').trim_end_matches(']');
        let host = TargetHost::parse(host).map_err(|_| bad())?;
        let path = uri.path_and_query().map_or("/", |p| p.as_str()).to_string();
        Ok(Self {
            target: Target {
                host,
                port: uri.port_u16().unwrap_or(80),
            },
            path,
        })
    }
}

/// POSTs CBOR bodies to a back end, one SOCKS tunnel per delivery.
pub struct SocksBackend {
    proxy: Arc<dyn Connector>,
    url: BackendUrl,
}

impl SocksBackend {
    pub fn new(proxy: Arc<dyn Connector>, url: BackendUrl) -> Self {
        Self { proxy, url }
    }
}

#[async_trait]
impl BatchSink for SocksBackend {
    async fn deliver(&self, body: Bytes) -> Result<(), DeliveryError> {
        let down = |e: std::io::Error| DeliveryError::Unreachable(e.to_string());
        let stream = self.proxy.connect_stream().await.map_err(down)?;
        let tunnel = socks_connect(stream, &self.url.target)
            .await
            .map_err(down)?;
        let mut client = HttpClient::handshake(tunnel).await.map_err(down)?;
        let resp = client
            .post(&self.url.path, "application/cbor", body)
            .await
            .map_err(down)?;
        if resp.status().is_success() {
            Ok(())
        } else {
            Err(DeliveryError::Rejected(resp.status().as_u16()))
        }
    }
}

#[derive(Debug, Default)]
pub struct DeliveryStats {
    delivered: AtomicU64,
    retried: AtomicU64,
    dropped: AtomicU64,
}

impl DeliveryStats {
    pub fn delivered(&self) -> u64 {
        self.delivered.load(Ordering::Relaxed)
    }

    pub fn retried(&self) -> u64 {
        self.retried.load(Ordering::Relaxed)
    }

    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }
}

/// One attempt plus one retry; after that the batch is dropped and counted.
pub async fn deliver_with_retry(sink: &dyn BatchSink, body: Bytes, stats: &DeliveryStats) -> bool {
    for attempt in 0..2 {
        match sink.deliver(body.clone()).await {
            Ok(()) => {
                stats.delivered.fetch_add(1, Ordering::Relaxed);
                return true;
            }
            Err(e) => {
                tracing::warn!(attempt, error = %e, "batch delivery failed");
                if attempt == 0 {
                    stats.retried.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
    }
    stats.dropped.fetch_add(1, Ordering::Relaxed);
    false
}
