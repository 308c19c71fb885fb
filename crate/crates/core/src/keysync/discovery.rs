//! Finding already-running enclaves through DNS SRV records.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;
use rand::Rng;

use super::KeySyncError;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SrvTarget {
    pub hostname: String,
    pub port: u16,
    pub priority: u16,
    pub weight: u16,
}

/// Result of a discovery query. Empty means "no enclave yet: become origin".
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SrvRecordSet {
    pub targets: Vec<SrvTarget>,
}

impl SrvRecordSet {
    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Uniformly random target; SRV priority and weight are not consulted.
    pub fn choose<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<&SrvTarget> {
        if self.targets.is_empty() {
            return None;
        }
        Some(&self.targets[rng.gen_range(0..self.targets.len())])
    }
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("resolver: {0}")]
pub struct ResolverError(pub String);

#[async_trait]
pub trait Resolver: Send + Sync {
    async fn lookup_srv(&self, name: &str) -> Result<Vec<SrvTarget>, ResolverError>;
}

/// SRV owner name for an enclave service.
pub fn srv_name(fqdn: &str) -> String {
    format!("_enclaved._tcp.{}", fqdn.trim_end_matches('.'))
}

/// In-memory SRV table.
#[derive(Debug, Default)]
pub struct StaticResolver {
    table: Mutex<HashMap<String, Vec<SrvTarget>>>,
}

impl StaticResolver {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a target under `_enclaved._tcp.<fqdn>`.
    pub fn register(&self, fqdn: &str, target: SrvTarget) {
        self.table
            .lock()
            .expect("resolver table poisoned")
            .entry(srv_name(fqdn))
            .or_default()
            .push(target);
    }
}

#[async_trait]
impl Resolver for StaticResolver {
    async fn lookup_srv(&self, name: &str) -> Result<Vec<SrvTarget>, ResolverError> {
        Ok(self
            .table
            .lock()
            .expect("resolver table poisoned")
            .get(name)
            .cloned()
            .unwrap_or_default())
    }
}

/// Real DNS, configured from the host's resolver settings.
pub struct DnsResolver {
    inner: hickory_resolver::TokioAsyncResolver,
}

impl DnsResolver {
    pub fn from_system_conf() -> Result<Self, ResolverError> {
        hickory_resolver::TokioAsyncResolver::tokio_from_system_conf()
            .map(|inner| Self { inner })
            .map_err(|e| ResolverError(e.to_string()))
    }
}

#[async_trait]
impl Resolver for DnsResolver {
    async fn lookup_srv(&self, name: &str) -> Result<Vec<SrvTarget>, ResolverError> {
        use hickory_resolver::error::ResolveErrorKind;
        match self.inner.srv_lookup(name).await {
            Ok(lookup) => Ok(lookup
                .iter()
                .map(|srv| SrvTarget {
                    hostname: srv.target().to_utf8().trim_end_matches('.').to_string(),
                    port: srv.port(),
                    priority: srv.priority(),
                    weight: srv.weight(),
                })
                .collect()),
            Err(e) if matches!(e.kind(), ResolveErrorKind::NoRecordsFound { .. }) => Ok(Vec::new()),
            Err(e) => Err(ResolverError(e.to_string())),
        }
    }
}

/// Retry schedule for transient resolver failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Backoff {
    pub attempts: u32,
    pub initial: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Self {
            attempts: 5,
            initial: Duration::from_secs(1),
        }
    }
}

pub async fn discover(resolver: &dyn Resolver, fqdn: &str) -> Result<SrvRecordSet, KeySyncError> {
    discover_with(resolver, fqdn, Backoff::default()).await
}

/// Queries `_enclaved._tcp.<fqdn>`, sleeping `initial * 2^i` between failed tries.
pub async fn discover_with(
    resolver: &dyn Resolver,
    fqdn: &str,
    backoff: Backoff,
) -> Result<SrvRecordSet, KeySyncError> {
    let name = srv_name(fqdn);
    let mut delay = backoff.initial;
    let mut last = None;
    for attempt in 0..backoff.attempts {
        match resolver.lookup_srv(&name).await {
            Ok(targets) => return Ok(SrvRecordSet { targets }),
            Err(e) => {
                tracing::warn!(attempt, error = %e, "srv lookup failed");
                last = Some(e);
            }
        }
        if attempt + 1 < backoff.attempts {
            tokio::time::sleep(delay).await;
            delay *= 2;
        }
    }
    Err(KeySyncError::ResolverFailure(
        last.map_or_else(|| "no attempts".into(), |e| e.0),
    ))
}
