//! Blind byte relay between an internet-facing socket and a VSOCK endpoint.

use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use tokio::io::AsyncWriteExt;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;
use tokio_util::sync::CancellationToken;
use tokio_util::task::TaskTracker;

use super::{
    AsyncStream, BoxStream, Connector, Listener, TransportError, VsockAddress, VsockConnector,
    VsockFabric,
};

pub const RELAY_BUFFER: usize = 64 * 1024;
pub const DEFAULT_GRACE: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Ingress,
    Egress,
}

/// One AF_INET <-> AF_VSOCK translation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProxyRoute {
    pub listen: SocketAddr,
    pub forward: VsockAddress,
    pub direction: Direction,
}

impl ProxyRoute {
    pub fn new(
        listen: SocketAddr,
        forward: VsockAddress,
        direction: Direction,
    ) -> Result<Self, TransportError> {
        if listen.port() == 0 || forward.port() == 0 {
            return Err(TransportError::InvalidAddress(
                "proxy route ports must be nonzero".into(),
            ));
        }
        Ok(Self {
            listen,
            forward,
            direction,
        })
    }
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct RouteFile {
    #[serde(default)]
    route: Vec<RawRoute>,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRoute {
    listen: SocketAddr,
    forward: String,
    direction: Direction,
}

impl ProxyRoute {
    /// Reads `[[route]]` tables, each with `listen` (`host:port`), `forward`
    /// (`cid:port`, optionally `vsock://`-prefixed) and `direction`.
    pub fn parse_routes(text: &str) -> Result<Vec<Self>, TransportError> {
        let file: RouteFile =
            toml::from_str(text).map_err(|e| TransportError::InvalidRoutes(e.to_string()))?;
        file.route
            .into_iter()
            .map(|r| Self::new(r.listen, r.forward.parse()?, r.direction))
            .collect()
    }

    pub fn routes_from_file(
        path: impl AsRef<std::path::Path>,
    ) -> Result<Vec<Self>, TransportError> {
        Self::parse_routes(&std::fs::read_to_string(path)?)
    }
}

/// Byte counts for one finished relay. The proxy never records content.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelayRecord {
    pub to_upstream: u64,
    pub to_client: u64,
}

#[derive(Debug, Default)]
pub struct ProxyStats {
    accepted: AtomicU64,
    upstream_failures: AtomicU64,
    relays: Mutex<Vec<RelayRecord>>,
}

impl ProxyStats {
    pub fn accepted(&self) -> u64 {
        self.accepted.load(Ordering::Relaxed)
    }

    pub fn upstream_failures(&self) -> u64 {
        self.upstream_failures.load(Ordering::Relaxed)
    }

    pub fn relays(&self) -> Vec<RelayRecord> {
        self.relays.lock().expect("stats poisoned").clone()
    }

    pub(crate) fn record(&self, r: RelayRecord) {
        self.relays.lock().expect("stats poisoned").push(r);
    }

    pub(crate) fn count_accept(&self) {
        self.accepted.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn count_upstream_failure(&self) {
        self.upstream_failures.fetch_add(1, Ordering::Relaxed);
    }
}

/// Handle to a running proxy; dropping it leaves the proxy running.
pub struct ProxyHandle {
    local_addr: Option<SocketAddr>,
    cancel: CancellationToken,
    tracker: TaskTracker,
    accept_loop: JoinHandle<()>,
    stats: Arc<ProxyStats>,
}

impl ProxyHandle {
    pub(crate) fn spawn<F>(local_addr: Option<SocketAddr>, stats: Arc<ProxyStats>, f: F) -> Self
    where
        F: FnOnce(CancellationToken, TaskTracker) -> JoinHandle<()>,
    {
        let cancel = CancellationToken::new();
        let tracker = TaskTracker::new();
        let accept_loop = f(cancel.clone(), tracker.clone());
        Self {
            local_addr,
            cancel,
            tracker,
            accept_loop,
            stats,
        }
    }

    /// The bound TCP address, for TCP-listening proxies.
    pub fn local_addr(&self) -> Option<SocketAddr> {
        self.local_addr
    }

    pub fn stats(&self) -> &Arc<ProxyStats> {
        &self.stats
    }

    /// Closes the listener, then waits up to `grace` for active relays.
    pub async fn stop(self, grace: Duration) {
        self.cancel.cancel();
        let _ = self.accept_loop.await;
        self.tracker.close();
        if tokio::time::timeout(grace, self.tracker.wait())
            .await
            .is_err()
        {
            tracing::warn!("proxy relays still active after grace period; abandoning");
        }
    }
}

/// Copies both directions until both are finished. EOF on one side is
/// propagated as a write shutdown on the other.
pub async fn relay<A, B>(mut a: A, mut b: B) -> io::Result<RelayRecord>
where
    A: AsyncStream,
    B: AsyncStream,
{
    let (up, down) =
        tokio::io::copy_bidirectional_with_sizes(&mut a, &mut b, RELAY_BUFFER, RELAY_BUFFER)
            .await?;
    Ok(RelayRecord {
        to_upstream: up,
        to_client: down,
    })
}

/// Accepts on `listener` and pairs each connection with a fresh upstream.
pub fn serve_relay<L, C>(listener: L, upstream: C, local_addr: Option<SocketAddr>) -> ProxyHandle
where
    L: Listener,
    C: Connector,
{
    let stats = Arc::new(ProxyStats::default());
    let upstream = Arc::new(upstream);
    let st = stats.clone();
    ProxyHandle::spawn(local_addr, stats, move |cancel, tracker| {
        tokio::spawn(async move {
            loop {
                let client = tokio::select! {
                    _ = cancel.cancelled() => break,
                    r = listener.accept_stream() => r,
                };
                let mut client = match client {
                    Ok(c) => c,
                    Err(e) => {
                        tracing::warn!(error = %e, "proxy accept failed");
                        if e.kind() == io::ErrorKind::BrokenPipe {
                            break;
                        }
                        continue;
                    }
                };
                st.count_accept();
                let upstream = upstream.clone();
                let st = st.clone();
                tracker.spawn(async move {
                    let server: BoxStream = match upstream.connect_stream().await {
                        Ok(s) => s,
                        Err(e) => {
                            tracing::debug!(error = %e, "upstream unavailable");
                            st.count_upstream_failure();
                            let _ = client.shutdown().await;
                            return;
                        }
                    };
                    match relay(client, server).await {
                        Ok(r) => {
                            tracing::debug!(up = r.to_upstream, down = r.to_client, "relay done");
                            st.record(r);
                        }
                        Err(e) => tracing::debug!(error = %e, "relay ended with error"),
                    }
                });
            }
        })
    })
}

/// Binds `route.listen` and forwards every connection to `route.forward`.
pub async fn run_tcp_proxy(
    route: &ProxyRoute,
    fabric: VsockFabric,
) -> Result<ProxyHandle, TransportError> {
    let listener = TcpListener::bind(route.listen).await?;
    let local = listener.local_addr()?;
    tracing::info!(listen = %local, forward = %route.forward, direction = ?route.direction, "tcp proxy up");
    Ok(serve_relay(
        listener,
        VsockConnector {
            fabric,
            addr: route.forward,
        },
        Some(local),
    ))
}
