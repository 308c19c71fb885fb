use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use http::Method;
use tokio::net::TcpListener;

use crate::attestation::{PcrSet, TestPki};
use crate::http::HttpClient;
use crate::runtime::{hello_world, Enclave, EnclaveBuilder, EnclaveConfig, OsRandomness};
use crate::transport::{
    serve_relay, Connector, TcpConnector, VsockAddress, VsockConnector, VsockFabric,
};

pub const HELLO_PATH: &str = "/hello";
const BENCH_CID: u32 = 16;
const BENCH_PORT: u32 = 8080;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scenario {
    /// client -> TCP proxy -> VSOCK -> app
    Full,
    /// client -> VSOCK -> app
    NoProxy,
    /// client -> app over loopback TCP
    Direct,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Full, Scenario::NoProxy, Scenario::Direct];
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Full => "full",
            Scenario::NoProxy => "no-proxy",
            Scenario::Direct => "direct",
        })
    }
}

impl std::str::FromStr for Scenario {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Scenario::Full),
            "no-proxy" => Ok(Scenario::NoProxy),
            "direct" => Ok(Scenario::Direct),
            other => Err(BenchError::ScenarioUnavailable(format!(
                "unknown scenario {other:?}"
            ))),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("scenario unavailable: {0}")]
    ScenarioUnavailable(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchStats {
    pub requests: u64,
    pub errors: u64,
    pub elapsed: Duration,
    pub requests_per_sec: f64,
    pub mean: Duration,
    pub p50: Duration,
    pub p95: Duration,
    pub p99: Duration,
    pub max: Duration,
}

impl BenchStats {
    pub fn from_latencies(mut lat: Vec<Duration>, errors: u64, elapsed: Duration) -> Self {
        lat.sort_unstable();
        let n = lat.len();
        let pct = |p: f64| -> Duration {
            if n == 0 {
                return Duration::ZERO;
            }
            let rank = ((p / 100.0) * n as f64).ceil() as usize;
            lat[rank.clamp(1, n) - 1]
        };
        let total: Duration = lat.iter().sum();
        Self {
            requests: n as u64,
            errors,
            elapsed,
            requests_per_sec: n as f64 / elapsed.as_secs_f64().max(f64::EPSILON),
            mean: if n == 0 {
                Duration::ZERO
            } else {
                total / n as u32
            },
            p50: pct(50.0),
            p95: pct(95.0),
            p99: pct(99.0),
            max: lat.last().copied().unwrap_or_default(),
        }
    }
}

impl fmt::Display for BenchStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ms = |d: Duration| d.as_secs_f64() * 1e3;
        write!(
            f,
            "{} requests in {:.1}s ({} errors)\n{:.0} req/s  mean {:.3} ms  p50 {:.3} ms  p95 {:.3} ms  p99 {:.3} ms  max {:.3} ms",
            self.requests,
            self.elapsed.as_secs_f64(),
            self.errors,
            self.requests_per_sec,
            ms(self.mean),
            ms(self.p50),
            ms(self.p95),
            ms(self.p99),
            ms(self.max),
        )
    }
}

/// Drives `GET /hello` with `concurrency` keep-alive connections, each with
/// one request in flight, for `duration`. Latency runs from send to the
/// last body byte.
pub async fn drive(
    connector: Arc<dyn Connector>,
    duration: Duration,
    concurrency: usize,
) -> BenchStats {
    let start = Instant::now();
    let deadline = start + duration;
    let mut workers = Vec::with_capacity(concurrency);
    for _ in 0..concurrency.max(1) {
        let connector = connector.clone();
        workers.push(tokio::spawn(async move {
            let mut lat = Vec::new();
            let mut errors = 0u64;
            let mut client: Option<HttpClient> = None;
            while Instant::now() < deadline {
                if client.is_none() {
                    match connector.connect_stream().await {
                        Ok(s) => match HttpClient::handshake(s).await {
                            Ok(c) => client = Some(c),
                            Err(_) => errors += 1,
                        },
                        Err(_) => errors += 1,
                    }
                    if client.is_none() {
                        tokio::time::sleep(Duration::from_millis(10)).await;
                        continue;
                    }
                }
                let c = client.as_mut().expect("connected above");
                let t0 = Instant::now();
                match c.get(HELLO_PATH).await {
                    Ok(r) if r.status().is_success() => lat.push(t0.elapsed()),
                    _ => {
                        errors += 1;
                        client = None;
                    }
                }
            }
            (lat, errors)
        }));
    }
    let mut all = Vec::new();
    let mut errors = 0;
    for w in workers {
        if let Ok((lat, e)) = w.await {
            all.extend(lat);
            errors += e;
        }
    }
    BenchStats::from_latencies(all, errors, start.elapsed())
}

/// A hello-world enclave serving plain HTTP.
pub fn hello_enclave() -> Result<Enclave, BenchError> {
    let unavailable = |e: &dyn fmt::Display| BenchError::ScenarioUnavailable(e.to_string());
    let pki = TestPki::generate().map_err(|e| unavailable(&e))?;
    let identity = pki.issue_identity("bench").map_err(|e| unavailable(&e))?;
    let cfg = EnclaveConfig::new("bench.enclave.test", 443).map_err(|e| unavailable(&e))?;
    let mut b = EnclaveBuilder::new(cfg, identity, PcrSet::new([0; 48], [1; 48], [2; 48]))
        .map_err(|e| unavailable(&e))?;
    b.seed_entropy(&mut OsRandomness)
        .map_err(|e| unavailable(&e))?;
    b.add_route(Method::GET, HELLO_PATH, hello_world)
        .map_err(|e| unavailable(&e))?;
    b.start(None).map_err(|e| unavailable(&e))
}

/// Starts the components for `scenario` on `fabric`, runs the load and tears
/// everything down again.
pub async fn run_bench_on(
    fabric: &VsockFabric,
    scenario: Scenario,
    duration: Duration,
    concurrency: usize,
) -> Result<BenchStats, BenchError> {
    let unavailable = |e: &dyn fmt::Display| BenchError::ScenarioUnavailable(e.to_string());
    let enclave = hello_enclave()?;
    let mut proxy = None;
    let (server, connector): (_, Arc<dyn Connector>) = match scenario {
        Scenario::Direct => {
            let l = TcpListener::bind("127.0.0.1:0")
                .await
                .map_err(|e| unavailable(&e))?;
            let addr = l.local_addr().map_err(|e| unavailable(&e))?;
            (enclave.serve(l, false), Arc::new(TcpConnector(addr)))
        }
        Scenario::NoProxy | Scenario::Full => {
            let addr = VsockAddress::new(BENCH_CID, BENCH_PORT).map_err(|e| unavailable(&e))?;
            let l = fabric.listen(addr).await.map_err(|e| unavailable(&e))?;
            let server = enclave.serve(l, false);
            let vsock = VsockConnector {
                fabric: fabric.clone(),
                addr,
            };
            if scenario == Scenario::NoProxy {
                (server, Arc::new(vsock))
            } else {
                let l = TcpListener::bind("127.0.0.1:0")
                    .await
                    .map_err(|e| unavailable(&e))?;
                let local = l.local_addr().map_err(|e| unavailable(&e))?;
                proxy = Some(serve_relay(l, vsock, Some(local)));
                (server, Arc::new(TcpConnector(local)))
            }
        }
    };
    let stats = drive(connector, duration, concurrency).await;
    if let Some(p) = proxy {
        p.stop(Duration::from_secs(1)).await;
    }
    server.stop(Duration::from_secs(1)).await;
    Ok(stats)
}

/// Benchmarks on a Unix-socket VSOCK fabric in a scratch dir, with the
/// hypervisor hop modelled.
pub async fn run_bench(
    scenario: Scenario,
    duration: Duration,
    concurrency: usize,
) -> Result<BenchStats, BenchError> {
    let dir = tempfile::tempdir().map_err(|e| BenchError::ScenarioUnavailable(e.to_string()))?;
    let fabric = VsockFabric::unix_via_hypervisor(dir.path());
    run_bench_on(&fabric, scenario, duration, concurrency).await
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StressStats {
    pub documents: u64,
    pub elapsed: Duration,
    pub per_sec: f64,
}

/// Requests attestation documents with incrementing nonces on `workers`
/// threads for `duration`.
pub fn attestation_stress(enclave: &Enclave, duration: Duration, workers: usize) -> StressStats {
    let start = Instant::now();
    let deadline = start + duration;
    let counter = std::sync::atomic::AtomicU64::new(0);
    std::thread::scope(|s| {
        for w in 0..workers.max(1) as u64 {
            let counter = &counter;
            s.spawn(move || {
                let mut seq: u128 = (w as u128) << 64;
                while Instant::now() < deadline {
                    seq += 1;
                    let mut nonce = [0u8; 20];
                    nonce[4..].copy_from_slice(&seq.to_be_bytes());
                    if enclave
                        .handle_attestation_request(&hex::encode(nonce))
                        .is_ok()
                    {
                        counter.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    }
                }
            });
        }
    });
    let elapsed = start.elapsed();
    let documents = counter.into_inner();
    StressStats {
        documents,
        elapsed,
        per_sec: documents as f64 / elapsed.as_secs_f64(),
    }
}
