use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rand::SeedableRng;
use serde::Deserialize;
use tokio::net::TcpListener;

use super::{compute_image_id, ToolingError};
use crate::attestation::{PcrSet, TestPki};
use crate::clock;
use crate::egress::{BackendUrl, SocksBackend};
use crate::pseudonymizer::{self, Pseudonymizer, PseudonymizerConfig};
use crate::runtime::{
    hello_world, EnclaveBuilder, EnclaveConfig, OsRandomness, ServerHandle, StubAcmeProvisioner,
};
use crate::shuffler::{self, Shuffler, ShufflerConfig};
use crate::transport::{
    run_socks_proxy, serve_relay, AllowList, ProxyHandle, TcpDialer, VsockAddress, VsockConnector,
    VsockFabric,
};

/// In Nitro deployments the parent instance answers on CID 3.
pub const PARENT_CID: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum App {
    #[default]
    Hello,
    Pseudonymizer,
    Shuffler,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub enclave: EnclaveConfig,
    #[serde(default)]
    pub app: App,
    /// Context ID of the simulated enclave.
    #[serde(default = "default_cid")]
    pub cid: u32,
    /// Where the simulated hypervisor keeps its root key.
    pub pki_dir: PathBuf,
    /// Source tree whose image ID becomes the enclave's PCRs.
    pub image: Option<PathBuf>,
    /// Host address of the ingress TCP proxy.
    pub listen: SocketAddr,
    #[serde(default = "default_socks_port")]
    pub socks_port: u32,
    pub allowlist: Option<PathBuf>,
    pub pseudonymizer: Option<PseudonymizerConfig>,
    pub shuffler: Option<ShufflerConfig>,
}

fn default_cid() -> u32 {
    16
}

fn default_socks_port() -> u32 {
    1080
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ToolingError> {
        let c: Self = toml::from_str(s).map_err(|e| ToolingError::Config(e.to_string()))?;
        c.enclave
            .validate()
            .map_err(|e| ToolingError::Config(e.to_string()))?;
        Ok(c)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ToolingError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ToolingError::unreadable(path, e))?;
        Self::from_toml_str(&text)
    }
}

/// A running simulated enclave with its host-side proxies.
pub struct Deployment {
    pub ingress: SocketAddr,
    pub fingerprint: [u8; 32],
    pub trust_root_pem: String,
    server: ServerHandle,
    proxy: ProxyHandle,
    socks: ProxyHandle,
    timers: Vec<tokio::task::JoinHandle<()>>,
}

impl Deployment {
    pub async fn stop(self, grace: Duration) {
        for t in self.timers {
            t.abort();
        }
        self.proxy.stop(grace).await;
        self.socks.stop(grace).await;
        self.server.stop(grace).await;
    }
}

/// Boots the enclave described by `cfg` on an in-process fabric, with the
/// ingress TCP proxy and the SOCKS egress proxy on the parent side.
pub async fn start(cfg: &RunConfig) -> Result<Deployment, ToolingError> {
    let err = |e: &dyn std::fmt::Display| ToolingError::Config(e.to_string());
    let pki = TestPki::load_or_create(&cfg.pki_dir).map_err(|e| err(&e))?;
    let identity = pki
        .issue_identity(&format!("i-{}", cfg.cid))
        .map_err(|e| err(&e))?;
    let pcrs = match &cfg.image {
        Some(tree) => compute_image_id(tree)?.pcrs(),
        None => PcrSet::new([0; 48], [0; 48], [0; 48]),
    };
    let fabric = VsockFabric::in_memory();

    let allow = match &cfg.allowlist {
        Some(p) => AllowList::from_file(p).map_err(|e| err(&e))?,
        None => AllowList::from_env()
            .map_err(|e| err(&e))?
            .unwrap_or_else(AllowList::deny_all),
    };
    let socks_addr = VsockAddress::new(PARENT_CID, cfg.socks_port).map_err(|e| err(&e))?;
    let socks = run_socks_proxy(&fabric, socks_addr, allow, Arc::new(TcpDialer))
        .await
        .map_err(|e| err(&e))?;
    let egress = Arc::new(VsockConnector {
        fabric: fabric.clone(),
        addr: socks_addr,
    });

    let mut b = EnclaveBuilder::new(cfg.enclave.clone(), identity, pcrs).map_err(|e| err(&e))?;
    b.seed_entropy(&mut OsRandomness).map_err(|e| err(&e))?;
    let mut timers = Vec::new();
    match cfg.app {
        App::Hello => b
            .add_route(http::Method::GET, "/", hello_world)
            .map_err(|e| err(&e))?,
        App::Pseudonymizer => {
            let pc = cfg.pseudonymizer.clone().unwrap_or_default();
            let url: BackendUrl = pc.backend_url.parse().map_err(|e| err(&e))?;
            let rng = |b: &EnclaveBuilder| -> Result<Box<dyn rand::RngCore + Send>, ToolingError> {
                Ok(Box::new(b.fork_rng().map_err(|e| err(&e))?))
            };
            let svc = Arc::new(Pseudonymizer::new(
                pc.mode,
                pc.policy().map_err(|e| err(&e))?,
                pc.schedule().map_err(|e| err(&e))?,
                clock::system(),
                rng(&b)?,
                rng(&b)?,
            ));
            let sink = Arc::new(SocksBackend::new(egress.clone(), url));
            pseudonymizer::install_route(&mut b, svc.clone(), sink.clone()).map_err(|e| err(&e))?;
            timers.push(pseudonymizer::spawn_flush_timer(
                svc,
                sink,
                Duration::from_secs(10),
            ));
        }
        App::Shuffler => {
            let sc = cfg
                .shuffler
                .clone()
                .ok_or_else(|| ToolingError::Config("[shuffler] section required".into()))?;
            let url: BackendUrl = sc.backend_url.parse().map_err(|e| err(&e))?;
            let rng = rand_chacha::ChaCha20Rng::from_rng(b.fork_rng().map_err(|e| err(&e))?)
                .map_err(|e| err(&e))?;
            let svc = Arc::new(Shuffler::new(sc, clock::system(), Box::new(rng)));
            let sink = Arc::new(SocksBackend::new(egress.clone(), url));
            shuffler::install_route(&mut b, svc.clone()).map_err(|e| err(&e))?;
            timers.push(shuffler::spawn_flush_timer(svc, sink));
        }
    }
    let provisioner = if cfg.enclave.use_acme {
        Some(StubAcmeProvisioner::new().map_err(|e| err(&e))?)
    } else {
        None
    };
    let enclave = b
        .start(provisioner.as_ref().map(|p| p as _))
        .map_err(|e| err(&e))?;
    let (vsock_addr, server) = enclave
        .listen_vsock(&fabric, cfg.cid)
        .await
        .map_err(|e| err(&e))?;

    let l = TcpListener::bind(cfg.listen).await.map_err(|e| err(&e))?;
    let ingress = l.local_addr().map_err(|e| err(&e))?;
    let proxy = serve_relay(
        l,
        VsockConnector {
            fabric,
            addr: vsock_addr,
        },
        Some(ingress),
    );
    tracing::info!(%ingress, enclave = %vsock_addr, app = ?cfg.app, "deployment up");
    Ok(Deployment {
        ingress,
        fingerprint: enclave.fingerprint(),
        trust_root_pem: pki.root_pem(),
        server,
        proxy,
        socks,
        timers,
    })
}
