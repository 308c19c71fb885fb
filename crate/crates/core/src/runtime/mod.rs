//! The framework an enclave application embeds.
//!
//! Boot order is fixed: seed entropy from the hypervisor, register routes,
//! then [`EnclaveBuilder::start`] generates the TLS key and certificate and
//! freezes the route table. The runtime always serves `GET /attestation` and
//! `POST /enclave/secret` itself.

mod cert;
mod config;
mod entropy;
mod router;
mod secret;

use std::io;
use std::sync::Arc;

use base64::Engine;
use bytes::Bytes;
use http::{Method, Request, Response, StatusCode};
use rand_chacha::ChaCha20Rng;
use tokio_rustls::TlsAcceptor;
use tokio_util::sync::CancellationToken;
use tokio_util::task::TaskTracker;

pub use cert::{
    provision_certificate, CertificateBundle, CertificateProvisioner, ProvisionError,
    StubAcmeProvisioner, SELF_SIGNED_DAYS,
};
pub use config::EnclaveConfig;
pub use entropy::{
    EntropyPool, HypervisorRandomness, LimitedRandomness, OsRandomness, SeededRandomness,
    MIN_SEED_BYTES,
};
pub use router::{Handler, RouteError, Router, ATTESTATION_PATH, SECRET_PATH};
pub use secret::{
    seal_raw, seal_secret, DenyList, SecretError, SecretGate, SecretIngestor, SecretKind,
};

use crate::attestation::{
    AttestationDocument, AttestationError, HypervisorIdentity, Nonce, PcrSet,
};
use crate::http::text;
use crate::transport::{AsyncStream, Listener, TransportError, VsockAddress, VsockFabric};

pub const ATTESTATION_CONTENT_TYPE: &str = "application/octet-stream";

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    #[error("hypervisor returned {got} entropy bytes, need {MIN_SEED_BYTES}")]
    EntropyUnavailable { got: usize },
    #[error("entropy pool was never seeded")]
    NotSeeded,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("certificate: {0}")]
    Certificate(String),
    #[error("certificate provisioner failed: {0}")]
    ProvisionerFailure(String),
    #[error(transparent)]
    Route(#[from] RouteError),
    #[error(transparent)]
    Attestation(#[from] AttestationError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Why `/attestation` refused a request.
#[derive(Debug, thiserror::Error)]
pub enum AttestationRequestError {
    #[error("nonce must be {} hex characters", crate::attestation::NONCE_LEN * 2)]
    BadNonce,
    #[error("attestation is disabled in debug mode")]
    DebugMode,
    #[error(transparent)]
    Issue(#[from] AttestationError),
}

impl AttestationRequestError {
    pub fn status(&self) -> StatusCode {
        match self {
            Self::BadNonce => StatusCode::BAD_REQUEST,
            Self::DebugMode => StatusCode::SERVICE_UNAVAILABLE,
            Self::Issue(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

/// Pre-start state of an enclave application.
pub struct EnclaveBuilder {
    config: EnclaveConfig,
    identity: HypervisorIdentity,
    pcrs: PcrSet,
    pool: Option<EntropyPool>,
    router: Router,
    secret: Option<Arc<dyn SecretIngestor>>,
}

impl EnclaveBuilder {
    /// `identity` and `pcrs` stand for what the hypervisor measured at launch.
    pub fn new(
        config: EnclaveConfig,
        identity: HypervisorIdentity,
        pcrs: PcrSet,
    ) -> Result<Self, RuntimeError> {
        config.validate()?;
        Ok(Self {
            config,
            identity,
            pcrs,
            pool: None,
            router: Router::default(),
            secret: None,
        })
    }

    pub fn config(&self) -> &EnclaveConfig {
        &self.config
    }

    pub fn pcrs(&self) -> &PcrSet {
        &self.pcrs
    }

    pub fn identity(&self) -> &HypervisorIdentity {
        &self.identity
    }

    pub fn seed_entropy(
        &mut self,
        source: &mut dyn HypervisorRandomness,
    ) -> Result<(), RuntimeError> {
        self.pool = Some(EntropyPool::seed(source)?);
        Ok(())
    }

    /// Randomness for application setup; fails before seeding.
    pub fn fork_rng(&self) -> Result<ChaCha20Rng, RuntimeError> {
        self.pool
            .as_ref()
            .map(|p| p.fork())
            .ok_or(RuntimeError::NotSeeded)
    }

    pub fn add_route<F>(
        &mut self,
        method: Method,
        path: &str,
        handler: F,
    ) -> Result<(), RuntimeError>
    where
        F: Fn(&Request<Bytes>) -> Response<Bytes> + Send + Sync + 'static,
    {
        self.router.add(method, path, Arc::new(handler))?;
        Ok(())
    }

    pub fn with_secret_gate(&mut self, gate: Arc<dyn SecretIngestor>) -> &mut Self {
        self.secret = Some(gate);
        self
    }

    /// Generates the TLS key and certificate and freezes the route table.
    pub fn start(
        self,
        provisioner: Option<&dyn CertificateProvisioner>,
    ) -> Result<Enclave, RuntimeError> {
        let pool = self.pool.ok_or(RuntimeError::NotSeeded)?;
        let cert = provision_certificate(&self.config, &pool, provisioner)?;
        let tls = crate::tls::acceptor(cert.chain(), cert.private_key_pkcs8())?;
        if self.config.debug {
            tracing::warn!("debug mode: remote attestation disabled");
        }
        tracing::info!(
            fqdn = %self.config.fqdn,
            fingerprint = %hex::encode(cert.fingerprint()),
            "enclave started"
        );
        Ok(Enclave {
            inner: Arc::new(Inner {
                config: self.config,
                identity: self.identity,
                pcrs: self.pcrs,
                cert,
                tls,
                router: self.router,
                secret: self.secret,
                pool,
            }),
        })
    }
}

struct Inner {
    config: EnclaveConfig,
    identity: HypervisorIdentity,
    pcrs: PcrSet,
    cert: CertificateBundle,
    tls: TlsAcceptor,
    router: Router,
    secret: Option<Arc<dyn SecretIngestor>>,
    pool: EntropyPool,
}

/// A started enclave. Cheap to clone; all clones share state.
#[derive(Clone)]
pub struct Enclave {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Enclave {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Enclave")
            .field("config", &self.inner.config)
            .field("certificate", &self.inner.cert)
            .finish_non_exhaustive()
    }
}

impl Enclave {
    pub fn config(&self) -> &EnclaveConfig {
        &self.inner.config
    }

    pub fn pcrs(&self) -> &PcrSet {
        &self.inner.pcrs
    }

    pub fn identity(&self) -> &HypervisorIdentity {
        &self.inner.identity
    }

    pub fn certificate(&self) -> &CertificateBundle {
        &self.inner.cert
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        self.inner.cert.fingerprint()
    }

    pub fn fork_rng(&self) -> ChaCha20Rng {
        self.inner.pool.fork()
    }

    /// Issues a document carrying `nonce_hex` and the live certificate fingerprint.
    pub fn handle_attestation_request(
        &self,
        nonce_hex: &str,
    ) -> Result<AttestationDocument, AttestationRequestError> {
        if self.inner.config.debug {
            return Err(AttestationRequestError::DebugMode);
        }
        let nonce = Nonce::from_hex(nonce_hex).map_err(|_| AttestationRequestError::BadNonce)?;
        Ok(self.inner.identity.issue(
            self.inner.pcrs,
            Some(nonce),
            Some(self.fingerprint().to_vec()),
            None,
        )?)
    }

    fn attestation_response(&self, req: &Request<Bytes>) -> Response<Bytes> {
        let nonce = req
            .uri()
            .query()
            .into_iter()
            .flat_map(|q| q.split('&'))
            .find_map(|kv| kv.strip_prefix("nonce="))
            .unwrap_or("");
        let doc = self
            .handle_attestation_request(nonce)
            .and_then(|d| Ok(d.to_bytes()?));
        match doc {
            Ok(raw) => Response::builder()
                .status(StatusCode::OK)
                .header(http::header::CONTENT_TYPE, ATTESTATION_CONTENT_TYPE)
                .body(Bytes::from(
                    base64::engine::general_purpose::STANDARD.encode(raw),
                ))
                .expect("static response parts are valid"),
            Err(e) => text(e.status(), &e.to_string()),
        }
    }

    fn secret_response(&self, req: &Request<Bytes>) -> Response<Bytes> {
        let Some(gate) = &self.inner.secret else {
            return text(StatusCode::NOT_FOUND, "no secret gate configured");
        };
        match gate.ingest(req.body()) {
            Ok(()) => Response::builder()
                .status(StatusCode::NO_CONTENT)
                .body(Bytes::new())
                .expect("static response parts are valid"),
            Err(e) => {
                let status = match e {
                    SecretError::MalformedBody => StatusCode::BAD_REQUEST,
                    SecretError::BadSignature => StatusCode::FORBIDDEN,
                    SecretError::WrongKind { .. } => StatusCode::UNPROCESSABLE_ENTITY,
                };
                text(status, &e.to_string())
            }
        }
    }

    /// Routes one request: built-in endpoints first, then application routes.
    pub fn dispatch(&self, req: &Request<Bytes>) -> Response<Bytes> {
        let path = req.uri().path();
        match (req.method(), path) {
            (&Method::GET, ATTESTATION_PATH) => return self.attestation_response(req),
            (&Method::POST, SECRET_PATH) => return self.secret_response(req),
            (_, ATTESTATION_PATH | SECRET_PATH) => {
                return text(StatusCode::METHOD_NOT_ALLOWED, "method not allowed")
            }
            _ => {}
        }
        if self.inner.config.debug {
            tracing::debug!(method = %req.method(), path, "request");
        }
        match self.inner.router.lookup(req.method(), path) {
            Some(h) => h(req),
            None if self.inner.router.has_path(path) => {
                text(StatusCode::METHOD_NOT_ALLOWED, "method not allowed")
            }
            None => text(StatusCode::NOT_FOUND, "not found"),
        }
    }

    fn dispatcher(&self) -> crate::http::Dispatch {
        let this = self.clone();
        Arc::new(move |req| this.dispatch(&req))
    }

    /// Terminates TLS on `stream` and serves HTTP over it.
    pub async fn serve_tls<S: AsyncStream>(&self, stream: S) -> io::Result<()> {
        let tls = self.inner.tls.accept(stream).await?;
        crate::http::serve_connection(tls, self.dispatcher()).await
    }

    /// Serves HTTP without TLS (benchmarks and in-enclave loopback).
    pub async fn serve_plain<S: AsyncStream>(&self, stream: S) -> io::Result<()> {
        crate::http::serve_connection(stream, self.dispatcher()).await
    }

    /// Accepts connections from `listener` until the handle is stopped.
    pub fn serve<L: Listener>(&self, listener: L, tls: bool) -> ServerHandle {
        let cancel = CancellationToken::new();
        let tracker = TaskTracker::new();
        let this = self.clone();
        let (c, t) = (cancel.clone(), tracker.clone());
        let accept_loop = tokio::spawn(async move {
            loop {
                let stream = tokio::select! {
                    _ = c.cancelled() => break,
                    r = listener.accept_stream() => r,
                };
                match stream {
                    Ok(s) => {
                        let this = this.clone();
                        t.spawn(async move {
                            let r = if tls {
                                this.serve_tls(s).await
                            } else {
                                this.serve_plain(s).await
                            };
                            if let Err(e) = r {
                                tracing::debug!(error = %e, "connection ended with error");
                            }
                        });
                    }
                    Err(e) if e.kind() == io::ErrorKind::BrokenPipe => break,
                    Err(e) => tracing::warn!(error = %e, "accept failed"),
                }
            }
        });
        ServerHandle {
            cancel,
            tracker,
            accept_loop,
        }
    }

    /// Listens with TLS on `(cid, config.port)` in `fabric`.
    pub async fn listen_vsock(
        &self,
        fabric: &VsockFabric,
        cid: u32,
    ) -> Result<(VsockAddress, ServerHandle), RuntimeError> {
        let addr = VsockAddress::new(cid, u32::from(self.inner.config.port))?;
        let listener = fabric.listen(addr).await?;
        Ok((addr, self.serve(listener, true)))
    }
}

pub struct ServerHandle {
    cancel: CancellationToken,
    tracker: TaskTracker,
    accept_loop: tokio::task::JoinHandle<()>,
}

impl ServerHandle {
    pub async fn stop(self, grace: std::time::Duration) {
        self.cancel.cancel();
        let _ = self.accept_loop.await;
        self.tracker.close();
        let _ = tokio::time::timeout(grace, self.tracker.wait()).await;
    }
}

/// Body of the hello-world route.
pub fn hello_world(_: &Request<Bytes>) -> Response<Bytes> {
    text(StatusCode::OK, "hello world")
}
