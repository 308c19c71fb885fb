//! In-process (or Unix-socket backed) stand-in for the hypervisor's VSOCK
//! device. Endpoints are addressed by a 32-bit context ID and a 32-bit port.

use std::collections::HashMap;
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};
use std::pin::Pin;
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll};

use tokio::io::{AsyncRead, AsyncWrite, DuplexStream, ReadBuf};
use tokio::net::{UnixListener, UnixStream};
use tokio::sync::mpsc;

use super::TransportError;

/// Well-known CID of the parent (host) side.
pub const VMADDR_CID_HOST: u32 = 2;
const FIRST_GUEST_CID: u32 = 3;
const PIPE_CAPACITY: usize = 64 * 1024;
const BACKLOG: usize = 1024;
const HOP_BUFFER: usize = 64 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VsockAddress {
    context_id: u32,
    port: u32,
}

impl VsockAddress {
    /// CIDs 0..=2 are reserved; guests start at 3.
    pub fn new(context_id: u32, port: u32) -> Result<Self, TransportError> {
        if context_id < FIRST_GUEST_CID {
            return Err(TransportError::InvalidAddress(format!(
                "context id {context_id} is reserved"
            )));
        }
        Ok(Self { context_id, port })
    }

    pub fn context_id(&self) -> u32 {
        self.context_id
    }

    pub fn port(&self) -> u32 {
        self.port
    }
}

impl fmt::Display for VsockAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "vsock://{}:{}", self.context_id, self.port)
    }
}

impl std::str::FromStr for VsockAddress {
    type Err = TransportError;

    /// Parses `cid:port`, optionally prefixed with `vsock://`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let body = s.strip_prefix("vsock://").unwrap_or(s);
        let bad = || TransportError::InvalidAddress(s.to_string());
        let (cid, port) = body.split_once(':').ok_or_else(bad)?;
        Self::new(
            cid.parse().map_err(|_| bad())?,
            port.parse().map_err(|_| bad())?,
        )
    }
}

type Registry = Mutex<HashMap<VsockAddress, mpsc::Sender<DuplexStream>>>;

enum FabricKind {
    Memory(Registry),
    Unix { dir: PathBuf, hypervisor_hop: bool },
}

/// The set of VSOCK endpoints reachable from one another.
#[derive(Clone)]
pub struct VsockFabric {
    kind: Arc<FabricKind>,
}

impl fmt::Debug for VsockFabric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &*self.kind {
            FabricKind::Memory(_) => f.write_str("VsockFabric(memory)"),
            FabricKind::Unix { dir, .. } => write!(f, "VsockFabric(unix:{})", dir.display()),
        }
    }
}

impl VsockFabric {
    /// A fabric private to this process.
    pub fn in_memory() -> Self {
        Self {
            kind: Arc::new(FabricKind::Memory(Mutex::new(HashMap::new()))),
        }
    }

    /// A fabric shared between processes through Unix sockets named
    /// `vsock-<cid>-<port>` inside `dir`.
    pub fn unix(dir: impl AsRef<Path>) -> Self {
        Self {
            kind: Arc::new(FabricKind::Unix {
                dir: dir.as_ref().to_path_buf(),
                hypervisor_hop: false,
            }),
        }
    }

    /// Like [`VsockFabric::unix`], but every connection is carried across a
    /// relay task standing in for the hypervisor, so VSOCK traffic pays for
    /// an extra copy in each direction the way guest-to-host traffic does.
    pub fn unix_via_hypervisor(dir: impl AsRef<Path>) -> Self {
        Self {
            kind: Arc::new(FabricKind::Unix {
                dir: dir.as_ref().to_path_buf(),
                hypervisor_hop: true,
            }),
        }
    }

    fn socket_path(dir: &Path, addr: VsockAddress) -> PathBuf {
        dir.join(format!("vsock-{}-{}", addr.context_id, addr.port))
    }

    pub async fn listen(&self, addr: VsockAddress) -> Result<VsockListener, TransportError> {
        match &*self.kind {
            FabricKind::Memory(registry) => {
                let mut map = registry.lock().expect("fabric registry poisoned");
                if map.get(&addr).is_some_and(|tx| !tx.is_closed()) {
                    return Err(TransportError::AddressInUse(addr));
                }
                let (tx, rx) = mpsc::channel(BACKLOG);
                map.insert(addr, tx);
                Ok(VsockListener {
                    addr,
                    inner: ListenerInner::Memory {
                        rx: tokio::sync::Mutex::new(rx),
                        fabric: self.clone(),
                    },
                })
            }
            FabricKind::Unix {
                dir,
                hypervisor_hop,
            } => {
                let path = Self::socket_path(dir, addr);
                let public = bind_unix(&path, addr).await?;
                if !hypervisor_hop {
                    return Ok(VsockListener {
                        addr,
                        inner: ListenerInner::Unix {
                            listener: public,
                            paths: vec![path],
                            hop: None,
                        },
                    });
                }
                let guest_path = path.with_extension("guest");
                let guest = bind_unix(&guest_path, addr).await?;
                let hop = tokio::spawn(hypervisor_relay(public, guest_path.clone()));
                Ok(VsockListener {
                    addr,
                    inner: ListenerInner::Unix {
                        listener: guest,
                        paths: vec![path, guest_path],
                        hop: Some(hop),
                    },
                })
            }
        }
    }

    pub async fn connect(&self, addr: VsockAddress) -> Result<VsockStream, TransportError> {
        match &*self.kind {
            FabricKind::Memory(registry) => {
                let tx = registry
                    .lock()
                    .expect("fabric registry poisoned")
                    .get(&addr)
                    .cloned()
                    .ok_or(TransportError::ConnectionRefused(addr))?;
                let (local, remote) = tokio::io::duplex(PIPE_CAPACITY);
                tx.send(remote)
                    .await
                    .map_err(|_| TransportError::ConnectionRefused(addr))?;
                Ok(VsockStream::Memory(local))
            }
            FabricKind::Unix { dir, .. } => {
                match UnixStream::connect(Self::socket_path(dir, addr)).await {
                    Ok(s) => Ok(VsockStream::Unix(s)),
                    Err(e)
                        if matches!(
                            e.kind(),
                            io::ErrorKind::NotFound | io::ErrorKind::ConnectionRefused
                        ) =>
                    {
                        Err(TransportError::ConnectionRefused(addr))
                    }
                    Err(e) => Err(e.into()),
                }
            }
        }
    }

    fn unregister(&self, addr: VsockAddress) {
        if let FabricKind::Memory(registry) = &*self.kind {
            let mut map = registry.lock().expect("fabric registry poisoned");
            if map.get(&addr).is_some_and(|tx| tx.is_closed()) {
                map.remove(&addr);
            }
        }
    }
}

enum ListenerInner {
    Memory {
        rx: tokio::sync::Mutex<mpsc::Receiver<DuplexStream>>,
        fabric: VsockFabric,
    },
    Unix {
        listener: UnixListener,
        paths: Vec<PathBuf>,
        hop: Option<tokio::task::JoinHandle<()>>,
    },
}

async fn bind_unix(path: &Path, addr: VsockAddress) -> Result<UnixListener, TransportError> {
    if path.exists() {
        if UnixStream::connect(path).await.is_ok() {
            return Err(TransportError::AddressInUse(addr));
        }
        // Stale socket from a dead process.
        std::fs::remove_file(path)?;
    }
    Ok(UnixListener::bind(path)?)
}

/// Accepts on the host-facing socket and pipes each connection to the guest.
async fn hypervisor_relay(public: UnixListener, guest: PathBuf) {
    while let Ok((host_side, _)) = public.accept().await {
        let guest = guest.clone();
        tokio::spawn(async move {
            let Ok(mut guest_side) = UnixStream::connect(&guest).await else {
                return;
            };
            let mut host_side = host_side;
            let _ = tokio::io::copy_bidirectional_with_sizes(
                &mut host_side,
                &mut guest_side,
                HOP_BUFFER,
                HOP_BUFFER,
            )
            .await;
        });
    }
}

pub struct VsockListener {
    addr: VsockAddress,
    inner: ListenerInner,
}

impl VsockListener {
    pub fn local_addr(&self) -> VsockAddress {
        self.addr
    }

    pub async fn accept(&self) -> io::Result<VsockStream> {
        match &self.inner {
            ListenerInner::Memory { rx, .. } => rx
                .lock()
                .await
                .recv()
                .await
                .map(VsockStream::Memory)
                .ok_or_else(|| io::Error::new(io::ErrorKind::BrokenPipe, "fabric closed")),
            ListenerInner::Unix { listener, .. } => {
                listener.accept().await.map(|(s, _)| VsockStream::Unix(s))
            }
        }
    }
}

impl Drop for VsockListener {
    fn drop(&mut self) {
        match &mut self.inner {
            ListenerInner::Memory { rx, fabric } => {
                rx.get_mut().close();
                fabric.unregister(self.addr);
            }
            ListenerInner::Unix { paths, hop, .. } => {
                if let Some(hop) = hop.take() {
                    hop.abort();
                }
                for p in paths.iter() {
                    let _ = std::fs::remove_file(p);
                }
            }
        }
    }
}

/// One end of a VSOCK connection.
#[derive(Debug)]
pub enum VsockStream {
    Memory(DuplexStream),
    Unix(UnixStream),
}

impl AsyncRead for VsockStream {
    fn poll_read(
        self: Pin<&mut Self>,
        cx: &mut Context<'_>,
        buf: &mut ReadBuf<'_>,
    ) -> Poll<io::Result<()>> {
        match self.get_mut() {
            VsockStream::Memory(s) => Pin::new(s).poll_read(cx, buf),
            VsockStream::Unix(s) => Pin::new(s).poll_read(cx, buf),
        }
    }
}

impl AsyncWrite for VsockStream {
    fn poll_write(
        self: Pin<&mut Self>,
        cx: &mut Context<'_>,
        buf: &[u8],
    ) -> Poll<io::Result<usize>> {
        match self.get_mut() {
            VsockStream::Memory(s) => Pin::new(s).poll_write(cx, buf),
            VsockStream::Unix(s) => Pin::new(s).poll_write(cx, buf),
        }
    }

    fn poll_flush(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<io::Result<()>> {
        match self.get_mut() {
            VsockStream::Memory(s) => Pin::new(s).poll_flush(cx),
            VsockStream::Unix(s) => Pin::new(s).poll_flush(cx),
        }
    }

    fn poll_shutdown(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<io::Result<()>> {
        match self.get_mut() {
            VsockStream::Memory(s) => Pin::new(s).poll_shutdown(cx),
            VsockStream::Unix(s) => Pin::new(s).poll_shutdown(cx),
        }
    }
}
