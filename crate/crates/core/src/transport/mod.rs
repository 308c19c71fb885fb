//! Host/enclave networking: a simulated VSOCK fabric, the blind TCP<->VSOCK
//! proxy, and the egress SOCKS5 proxy with its destination allowlist.

mod allowlist;
mod proxy;
mod socks;
mod vsock;

use std::io;

use async_trait::async_trait;
use tokio::io::{AsyncRead, AsyncWrite};

pub use allowlist::{AllowList, ALLOWLIST_ENV};
pub use proxy::{
    relay, run_tcp_proxy, serve_relay, Direction, ProxyHandle, ProxyRoute, ProxyStats, RelayRecord,
    DEFAULT_GRACE, RELAY_BUFFER,
};
pub use socks::{
    run_socks_proxy, serve_socks, socks_connect, CountingDialer, Dialer, Target, TargetHost,
    TcpDialer, REPLY_ADDRESS_NOT_SUPPORTED, REPLY_COMMAND_NOT_SUPPORTED, REPLY_CONNECTION_REFUSED,
    REPLY_GENERAL_FAILURE, REPLY_NOT_ALLOWED, REPLY_SUCCEEDED,
};
pub use vsock::{VsockAddress, VsockFabric, VsockListener, VsockStream, VMADDR_CID_HOST};

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("connection refused: nothing listening on {0}")]
    ConnectionRefused(VsockAddress),
    #[error("address in use: {0}")]
    AddressInUse(VsockAddress),
    #[error("invalid address: {0}")]
    InvalidAddress(String),
    #[error("invalid allowlist line {line}: {reason}")]
    InvalidAllowList { line: usize, reason: String },
    #[error("invalid route file: {0}")]
    InvalidRoutes(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl From<TransportError> for io::Error {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::Io(e) => e,
            TransportError::ConnectionRefused(_) => {
                io::Error::new(io::ErrorKind::ConnectionRefused, e.to_string())
            }
            TransportError::AddressInUse(_) => {
                io::Error::new(io::ErrorKind::AddrInUse, e.to_string())
            }
            other => io::Error::new(io::ErrorKind::InvalidInput, other.to_string()),
        }
    }
}

/// Any bidirectional byte stream the proxies can carry.
pub trait AsyncStream: AsyncRead + AsyncWrite + Unpin + Send + 'static {}
impl<T: AsyncRead + AsyncWrite + Unpin + Send + 'static> AsyncStream for T {}

pub type BoxStream = Box<dyn AsyncStream>;

/// Something that hands out inbound connections.
#[async_trait]
pub trait Listener: Send + Sync + 'static {
    async fn accept_stream(&self) -> io::Result<BoxStream>;
}

#[async_trait]
impl Listener for tokio::net::TcpListener {
    async fn accept_stream(&self) -> io::Result<BoxStream> {
        let (s, _) = self.accept().await?;
        s.set_nodelay(true)?;
        Ok(Box::new(s))
    }
}

#[async_trait]
impl Listener for VsockListener {
    async fn accept_stream(&self) -> io::Result<BoxStream> {
        Ok(Box::new(self.accept().await?))
    }
}

/// Opens an outbound connection to a fixed upstream.
#[async_trait]
pub trait Connector: Send + Sync + 'static {
    async fn connect_stream(&self) -> io::Result<BoxStream>;
}

/// Connects to a fixed VSOCK address on a fabric.
#[derive(Clone)]
pub struct VsockConnector {
    pub fabric: VsockFabric,
    pub addr: VsockAddress,
}

#[async_trait]
impl Connector for VsockConnector {
    async fn connect_stream(&self) -> io::Result<BoxStream> {
        Ok(Box::new(self.fabric.connect(self.addr).await?))
    }
}

/// Connects to a fixed TCP address.
#[derive(Clone, Debug)]
pub struct TcpConnector(pub std::net::SocketAddr);

#[async_trait]
impl Connector for TcpConnector {
    async fn connect_stream(&self) -> io::Result<BoxStream> {
        let s = tokio::net::TcpStream::connect(self.0).await?;
        s.set_nodelay(true)?;
        Ok(Box::new(s))
    }
}
