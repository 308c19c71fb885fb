//! SOCKS5 (RFC 1928), CONNECT only, no authentication.

use std::fmt;
use std::io;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use async_trait::async_trait;
use tokio::io::{AsyncReadExt, AsyncWriteExt};

use super::proxy::{relay, ProxyHandle, ProxyStats};
use super::{AllowList, BoxStream, Listener, TransportError, VsockAddress, VsockFabric};

const VERSION: u8 = 0x05;
const METHOD_NO_AUTH: u8 = 0x00;
const METHOD_NONE_ACCEPTABLE: u8 = 0xff;
const CMD_CONNECT: u8 = 0x01;
const ATYP_IPV4: u8 = 0x01;
const ATYP_DOMAIN: u8 = 0x03;
const ATYP_IPV6: u8 = 0x04;

pub const REPLY_SUCCEEDED: u8 = 0x00;
pub const REPLY_GENERAL_FAILURE: u8 = 0x01;
pub const REPLY_NOT_ALLOWED: u8 = 0x02;
pub const REPLY_CONNECTION_REFUSED: u8 = 0x05;
pub const REPLY_COMMAND_NOT_SUPPORTED: u8 = 0x07;
pub const REPLY_ADDRESS_NOT_SUPPORTED: u8 = 0x08;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TargetHost {
    /// Lower-cased, without a trailing dot.
    Name(String),
    Ip(IpAddr),
}

impl TargetHost {
    pub fn parse(s: &str) -> Result<Self, String> {
        if let Ok(ip) = s.parse::<IpAddr>() {
            return Ok(Self::Ip(ip));
        }
        let name = s.trim_end_matches('.').to_ascii_lowercase();
        let valid = !name.is_empty()
            && name.len() <= 253
            && name.split('.').all(|label| {
                !label.is_empty()
                    && label.len() <= 63
                    && label
                        .bytes()
                        .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
            });
        if !valid {
            return Err(format!("invalid host name {s:?}"));
        }
        Ok(Self::Name(name))
    }
}

impl fmt::Display for TargetHost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetHost::Name(n) => f.write_str(n),
            TargetHost::Ip(IpAddr::V6(ip)) => write!(f, "[{ip}]"),
            TargetHost::Ip(ip) => write!(f, "{ip}"),
        }
    }
}

/// A CONNECT destination.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Target {
    pub host: TargetHost,
    pub port: u16,
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.host, self.port)
    }
}

/// Opens outbound connections on behalf of the SOCKS proxy.
#[async_trait]
pub trait Dialer: Send + Sync + 'static {
    async fn dial(&self, target: &Target) -> io::Result<BoxStream>;
}

/// Dials over the host's TCP stack.
#[derive(Debug, Default, Clone, Copy)]
pub struct TcpDialer;

#[async_trait]
impl Dialer for TcpDialer {
    async fn dial(&self, target: &Target) -> io::Result<BoxStream> {
        let s = match &target.host {
            TargetHost::Ip(ip) => tokio::net::TcpStream::connect((*ip, target.port)).await?,
            TargetHost::Name(n) => {
                tokio::net::TcpStream::connect((n.as_str(), target.port)).await?
            }
        };
        s.set_nodelay(true)?;
        Ok(Box::new(s))
    }
}

/// Wraps a dialer and counts every attempted dial.
pub struct CountingDialer<D> {
    inner: D,
    dials: AtomicU64,
}

impl<D> CountingDialer<D> {
    pub fn new(inner: D) -> Self {
        Self {
            inner,
            dials: AtomicU64::new(0),
        }
    }

    pub fn dials(&self) -> u64 {
        self.dials.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl<D: Dialer> Dialer for CountingDialer<D> {
    async fn dial(&self, target: &Target) -> io::Result<BoxStream> {
        self.dials.fetch_add(1, Ordering::SeqCst);
        self.inner.dial(target).await
    }
}

#[derive(Debug, thiserror::Error)]
enum SocksError {
    #[error("unsupported protocol version {0:#x}")]
    Version(u8),
    #[error("client offered no acceptable auth method")]
    NoAcceptableMethod,
    #[error("unsupported command {0:#x}")]
    UnsupportedCommand(u8),
    #[error("unsupported address type {0:#x}")]
    AddressType(u8),
    #[error("destination {0} denied by ruleset")]
    DeniedByRuleset(Target),
    #[error("dial {0} failed: {1}")]
    Dial(Target, io::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

async fn reply<S: AsyncWriteExt + Unpin>(s: &mut S, code: u8) -> io::Result<()> {
    // BND.ADDR/BND.PORT are not meaningful here; report 0.0.0.0:0.
    s.write_all(&[VERSION, code, 0x00, ATYP_IPV4, 0, 0, 0, 0, 0, 0])
        .await?;
    s.flush().await
}

async fn read_target(s: &mut BoxStream, atyp: u8) -> Result<Target, SocksError> {
    let host = match atyp {
        ATYP_IPV4 => {
            let mut b = [0u8; 4];
            s.read_exact(&mut b).await?;
            TargetHost::Ip(IpAddr::V4(Ipv4Addr::from(b)))
        }
        ATYP_IPV6 => {
            let mut b = [0u8; 16];
            s.read_exact(&mut b).await?;
            TargetHost::Ip(IpAddr::V6(Ipv6Addr::from(b)))
        }
        ATYP_DOMAIN => {
            let len = s.read_u8().await? as usize;
            let mut b = vec![0u8; len];
            s.read_exact(&mut b).await?;
            let name = String::from_utf8(b).map_err(|_| SocksError::AddressType(atyp))?;
            TargetHost::parse(&name).map_err(|_| SocksError::AddressType(atyp))?
        }
        other => return Err(SocksError::AddressType(other)),
    };
    let port = s.read_u16().await?;
    Ok(Target { host, port })
}

async fn handle(
    mut client: BoxStream,
    allow: &AllowList,
    dialer: &dyn Dialer,
    stats: &ProxyStats,
) -> Result<(), SocksError> {
    let ver = client.read_u8().await?;
    if ver != VERSION {
        return Err(SocksError::Version(ver));
    }
    let n = client.read_u8().await? as usize;
    let mut methods = vec![0u8; n];
    client.read_exact(&mut methods).await?;
    if !methods.contains(&METHOD_NO_AUTH) {
        client.write_all(&[VERSION, METHOD_NONE_ACCEPTABLE]).await?;
        return Err(SocksError::NoAcceptableMethod);
    }
    client.write_all(&[VERSION, METHOD_NO_AUTH]).await?;

    let mut head = [0u8; 4];
    client.read_exact(&mut head).await?;
    if head[0] != VERSION {
        return Err(SocksError::Version(head[0]));
    }
    let target = match read_target(&mut client, head[3]).await {
        Ok(t) => t,
        Err(e @ SocksError::AddressType(_)) => {
            reply(&mut client, REPLY_ADDRESS_NOT_SUPPORTED).await?;
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    if head[1] != CMD_CONNECT {
        reply(&mut client, REPLY_COMMAND_NOT_SUPPORTED).await?;
        return Err(SocksError::UnsupportedCommand(head[1]));
    }
    if !allow.permits(&target) {
        reply(&mut client, REPLY_NOT_ALLOWED).await?;
        client.shutdown().await?;
        return Err(SocksError::DeniedByRuleset(target));
    }
    let upstream = match dialer.dial(&target).await {
        Ok(s) => s,
        Err(e) => {
            stats.count_upstream_failure();
            let code = if e.kind() == io::ErrorKind::ConnectionRefused {
                REPLY_CONNECTION_REFUSED
            } else {
                REPLY_GENERAL_FAILURE
            };
            reply(&mut client, code).await?;
            return Err(SocksError::Dial(target, e));
        }
    };
    reply(&mut client, REPLY_SUCCEEDED).await?;
    let record = relay(client, upstream).await?;
    stats.record(record);
    Ok(())
}

/// Runs the egress proxy on an arbitrary listener.
pub fn serve_socks<L: Listener>(
    listener: L,
    allow: AllowList,
    dialer: Arc<dyn Dialer>,
) -> ProxyHandle {
    let stats = Arc::new(ProxyStats::default());
    let allow = Arc::new(allow);
    let st = stats.clone();
    ProxyHandle::spawn(None, stats, move |cancel, tracker| {
        tokio::spawn(async move {
            loop {
                let client = tokio::select! {
                    _ = cancel.cancelled() => break,
                    r = listener.accept_stream() => r,
                };
                let client = match client {
                    Ok(c) => c,
                    Err(e) if e.kind() == io::ErrorKind::BrokenPipe => break,
                    Err(e) => {
                        tracing::warn!(error = %e, "socks accept failed");
                        continue;
                    }
                };
                st.count_accept();
                let (allow, dialer, st) = (allow.clone(), dialer.clone(), st.clone());
                tracker.spawn(async move {
                    if let Err(e) = handle(client, &allow, dialer.as_ref(), &st).await {
                        tracing::info!(error = %e, "socks request refused");
                    }
                });
            }
        })
    })
}

/// Listens on `listen` within `fabric` and serves SOCKS5 CONNECT there.
pub async fn run_socks_proxy(
    fabric: &VsockFabric,
    listen: VsockAddress,
    allow: AllowList,
    dialer: Arc<dyn Dialer>,
) -> Result<ProxyHandle, TransportError> {
    let listener = fabric.listen(listen).await?;
    tracing::info!(%listen, entries = allow.len(), "socks proxy up");
    Ok(serve_socks(listener, allow, dialer))
}

/// Client side of a CONNECT through an already-open stream to the proxy.
pub async fn socks_connect<S>(stream: S, target: &Target) -> io::Result<S>
where
    S: tokio::io::AsyncRead + tokio::io::AsyncWrite + Unpin,
{
    let t = match &target.host {
        TargetHost::Name(n) => tokio_socks::TargetAddr::Domain(n.clone().into(), target.port),
        TargetHost::Ip(ip) => tokio_socks::TargetAddr::Ip((*ip, target.port).into()),
    };
    let s = tokio_socks::tcp::Socks5Stream::connect_with_socket(stream, t)
        .await
        .map_err(|e| io::Error::new(io::ErrorKind::ConnectionRefused, e.to_string()))?;
    Ok(s.into_inner())
}
