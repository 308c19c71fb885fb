mod common;

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use enclaved::transport::{
    run_socks_proxy, run_tcp_proxy, serve_relay, socks_connect, AllowList, BoxStream,
    CountingDialer, Dialer, Direction, ProxyRoute, Target, TargetHost, VsockAddress,
    VsockConnector, VsockFabric, VsockListener, REPLY_ADDRESS_NOT_SUPPORTED,
    REPLY_COMMAND_NOT_SUPPORTED, REPLY_NOT_ALLOWED,
};
use proptest::prelude::*;
use rand::{Rng, RngCore, SeedableRng};
use sha2::{Digest, Sha256};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};

fn spawn_echo(listener: VsockListener) {
    tokio::spawn(async move {
        while let Ok(s) = listener.accept().await {
            tokio::spawn(async move {
                let (mut r, mut w) = tokio::io::split(s);
                let _ = tokio::io::copy(&mut r, &mut w).await;
                let _ = w.shutdown().await;
            });
        }
    });
}

/// Writes `payload` in `chunk`-sized pieces, half-closes, and reads the echo.
async fn roundtrip<S>(stream: S, payload: Vec<u8>, chunk: usize) -> Vec<u8>
where
    S: tokio::io::AsyncRead + tokio::io::AsyncWrite + Send + 'static,
{
    let (mut r, mut w) = tokio::io::split(stream);
    let writer = tokio::spawn(async move {
        for c in payload.chunks(chunk.max(1)) {
            w.write_all(c).await.unwrap();
        }
        w.shutdown().await.unwrap();
    });
    let mut got = Vec::new();
    r.read_to_end(&mut got).await.unwrap();
    writer.await.unwrap();
    got
}

async fn ingress_to_echo() -> (SocketAddr, enclaved::transport::ProxyHandle) {
    let fabric = VsockFabric::in_memory();
    let addr = VsockAddress::new(4, 8080).unwrap();
    spawn_echo(fabric.listen(addr).await.unwrap());
    let l = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let local = l.local_addr().unwrap();
    (
        local,
        serve_relay(l, VsockConnector { fabric, addr }, Some(local)),
    )
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 12,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]
    #[test]
    fn proxy_is_transparent(size in 0usize..=16 << 20, chunk in 1usize..200_000, seed in any::<u64>()) {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async {
            let (addr, proxy) = ingress_to_echo().await;
            let mut payload = vec![0u8; size];
            rand_chacha::ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut payload);
            let got = roundtrip(TcpStream::connect(addr).await.unwrap(), payload.clone(), chunk).await;
            assert!(got == payload, "echo differs for size {size}");
            proxy.stop(Duration::from_secs(1)).await;
        });
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn hundred_concurrent_mebibyte_streams() {
    for through_proxy in [false, true] {
        let fabric = VsockFabric::in_memory();
        let addr = VsockAddress::new(4, 8080).unwrap();
        spawn_echo(fabric.listen(addr).await.unwrap());
        let proxy = if through_proxy {
            let l = TcpListener::bind("127.0.0.1:0").await.unwrap();
            let local = l.local_addr().unwrap();
            Some(serve_relay(
                l,
                VsockConnector {
                    fabric: fabric.clone(),
                    addr,
                },
                Some(local),
            ))
        } else {
            None
        };
        let mut tasks = Vec::new();
        for i in 0..100u64 {
            let fabric = fabric.clone();
            let proxy_addr = proxy.as_ref().and_then(|p| p.local_addr());
            tasks.push(tokio::spawn(async move {
                // Sequence-numbered words make reordering visible as well.
                let payload: Vec<u8> = (0..(1u64 << 17))
                    .flat_map(|n| (n ^ (i << 40)).to_be_bytes())
                    .collect();
                let want = Sha256::digest(&payload);
                let got = match proxy_addr {
                    Some(a) => roundtrip(TcpStream::connect(a).await.unwrap(), payload, 8192).await,
                    None => roundtrip(fabric.connect(addr).await.unwrap(), payload, 8192).await,
                };
                assert_eq!(got.len(), 1 << 20);
                assert_eq!(Sha256::digest(&got), want, "stream {i}");
            }));
        }
        for t in tasks {
            t.await.unwrap();
        }
        if let Some(p) = proxy {
            assert_eq!(p.stats().accepted(), 100);
            p.stop(Duration::from_secs(1)).await;
        }
    }
}

#[test]
fn routes_load_from_toml() {
    let routes = ProxyRoute::parse_routes(
        r#"
        [[route]]
        listen = "0.0.0.0:443"
        forward = "vsock://16:8443"
        direction = "ingress"

        [[route]]
        listen = "127.0.0.1:1080"
        forward = "3:1080"
        direction = "egress"
        "#,
    )
    .unwrap();
    assert_eq!(routes.len(), 2);
    assert_eq!(routes[0].forward, VsockAddress::new(16, 8443).unwrap());
    assert_eq!(routes[1].direction, Direction::Egress);

    for bad in [
        "[[route]]\nlisten = \"0.0.0.0:0\"\nforward = \"16:1\"\ndirection = \"ingress\"",
        "[[route]]\nlisten = \"0.0.0.0:1\"\nforward = \"2:1\"\ndirection = \"ingress\"",
        "[[route]]\nlisten = \"0.0.0.0:1\"\nforward = \"16:1\"\ndirection = \"sideways\"",
        "[[route]]\nlisten = \"0.0.0.0:1\"\nforward = \"16:1\"\ndirection = \"ingress\"\nextra = 1",
    ] {
        assert!(ProxyRoute::parse_routes(bad).is_err(), "{bad}");
    }
    assert!(ProxyRoute::parse_routes("").unwrap().is_empty());
}

#[tokio::test]
async fn proxy_route_validation_and_bind() {
    let addr = VsockAddress::new(4, 8080).unwrap();
    assert!(ProxyRoute::new("127.0.0.1:0".parse().unwrap(), addr, Direction::Ingress).is_err());
    assert!(ProxyRoute::new(
        "127.0.0.1:80".parse().unwrap(),
        VsockAddress::new(4, 0).unwrap(),
        Direction::Egress
    )
    .is_err());

    // Grab a free port, then let the proxy bind it.
    let port = TcpListener::bind("127.0.0.1:0")
        .await
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let fabric = VsockFabric::in_memory();
    spawn_echo(fabric.listen(addr).await.unwrap());
    let route = ProxyRoute::new(
        format!("127.0.0.1:{port}").parse().unwrap(),
        addr,
        Direction::Ingress,
    )
    .unwrap();
    let proxy = run_tcp_proxy(&route, fabric).await.unwrap();
    let got = roundtrip(
        TcpStream::connect(("127.0.0.1", port)).await.unwrap(),
        b"abc".to_vec(),
        1,
    )
    .await;
    assert_eq!(got, b"abc");
    proxy.stop(Duration::from_secs(1)).await;
}

#[tokio::test]
async fn absent_upstream_closes_client_quickly() {
    let fabric = VsockFabric::in_memory();
    let l = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let local = l.local_addr().unwrap();
    let proxy = serve_relay(
        l,
        VsockConnector {
            fabric,
            addr: VsockAddress::new(4, 9999).unwrap(),
        },
        Some(local),
    );
    let start = Instant::now();
    let mut s = TcpStream::connect(local).await.unwrap();
    let mut buf = [0u8; 16];
    let n = tokio::time::timeout(Duration::from_secs(1), s.read(&mut buf))
        .await
        .expect("closed within a second")
        .unwrap_or(0);
    assert_eq!(n, 0);
    assert!(start.elapsed() < Duration::from_secs(1));
    assert_eq!(proxy.stats().upstream_failures(), 1);
    proxy.stop(Duration::from_secs(1)).await;
}

#[tokio::test]
async fn tls_passes_through_the_proxy_untouched() {
    let enclave = common::boot_enclave(common::fixed_pcrs(1));
    let fabric = VsockFabric::in_memory();
    let (vaddr, server) = enclave.listen_vsock(&fabric, 7).await.unwrap();
    let l = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let local = l.local_addr().unwrap();
    let proxy = serve_relay(
        l,
        VsockConnector {
            fabric,
            addr: vaddr,
        },
        Some(local),
    );

    let tcp = TcpStream::connect(local).await.unwrap();
    let (tls, fp) = enclaved::tls::connect_recording_fingerprint(tcp, "enclave.test")
        .await
        .unwrap();
    assert_eq!(fp, enclave.fingerprint());
    let mut client = enclaved::http::HttpClient::handshake(tls).await.unwrap();
    let resp = client
        .get("/attestation?nonce=00112233445566778899aabbccddeeff00112233")
        .await
        .unwrap();
    assert_eq!(resp.status(), 200);
    drop(client);

    tokio::time::sleep(Duration::from_millis(100)).await;
    let relays = proxy.stats().relays();
    assert_eq!(relays.len(), 1);
    // The proxy keeps nothing but two byte counts per connection.
    assert!(relays[0].to_upstream > 0 && relays[0].to_client > resp.body().len() as u64);
    proxy.stop(Duration::from_secs(1)).await;
    server.stop(Duration::from_secs(1)).await;
}

#[tokio::test]
async fn proxy_stop_drains_then_abandons() {
    let (addr, proxy) = ingress_to_echo().await;
    let mut s = TcpStream::connect(addr).await.unwrap();
    s.write_all(b"x").await.unwrap();
    let mut b = [0u8; 1];
    s.read_exact(&mut b).await.unwrap();
    let start = Instant::now();
    proxy.stop(Duration::from_millis(200)).await;
    assert!(start.elapsed() < Duration::from_secs(2));
    assert!(TcpStream::connect(addr).await.is_err());
}

/// Dials a local echo server whatever the requested target.
struct LocalEcho(SocketAddr);

#[async_trait]
impl Dialer for LocalEcho {
    async fn dial(&self, _: &Target) -> std::io::Result<BoxStream> {
        Ok(Box::new(TcpStream::connect(self.0).await?))
    }
}

async fn tcp_echo() -> SocketAddr {
    let l = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let a = l.local_addr().unwrap();
    tokio::spawn(async move {
        while let Ok((s, _)) = l.accept().await {
            tokio::spawn(async move {
                let (mut r, mut w) = s.into_split();
                let _ = tokio::io::copy(&mut r, &mut w).await;
            });
        }
    });
    a
}

/// Raw SOCKS5 exchange; returns the reply code.
async fn raw_request(
    stream: &mut enclaved::transport::VsockStream,
    cmd: u8,
    atyp: u8,
    addr: &[u8],
    port: u16,
) -> u8 {
    stream.write_all(&[5, 1, 0]).await.unwrap();
    let mut greet = [0u8; 2];
    stream.read_exact(&mut greet).await.unwrap();
    assert_eq!(greet, [5, 0]);
    let mut req = vec![5, cmd, 0, atyp];
    req.extend_from_slice(addr);
    req.extend_from_slice(&port.to_be_bytes());
    stream.write_all(&req).await.unwrap();
    let mut reply = [0u8; 10];
    stream.read_exact(&mut reply).await.unwrap();
    reply[1]
}

#[tokio::test]
async fn socks_allowlist_confines_egress() {
    let echo = tcp_echo().await;
    let dialer = Arc::new(CountingDialer::new(LocalEcho(echo)));
    let fabric = VsockFabric::in_memory();
    let listen = VsockAddress::new(3, 1080).unwrap();
    let allow = AllowList::parse("backend.internal:443\n").unwrap();
    let proxy = run_socks_proxy(&fabric, listen, allow, dialer.clone())
        .await
        .unwrap();

    let target = |h: &str, port| Target {
        host: TargetHost::parse(h).unwrap(),
        port,
    };

    let s = fabric.connect(listen).await.unwrap();
    let tunnel = socks_connect(s, &target("backend.internal", 443))
        .await
        .unwrap();
    assert_eq!(roundtrip(tunnel, b"hello".to_vec(), 2).await, b"hello");
    assert_eq!(dialer.dials(), 1);

    for (host, port) in [
        ("evil.com", 443),
        ("backend.internal", 80),
        ("BACKEND.internal.", 443),
    ] {
        let mut s = fabric.connect(listen).await.unwrap();
        let mut name = vec![host.len() as u8];
        name.extend_from_slice(host.as_bytes());
        let code = raw_request(&mut s, 1, 3, &name, port).await;
        if host.starts_with("BACKEND") {
            assert_eq!(
                code, 0,
                "names are case-insensitive and may carry a root dot"
            );
        } else {
            assert_eq!(code, REPLY_NOT_ALLOWED, "{host}:{port}");
        }
    }
    assert_eq!(dialer.dials(), 2);

    let mut s = fabric.connect(listen).await.unwrap();
    assert_eq!(
        raw_request(&mut s, 2, 1, &[10, 0, 0, 1], 443).await,
        REPLY_COMMAND_NOT_SUPPORTED
    );
    let mut s = fabric.connect(listen).await.unwrap();
    assert_eq!(
        raw_request(&mut s, 3, 1, &[10, 0, 0, 1], 443).await,
        REPLY_COMMAND_NOT_SUPPORTED
    );
    let mut s = fabric.connect(listen).await.unwrap();
    assert_eq!(
        raw_request(&mut s, 1, 9, &[], 443).await,
        REPLY_ADDRESS_NOT_SUPPORTED
    );
    assert_eq!(dialer.dials(), 2);
    proxy.stop(Duration::from_secs(1)).await;
}

#[tokio::test]
async fn socks_without_allowlist_denies_everything() {
    let dialer = Arc::new(CountingDialer::new(LocalEcho(tcp_echo().await)));
    let fabric = VsockFabric::in_memory();
    let listen = VsockAddress::new(3, 1080).unwrap();
    let proxy = run_socks_proxy(&fabric, listen, AllowList::deny_all(), dialer.clone())
        .await
        .unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let mut s = fabric.connect(listen).await.unwrap();
        let ip: [u8; 4] = rng.gen();
        assert_eq!(
            raw_request(&mut s, 1, 1, &ip, rng.gen()).await,
            REPLY_NOT_ALLOWED
        );
    }
    assert_eq!(dialer.dials(), 0);
    proxy.stop(Duration::from_secs(1)).await;
}
