//! Hostile hosts for the end-to-end verifier tests.

use std::net::SocketAddr;
use std::sync::Arc;

use base64::Engine;
use bytes::Bytes;
use enclaved::attestation::{certificate_fingerprint, HypervisorIdentity, Nonce, PcrSet};
use enclaved::transport::{relay, Connector};
use http::{Request, Response, StatusCode};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;
use tokio_rustls::TlsAcceptor;

/// A certificate and acceptor belonging to the host, not the enclave.
pub fn host_acceptor() -> (TlsAcceptor, [u8; 32]) {
    let ck = rcgen::generate_simple_self_signed(vec!["localhost".into()]).unwrap();
    let der = ck.cert.der().to_vec();
    let fp = certificate_fingerprint(&der);
    let acceptor = enclaved::tls::acceptor(&[der], &ck.key_pair.serialize_der()).unwrap();
    (acceptor, fp)
}

/// Terminates TLS with the host's own certificate and pipes the decrypted
/// bytes into a fresh TLS session with the real enclave behind `upstream`.
pub async fn start_interceptor(
    upstream: Arc<dyn Connector>,
    server_name: &'static str,
) -> (SocketAddr, JoinHandle<()>) {
    let (acceptor, _) = host_acceptor();
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let task = tokio::spawn(async move {
        while let Ok((tcp, _)) = listener.accept().await {
            let (acceptor, upstream) = (acceptor.clone(), upstream.clone());
            tokio::spawn(async move {
                let Ok(client) = acceptor.accept(tcp).await else {
                    return;
                };
                let Ok(raw) = upstream.connect_stream().await else {
                    return;
                };
                let Ok((enclave, _)) =
                    enclaved::tls::connect_recording_fingerprint(raw, server_name).await
                else {
                    return;
                };
                let _ = relay(client, enclave).await;
            });
        }
    });
    (addr, task)
}

/// Which parts of the served document are honest.
#[derive(Debug, Clone, Copy)]
pub struct Cell {
    pub chain: bool,
    pub nonce: bool,
    pub fingerprint: bool,
    pub pcrs: bool,
}

impl Cell {
    pub fn all() -> impl Iterator<Item = Cell> {
        (0..16u8).map(|m| Cell {
            chain: m & 1 == 0,
            nonce: m & 2 == 0,
            fingerprint: m & 4 == 0,
            pcrs: m & 8 == 0,
        })
    }

    pub fn honest(&self) -> bool {
        self.chain && self.nonce && self.fingerprint && self.pcrs
    }
}

/// Serves `/attestation` over TLS, answering with a document corrupted as
/// `cell` says. `trusted` signs honest chains, `rogue` the corrupted ones.
pub async fn start_forger(
    cell: Cell,
    expected: PcrSet,
    trusted: HypervisorIdentity,
    rogue: HypervisorIdentity,
) -> (SocketAddr, JoinHandle<()>) {
    let (acceptor, fp) = host_acceptor();
    let identity = if cell.chain { trusted } else { rogue };
    let dispatch: enclaved::http::Dispatch = Arc::new(move |req: Request<Bytes>| {
        let query = req.uri().query().unwrap_or("");
        let hex = query.strip_prefix("nonce=").unwrap_or("");
        let mut nonce = *Nonce::from_hex(hex).unwrap().as_bytes();
        if !cell.nonce {
            nonce[0] ^= 1;
        }
        let mut user_data = fp;
        if !cell.fingerprint {
            user_data[31] ^= 1;
        }
        let mut pcrs = expected;
        if !cell.pcrs {
            pcrs.register_mut(2).unwrap()[0] ^= 1;
        }
        let doc = identity
            .issue(
                pcrs,
                Some(Nonce::new(nonce)),
                Some(user_data.to_vec()),
                None,
            )
            .unwrap();
        let body = base64::engine::general_purpose::STANDARD.encode(doc.to_bytes().unwrap());
        Response::builder()
            .status(StatusCode::OK)
            .body(Bytes::from(body))
            .unwrap()
    });
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let task = tokio::spawn(async move {
        while let Ok((tcp, _)) = listener.accept().await {
            let (acceptor, dispatch) = (acceptor.clone(), dispatch.clone());
            tokio::spawn(async move {
                if let Ok(tls) = acceptor.accept(tcp).await {
                    let _ = enclaved::http::serve_connection(tls, dispatch).await;
                }
            });
        }
    });
    (addr, task)
}
