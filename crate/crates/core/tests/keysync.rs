mod common;

use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use enclaved::attestation::{AttestationDocument, HypervisorIdentity, Nonce, PcrSet, TestPki};
use enclaved::clock::{self, ManualClock};
use enclaved::keysync::{
    bootstrap_keys, install_routes, request_keys, BootstrapRole, HttpSyncTransport, KeyMaterial,
    KeySyncError, KeySyncServer, LocalTransport, NonceRejection, OriginCheck, RequestCheck,
    SrvTarget, StaticResolver, SyncTransport,
};
use enclaved::transport::{VsockAddress, VsockConnector, VsockFabric};
use rand::SeedableRng;

const FQDN: &str = "enclave.test";

fn origin(pcrs: PcrSet, clock: Arc<dyn enclaved::clock::Clock>) -> Arc<KeySyncServer> {
    let pki = common::pki();
    let s = KeySyncServer::new(
        pki.issue_identity("i-origin").unwrap(),
        pcrs,
        pki.anchor(),
        clock,
    );
    s.set_keys(KeyMaterial::generate(&mut rand::rngs::OsRng, 1));
    Arc::new(s)
}

fn joiner() -> HypervisorIdentity {
    common::pki().issue_identity("i-joiner").unwrap()
}

async fn join(origin: &Arc<KeySyncServer>, pcrs: &PcrSet) -> Result<KeyMaterial, KeySyncError> {
    request_keys(
        &LocalTransport(origin.clone()),
        &joiner(),
        pcrs,
        &common::pki().anchor(),
        &mut rand::rngs::OsRng,
    )
    .await
}

/// Passes traffic through while keeping a copy of every byte.
struct Recording {
    inner: LocalTransport,
    log: Mutex<Vec<u8>>,
}

#[async_trait]
impl SyncTransport for Recording {
    async fn fetch_nonce(&self) -> Result<Nonce, KeySyncError> {
        let n = self.inner.fetch_nonce().await?;
        self.log.lock().unwrap().extend_from_slice(n.as_bytes());
        Ok(n)
    }

    async fn submit(&self, request: Vec<u8>) -> Result<Vec<u8>, KeySyncError> {
        self.log.lock().unwrap().extend_from_slice(&request);
        let resp = self.inner.submit(request).await?;
        self.log.lock().unwrap().extend_from_slice(&resp);
        Ok(resp)
    }
}

/// Answers every submission with a response captured earlier.
struct Replay {
    inner: LocalTransport,
    canned: Vec<u8>,
}

#[async_trait]
impl SyncTransport for Replay {
    async fn fetch_nonce(&self) -> Result<Nonce, KeySyncError> {
        self.inner.fetch_nonce().await
    }

    async fn submit(&self, _: Vec<u8>) -> Result<Vec<u8>, KeySyncError> {
        Ok(self.canned.clone())
    }
}

#[tokio::test]
async fn honest_joiner_gets_the_origin_keys() {
    let pcrs = common::fixed_pcrs(1);
    let o = origin(pcrs, clock::system());
    let keys = join(&o, &pcrs).await.unwrap();
    assert_eq!(keys, o.keys().unwrap());
    assert_eq!(keys.key_id(), o.keys().unwrap().key_id());
}

#[tokio::test]
async fn one_origin_five_joiners_over_https() {
    let pcrs = common::fixed_pcrs(9);
    let pki = common::pki();
    let anchor = pki.anchor();
    let fabric = VsockFabric::in_memory();
    let resolver = StaticResolver::new();
    let mut handles = Vec::new();
    let mut key_ids = Vec::new();

    for i in 0..6u32 {
        let cid = 10 + i;
        let identity = pki.issue_identity(&format!("i-{cid}")).unwrap();
        let server = Arc::new(KeySyncServer::new(
            identity.clone(),
            pcrs,
            anchor.clone(),
            clock::system(),
        ));
        let s = server.clone();
        let enclave = common::boot_enclave_with(pcrs, &format!("i-{cid}"), move |b| {
            install_routes(b, s).unwrap();
        });
        let f = fabric.clone();
        let dial = move |t: &SrvTarget| -> Arc<dyn SyncTransport> {
            let cid: u32 = t.hostname.parse().unwrap();
            Arc::new(HttpSyncTransport::new(
                Arc::new(VsockConnector {
                    fabric: f.clone(),
                    addr: VsockAddress::new(cid, u32::from(t.port)).unwrap(),
                }),
                FQDN,
            ))
        };
        let (keys, role) = bootstrap_keys(
            &resolver,
            FQDN,
            dial,
            &identity,
            &pcrs,
            &anchor,
            &mut rand_chacha::ChaCha20Rng::seed_from_u64(i as u64),
        )
        .await
        .unwrap();
        assert_eq!(role == BootstrapRole::Origin, i == 0);
        key_ids.push(*keys.key_id());
        server.set_keys(keys);

        let (addr, handle) = enclave.listen_vsock(&fabric, cid).await.unwrap();
        handles.push(handle);
        resolver.register(
            FQDN,
            SrvTarget {
                hostname: cid.to_string(),
                port: addr.port() as u16,
                priority: 0,
                weight: 0,
            },
        );
    }
    assert!(key_ids.iter().all(|k| k == &key_ids[0]));
    for h in handles {
        h.stop(Duration::from_secs(1)).await;
    }
}

#[tokio::test]
async fn http_rejections_are_uniform() {
    let pcrs = common::fixed_pcrs(2);
    let server = origin(pcrs, clock::system());
    let s = server.clone();
    let enclave = common::boot_enclave_with(pcrs, "i-o", move |b| install_routes(b, s).unwrap());
    let fabric = VsockFabric::in_memory();
    let (addr, handle) = enclave.listen_vsock(&fabric, 5).await.unwrap();
    let connector = Arc::new(VsockConnector { fabric, addr });

    let mut bodies = Vec::new();
    for bad in [common::fixed_pcrs(3), pcrs] {
        // First attempt has wrong PCRs; the second reuses an unknown nonce.
        let stream = connector_stream(&connector).await;
        let (tls, _) = enclaved::tls::connect_recording_fingerprint(stream, FQDN)
            .await
            .unwrap();
        let mut c = enclaved::http::HttpClient::handshake(tls).await.unwrap();
        let nonce = if bad == pcrs {
            Nonce::random()
        } else {
            let r = c.get("/enclave/nonce").await.unwrap();
            Nonce::from_hex(std::str::from_utf8(r.body()).unwrap()).unwrap()
        };
        let doc = joiner()
            .issue(bad, Some(nonce), Some(vec![0; 20]), Some(vec![1; 32]))
            .unwrap();
        let r = c
            .post(
                "/enclave/sync",
                "application/cbor",
                doc.to_bytes().unwrap().into(),
            )
            .await
            .unwrap();
        assert_eq!(r.status(), 403);
        bodies.push(r.into_body());
    }
    assert_eq!(bodies[0], bodies[1]);
    handle.stop(Duration::from_secs(1)).await;
}

async fn connector_stream(c: &Arc<VsockConnector>) -> enclaved::transport::BoxStream {
    use enclaved::transport::Connector;
    c.connect_stream().await.unwrap()
}

#[tokio::test]
async fn origin_with_other_measurements_is_refused() {
    let pcrs = common::fixed_pcrs(1);
    for reg in 0..3 {
        let mut other = pcrs;
        other.register_mut(reg).unwrap()[47] ^= 1;
        let o = origin(other, clock::system());
        assert!(join(&o, &other).await.is_ok());
        let err = request_keys(
            &LocalTransport(o.clone()),
            &joiner(),
            &pcrs,
            &common::pki().anchor(),
            &mut rand::rngs::OsRng,
        )
        .await
        .unwrap_err();
        // The origin refuses first because the joiner's PCRs differ from its own.
        assert!(matches!(
            err,
            KeySyncError::RequestVerificationFailed(RequestCheck::Pcrs)
        ));
    }
}

/// An origin whose own document carries different PCRs but which does not
/// check the requester (a compromised image) must still be refused.
#[tokio::test]
async fn joiner_checks_origin_measurements() {
    let pcrs = common::fixed_pcrs(1);
    let honest = origin(pcrs, clock::system());
    let mut evil_pcrs = pcrs;
    evil_pcrs.pcr0[0] ^= 0x80;
    let evil_identity = common::pki().issue_identity("i-evil").unwrap();

    struct Evil {
        honest: Arc<KeySyncServer>,
        identity: HypervisorIdentity,
        pcrs: PcrSet,
    }
    #[async_trait]
    impl SyncTransport for Evil {
        async fn fetch_nonce(&self) -> Result<Nonce, KeySyncError> {
            Ok(self.honest.serve_nonce())
        }
        async fn submit(&self, req: Vec<u8>) -> Result<Vec<u8>, KeySyncError> {
            // Let the honest origin build the answer, then re-sign it with
            // the impostor's measurements.
            let good =
                AttestationDocument::from_bytes(&self.honest.serve_key_request_bytes(&req)?)?;
            let forged = self.identity.issue(
                self.pcrs,
                good.nonce().copied(),
                good.user_data().map(<[u8]>::to_vec),
                None,
            )?;
            Ok(forged.to_bytes()?)
        }
    }
    let evil = Evil {
        honest,
        identity: evil_identity,
        pcrs: evil_pcrs,
    };
    let err = request_keys(
        &evil,
        &joiner(),
        &pcrs,
        &common::pki().anchor(),
        &mut rand::rngs::OsRng,
    )
    .await
    .unwrap_err();
    assert!(matches!(
        err,
        KeySyncError::OriginVerificationFailed(OriginCheck::Pcrs)
    ));
}

#[tokio::test]
async fn request_checks_and_nonce_consumption() {
    let pcrs = common::fixed_pcrs(4);
    let clock = ManualClock::new(enclaved_now());
    let o = origin(pcrs, clock.clone());
    let j = joiner();
    let doc = |nonce: Nonce, pcrs: PcrSet| {
        j.issue(
            pcrs,
            Some(nonce),
            Some(Nonce::random().as_bytes().to_vec()),
            Some(x25519_pub()),
        )
        .unwrap()
    };
    let reject = |r: Result<AttestationDocument, KeySyncError>| match r {
        Err(KeySyncError::RequestVerificationFailed(c)) => c,
        other => panic!("expected rejection, got {other:?}"),
    };

    // Never issued.
    assert_eq!(
        reject(o.serve_key_request(&doc(Nonce::random(), pcrs))),
        RequestCheck::Nonce(NonceRejection::Unknown)
    );

    // Wrong PCR2 burns the nonce; the corrected retry then fails on it.
    let n = o.serve_nonce();
    let mut bad = pcrs;
    bad.pcr2[5] ^= 4;
    assert_eq!(
        reject(o.serve_key_request(&doc(n, bad))),
        RequestCheck::Pcrs
    );
    assert_eq!(
        reject(o.serve_key_request(&doc(n, pcrs))),
        RequestCheck::Nonce(NonceRejection::Unknown)
    );

    // Replay of an accepted request.
    let n = o.serve_nonce();
    let good = doc(n, pcrs);
    assert!(o.serve_key_request(&good).is_ok());
    assert_eq!(
        reject(o.serve_key_request(&good)),
        RequestCheck::Nonce(NonceRejection::Unknown)
    );

    // Expiry after the 60 s window.
    let n = o.serve_nonce();
    clock.advance(Duration::from_secs(61));
    assert_eq!(
        reject(o.serve_key_request(&doc(n, pcrs))),
        RequestCheck::Nonce(NonceRejection::Expired)
    );

    // Missing or malformed key and joiner nonce.
    let n = o.serve_nonce();
    let d = j.issue(pcrs, Some(n), Some(vec![0; 20]), None).unwrap();
    assert_eq!(reject(o.serve_key_request(&d)), RequestCheck::PublicKey);
    let n = o.serve_nonce();
    let d = j
        .issue(pcrs, Some(n), Some(vec![0; 19]), Some(x25519_pub()))
        .unwrap();
    assert_eq!(reject(o.serve_key_request(&d)), RequestCheck::UserData);

    // Signed by a different hypervisor.
    let other = TestPki::generate().unwrap().issue_identity("i-x").unwrap();
    let n = o.serve_nonce();
    let d = other
        .issue(pcrs, Some(n), Some(vec![0; 20]), Some(x25519_pub()))
        .unwrap();
    assert_eq!(reject(o.serve_key_request(&d)), RequestCheck::Chain);
}

fn enclaved_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .unwrap()
        .as_millis() as u64
}

fn x25519_pub() -> Vec<u8> {
    use hpke::{Kem, Serializable};
    let (_, pk) = hpke::kem::X25519HkdfSha256::gen_keypair(&mut rand::rngs::OsRng);
    pk.to_bytes().to_vec()
}

#[tokio::test]
async fn origin_without_keys_says_so() {
    let pcrs = common::fixed_pcrs(1);
    let pki = common::pki();
    let o = Arc::new(KeySyncServer::new(
        pki.issue_identity("i-o").unwrap(),
        pcrs,
        pki.anchor(),
        clock::system(),
    ));
    assert!(matches!(
        join(&o, &pcrs).await,
        Err(KeySyncError::NoKeyMaterial)
    ));
}

#[tokio::test]
async fn stale_response_is_refused() {
    let pcrs = common::fixed_pcrs(5);
    let o = origin(pcrs, clock::system());
    let rec = Recording {
        inner: LocalTransport(o.clone()),
        log: Mutex::new(Vec::new()),
    };
    let anchor = common::pki().anchor();
    request_keys(&rec, &joiner(), &pcrs, &anchor, &mut rand::rngs::OsRng)
        .await
        .unwrap();
    // Last submission's answer, replayed into a fresh attempt.
    let log = rec.log.lock().unwrap().clone();
    let canned = last_document(&log);
    let replay = Replay {
        inner: LocalTransport(o),
        canned,
    };
    let err = request_keys(&replay, &joiner(), &pcrs, &anchor, &mut rand::rngs::OsRng)
        .await
        .unwrap_err();
    assert!(matches!(
        err,
        KeySyncError::OriginVerificationFailed(OriginCheck::Nonce)
    ));
}

/// Finds the trailing document in a transcript by trying every suffix.
fn last_document(log: &[u8]) -> Vec<u8> {
    (0..log.len())
        .find_map(|i| {
            AttestationDocument::from_bytes(&log[i..])
                .ok()
                .map(|_| log[i..].to_vec())
        })
        .unwrap()
}

#[tokio::test]
async fn transcript_never_contains_the_secret() {
    let pcrs = common::fixed_pcrs(6);
    for _ in 0..20 {
        let o = origin(pcrs, clock::system());
        let rec = Recording {
            inner: LocalTransport(o.clone()),
            log: Mutex::new(Vec::new()),
        };
        let keys = request_keys(
            &rec,
            &joiner(),
            &pcrs,
            &common::pki().anchor(),
            &mut rand::rngs::OsRng,
        )
        .await
        .unwrap();
        let log = rec.log.lock().unwrap();
        assert!(!log.windows(32).any(|w| w == keys.secret()));
        // Half the secret is 16 bytes; even that never appears.
        assert!(!log.windows(16).any(|w| w == &keys.secret()[..16]));
    }
}

#[test]
fn fifty_concurrent_requests_with_one_stolen_nonce() {
    let pcrs = common::fixed_pcrs(7);
    let o = origin(pcrs, clock::system());
    let n = o.serve_nonce();
    let j = joiner();
    let docs: Vec<_> = (0..50)
        .map(|_| {
            j.issue(
                pcrs,
                Some(n),
                Some(Nonce::random().as_bytes().to_vec()),
                Some(x25519_pub()),
            )
            .unwrap()
        })
        .collect();
    let barrier = std::sync::Barrier::new(50);
    let results: Vec<_> = std::thread::scope(|s| {
        let hs: Vec<_> = docs
            .iter()
            .map(|d| {
                let (o, barrier) = (&o, &barrier);
                s.spawn(move || {
                    barrier.wait();
                    o.serve_key_request(d).is_ok()
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert_eq!(results.iter().filter(|ok| **ok).count(), 1);
}
