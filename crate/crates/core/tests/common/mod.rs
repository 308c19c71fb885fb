#![allow(dead_code)]

pub mod cryptopan_oracle;
pub mod mitm;

use std::net::SocketAddr;
use std::sync::{Arc, Mutex, OnceLock};

use bytes::Bytes;
use enclaved::attestation::{PcrSet, TestPki};
use enclaved::runtime::{Enclave, EnclaveBuilder, EnclaveConfig, OsRandomness};
use http::{Request, Response, StatusCode};
use tokio::net::TcpListener;

/// (key hex, address, pseudonym) computed once by the oracle and frozen.
pub const FROZEN_VECTORS: [(&str, &str, &str); 20] = [
    (
        "ddf35ca082436576f85d4dad66c71c62ff0ebe30c5f031326ba26636791c5457",
        "196.7.94.133",
        "37.230.191.26",
    ),
    (
        "f1d9c3abdbaa68a46ec5465fb38048b5bfa6db7836ae9102d278b06269ce01fa",
        "196.116.75.73",
        "52.242.77.163",
    ),
    (
        "aa1427e2f88dd9c8f9e750d2301abbf5c6fdc9a3deb50fc56ca5528e91c8fcc6",
        "113.91.100.249",
        "141.60.107.230",
    ),
    (
        "2903d969eeeb841e6ab294305c538a87ebd7ac0a8995427b041f3ad2f2111962",
        "210.234.4.119",
        "209.108.4.120",
    ),
    (
        "3c9901d3d6edd7cbaa23a3a0d2d8e7776819bd9b785211d1d8e8dd0793fe69be",
        "191.172.195.98",
        "191.212.192.146",
    ),
    (
        "8626aa81deb8efc08c0d17309e7738ef254c68c33dfd4c8da34629992137adc4",
        "154.230.47.85",
        "100.231.175.84",
    ),
    (
        "2b875380ae7ca08445c6ecd6ceafcf5c5c070ebb5533f72f0a34c7ca48c0fcb8",
        "129.8.150.205",
        "129.55.46.194",
    ),
    (
        "4cebf9badd844b99d966167cecffa47517ffa1b88b7d595120f63a08b4fb4e40",
        "86.59.251.1",
        "106.4.25.2",
    ),
    (
        "bcba41e39d87f2535555f663a5d06deda593dea6fd76d0c37b7f8eaa7d1d9b3f",
        "76.134.9.44",
        "60.135.129.45",
    ),
    (
        "4106bc5184509bcc6c4890e64d57bd1d14a6ff7945cbe268a4ec06783646cb1f",
        "121.177.77.56",
        "121.142.185.40",
    ),
    (
        "2244394776fde0685014debc4131d6a4f16d69ec23df04c836675c88ad7c170e",
        "d8b9:b5ee:ff66:fdbf:2a62:3a89:f46b:710b",
        "2f46:8ac1:ff63:627e:a1ed:cd31:f495:f114",
    ),
    (
        "6927139aac073546bf9de926745bf2e30ff22a5284afd30f66c391ad8d3b6772",
        "11de:b8ac:ee11:92ca:7c9a:685f:8cc:4c85",
        "e856:72b0:e632:8db2:8cf9:88b0:e4f2:b07d",
    ),
    (
        "14d04f241ec3507fff96862ed9a7daf5903ca558a77fc620a70b48fa9dc223aa",
        "f0a0:cbf2:b444:2951:c5d7:f086:1a01:b74e",
        "9f43:7bb0:abac:e95e:39b7:ee7e:603f:fa81",
    ),
    (
        "a3dc5f3e5f3baeaa4f20f793f43e1f768b06848de58642e28790779b36b37513",
        "63f5:fe85:cc46:e22e:de81:d440:f5b:d687",
        "e54a:c17a:6bb6:1ad1:70e6:2840:1cda:3676",
    ),
    (
        "39527a3ba2fd770299fb150f55552b245fa5d434248042d5f6a489b4e413f3f1",
        "8796:8e4d:90f7:c3fa:506:8002:62b9:24a4",
        "806a:7d31:d735:e775:579:7f81:234a:db23",
    ),
    (
        "77706594201a2095cfbb6ca6c2af2ec30448e518c88ffec63c7b8ad0e139c354",
        "863b:a17d:c6c8:6a7:d2be:d7e7:b2ca:c11",
        "925:dc7d:b970:daa8:22c8:dbe7:cd35:70e8",
    ),
    (
        "dcb1339cc5644ce98ef1125860c1e1e0ab142b610c21349aed286e2f30149d13",
        "1b41:2712:759c:ad0f:dc97:dcce:fb02:bea2",
        "fb82:d8f6:49e2:d50f:bb98:44f2:fb02:beab",
    ),
    (
        "6c2ff157e730a51ed56c53a4b4c688221a5b5e3c122484e257de021d2bbdb116",
        "e135:d76f:850c:4ff5:ea8f:99d2:813d:240b",
        "1aeb:2869:baf3:2c34:d2ac:f42c:9e5d:d40b",
    ),
    (
        "6f81cb90d7c80ab0109870dc2fa20c53ca0be610240f2aa38689ab68daab0256",
        "4bba:cdb3:538c:16d2:79af:20d:4a32:a304",
        "d546:cab4:acbc:16a4:f6af:3ccd:dd2:54e3",
    ),
    (
        "8dd6dcf7000c6518d1607a8961daa89a88231ec1bf63eadf0ab67f0db1bf29cc",
        "424e:7:9a99:a9e0:2664:1857:5c0e:5872",
        "ddb1:fcf8:caa7:d921:589b:1865:4c31:a091",
    ),
];

/// Key and address pairs from the sample trace shipped with the original
/// Crypto-PAn reference implementation.
pub const REFERENCE_KEY: [u8; 32] = [
    21, 34, 23, 141, 51, 164, 207, 128, 19, 10, 91, 22, 73, 144, 125, 16, 216, 152, 143, 131, 121,
    121, 101, 39, 98, 87, 76, 45, 42, 132, 34, 2,
];
pub const REFERENCE_SAMPLE: [(&str, &str); 10] = [
    ("128.11.68.132", "135.242.180.132"),
    ("129.118.74.4", "134.136.186.123"),
    ("130.132.252.244", "133.68.164.234"),
    ("141.223.7.43", "141.167.8.160"),
    ("141.233.145.108", "141.129.237.235"),
    ("152.163.225.39", "151.140.114.167"),
    ("156.29.3.236", "147.225.12.42"),
    ("165.247.96.84", "162.9.99.234"),
    ("166.107.77.190", "160.132.178.185"),
    ("192.102.249.13", "252.138.62.131"),
];

pub fn pki() -> &'static TestPki {
    static PKI: OnceLock<TestPki> = OnceLock::new();
    PKI.get_or_init(|| TestPki::generate().expect("test pki"))
}

pub fn fixed_pcrs(tag: u8) -> PcrSet {
    PcrSet::new(
        [tag; 48],
        [tag.wrapping_add(1); 48],
        [tag.wrapping_add(2); 48],
    )
}

/// Boots an enclave under the shared test PKI; `setup` may add routes.
pub fn boot_enclave_with(
    pcrs: PcrSet,
    module_id: &str,
    setup: impl FnOnce(&mut EnclaveBuilder),
) -> Enclave {
    let cfg = EnclaveConfig::new("enclave.test", 8443).unwrap();
    let identity = pki().issue_identity(module_id).unwrap();
    let mut b = EnclaveBuilder::new(cfg, identity, pcrs).unwrap();
    b.seed_entropy(&mut OsRandomness).unwrap();
    setup(&mut b);
    b.start(None).unwrap()
}

pub fn boot_enclave(pcrs: PcrSet) -> Enclave {
    boot_enclave_with(pcrs, "i-test", |_| {})
}

/// Plain-HTTP back end on loopback that records every request body.
pub struct RecordingBackend {
    pub addr: SocketAddr,
    pub bodies: Arc<Mutex<Vec<Bytes>>>,
    task: tokio::task::JoinHandle<()>,
}

impl RecordingBackend {
    pub async fn start(status: StatusCode) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let b = bodies.clone();
        let task = tokio::spawn(async move {
            loop {
                let Ok((s, _)) = listener.accept().await else {
                    break;
                };
                let b = b.clone();
                let dispatch: enclaved::http::Dispatch = Arc::new(move |req: Request<Bytes>| {
                    b.lock().unwrap().push(req.into_body());
                    Response::builder()
                        .status(status)
                        .body(Bytes::new())
                        .unwrap()
                });
                tokio::spawn(enclaved::http::serve_connection(s, dispatch));
            }
        });
        Self { addr, bodies, task }
    }

    pub fn received(&self) -> Vec<Bytes> {
        self.bodies.lock().unwrap().clone()
    }
}

impl Drop for RecordingBackend {
    fn drop(&mut self) {
        self.task.abort();
    }
}
