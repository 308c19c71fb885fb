use std::sync::{Arc, RwLock};

use async_trait::async_trait;
use bytes::Bytes;
use hpke::aead::AesGcm128;
use hpke::kdf::HkdfSha256;
use hpke::kem::X25519HkdfSha256;
use hpke::{Deserializable, Kem, OpModeR, OpModeS, Serializable};
use http::{Method, StatusCode};
use rand::{CryptoRng, RngCore};

use super::discovery::{discover, Resolver, SrvTarget};
use super::{KeyMaterial, KeySyncError, NonceRejection, SyncNonceCache};
use crate::attestation::{
    canonical_encode, verify_signature_chain, AttestationDocument, HypervisorIdentity, Nonce,
    PcrSet, TrustAnchor, NONCE_LEN,
};
use crate::clock::{unix_now_ms, Clock};
use crate::http::{text, HttpClient};
use crate::runtime::{EnclaveBuilder, RuntimeError};
use crate::transport::Connector;

pub const NONCE_PATH: &str = "/enclave/nonce";
pub const SYNC_PATH: &str = "/enclave/sync";

const HPKE_INFO: &[u8] = b"enclaved key sync v1";
const ENCAPPED_LEN: usize = 32;

type SyncKem = X25519HkdfSha256;

/// Which check an origin's response failed on the joiner's side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OriginCheck {
    Malformed,
    Chain,
    Nonce,
    Pcrs,
    MissingCiphertext,
}

/// Which check a joiner's request failed on the origin's side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestCheck {
    Malformed,
    Chain,
    Nonce(NonceRejection),
    MissingNonce,
    Pcrs,
    PublicKey,
    UserData,
}

/// Origin side of the exchange.
pub struct KeySyncServer {
    identity: HypervisorIdentity,
    pcrs: PcrSet,
    anchor: TrustAnchor,
    cache: SyncNonceCache,
    keys: RwLock<Option<KeyMaterial>>,
}

impl KeySyncServer {
    pub fn new(
        identity: HypervisorIdentity,
        pcrs: PcrSet,
        anchor: TrustAnchor,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Self {
            identity,
            pcrs,
            anchor,
            cache: SyncNonceCache::new(clock),
            keys: RwLock::new(None),
        }
    }

    pub fn set_keys(&self, keys: KeyMaterial) {
        *self.keys.write().expect("key state poisoned") = Some(keys);
    }

    pub fn keys(&self) -> Option<KeyMaterial> {
        self.keys.read().expect("key state poisoned").clone()
    }

    pub fn nonce_cache(&self) -> &SyncNonceCache {
        &self.cache
    }

    /// Step 1: hand out a nonce.
    pub fn serve_nonce(&self) -> Nonce {
        self.cache.issue()
    }

    /// Step 3: verify a joiner's document and answer with sealed keys.
    ///
    /// The nonce is consumed whenever the request carries one, even if a
    /// later check fails.
    pub fn serve_key_request(
        &self,
        request: &AttestationDocument,
    ) -> Result<AttestationDocument, KeySyncError> {
        let reject = |c| KeySyncError::RequestVerificationFailed(c);
        let nonce_result = match request.nonce() {
            Some(n) => self.cache.consume(n).map_err(RequestCheck::Nonce),
            None => Err(RequestCheck::MissingNonce),
        };
        if !verify_signature_chain(request, &self.anchor, unix_now_ms()) {
            return Err(reject(RequestCheck::Chain));
        }
        nonce_result.map_err(reject)?;
        if request.pcrs() != &self.pcrs {
            return Err(reject(RequestCheck::Pcrs));
        }
        let joiner_key = request
            .public_key()
            .and_then(|pk| <SyncKem as Kem>::PublicKey::from_bytes(pk).ok())
            .ok_or(reject(RequestCheck::PublicKey))?;
        let joiner_nonce = request
            .user_data()
            .filter(|u| u.len() == NONCE_LEN)
            .map(Nonce::from_slice)
            .and_then(Result::ok)
            .ok_or(reject(RequestCheck::UserData))?;

        let keys = self.keys().ok_or(KeySyncError::NoKeyMaterial)?;
        let aad = canonical_encode(&request.payload)?;
        let (encapped, ciphertext) = hpke::single_shot_seal::<AesGcm128, HkdfSha256, SyncKem, _>(
            &OpModeS::Base,
            &joiner_key,
            HPKE_INFO,
            &keys.encode(),
            &aad,
            &mut rand::rngs::OsRng,
        )
        .map_err(|e| KeySyncError::Transport(format!("hpke seal: {e}")))?;
        let mut sealed = encapped.to_bytes().to_vec();
        sealed.extend_from_slice(&ciphertext);
        Ok(self
            .identity
            .issue(self.pcrs, Some(joiner_nonce), Some(sealed), None)?)
    }

    /// Wire form of [`Self::serve_key_request`].
    pub fn serve_key_request_bytes(&self, raw: &[u8]) -> Result<Vec<u8>, KeySyncError> {
        let doc = AttestationDocument::from_bytes(raw)
            .map_err(|_| KeySyncError::RequestVerificationFailed(RequestCheck::Malformed))?;
        Ok(self.serve_key_request(&doc)?.to_bytes()?)
    }
}

/// How a joiner reaches an origin.
#[async_trait]
pub trait SyncTransport: Send + Sync {
    async fn fetch_nonce(&self) -> Result<Nonce, KeySyncError>;
    async fn submit(&self, request: Vec<u8>) -> Result<Vec<u8>, KeySyncError>;
}

/// Calls an in-process origin directly.
#[derive(Clone)]
pub struct LocalTransport(pub Arc<KeySyncServer>);

#[async_trait]
impl SyncTransport for LocalTransport {
    async fn fetch_nonce(&self) -> Result<Nonce, KeySyncError> {
        Ok(self.0.serve_nonce())
    }

    async fn submit(&self, request: Vec<u8>) -> Result<Vec<u8>, KeySyncError> {
        self.0.serve_key_request_bytes(&request)
    }
}

/// Talks to an origin's TLS endpoint; one connection per step.
pub struct HttpSyncTransport {
    connector: Arc<dyn Connector>,
    server_name: String,
}

impl HttpSyncTransport {
    pub fn new(connector: Arc<dyn Connector>, server_name: impl Into<String>) -> Self {
        Self {
            connector,
            server_name: server_name.into(),
        }
    }

    async fn client(&self) -> Result<HttpClient, KeySyncError> {
        let t = |e: std::io::Error| KeySyncError::Transport(e.to_string());
        let stream = self.connector.connect_stream().await.map_err(t)?;
        let (tls, _) = crate::tls::connect_recording_fingerprint(stream, &self.server_name)
            .await
            .map_err(t)?;
        HttpClient::handshake(tls).await.map_err(t)
    }
}

fn expect_ok(resp: &http::Response<Bytes>) -> Result<(), KeySyncError> {
    if resp.status() == StatusCode::OK {
        Ok(())
    } else {
        Err(KeySyncError::Transport(format!(
            "origin answered {}",
            resp.status()
        )))
    }
}

#[async_trait]
impl SyncTransport for HttpSyncTransport {
    async fn fetch_nonce(&self) -> Result<Nonce, KeySyncError> {
        let resp = self
            .client()
            .await?
            .get(NONCE_PATH)
            .await
            .map_err(|e| KeySyncError::Transport(e.to_string()))?;
        expect_ok(&resp)?;
        let body = std::str::from_utf8(resp.body())
            .map_err(|_| KeySyncError::Transport("nonce is not text".into()))?;
        Nonce::from_hex(body.trim()).map_err(|e| KeySyncError::Transport(e.to_string()))
    }

    async fn submit(&self, request: Vec<u8>) -> Result<Vec<u8>, KeySyncError> {
        let resp = self
            .client()
            .await?
            .post(SYNC_PATH, "application/cbor", Bytes::from(request))
            .await
            .map_err(|e| KeySyncError::Transport(e.to_string()))?;
        expect_ok(&resp)?;
        Ok(resp.into_body().to_vec())
    }
}

/// Joiner side: runs steps 1-3 against `transport` and returns the origin's
/// key material once its document checks out.
pub async fn request_keys<R>(
    transport: &dyn SyncTransport,
    identity: &HypervisorIdentity,
    own_pcrs: &PcrSet,
    anchor: &TrustAnchor,
    rng: &mut R,
) -> Result<KeyMaterial, KeySyncError>
where
    R: RngCore + CryptoRng + Send,
{
    let origin_nonce = transport.fetch_nonce().await?;
    let (private_key, public_key) = SyncKem::gen_keypair(rng);
    let own_nonce = Nonce::random_from(rng);
    let request = identity.issue(
        *own_pcrs,
        Some(origin_nonce),
        Some(own_nonce.as_bytes().to_vec()),
        Some(public_key.to_bytes().to_vec()),
    )?;
    let aad = canonical_encode(&request.payload)?;
    let raw = transport.submit(request.to_bytes()?).await?;

    let fail = KeySyncError::OriginVerificationFailed;
    let response =
        AttestationDocument::from_bytes(&raw).map_err(|_| fail(OriginCheck::Malformed))?;
    if !verify_signature_chain(&response, anchor, unix_now_ms()) {
        return Err(fail(OriginCheck::Chain));
    }
    if response.nonce() != Some(&own_nonce) {
        return Err(fail(OriginCheck::Nonce));
    }
    if response.pcrs() != own_pcrs {
        return Err(fail(OriginCheck::Pcrs));
    }
    let sealed = response
        .user_data()
        .filter(|u| u.len() > ENCAPPED_LEN)
        .ok_or(fail(OriginCheck::MissingCiphertext))?;
    let (encapped, ciphertext) = sealed.split_at(ENCAPPED_LEN);
    let encapped = <SyncKem as Kem>::EncappedKey::from_bytes(encapped)
        .map_err(|_| KeySyncError::DecryptionFailed)?;
    let plaintext = zeroize::Zeroizing::new(
        hpke::single_shot_open::<AesGcm128, HkdfSha256, SyncKem>(
            &OpModeR::Base,
            &private_key,
            &encapped,
            HPKE_INFO,
            ciphertext,
            &aad,
        )
        .map_err(|_| KeySyncError::DecryptionFailed)?,
    );
    KeyMaterial::decode(&plaintext).ok_or(KeySyncError::DecryptionFailed)
}

/// Registers `GET /enclave/nonce` and `POST /enclave/sync` for `server`.
/// Every rejected request gets the same 403 body; the cause is only logged.
pub fn install_routes(
    builder: &mut EnclaveBuilder,
    server: Arc<KeySyncServer>,
) -> Result<(), RuntimeError> {
    let s = server.clone();
    builder.add_route(Method::GET, NONCE_PATH, move |_| {
        text(StatusCode::OK, &s.serve_nonce().to_hex())
    })?;
    builder.add_route(Method::POST, SYNC_PATH, move |req| {
        match server.serve_key_request_bytes(req.body()) {
            Ok(doc) => http::Response::builder()
                .status(StatusCode::OK)
                .header(http::header::CONTENT_TYPE, "application/cbor")
                .body(Bytes::from(doc))
                .expect("static response parts are valid"),
            Err(KeySyncError::NoKeyMaterial) => {
                text(StatusCode::SERVICE_UNAVAILABLE, "no key material")
            }
            Err(e) => {
                tracing::info!(error = %e, "key request rejected");
                text(StatusCode::FORBIDDEN, "key request rejected")
            }
        }
    })?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BootstrapRole {
    Origin,
    Joined(SrvTarget),
}

/// Discovery followed by either key generation (origin) or a key request to
/// a uniformly chosen peer.
pub async fn bootstrap_keys<R, F>(
    resolver: &dyn Resolver,
    fqdn: &str,
    dial: F,
    identity: &HypervisorIdentity,
    own_pcrs: &PcrSet,
    anchor: &TrustAnchor,
    rng: &mut R,
) -> Result<(KeyMaterial, BootstrapRole), KeySyncError>
where
    R: RngCore + CryptoRng + Send,
    F: Fn(&SrvTarget) -> Arc<dyn SyncTransport>,
{
    let peers = discover(resolver, fqdn).await?;
    match peers.choose(rng).cloned() {
        None => Ok((
            KeyMaterial::generate(rng, unix_now_ms()),
            BootstrapRole::Origin,
        )),
        Some(target) => {
            let transport = dial(&target);
            let keys = request_keys(transport.as_ref(), identity, own_pcrs, anchor, rng).await?;
            Ok((keys, BootstrapRole::Joined(target)))
        }
    }
}
