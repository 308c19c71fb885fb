//! Pinned test PKI and the simulated hypervisor signer.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use rcgen::{
    BasicConstraints, CertificateParams, DistinguishedName, DnType, IsCa, KeyPair, KeyUsagePurpose,
    PKCS_ECDSA_P384_SHA384,
};
use ring::rand::SystemRandom;
use ring::signature::{EcdsaKeyPair, ECDSA_P384_SHA384_FIXED_SIGNING};
use x509_parser::prelude::{FromDer, X509Certificate};

use super::{AttestationDocument, AttestationError, AttestationPayload, Nonce, PcrSet};
use crate::clock::unix_now_ms;

/// Overrides the path of the pinned root certificate (PEM).
pub const TRUST_ROOT_ENV: &str = "ENCLAVED_TRUST_ROOT";

const ROOT_CERT_FILE: &str = "root.pem";
const ROOT_KEY_FILE: &str = "root.key.pem";

fn pki_err(e: impl std::fmt::Display) -> AttestationError {
    AttestationError::Pki(e.to_string())
}

fn validity(params: &mut CertificateParams, days: i64) {
    let now = time::OffsetDateTime::now_utc();
    params.not_before = now - time::Duration::days(1);
    params.not_after = now + time::Duration::days(days);
}

/// The verifier's pinned root plus its tolerance for clock skew.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrustAnchor {
    root_certificate: Vec<u8>,
    pub clock_skew_tolerance: Duration,
}

impl TrustAnchor {
    pub const DEFAULT_SKEW: Duration = Duration::from_secs(300);

    /// Accepts a DER root only if it parses, is a CA and verifies under its own key.
    pub fn new(root_der: Vec<u8>) -> Result<Self, AttestationError> {
        let (rest, cert) = X509Certificate::from_der(&root_der).map_err(pki_err)?;
        if !rest.is_empty() {
            return Err(pki_err("trailing bytes after root certificate"));
        }
        if !cert.is_ca() {
            return Err(pki_err("root certificate is not a CA"));
        }
        if cert.subject() != cert.issuer() {
            return Err(pki_err("root certificate is not self-issued"));
        }
        cert.verify_signature(None)
            .map_err(|e| pki_err(format!("root self-signature: {e}")))?;
        Ok(Self {
            root_certificate: root_der,
            clock_skew_tolerance: Self::DEFAULT_SKEW,
        })
    }

    pub fn from_pem(pem: &str) -> Result<Self, AttestationError> {
        let parsed = pem_from_str(pem)?;
        Self::new(parsed)
    }

    pub fn from_pem_file(path: impl AsRef<Path>) -> Result<Self, AttestationError> {
        Self::from_pem(&std::fs::read_to_string(path)?)
    }

    /// Loads the root named by `ENCLAVED_TRUST_ROOT`, if set.
    pub fn from_env() -> Result<Option<Self>, AttestationError> {
        match std::env::var_os(TRUST_ROOT_ENV) {
            Some(p) => Self::from_pem_file(p).map(Some),
            None => Ok(None),
        }
    }

    pub fn with_skew(mut self, skew: Duration) -> Self {
        self.clock_skew_tolerance = skew;
        self
    }

    pub fn root_certificate(&self) -> &[u8] {
        &self.root_certificate
    }
}

fn pem_from_str(pem: &str) -> Result<Vec<u8>, AttestationError> {
    let (_, block) = x509_parser::pem::parse_x509_pem(pem.as_bytes()).map_err(pki_err)?;
    if block.label != "CERTIFICATE" {
        return Err(pki_err(format!(
            "expected CERTIFICATE, found {}",
            block.label
        )));
    }
    Ok(block.contents)
}

/// A local certificate authority standing in for the cloud provider's PKI.
pub struct TestPki {
    root_der: Vec<u8>,
    issuer: rcgen::Certificate,
    issuer_key: KeyPair,
}

impl TestPki {
    pub fn generate() -> Result<Self, AttestationError> {
        let key = KeyPair::generate_for(&PKCS_ECDSA_P384_SHA384).map_err(pki_err)?;
        let params = Self::root_params()?;
        let cert = params.self_signed(&key).map_err(pki_err)?;
        Ok(Self {
            root_der: cert.der().to_vec(),
            issuer: cert,
            issuer_key: key,
        })
    }

    fn root_params() -> Result<CertificateParams, AttestationError> {
        let mut params = CertificateParams::new(Vec::<String>::new()).map_err(pki_err)?;
        let mut dn = DistinguishedName::new();
        dn.push(DnType::OrganizationName, "enclaved test PKI");
        dn.push(DnType::CommonName, "enclaved attestation root");
        params.distinguished_name = dn;
        params.is_ca = IsCa::Ca(BasicConstraints::Unconstrained);
        params.key_usages = vec![KeyUsagePurpose::KeyCertSign, KeyUsagePurpose::CrlSign];
        validity(&mut params, 3650);
        Ok(params)
    }

    /// Reads `root.pem` and `root.key.pem` from `dir`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, AttestationError> {
        let dir = dir.as_ref();
        let cert_pem = std::fs::read_to_string(dir.join(ROOT_CERT_FILE))?;
        let key_pem = std::fs::read_to_string(dir.join(ROOT_KEY_FILE))?;
        let root_der = pem_from_str(&cert_pem)?;
        let key = KeyPair::from_pem(&key_pem).map_err(pki_err)?;
        // Re-materialize an issuer handle with the same subject and key.
        let issuer = CertificateParams::from_ca_cert_pem(&cert_pem)
            .map_err(pki_err)?
            .self_signed(&key)
            .map_err(pki_err)?;
        TrustAnchor::new(root_der.clone())?;
        Ok(Self {
            root_der,
            issuer,
            issuer_key: key,
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), AttestationError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let pem = x509_pem(&self.root_der);
        std::fs::write(dir.join(ROOT_CERT_FILE), pem)?;
        std::fs::write(dir.join(ROOT_KEY_FILE), self.issuer_key.serialize_pem())?;
        Ok(())
    }

    pub fn load_or_create(dir: impl AsRef<Path>) -> Result<Self, AttestationError> {
        let dir = dir.as_ref();
        if dir.join(ROOT_CERT_FILE).exists() {
            Self::load(dir)
        } else {
            let pki = Self::generate()?;
            pki.save(dir)?;
            Ok(pki)
        }
    }

    pub fn root_der(&self) -> &[u8] {
        &self.root_der
    }

    pub fn root_pem(&self) -> String {
        x509_pem(&self.root_der)
    }

    pub fn anchor(&self) -> TrustAnchor {
        TrustAnchor::new(self.root_der.clone()).expect("generated root is well-formed")
    }

    /// Issues a fresh P-384 leaf for one enclave instance.
    pub fn issue_identity(&self, module_id: &str) -> Result<HypervisorIdentity, AttestationError> {
        let key = KeyPair::generate_for(&PKCS_ECDSA_P384_SHA384).map_err(pki_err)?;
        let mut params = CertificateParams::new(Vec::<String>::new()).map_err(pki_err)?;
        let mut dn = DistinguishedName::new();
        dn.push(DnType::CommonName, module_id);
        params.distinguished_name = dn;
        params.key_usages = vec![KeyUsagePurpose::DigitalSignature];
        validity(&mut params, 365);
        let cert = params
            .signed_by(&key, &self.issuer, &self.issuer_key)
            .map_err(pki_err)?;
        let signer = EcdsaKeyPair::from_pkcs8(
            &ECDSA_P384_SHA384_FIXED_SIGNING,
            &key.serialize_der(),
            &SystemRandom::new(),
        )
        .map_err(pki_err)?;
        Ok(HypervisorIdentity {
            module_id: module_id.to_string(),
            certificate: cert.der().to_vec(),
            cabundle: vec![self.root_der.clone()],
            key: Some(Arc::new(signer)),
        })
    }
}

fn x509_pem(der: &[u8]) -> String {
    use base64::Engine;
    let b64 = base64::engine::general_purpose::STANDARD.encode(der);
    let mut out = String::from("-----BEGIN CERTIFICATE-----\n");
    for chunk in b64.as_bytes().chunks(64) {
        out.push_str(std::str::from_utf8(chunk).expect("base64 is ascii"));
        out.push('\n');
    }
    out.push_str("-----END CERTIFICATE-----\n");
    out
}

/// What the simulated hypervisor knows about one enclave: its certificate
/// chain and (normally) the signing key behind it.
#[derive(Clone)]
pub struct HypervisorIdentity {
    module_id: String,
    certificate: Vec<u8>,
    cabundle: Vec<Vec<u8>>,
    key: Option<Arc<EcdsaKeyPair>>,
}

impl std::fmt::Debug for HypervisorIdentity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HypervisorIdentity")
            .field("module_id", &self.module_id)
            .field("has_key", &self.key.is_some())
            .finish_non_exhaustive()
    }
}

impl HypervisorIdentity {
    pub fn module_id(&self) -> &str {
        &self.module_id
    }

    pub fn certificate(&self) -> &[u8] {
        &self.certificate
    }

    /// The same identity with its signing key removed.
    pub fn without_key(&self) -> Self {
        Self {
            key: None,
            ..self.clone()
        }
    }

    pub fn issue(
        &self,
        pcrs: PcrSet,
        nonce: Option<Nonce>,
        user_data: Option<Vec<u8>>,
        public_key: Option<Vec<u8>>,
    ) -> Result<AttestationDocument, AttestationError> {
        self.issue_at(unix_now_ms(), pcrs, nonce, user_data, public_key)
    }

    pub fn issue_at(
        &self,
        timestamp: u64,
        pcrs: PcrSet,
        nonce: Option<Nonce>,
        user_data: Option<Vec<u8>>,
        public_key: Option<Vec<u8>>,
    ) -> Result<AttestationDocument, AttestationError> {
        let key = self
            .key
            .as_ref()
            .ok_or(AttestationError::SignerUnavailable)?;
        let payload = AttestationPayload {
            module_id: self.module_id.clone(),
            timestamp,
            pcrs,
            certificate: self.certificate.clone(),
            cabundle: self.cabundle.clone(),
            nonce,
            user_data,
            public_key,
        };
        let encoded = super::canonical_encode(&payload)?;
        let signature = key
            .sign(&SystemRandom::new(), &encoded)
            .map_err(|_| pki_err("ecdsa signing failed"))?;
        Ok(AttestationDocument {
            payload,
            signature: signature.as_ref().to_vec(),
        })
    }
}

/// Asks the simulated hypervisor for a signed document.
pub fn nsm_issue(
    signer: &HypervisorIdentity,
    pcrs: PcrSet,
    nonce: Option<Nonce>,
    user_data: Option<Vec<u8>>,
    public_key: Option<Vec<u8>>,
) -> Result<AttestationDocument, AttestationError> {
    signer.issue(pcrs, nonce, user_data, public_key)
}
