//! The enclave's TLS identity. The private key is generated from the
//! runtime's entropy pool and never leaves this module's types.

use std::fmt;

use p256::pkcs8::EncodePrivateKey;
use rcgen::{
    BasicConstraints, CertificateParams, CertificateSigningRequestParams, DistinguishedName,
    DnType, IsCa, KeyPair, KeyUsagePurpose, PKCS_ECDSA_P256_SHA256,
};
use zeroize::Zeroizing;

use super::{EnclaveConfig, EntropyPool, RuntimeError};
use crate::attestation::certificate_fingerprint;

/// Lifetime of self-signed certificates.
pub const SELF_SIGNED_DAYS: i64 = 90;

#[derive(Debug, thiserror::Error)]
#[error("certificate provisioner failed: {0}")]
pub struct ProvisionError(pub String);

/// Obtains a CA-signed certificate for a CSR whose key stays in the enclave.
pub trait CertificateProvisioner: Send + Sync {
    /// Returns the certificate chain, leaf first.
    fn provision(&self, fqdn: &str, csr_der: &[u8]) -> Result<Vec<Vec<u8>>, ProvisionError>;
}

/// A local CA standing in for an ACME service.
pub struct StubAcmeProvisioner {
    ca: rcgen::Certificate,
    ca_key: KeyPair,
}

impl StubAcmeProvisioner {
    pub fn new() -> Result<Self, ProvisionError> {
        let err = |e: rcgen::Error| ProvisionError(e.to_string());
        let ca_key = KeyPair::generate_for(&PKCS_ECDSA_P256_SHA256).map_err(err)?;
        let mut params = CertificateParams::new(Vec::<String>::new()).map_err(err)?;
        let mut dn = DistinguishedName::new();
        dn.push(DnType::CommonName, "enclaved stub ACME CA");
        params.distinguished_name = dn;
        params.is_ca = IsCa::Ca(BasicConstraints::Unconstrained);
        params.key_usages = vec![KeyUsagePurpose::KeyCertSign];
        let ca = params.self_signed(&ca_key).map_err(err)?;
        Ok(Self { ca, ca_key })
    }

    pub fn ca_certificate(&self) -> &[u8] {
        self.ca.der()
    }
}

impl CertificateProvisioner for StubAcmeProvisioner {
    fn provision(&self, fqdn: &str, csr_der: &[u8]) -> Result<Vec<Vec<u8>>, ProvisionError> {
        let csr = CertificateSigningRequestParams::from_der(&csr_der.to_vec().into())
            .map_err(|e| ProvisionError(e.to_string()))?;
        let requested = csr
            .params
            .subject_alt_names
            .iter()
            .any(|san| matches!(san, rcgen::SanType::DnsName(n) if n.as_str() == fqdn));
        if !requested {
            return Err(ProvisionError(format!("CSR does not cover {fqdn}")));
        }
        let cert = csr
            .signed_by(&self.ca, &self.ca_key)
            .map_err(|e| ProvisionError(e.to_string()))?;
        Ok(vec![cert.der().to_vec(), self.ca.der().to_vec()])
    }
}

/// Certificate chain plus the in-enclave private key.
pub struct CertificateBundle {
    chain: Vec<Vec<u8>>,
    private_key: Zeroizing<Vec<u8>>,
    fingerprint: [u8; 32],
}

impl fmt::Debug for CertificateBundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CertificateBundle")
            .field("fingerprint", &hex::encode(self.fingerprint))
            .field("chain_len", &self.chain.len())
            .field("private_key", &"<redacted>")
            .finish()
    }
}

impl CertificateBundle {
    /// The leaf certificate (DER).
    pub fn certificate(&self) -> &[u8] {
        &self.chain[0]
    }

    pub fn chain(&self) -> &[Vec<u8>] {
        &self.chain
    }

    /// SHA-256 of the leaf DER.
    pub fn fingerprint(&self) -> [u8; 32] {
        self.fingerprint
    }

    pub(crate) fn private_key_pkcs8(&self) -> &[u8] {
        &self.private_key
    }
}

fn rc(e: rcgen::Error) -> RuntimeError {
    RuntimeError::Certificate(e.to_string())
}

/// Generates a P-256 key from the pool and obtains a certificate for it:
/// self-signed when `use_acme` is false, otherwise through `provisioner`.
pub fn provision_certificate(
    cfg: &EnclaveConfig,
    pool: &EntropyPool,
    provisioner: Option<&dyn CertificateProvisioner>,
) -> Result<CertificateBundle, RuntimeError> {
    let secret = p256::SecretKey::random(&mut pool.fork());
    let pkcs8 = Zeroizing::new(
        secret
            .to_pkcs8_der()
            .map_err(|e| RuntimeError::Certificate(e.to_string()))?
            .as_bytes()
            .to_vec(),
    );
    let key = KeyPair::try_from(pkcs8.as_slice()).map_err(rc)?;

    let fqdn = cfg.fqdn.trim_end_matches('.').to_string();
    let mut params = CertificateParams::new(vec![fqdn.clone()]).map_err(rc)?;
    let mut dn = DistinguishedName::new();
    dn.push(DnType::CommonName, fqdn.as_str());
    params.distinguished_name = dn;

    let chain = if cfg.use_acme {
        let provisioner = provisioner.ok_or_else(|| {
            RuntimeError::ProvisionerFailure("use_acme is set but no provisioner given".into())
        })?;
        let csr = params.serialize_request(&key).map_err(rc)?;
        let chain = provisioner
            .provision(&fqdn, csr.der())
            .map_err(|e| RuntimeError::ProvisionerFailure(e.0))?;
        if chain.is_empty() {
            return Err(RuntimeError::ProvisionerFailure("empty chain".into()));
        }
        chain
    } else {
        let now = time::OffsetDateTime::now_utc();
        params.not_before = now;
        params.not_after = now + time::Duration::days(SELF_SIGNED_DAYS);
        vec![params.self_signed(&key).map_err(rc)?.der().to_vec()]
    };

    Ok(CertificateBundle {
        fingerprint: certificate_fingerprint(&chain[0]),
        chain,
        private_key: pkcs8,
    })
}
