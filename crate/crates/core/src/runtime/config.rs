use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RuntimeError;

/// Settings an enclave application declares up front.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnclaveConfig {
    pub fqdn: String,
    /// VSOCK-facing listen port.
    pub port: u16,
    /// Obtain a CA-signed certificate instead of a self-signed one.
    #[serde(default)]
    pub use_acme: bool,
    /// Disables attestation and turns on verbose logging.
    #[serde(default)]
    pub debug: bool,
}

impl EnclaveConfig {
    pub fn new(fqdn: impl Into<String>, port: u16) -> Result<Self, RuntimeError> {
        let cfg = Self {
            fqdn: fqdn.into(),
            port,
            use_acme: false,
            debug: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), RuntimeError> {
        if !is_dns_name(&self.fqdn) {
            return Err(RuntimeError::InvalidConfig(format!(
                "{:?} is not a valid DNS name",
                self.fqdn
            )));
        }
        if self.port == 0 {
            return Err(RuntimeError::InvalidConfig("port must be nonzero".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self, RuntimeError> {
        let cfg: Self =
            toml::from_str(s).map_err(|e| RuntimeError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, RuntimeError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| {
            RuntimeError::InvalidConfig(format!("{}: {e}", path.as_ref().display()))
        })?;
        Self::from_toml_str(&text)
    }
}

pub(crate) fn is_dns_name(name: &str) -> bool {
    let name = name.strip_suffix('.').unwrap_or(name);
    !name.is_empty()
        && name.len() <= 253
        && name.split('.').all(|label| {
            !label.is_empty()
                && label.len() <= 63
                && !label.starts_with('-')
                && !label.ends_with('-')
                && label
                    .bytes()
                    .all(|b| b.is_ascii_alphanumeric() || b == b'-')
        })
}
