use std::collections::HashSet;
use std::net::IpAddr;
use std::path::Path;

use super::{Target, TargetHost, TransportError};

/// Path to a newline-delimited `host:port` allowlist.
pub const ALLOWLIST_ENV: &str = "ENCLAVED_ALLOWLIST";

/// The exhaustive set of egress destinations. Matching is exact on
/// (name-or-IP, port); an empty list denies everything.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AllowList {
    entries: HashSet<Target>,
}

impl AllowList {
    pub fn new(entries: impl IntoIterator<Item = Target>) -> Self {
        Self {
            entries: entries.into_iter().collect(),
        }
    }

    pub fn deny_all() -> Self {
        Self::default()
    }

    /// One `host:port` per line; IPv6 hosts in brackets. Blank lines and
    /// `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, TransportError> {
        let mut entries = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let target =
                line.parse::<Target>()
                    .map_err(|reason| TransportError::InvalidAllowList {
                        line: i + 1,
                        reason,
                    })?;
            entries.insert(target);
        }
        Ok(Self { entries })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, TransportError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn from_env() -> Result<Option<Self>, TransportError> {
        match std::env::var_os(ALLOWLIST_ENV) {
            Some(p) => Self::from_file(p).map(Some),
            None => Ok(None),
        }
    }

    pub fn permits(&self, target: &Target) -> bool {
        self.entries.contains(target)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Target> {
        self.entries.iter()
    }
}

impl std::str::FromStr for Target {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (host, port) = if let Some(rest) = s.strip_prefix('[') {
            let (h, p) = rest.split_once("]:").ok_or("expected [ipv6]:port")?;
            let ip: IpAddr = h.parse().map_err(|_| format!("bad IPv6 address {h:?}"))?;
            (TargetHost::Ip(ip), p)
        } else {
            let (h, p) = s.rsplit_once(':').ok_or("expected host:port")?;
            if h.contains(':') {
                return Err("IPv6 hosts must be bracketed".into());
            }
            (TargetHost::parse(h)?, p)
        };
        let port: u16 = port.parse().map_err(|_| format!("bad port {port:?}"))?;
        if port == 0 {
            return Err("port must be nonzero".into());
        }
        Ok(Target { host, port })
    }
}
