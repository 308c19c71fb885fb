use std::net::IpAddr;

use http::HeaderMap;

pub const CLIENT_ADDR_HEADER: &str = "x-client-addr";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExtractError {
    #[error("X-Client-Addr header missing")]
    MissingHeader,
    #[error("X-Client-Addr is not a single IP address")]
    MalformedAddress,
    #[error("more than one X-Client-Addr header")]
    MultipleHeaders,
}

/// Reads the client address the TLS-terminating load balancer put in
/// `X-Client-Addr`. Duplicates are refused rather than picking one.
pub fn extract_client_ip(headers: &HeaderMap) -> Result<IpAddr, ExtractError> {
    let mut values = headers.get_all(CLIENT_ADDR_HEADER).iter();
    let first = values.next().ok_or(ExtractError::MissingHeader)?;
    if values.next().is_some() {
        return Err(ExtractError::MultipleHeaders);
    }
    let s = first.to_str().map_err(|_| ExtractError::MalformedAddress)?;
    if s.contains(',') {
        return Err(ExtractError::MultipleHeaders);
    }
    s.trim().parse().map_err(|_| ExtractError::MalformedAddress)
}
