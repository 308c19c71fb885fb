use std::fmt::Write as _;
use std::path::Path;

use base64::Engine;

use super::{compute_image_id, ToolingError};
use crate::attestation::{verify_document, Check, Nonce, PcrSet, TrustAnchor, VerificationReport};
use crate::http::HttpClient;
use crate::runtime::ATTESTATION_PATH;
use crate::tls::connect_recording_fingerprint;
use crate::transport::AsyncStream;

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error("network: {0}")]
    Network(String),
    #[error("enclave answered {status}: {body}")]
    Refused { status: u16, body: String },
    #[error("invalid enclave url {0:?}")]
    InvalidUrl(String),
    #[error(transparent)]
    Tooling(#[from] ToolingError),
    #[error("malformed attestation document: {0}")]
    Malformed(String),
}

impl VerifyError {
    /// 2 for anything that went wrong on the wire, 3 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            VerifyError::Network(_) => 2,
            _ => 3,
        }
    }
}

/// Process exit status for a verification result.
pub fn exit_code(result: &Result<VerificationReport, VerifyError>) -> i32 {
    match result {
        Ok(r) if r.accepted() => 0,
        Ok(_) => 1,
        Err(e) => e.exit_code(),
    }
}

/// Four numbered check lines and a verdict line.
pub fn render_report(report: &VerificationReport) -> String {
    let mut out = String::new();
    for (check, ok) in report.results() {
        let mark = if ok { "ok  " } else { "FAIL" };
        let _ = writeln!(out, "[{mark}] check {}: {check}", check.number());
    }
    match report.first_failure() {
        None => out.push_str("all checks passed\n"),
        Some(c) => {
            let _ = writeln!(out, "verification failed at check {}: {c}", c.number());
        }
    }
    out
}

/// File extension for saved attestation documents.
pub const ATTDOC_EXTENSION: &str = "attdoc";

/// Runs the challenge over an already-connected stream: TLS handshake
/// (recording the certificate), then `GET /attestation` on the same session.
pub async fn verify_over_stream<S: AsyncStream>(
    stream: S,
    server_name: &str,
    expected: &PcrSet,
    anchor: &TrustAnchor,
) -> Result<VerificationReport, VerifyError> {
    challenge_over_stream(stream, server_name, expected, anchor)
        .await
        .map(|(report, _)| report)
}

/// Like [`verify_over_stream`], also returning the document's raw bytes.
pub async fn challenge_over_stream<S: AsyncStream>(
    stream: S,
    server_name: &str,
    expected: &PcrSet,
    anchor: &TrustAnchor,
) -> Result<(VerificationReport, Vec<u8>), VerifyError> {
    let net = |e: std::io::Error| VerifyError::Network(e.to_string());
    let (tls, fingerprint) = connect_recording_fingerprint(stream, server_name)
        .await
        .map_err(net)?;
    let mut client = HttpClient::handshake(tls).await.map_err(net)?;
    let nonce = Nonce::random();
    let resp = client
        .get(&format!("{ATTESTATION_PATH}?nonce={}", nonce.to_hex()))
        .await
        .map_err(net)?;
    if !resp.status().is_success() {
        return Err(VerifyError::Refused {
            status: resp.status().as_u16(),
            body: String::from_utf8_lossy(resp.body()).into_owned(),
        });
    }
    let raw = base64::engine::general_purpose::STANDARD
        .decode(resp.body().trim_ascii())
        .map_err(|e| VerifyError::Malformed(e.to_string()))?;
    let report = verify_document(&raw, anchor, &nonce, &fingerprint, expected)
        .map_err(|e| VerifyError::Malformed(e.to_string()))?;
    Ok((report, raw))
}

/// Splits `https://host:port` into the dial address and TLS server name.
pub fn parse_enclave_url(url: &str) -> Result<(String, String), VerifyError> {
    let bad = || VerifyError::InvalidUrl(url.to_string());
    let uri: http::Uri = url.parse().map_err(|_| bad())?;
    if uri.scheme_str() != Some("https") {
        return Err(bad());
    }
    let host = uri.host().ok_or_else(bad)?.to_string();
    let port = uri.port_u16().unwrap_or(443);
    let name = host
        .trim_start_matches('[')
        .trim_end_matches(']')
        .to_string();
    Ok((format!("{host}:{port}"), name))
}

/// Computes the expected image from `code_path` and challenges the enclave
/// at `enclave_url`.
pub async fn verify_enclave(
    code_path: impl AsRef<Path>,
    enclave_url: &str,
    anchor: &TrustAnchor,
) -> Result<VerificationReport, VerifyError> {
    challenge_enclave(code_path, enclave_url, anchor)
        .await
        .map(|(report, _)| report)
}

/// Like [`verify_enclave`], also returning the document's raw bytes.
pub async fn challenge_enclave(
    code_path: impl AsRef<Path>,
    enclave_url: &str,
    anchor: &TrustAnchor,
) -> Result<(VerificationReport, Vec<u8>), VerifyError> {
    let expected = compute_image_id(code_path)?.pcrs();
    let (addr, name) = parse_enclave_url(enclave_url)?;
    let stream = tokio::net::TcpStream::connect(&addr)
        .await
        .map_err(|e| VerifyError::Network(format!("{addr}: {e}")))?;
    challenge_over_stream(stream, &name, &expected, anchor).await
}

/// First failing check, if any, for callers that only need the verdict.
pub fn failing_check(result: &Result<VerificationReport, VerifyError>) -> Option<Check> {
    result.as_ref().ok().and_then(|r| r.first_failure())
}
