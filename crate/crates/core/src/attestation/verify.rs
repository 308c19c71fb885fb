//! The client-side four-check verifier.

use std::fmt;

use ring::signature::{UnparsedPublicKey, ECDSA_P384_SHA384_FIXED};
use x509_parser::prelude::{FromDer, X509Certificate};
use x509_parser::time::ASN1Time;

use super::{canonical_encode, AttestationDocument, AttestationError, Nonce, PcrSet, TrustAnchor};
use crate::clock::unix_now_ms;

/// The four checks, in evaluation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Check {
    /// Document signed under a chain to the pinned root.
    Signature,
    /// Nonce equals the challenge.
    Nonce,
    /// User data equals the TLS certificate fingerprint.
    Fingerprint,
    /// Measurements equal the locally computed image.
    Pcrs,
}

impl Check {
    pub const ALL: [Check; 4] = [
        Check::Signature,
        Check::Nonce,
        Check::Fingerprint,
        Check::Pcrs,
    ];

    pub fn number(self) -> u8 {
        self as u8 + 1
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Check::Signature => "signature chains to the trust root",
            Check::Nonce => "challenge nonce is part of the document",
            Check::Fingerprint => "TLS certificate fingerprint is part of the document",
            Check::Pcrs => "image measurements match the audited code",
        })
    }
}

/// Outcome of every check; all four are always evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerificationReport {
    pub signature_valid: bool,
    pub nonce_matches: bool,
    pub fingerprint_matches: bool,
    pub pcrs_match: bool,
}

impl VerificationReport {
    pub fn accepted(&self) -> bool {
        self.results().iter().all(|(_, ok)| *ok)
    }

    pub fn results(&self) -> [(Check, bool); 4] {
        [
            (Check::Signature, self.signature_valid),
            (Check::Nonce, self.nonce_matches),
            (Check::Fingerprint, self.fingerprint_matches),
            (Check::Pcrs, self.pcrs_match),
        ]
    }

    pub fn first_failure(&self) -> Option<Check> {
        self.results().iter().find(|(_, ok)| !ok).map(|(c, _)| *c)
    }
}

/// Decodes `raw` and runs the four checks against the current time.
pub fn verify_document(
    raw: &[u8],
    anchor: &TrustAnchor,
    expected_nonce: &Nonce,
    expected_cert_fingerprint: &[u8; 32],
    expected_pcrs: &PcrSet,
) -> Result<VerificationReport, AttestationError> {
    verify_document_at(
        raw,
        anchor,
        expected_nonce,
        expected_cert_fingerprint,
        expected_pcrs,
        unix_now_ms(),
    )
}

pub fn verify_document_at(
    raw: &[u8],
    anchor: &TrustAnchor,
    expected_nonce: &Nonce,
    expected_cert_fingerprint: &[u8; 32],
    expected_pcrs: &PcrSet,
    now_ms: u64,
) -> Result<VerificationReport, AttestationError> {
    let doc = AttestationDocument::from_bytes(raw)?;
    Ok(VerificationReport {
        signature_valid: verify_signature_chain(&doc, anchor, now_ms),
        nonce_matches: doc.nonce() == Some(expected_nonce),
        fingerprint_matches: doc.user_data() == Some(&expected_cert_fingerprint[..]),
        pcrs_match: doc.pcrs() == expected_pcrs,
    })
}

/// Check 1 on its own: chain to the anchor, certificate validity, timestamp
/// within the anchor's skew, and the document signature under the leaf.
pub fn verify_signature_chain(
    doc: &AttestationDocument,
    anchor: &TrustAnchor,
    now_ms: u64,
) -> bool {
    chain_error(doc, anchor, now_ms).is_none()
}

fn chain_error(doc: &AttestationDocument, anchor: &TrustAnchor, now_ms: u64) -> Option<String> {
    let p = &doc.payload;
    let skew = anchor.clock_skew_tolerance.as_millis() as u64;
    if p.timestamp.abs_diff(now_ms) > skew {
        return Some("timestamp outside tolerated skew".into());
    }
    let Some(first) = p.cabundle.first() else {
        return Some("empty cabundle".into());
    };
    if first.as_slice() != anchor.root_certificate() {
        return Some("cabundle does not start at the pinned root".into());
    }
    let Ok(now) = ASN1Time::from_timestamp((now_ms / 1000) as i64) else {
        return Some("clock out of range".into());
    };

    let mut chain = Vec::with_capacity(p.cabundle.len() + 1);
    for der in p.cabundle.iter().chain(std::iter::once(&p.certificate)) {
        match X509Certificate::from_der(der) {
            Ok(([], cert)) => chain.push(cert),
            _ => return Some("unparseable certificate".into()),
        }
    }
    for pair in chain.windows(2) {
        let (issuer, subject) = (&pair[0], &pair[1]);
        if !issuer.is_ca() || subject.issuer() != issuer.subject() {
            return Some("broken issuer linkage".into());
        }
        if subject.verify_signature(Some(issuer.public_key())).is_err() {
            return Some("certificate signature invalid".into());
        }
    }
    if chain.iter().any(|c| !c.validity().is_valid_at(now)) {
        return Some("certificate outside validity period".into());
    }

    let leaf = chain.last().expect("chain has the leaf");
    let Ok(message) = canonical_encode(p) else {
        return Some("payload out of bounds".into());
    };
    let key = UnparsedPublicKey::new(
        &ECDSA_P384_SHA384_FIXED,
        &leaf.public_key().subject_public_key.data,
    );
    key.verify(&message, &doc.signature)
        .err()
        .map(|_| "document signature invalid".into())
}
