//! Simulated confidential-computing enclaves: attestation, a VSOCK-style
//! transport with host-side proxies, key synchronization between replicas,
//! and two privacy applications (IP pseudonymization and a k-anonymity
//! shuffler).

pub mod attestation;
mod cbor;
pub mod clock;
pub mod egress;
pub mod http;
pub mod keysync;
pub mod pseudonymizer;
pub mod runtime;
pub mod shuffler;
pub mod tls;
pub mod tooling;
pub mod transport;
