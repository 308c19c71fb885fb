//! Operator and auditor tools: image IDs, remote verification, benchmarks
//! and the configuration-driven launcher.

mod bench;
mod image_id;
mod run;
mod verify;

use std::path::{Path, PathBuf};

pub use bench::{
    attestation_stress, drive, hello_enclave, run_bench, run_bench_on, BenchError, BenchStats,
    Scenario, StressStats, HELLO_PATH,
};
pub use image_id::{compute_image_id, ImageId, IGNORE_FILE};
pub use run::{start, App, Deployment, RunConfig, PARENT_CID};
pub use verify::{
    challenge_enclave, challenge_over_stream, exit_code, failing_check, parse_enclave_url,
    render_report, verify_enclave, verify_over_stream, VerifyError, ATTDOC_EXTENSION,
};

#[derive(Debug, thiserror::Error)]
pub enum ToolingError {
    #[error("cannot read {path}: {reason}")]
    UnreadableTree { path: PathBuf, reason: String },
    #[error("invalid ignore pattern {0}")]
    InvalidIgnore(String),
    #[error("configuration: {0}")]
    Config(String),
}

impl ToolingError {
    fn unreadable(path: &Path, e: std::io::Error) -> Self {
        ToolingError::UnreadableTree {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
    }
}
