//! Multiscale patch-mixing forecaster for long-term time series.
//!
//! The pipeline: `dataio` loads series and emits windows, `encoder` turns a
//! window into per-scale patch embeddings, `ram`/`mixing`/`mpmc` assemble the
//! forward graph on the `numerics` tape, `training` and `eval` drive
//! optimization and reporting, and `cli` is the binary surface. Model
//! variants live behind the `variants` registry and are selected by name.

pub mod cli;
pub mod dataio;
pub mod encoder;
pub mod eval;
pub mod mixing;
pub mod mpmc;
pub mod numerics;
pub mod ram;
pub mod training;
pub mod variants;

use thiserror::Error;

/// Crate-wide error type. `exit_code` fixes the CLI contract:
/// 1 usage/config, 2 runtime, 3 verification.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Verification(_) => 3,
            _ => 2,
        }
    }
}
