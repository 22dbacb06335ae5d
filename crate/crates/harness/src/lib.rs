//! Experiment runner for multi-policy evaluation: estimator comparisons with
//! relative-variance and episodes-to-parity tables, behavior synthesis from
//! offline data, and the verification suites.

pub mod compare;
pub mod config;
pub mod pipeline;
pub mod plot;
pub mod synthesize;
pub mod table;
pub mod verify;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("verification failed: {0}")]
    Verify(String),
    #[error("coverage failure: {0}")]
    Coverage(String),
    #[error(transparent)]
    Core(#[from] mpe_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// Process exit code: 2 configuration, 3 verification, 4 coverage, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Verify(_) => 3,
            HarnessError::Coverage(_) => 4,
            HarnessError::Core(mpe_core::Error::CoverageViolation { .. }) => 4,
            _ => 1,
        }
    }
}
