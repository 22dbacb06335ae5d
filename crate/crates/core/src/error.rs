use thiserror::Error;

use crate::mdp::ValidationIssue;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid MDP: {}", join_issues(.0))]
    InvalidMdp(Vec<ValidationIssue>),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("dimension mismatch: {what} expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("enumeration would visit up to {bound:.3e} trajectories, cap is {cap}")]
    EnumerationCap { bound: f64, cap: usize },

    #[error("behavior probability is zero for taken action {action} in state {state} at t={t}")]
    ZeroBehaviorProbability {
        t: usize,
        state: usize,
        action: usize,
    },

    #[error("behavior policy does not cover target {k} at (t={t}, s={state}, a={action})")]
    CoverageViolation {
        k: usize,
        t: usize,
        state: usize,
        action: usize,
    },

    #[error("negative q_hat {value} at (t={t}, s={state}, a={action})")]
    NegativeQHat {
        t: usize,
        state: usize,
        action: usize,
        value: f64,
    },

    #[error("variance {value} at (t={t}, s={state}) is negative beyond tolerance")]
    NegativeVariance { t: usize, state: usize, value: f64 },

    #[error(
        "q_hat identity violated at (t={t}, s={state}, a={action}): bellman {bellman}, definition {definition}"
    )]
    QHatIdentity {
        t: usize,
        state: usize,
        action: usize,
        bellman: f64,
        definition: f64,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn join_issues(issues: &[ValidationIssue]) -> String {
    issues
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}
