//! Finite-horizon tabular MDPs and the machinery for evaluating several target
//! policies at once from a single tailored behavior policy: exact dynamic
//! programming for values and importance-sampling variances, behavior
//! synthesis, similarity diagnostics, Monte Carlo estimators, tabular fitted
//! Q evaluation and instance generators.

pub mod behavior;
pub mod dp;
pub mod enumerate;
pub mod envs;
pub mod error;
pub mod estimators;
pub mod fqe;
pub mod mdp;
pub mod rollout;
pub mod similarity;
pub mod stats;
pub mod tables;

pub use behavior::{
    coverage_check, mu_hat_rl, mu_star_bandit, BanditInstance, BehaviorPolicy, CoverageReport,
    Provenance,
};
pub use dp::{value_tables, ActionValues, ExactDp, FormulaFault, ValueTables};
pub use error::{Error, Result};
pub use estimators::{
    pdis_return, EstimatorReport, Evaluation, PdisConfig, PolicyEstimate, Strategy,
};
pub use fqe::{
    fit_tailored_behavior, generate_offline_data, FqeTables, OfflineDataset, Transition,
};
pub use mdp::{Policy, PolicySet, Step, TabularMdp, Trajectory};
pub use similarity::{
    similarity_report_bandit, similarity_report_rl, BanditSimilarity, SimilarityReport,
};
pub use stats::RunningMoments;
pub use tables::{StateActionTable, StateTable};
