use mpe_core::behavior::{coverage_check, mu_hat_rl, BehaviorPolicy};
use mpe_core::fqe::{fit_target, generate_offline_data, OfflineDataset};
use mpe_core::rollout::derive_seed;
use mpe_core::{ActionValues, Policy, PolicySet, StateActionTable, TabularMdp, ValueTables};
use serde::Serialize;

use crate::config::{ExperimentConfig, Loggers, ValueSource};
use crate::HarnessError;

const GROUP_SALT: u64 = 0x6772_6f75_7000_0000;
const POLICY_SALT: u64 = 1;
const OFFLINE_SALT: u64 = 2;
const RUN_SALT: u64 = 3;

pub fn group_seed(master: u64, group: usize) -> u64 {
    derive_seed(master, GROUP_SALT + group as u64)
}

pub fn run_seed(group_seed: u64, run: usize) -> u64 {
    derive_seed(derive_seed(group_seed, RUN_SALT), run as u64)
}

/// The tables behavior synthesis works from, exact or fitted.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Tables {
    pub q: StateActionTable,
    pub nu: StateActionTable,
    pub q_hat: StateActionTable,
}

impl ActionValues for Tables {
    fn q(&self) -> &StateActionTable {
        &self.q
    }

    fn nu(&self) -> &StateActionTable {
        &self.nu
    }

    fn q_hat(&self) -> &StateActionTable {
        &self.q_hat
    }
}

impl From<&ValueTables> for Tables {
    fn from(v: &ValueTables) -> Self {
        Self {
            q: v.q.clone(),
            nu: v.nu.clone(),
            q_hat: v.q_hat.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Gap {
    pub k: usize,
    pub t: usize,
    pub s: usize,
    pub a: usize,
}

/// Everything fixed within one group: the targets, their exact values, the
/// values used for synthesis, and the synthesized behavior policies.
#[derive(Debug, Clone)]
pub struct GroupSetup {
    pub group: usize,
    pub seed: u64,
    pub targets: PolicySet,
    pub truth: Vec<ValueTables>,
    pub ground_truth: Vec<f64>,
    pub estimated: Vec<Tables>,
    pub behavior: BehaviorPolicy,
    pub gaps: Vec<Gap>,
}

pub fn offline_dataset(
    config: &ExperimentConfig,
    mdp: &TabularMdp,
    targets: &PolicySet,
    seed: u64,
) -> Result<Option<OfflineDataset>, HarnessError> {
    let loggers: Vec<Policy> = match config.offline.loggers {
        Loggers::Uniform => vec![Policy::uniform(
            mdp.horizon(),
            mdp.num_states(),
            mdp.num_actions(),
        )],
        Loggers::Targets => targets.iter().cloned().collect(),
    };
    Ok(match config.offline.source {
        ValueSource::Exact => None,
        ValueSource::ExactWeighted => Some(OfflineDataset::exact_weighted(mdp, &loggers)?),
        ValueSource::Fqe => Some(generate_offline_data(
            mdp,
            &loggers,
            config.offline.episodes,
            derive_seed(seed, OFFLINE_SALT),
        )?),
    })
}

pub fn setup_group(
    config: &ExperimentConfig,
    mdp: &TabularMdp,
    group: usize,
) -> Result<GroupSetup, HarnessError> {
    let seed = group_seed(config.seed, group);
    let targets = config.targets(mdp, derive_seed(seed, POLICY_SALT))?;
    let truth = targets
        .iter()
        .map(|pi| mpe_core::value_tables(mdp, pi))
        .collect::<Result<Vec<_>, _>>()?;
    let ground_truth = truth.iter().map(|v| v.performance).collect();
    let mut gaps = Vec::new();
    let estimated: Vec<Tables> = match offline_dataset(config, mdp, &targets, seed)? {
        None => truth.iter().map(Tables::from).collect(),
        Some(data) => targets
            .iter()
            .enumerate()
            .map(|(k, pi)| {
                let fit = fit_target(&data, pi)?;
                gaps.extend(
                    fit.coverage_gaps
                        .iter()
                        .map(|&(t, s, a)| Gap { k, t, s, a }),
                );
                Ok(Tables {
                    q: fit.q_est,
                    nu: fit.nu_est,
                    q_hat: fit.q_hat_est,
                })
            })
            .collect::<Result<_, mpe_core::Error>>()?,
    };
    if let Some(gap) = gaps.first() {
        log::warn!(
            "group {group}: offline data misses {} cell(s) the targets act in, first k={} (t={}, s={}, a={})",
            gaps.len(),
            gap.k,
            gap.t,
            gap.s,
            gap.a
        );
    }
    let behavior = mu_hat_rl(&targets, &estimated)?;
    Ok(GroupSetup {
        group,
        seed,
        targets,
        truth,
        ground_truth,
        estimated,
        behavior,
        gaps,
    })
}

/// Fails unless `behavior` covers every target wherever its exact `π·q̂` is
/// positive, i.e. unless importance sampling under it is unbiased.
pub fn require_exact_coverage(
    behavior: &Policy,
    targets: &PolicySet,
    truth: &[ValueTables],
    what: &str,
) -> Result<(), HarnessError> {
    let report = coverage_check(behavior, targets, truth)?;
    match report.first_hat_violation() {
        None => Ok(()),
        Some((t, s, a)) => Err(HarnessError::Coverage(format!(
            "{what} assigns zero probability to (t={t}, s={s}, a={a}) where a target needs it"
        ))),
    }
}
