//! Per-decision importance sampling and the five evaluation strategies:
//! the shared tailored behavior policy (MPE), on-policy Monte Carlo, per-target
//! tailored behavior (ODI), and the pooled variants of the last two (SON, SODI).

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::behavior::{coverage_check, mu_hat_rl, BehaviorPolicy};
use crate::dp::ActionValues;
use crate::error::{Error, Result};
use crate::mdp::{Policy, PolicySet, TabularMdp, Trajectory};
use crate::rollout::{derive_seed, episode_rng, sample_episode_with};
use crate::stats::RunningMoments;

/// Per-episode estimates are kept for diagnostics up to this many values per
/// run; beyond it only streaming moments are tracked.
pub const SAMPLE_STORAGE_CAP: usize = 1_000_000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PdisConfig {
    /// Upper bound on each per-step ratio. Off by default; clipping biases
    /// the estimate.
    pub ratio_clip: Option<f64>,
}

impl PdisConfig {
    pub fn validate(&self) -> Result<()> {
        match self.ratio_clip {
            Some(c) if c.is_nan() || c < 1.0 => Err(Error::InvalidArgument(format!(
                "ratio clip must be at least 1, got {c}"
            ))),
            _ => Ok(()),
        }
    }
}

/// `G_t = ρ_t (R_{t+1} + G_{t+1})`, `G_{T−1} = ρ_{T−1} R_T`, evaluated backward.
pub fn pdis_return(traj: &Trajectory, target: &Policy, behavior: &Policy) -> Result<f64> {
    pdis_return_with(traj, target, behavior, &PdisConfig::default())
}

pub fn pdis_return_with(
    traj: &Trajectory,
    target: &Policy,
    behavior: &Policy,
    config: &PdisConfig,
) -> Result<f64> {
    let mut g = 0.0;
    for step in traj.steps.iter().rev() {
        let mu = behavior.prob(step.t, step.state, step.action);
        if mu <= 0.0 {
            return Err(Error::ZeroBehaviorProbability {
                t: step.t,
                state: step.state,
                action: step.action,
            });
        }
        let mut rho = target.prob(step.t, step.state, step.action) / mu;
        if let Some(clip) = config.ratio_clip {
            rho = rho.min(clip);
        }
        g = rho * (step.reward + g);
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Mpe,
    #[serde(rename = "onpolicy")]
    OnPolicy,
    Odi,
    Son,
    Sodi,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Mpe,
        Strategy::OnPolicy,
        Strategy::Odi,
        Strategy::Son,
        Strategy::Sodi,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Mpe => "mpe",
            Strategy::OnPolicy => "onpolicy",
            Strategy::Odi => "odi",
            Strategy::Son => "son",
            Strategy::Sodi => "sodi",
        }
    }

    /// Column heading used in rendered tables.
    pub fn label(self) -> &'static str {
        match self {
            Strategy::Mpe => "Ours",
            Strategy::OnPolicy => "On-policy MC",
            Strategy::Odi => "ODI",
            Strategy::Son => "SON",
            Strategy::Sodi => "SODI",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEstimate {
    pub k: usize,
    pub n_used: usize,
    pub estimate: f64,
    pub ground_truth: f64,
    pub abs_error: f64,
    /// `|Ĵ − J| / |J|`, or the absolute error when `J = 0`.
    pub rel_error: f64,
    /// Sample variance of the per-episode estimates.
    pub emp_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub strategy: Strategy,
    pub seed: u64,
    pub estimates: Vec<PolicyEstimate>,
    /// Per-target per-episode estimates, when within [`SAMPLE_STORAGE_CAP`].
    #[serde(skip)]
    pub samples: Option<Vec<Vec<f64>>>,
}

impl EstimatorReport {
    /// Total episodes drawn from the environment.
    pub fn episodes_consumed(&self) -> usize {
        match self.strategy {
            Strategy::Mpe => self.estimates.first().map_or(0, |e| e.n_used),
            Strategy::OnPolicy | Strategy::Odi => self.estimates.iter().map(|e| e.n_used).sum(),
            Strategy::Son | Strategy::Sodi => self.estimates.first().map_or(0, |e| e.n_used),
        }
    }
}

#[derive(Serialize)]
struct CsvRow {
    strategy: Strategy,
    k: usize,
    n_used: usize,
    estimate: f64,
    ground_truth: f64,
    abs_error: f64,
    rel_error: f64,
    emp_variance: f64,
    seed: u64,
}

/// Writes reports with the columns
/// `strategy,k,n_used,estimate,ground_truth,abs_error,rel_error,emp_variance,seed`.
pub fn write_reports_csv<'a, W: Write>(
    writer: W,
    reports: impl IntoIterator<Item = &'a EstimatorReport>,
) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    for report in reports {
        for e in &report.estimates {
            csv.serialize(CsvRow {
                strategy: report.strategy,
                k: e.k,
                n_used: e.n_used,
                estimate: e.estimate,
                ground_truth: e.ground_truth,
                abs_error: e.abs_error,
                rel_error: e.rel_error,
                emp_variance: e.emp_variance,
                seed: report.seed,
            })?;
        }
    }
    csv.flush()?;
    Ok(())
}

/// Everything the strategies share: the environment, the targets and their
/// true performance.
#[derive(Debug, Clone)]
pub struct Evaluation<'a> {
    pub mdp: &'a TabularMdp,
    pub targets: &'a PolicySet,
    pub ground_truth: &'a [f64],
    pub config: PdisConfig,
    /// Keep per-episode estimates in reports (subject to the storage cap).
    pub store_samples: bool,
}

impl<'a> Evaluation<'a> {
    pub fn new(
        mdp: &'a TabularMdp,
        targets: &'a PolicySet,
        ground_truth: &'a [f64],
    ) -> Result<Self> {
        targets.check_dims(mdp)?;
        if ground_truth.len() != targets.len() {
            return Err(Error::DimensionMismatch {
                what: "ground truth values",
                expected: targets.len(),
                found: ground_truth.len(),
            });
        }
        Ok(Self {
            mdp,
            targets,
            ground_truth,
            config: PdisConfig::default(),
            store_samples: true,
        })
    }

    pub fn with_config(mut self, config: PdisConfig) -> Result<Self> {
        config.validate()?;
        self.config = config;
        Ok(self)
    }

    /// `n` episodes from one shared behavior policy, each reweighted toward
    /// every target.
    pub fn run_mpe<V: ActionValues>(
        &self,
        behavior: &BehaviorPolicy,
        values: &[V],
        n: usize,
        seed: u64,
    ) -> Result<EstimatorReport> {
        behavior.policy.check_dims(self.mdp)?;
        let coverage = coverage_check(&behavior.policy, self.targets, values)?;
        if let Some((t, state, action)) = coverage.first_hat_violation() {
            return Err(Error::CoverageViolation {
                k: self.first_uncovered_target(&behavior.policy, values, t, state, action),
                t,
                state,
                action,
            });
        }
        self.pooled(Strategy::Mpe, &[(&behavior.policy, n)], seed)
    }

    /// `n_k` on-policy episodes per target; plain returns.
    pub fn run_onpolicy_mc(&self, split: &[usize], seed: u64) -> Result<EstimatorReport> {
        self.check_split(split)?;
        let generators: Vec<(&Policy, usize)> =
            self.targets.iter().zip(split.iter().copied()).collect();
        self.separate(Strategy::OnPolicy, &generators, seed)
    }

    /// `n_k` episodes per target from that target's own tailored behavior.
    pub fn run_odi<V: ActionValues + Clone>(
        &self,
        values: &[V],
        split: &[usize],
        seed: u64,
    ) -> Result<EstimatorReport> {
        self.check_split(split)?;
        let behaviors = self.odi_behaviors(values)?;
        let generators: Vec<(&Policy, usize)> = behaviors
            .iter()
            .map(|b| &b.policy)
            .zip(split.iter().copied())
            .collect();
        self.separate(Strategy::Odi, &generators, seed)
    }

    /// The on-policy episodes of all targets pooled; every target is evaluated
    /// on all of them with the generating policy as behavior.
    pub fn run_son(&self, split: &[usize], seed: u64) -> Result<EstimatorReport> {
        self.check_split(split)?;
        for (j, generator) in self.targets.iter().enumerate() {
            for (k, target) in self.targets.iter().enumerate() {
                if j != k {
                    check_support(generator, target, k)?;
                }
            }
        }
        let generators: Vec<(&Policy, usize)> =
            self.targets.iter().zip(split.iter().copied()).collect();
        self.pooled(Strategy::Son, &generators, seed)
    }

    /// The ODI episodes of all targets pooled; every target is evaluated on
    /// all of them with the generating behavior.
    pub fn run_sodi<V: ActionValues + Clone>(
        &self,
        values: &[V],
        split: &[usize],
        seed: u64,
    ) -> Result<EstimatorReport> {
        self.check_split(split)?;
        let behaviors = self.odi_behaviors(values)?;
        for behavior in &behaviors {
            for (k, target) in self.targets.iter().enumerate() {
                let single = PolicySet::new(vec![target.clone()])?;
                let report =
                    coverage_check(&behavior.policy, &single, std::slice::from_ref(&values[k]))?;
                if let Some((t, state, action)) = report.first_hat_violation() {
                    return Err(Error::CoverageViolation {
                        k,
                        t,
                        state,
                        action,
                    });
                }
            }
        }
        let generators: Vec<(&Policy, usize)> = behaviors
            .iter()
            .map(|b| &b.policy)
            .zip(split.iter().copied())
            .collect();
        self.pooled(Strategy::Sodi, &generators, seed)
    }

    /// Tailored single-target behavior for each target.
    pub fn odi_behaviors<V: ActionValues + Clone>(
        &self,
        values: &[V],
    ) -> Result<Vec<BehaviorPolicy>> {
        if values.len() != self.targets.len() {
            return Err(Error::DimensionMismatch {
                what: "value tables per target",
                expected: self.targets.len(),
                found: values.len(),
            });
        }
        self.targets
            .iter()
            .zip(values)
            .map(|(pi, v)| mu_hat_rl(&PolicySet::new(vec![pi.clone()])?, std::slice::from_ref(v)))
            .collect()
    }

    fn check_split(&self, split: &[usize]) -> Result<()> {
        if split.len() != self.targets.len() {
            return Err(Error::DimensionMismatch {
                what: "sample split",
                expected: self.targets.len(),
                found: split.len(),
            });
        }
        Ok(())
    }

    fn first_uncovered_target<V: ActionValues>(
        &self,
        behavior: &Policy,
        values: &[V],
        t: usize,
        s: usize,
        a: usize,
    ) -> usize {
        let _ = behavior;
        self.targets
            .iter()
            .zip(values)
            .position(|(pi, v)| pi.prob(t, s, a) * v.q_hat().get(t, s, a) > crate::dp::ZERO_TOL)
            .unwrap_or(0)
    }

    /// Episodes from generator `j` use the seed `derive_seed(seed, j)`, so the
    /// on-policy and pooled variants see the same samples for the same seed.
    fn episodes<'p>(
        &self,
        generators: &'p [(&'p Policy, usize)],
        seed: u64,
    ) -> impl Iterator<Item = (usize, Trajectory)> + 'p
    where
        'a: 'p,
    {
        let mdp = self.mdp;
        generators
            .iter()
            .enumerate()
            .flat_map(move |(j, &(policy, count))| {
                let stream_seed = derive_seed(seed, j as u64);
                (0..count as u64).map(move |i| {
                    (
                        j,
                        sample_episode_with(mdp, policy, &mut episode_rng(stream_seed, i)),
                    )
                })
            })
    }

    fn pooled(
        &self,
        strategy: Strategy,
        generators: &[(&Policy, usize)],
        seed: u64,
    ) -> Result<EstimatorReport> {
        let total: usize = generators.iter().map(|g| g.1).sum();
        let mut acc = Accumulators::new(self.targets.len(), total, self.store_samples);
        for (j, traj) in self.episodes(generators, seed) {
            let behavior = generators[j].0;
            for (k, target) in self.targets.iter().enumerate() {
                acc.push(k, pdis_return_with(&traj, target, behavior, &self.config)?);
            }
        }
        Ok(acc.finish(strategy, seed, self.ground_truth))
    }

    fn separate(
        &self,
        strategy: Strategy,
        generators: &[(&Policy, usize)],
        seed: u64,
    ) -> Result<EstimatorReport> {
        let per_target = generators.iter().map(|g| g.1).max().unwrap_or(0);
        let mut acc = Accumulators::new(self.targets.len(), per_target, self.store_samples);
        for (k, traj) in self.episodes(generators, seed) {
            let value =
                pdis_return_with(&traj, self.targets.get(k), generators[k].0, &self.config)?;
            acc.push(k, value);
        }
        Ok(acc.finish(strategy, seed, self.ground_truth))
    }
}

/// Errors unless `generator` can take every action `target` can.
fn check_support(generator: &Policy, target: &Policy, k: usize) -> Result<()> {
    let (horizon, ns, na) = target.table().dims();
    for t in 0..horizon {
        for s in 0..ns {
            for a in 0..na {
                if generator.prob(t, s, a) <= 0.0 && target.prob(t, s, a) > 0.0 {
                    return Err(Error::CoverageViolation {
                        k,
                        t,
                        state: s,
                        action: a,
                    });
                }
            }
        }
    }
    Ok(())
}

struct Accumulators {
    moments: Vec<RunningMoments>,
    samples: Option<Vec<Vec<f64>>>,
}

impl Accumulators {
    fn new(k_count: usize, per_target: usize, store: bool) -> Self {
        let store = store && per_target.saturating_mul(k_count) <= SAMPLE_STORAGE_CAP;
        Self {
            moments: vec![RunningMoments::new(); k_count],
            samples: store.then(|| vec![Vec::with_capacity(per_target); k_count]),
        }
    }

    fn push(&mut self, k: usize, value: f64) {
        self.moments[k].push(value);
        if let Some(samples) = &mut self.samples {
            samples[k].push(value);
        }
    }

    fn finish(self, strategy: Strategy, seed: u64, ground_truth: &[f64]) -> EstimatorReport {
        let estimates = self
            .moments
            .iter()
            .enumerate()
            .map(|(k, m)| {
                let truth = ground_truth[k];
                let abs_error = (m.mean() - truth).abs();
                PolicyEstimate {
                    k,
                    n_used: m.count() as usize,
                    estimate: m.mean(),
                    ground_truth: truth,
                    abs_error,
                    rel_error: if truth != 0.0 {
                        abs_error / truth.abs()
                    } else {
                        abs_error
                    },
                    emp_variance: m.variance(),
                }
            })
            .collect();
        EstimatorReport {
            strategy,
            seed,
            estimates,
            samples: self.samples,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp::value_tables;
    use crate::mdp::Step;

    fn step(t: usize, state: usize, action: usize, reward: f64) -> Step {
        Step {
            t,
            state,
            action,
            reward,
            next_state: None,
        }
    }

    #[test]
    fn on_policy_pdis_is_the_plain_return() {
        let policy = Policy::stationary(3, 1, &[0.3, 0.7]).unwrap();
        let traj = Trajectory {
            steps: vec![step(0, 0, 1, 1.5), step(1, 0, 0, -2.0), step(2, 0, 1, 4.0)],
        };
        assert_eq!(pdis_return(&traj, &policy, &policy).unwrap(), 3.5);
    }

    #[test]
    fn single_ratio_arithmetic() {
        let target = Policy::stationary(1, 1, &[0.8, 0.2]).unwrap();
        let behavior = Policy::stationary(1, 1, &[0.4, 0.6]).unwrap();
        let traj = Trajectory {
            steps: vec![step(0, 0, 0, 2.0)],
        };
        assert!((pdis_return(&traj, &target, &behavior).unwrap() - 4.0).abs() < 1e-15);
    }

    #[test]
    fn zero_behavior_probability_is_an_error() {
        let target = Policy::stationary(1, 1, &[0.5, 0.5]).unwrap();
        let behavior = Policy::stationary(1, 1, &[1.0, 0.0]).unwrap();
        let traj = Trajectory {
            steps: vec![step(0, 0, 1, 1.0)],
        };
        assert!(matches!(
            pdis_return(&traj, &target, &behavior),
            Err(Error::ZeroBehaviorProbability { action: 1, .. })
        ));
    }

    #[test]
    fn clip_bounds_ratios() {
        let target = Policy::stationary(1, 1, &[0.9, 0.1]).unwrap();
        let behavior = Policy::stationary(1, 1, &[0.1, 0.9]).unwrap();
        let traj = Trajectory {
            steps: vec![step(0, 0, 0, 1.0)],
        };
        let config = PdisConfig {
            ratio_clip: Some(2.0),
        };
        assert_eq!(
            pdis_return_with(&traj, &target, &behavior, &config).unwrap(),
            2.0
        );
        assert!(PdisConfig {
            ratio_clip: Some(0.5)
        }
        .validate()
        .is_err());
    }

    fn small() -> (TabularMdp, PolicySet, Vec<crate::dp::ValueTables>, Vec<f64>) {
        let mdp = TabularMdp::new(
            2,
            2,
            3,
            vec![0.3, 0.7, 0.9, 0.1, 0.5, 0.5, 0.2, 0.8],
            vec![1.0, 0.2, 0.4, 2.0],
            vec![0.4, 0.6],
        )
        .unwrap();
        let targets = PolicySet::new(vec![
            Policy::stationary(3, 2, &[0.3, 0.7]).unwrap(),
            Policy::stationary(3, 2, &[0.6, 0.4]).unwrap(),
        ])
        .unwrap();
        let tables: Vec<_> = targets
            .iter()
            .map(|p| value_tables(&mdp, p).unwrap())
            .collect();
        let truth = tables.iter().map(|t| t.performance).collect();
        (mdp, targets, tables, truth)
    }

    #[test]
    fn episode_accounting() {
        let (mdp, targets, tables, truth) = small();
        let eval = Evaluation::new(&mdp, &targets, &truth).unwrap();
        let mu = mu_hat_rl(&targets, &tables).unwrap();
        let mpe = eval.run_mpe(&mu, &tables, 300, 1).unwrap();
        assert_eq!(mpe.episodes_consumed(), 300);
        assert!(mpe.estimates.iter().all(|e| e.n_used == 300));

        let on = eval.run_onpolicy_mc(&[100, 200], 1).unwrap();
        assert_eq!(on.episodes_consumed(), 300);
        assert_eq!(on.estimates[1].n_used, 200);

        let son = eval.run_son(&[100, 200], 1).unwrap();
        assert!(son.estimates.iter().all(|e| e.n_used == 300));
        let odi = eval.run_odi(&tables, &[100, 200], 1).unwrap();
        assert_eq!(odi.episodes_consumed(), 300);
        let sodi = eval.run_sodi(&tables, &[100, 200], 1).unwrap();
        assert!(sodi.estimates.iter().all(|e| e.n_used == 300));
    }

    #[test]
    fn reports_are_deterministic() {
        let (mdp, targets, tables, truth) = small();
        let eval = Evaluation::new(&mdp, &targets, &truth).unwrap();
        let mu = mu_hat_rl(&targets, &tables).unwrap();
        let a = eval.run_mpe(&mu, &tables, 500, 9).unwrap();
        let b = eval.run_mpe(&mu, &tables, 500, 9).unwrap();
        assert_eq!(a, b);
        let c = eval.run_mpe(&mu, &tables, 500, 10).unwrap();
        assert_ne!(a.estimates[0].estimate, c.estimates[0].estimate);
    }

    #[test]
    fn identical_targets_share_estimates() {
        let (mdp, _, _, _) = small();
        let pi = Policy::stationary(3, 2, &[0.3, 0.7]).unwrap();
        let targets = PolicySet::new(vec![pi.clone(); 3]).unwrap();
        let tables = vec![value_tables(&mdp, &pi).unwrap(); 3];
        let truth = vec![tables[0].performance; 3];
        let eval = Evaluation::new(&mdp, &targets, &truth).unwrap();
        let mu = mu_hat_rl(&targets, &tables).unwrap();
        let report = eval.run_mpe(&mu, &tables, 200, 3).unwrap();
        assert!(report
            .estimates
            .windows(2)
            .all(|w| w[0].estimate == w[1].estimate));
    }

    #[test]
    fn mpe_rejects_uncovered_behavior() {
        let (mdp, targets, tables, truth) = small();
        let eval = Evaluation::new(&mdp, &targets, &truth).unwrap();
        let bad = BehaviorPolicy::custom(Policy::stationary(3, 2, &[1.0, 0.0]).unwrap());
        assert!(matches!(
            eval.run_mpe(&bad, &tables, 10, 0),
            Err(Error::CoverageViolation { .. })
        ));
    }

    #[test]
    fn son_rejects_disjoint_generators() {
        let (mdp, _, _, _) = small();
        let targets = PolicySet::new(vec![
            Policy::stationary(3, 2, &[1.0, 0.0]).unwrap(),
            Policy::stationary(3, 2, &[0.0, 1.0]).unwrap(),
        ])
        .unwrap();
        let truth = vec![0.0, 0.0];
        let eval = Evaluation::new(&mdp, &targets, &truth).unwrap();
        assert!(matches!(
            eval.run_son(&[5, 5], 0),
            Err(Error::CoverageViolation { .. })
        ));
    }

    #[test]
    fn csv_columns() {
        let (mdp, targets, _, truth) = small();
        let eval = Evaluation::new(&mdp, &targets, &truth).unwrap();
        let report = eval.run_onpolicy_mc(&[10, 10], 4).unwrap();
        let mut buf = Vec::new();
        write_reports_csv(&mut buf, [&report]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(
            "strategy,k,n_used,estimate,ground_truth,abs_error,rel_error,emp_variance,seed\nonpolicy,0,10,"
        ));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
    }
}
