//! Offline datasets of `(t, s, a, r, s')` tuples and tabular fitted Q
//! evaluation of `q` and `q̂` from them, composed into the end-to-end
//! offline-data-to-behavior pipeline.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::behavior::{mu_hat_rl, BehaviorPolicy};
use crate::dp::ActionValues;
use crate::error::{Error, Result};
use crate::mdp::{Policy, PolicySet, TabularMdp};
use crate::rollout::{derive_seed, episode_rng, sample_episode_with};
use crate::tables::StateActionTable;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub t: usize,
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
}

/// Logged tuples. Episodes are sliced into independent tuples; nothing relies
/// on them forming complete trajectories. Optional per-tuple weights turn
/// the cell averages into weighted averages.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    transitions: Vec<Transition>,
    weights: Option<Vec<f64>>,
    pub metadata: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub num_tuples: usize,
    pub weighted: bool,
    pub metadata: String,
}

#[derive(Serialize, Deserialize)]
struct CsvTuple {
    t: usize,
    s: usize,
    a: usize,
    r: f64,
    s_next: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight: Option<f64>,
}

impl OfflineDataset {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        transitions: Vec<Transition>,
        metadata: impl Into<String>,
    ) -> Result<Self> {
        let dataset = Self {
            num_states,
            num_actions,
            horizon,
            transitions,
            weights: None,
            metadata: metadata.into(),
        };
        dataset.check()?;
        Ok(dataset)
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.transitions.len() {
            return Err(Error::DimensionMismatch {
                what: "tuple weights",
                expected: self.transitions.len(),
                found: weights.len(),
            });
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "tuple weight {w} is not a finite non-negative number"
            )));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    fn check(&self) -> Result<()> {
        for (i, tr) in self.transitions.iter().enumerate() {
            if tr.t >= self.horizon
                || tr.s >= self.num_states
                || tr.s_next >= self.num_states
                || tr.a >= self.num_actions
                || !tr.r.is_finite()
            {
                return Err(Error::InvalidArgument(format!(
                    "tuple {i} out of range: {tr:?}"
                )));
            }
        }
        Ok(())
    }

    /// Tuples whose probability-weighted cell averages reproduce the exact
    /// Bellman expectations: every `(t, s, a, s')` reachable under the
    /// loggers, weighted by its visitation probability (averaged over
    /// loggers).
    pub fn exact_weighted(mdp: &TabularMdp, loggers: &[Policy]) -> Result<Self> {
        if loggers.is_empty() {
            return Err(Error::InvalidArgument(
                "at least one logging policy is required".into(),
            ));
        }
        let (ns, na) = (mdp.num_states(), mdp.num_actions());
        let mut mass = vec![0.0; mdp.horizon() * ns * na * ns];
        let scale = 1.0 / loggers.len() as f64;
        for logger in loggers {
            logger.check_dims(mdp)?;
            let marginals = mdp.state_marginals(logger);
            for (t, dist) in marginals.iter().enumerate() {
                for (s, &ds) in dist.iter().enumerate() {
                    for a in 0..na {
                        let pa = ds * logger.prob(t, s, a);
                        if pa <= 0.0 {
                            continue;
                        }
                        for (next, &p) in mdp.next_state_probs(s, a).iter().enumerate() {
                            mass[((t * ns + s) * na + a) * ns + next] += scale * pa * p;
                        }
                    }
                }
            }
        }
        let mut transitions = Vec::new();
        let mut weights = Vec::new();
        for (i, &w) in mass.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            let (rest, s_next) = (i / ns, i % ns);
            let (rest, a) = (rest / na, rest % na);
            let (t, s) = (rest / ns, rest % ns);
            transitions.push(Transition {
                t,
                s,
                a,
                r: mdp.reward(s, a),
                s_next,
            });
            weights.push(w);
        }
        Self::new(
            ns,
            na,
            mdp.horizon(),
            transitions,
            format!("exact-weighted, {} logger(s)", loggers.len()),
        )?
        .with_weights(weights)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }

    pub fn sidecar(&self) -> DatasetSidecar {
        DatasetSidecar {
            num_states: self.num_states,
            num_actions: self.num_actions,
            horizon: self.horizon,
            num_tuples: self.transitions.len(),
            weighted: self.weights.is_some(),
            metadata: self.metadata.clone(),
        }
    }

    /// Writes the tuples as CSV (`t,s,a,r,s_next`, plus `weight` for weighted
    /// data) and the dimensions and metadata as a JSON sidecar.
    pub fn write(&self, csv_path: impl AsRef<Path>, sidecar_path: impl AsRef<Path>) -> Result<()> {
        let mut writer = csv::Writer::from_writer(BufWriter::new(File::create(csv_path)?));
        for (i, tr) in self.transitions.iter().enumerate() {
            writer.serialize(CsvTuple {
                t: tr.t,
                s: tr.s,
                a: tr.a,
                r: tr.r,
                s_next: tr.s_next,
                weight: self.weights.as_ref().map(|w| w[i]),
            })?;
        }
        writer.flush()?;
        serde_json::to_writer_pretty(BufWriter::new(File::create(sidecar_path)?), &self.sidecar())?;
        Ok(())
    }

    pub fn read(csv_path: impl AsRef<Path>, sidecar_path: impl AsRef<Path>) -> Result<Self> {
        let sidecar: DatasetSidecar =
            serde_json::from_reader(BufReader::new(File::open(sidecar_path)?))?;
        let mut reader = csv::Reader::from_reader(BufReader::new(File::open(csv_path)?));
        let mut transitions = Vec::new();
        let mut weights = Vec::new();
        for row in reader.deserialize() {
            let row: CsvTuple = row?;
            transitions.push(Transition {
                t: row.t,
                s: row.s,
                a: row.a,
                r: row.r,
                s_next: row.s_next,
            });
            weights.extend(row.weight);
        }
        let dataset = Self::new(
            sidecar.num_states,
            sidecar.num_actions,
            sidecar.horizon,
            transitions,
            sidecar.metadata,
        )?;
        if sidecar.weighted {
            dataset.with_weights(weights)
        } else {
            Ok(dataset)
        }
    }

    fn check_policy(&self, policy: &Policy) -> Result<()> {
        let dims = (self.horizon, self.num_states, self.num_actions);
        if policy.table().dims() != dims {
            return Err(Error::DimensionMismatch {
                what: "policy entries for dataset",
                expected: self.horizon * self.num_states * self.num_actions,
                found: policy.table().as_slice().len(),
            });
        }
        Ok(())
    }

    /// Tuple indices grouped by `(t, s, a)`.
    fn cells(&self) -> Vec<Vec<usize>> {
        let mut cells = vec![Vec::new(); self.horizon * self.num_states * self.num_actions];
        for (i, tr) in self.transitions.iter().enumerate() {
            cells[(tr.t * self.num_states + tr.s) * self.num_actions + tr.a].push(i);
        }
        cells
    }
}

/// `episodes_per_policy` episodes from each logger, sliced into tuples.
/// Logger `j` draws from the seed `derive_seed(seed, j)`.
pub fn generate_offline_data(
    mdp: &TabularMdp,
    loggers: &[Policy],
    episodes_per_policy: usize,
    seed: u64,
) -> Result<OfflineDataset> {
    let mut transitions = Vec::with_capacity(loggers.len() * episodes_per_policy * mdp.horizon());
    for (j, logger) in loggers.iter().enumerate() {
        logger.check_dims(mdp)?;
        let logger_seed = derive_seed(seed, j as u64);
        for i in 0..episodes_per_policy as u64 {
            let traj = sample_episode_with(mdp, logger, &mut episode_rng(logger_seed, i));
            transitions.extend(traj.steps.iter().map(|step| {
                Transition {
                    t: step.t,
                    s: step.state,
                    a: step.action,
                    r: step.reward,
                    s_next: step
                        .next_state
                        .expect("sampled episodes record every successor"),
                }
            }));
        }
    }
    OfflineDataset::new(
        mdp.num_states(),
        mdp.num_actions(),
        mdp.horizon(),
        transitions,
        format!(
            "{} logger(s) x {episodes_per_policy} episodes, seed {seed}",
            loggers.len()
        ),
    )
}

/// Fitted tables for one target policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FqeTables {
    pub q_est: StateActionTable,
    pub q_hat_est: StateActionTable,
    /// Weighted variance of the fitted next-state value within each cell.
    pub nu_est: StateActionTable,
    pub visit_counts: Vec<u64>,
    /// Unvisited `(t, s, a)` where the target has positive probability.
    pub coverage_gaps: Vec<(usize, usize, usize)>,
}

impl FqeTables {
    pub fn visits(&self, t: usize, s: usize, a: usize) -> u64 {
        let (_, ns, na) = self.q_est.dims();
        self.visit_counts[(t * ns + s) * na + a]
    }
}

impl ActionValues for FqeTables {
    fn q(&self) -> &StateActionTable {
        &self.q_est
    }

    fn nu(&self) -> &StateActionTable {
        &self.nu_est
    }

    fn q_hat(&self) -> &StateActionTable {
        &self.q_hat_est
    }
}

/// Output of the first fitting pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FqeQ {
    pub q_est: StateActionTable,
    pub nu_est: StateActionTable,
    pub visit_counts: Vec<u64>,
    pub coverage_gaps: Vec<(usize, usize, usize)>,
}

/// Backward pass `q_t(s,a) = avg[r + Σ_{a'} π_{t+1}(a'|s') q_{t+1}(s',a')]`
/// over the tuples at `(t,s,a)` (terminal: average `r`). Unvisited cells get
/// 0 and, where the target acts, a gap record.
pub fn fqe_q(dataset: &OfflineDataset, target: &Policy) -> Result<FqeQ> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    dataset.check_policy(target)?;
    let (horizon, ns, na) = (dataset.horizon, dataset.num_states, dataset.num_actions);
    let cells = dataset.cells();
    let mut q = StateActionTable::zeros(horizon, ns, na);
    let mut nu = StateActionTable::zeros(horizon, ns, na);
    let mut gaps = Vec::new();
    let mut next_value = vec![0.0; ns];
    for t in (0..horizon).rev() {
        let terminal = t + 1 == horizon;
        if !terminal {
            for (s, value) in next_value.iter_mut().enumerate() {
                *value = crate::dp::dot(target.action_probs(t + 1, s), q.row(t + 1, s));
            }
        }
        for s in 0..ns {
            for a in 0..na {
                let members = &cells[(t * ns + s) * na + a];
                let total: f64 = members.iter().map(|&i| dataset.weight(i)).sum();
                if total <= 0.0 {
                    if target.prob(t, s, a) > 0.0 {
                        gaps.push((t, s, a));
                    }
                    continue;
                }
                let avg = |f: &dyn Fn(&Transition) -> f64| {
                    members
                        .iter()
                        .map(|&i| dataset.weight(i) * f(&dataset.transitions[i]))
                        .sum::<f64>()
                        / total
                };
                if terminal {
                    q.set(t, s, a, avg(&|tr| tr.r));
                } else {
                    let mean_next = avg(&|tr| next_value[tr.s_next]);
                    q.set(t, s, a, avg(&|tr| tr.r) + mean_next);
                    nu.set(
                        t,
                        s,
                        a,
                        avg(&|tr| (next_value[tr.s_next] - mean_next).powi(2)),
                    );
                }
            }
        }
    }
    let visit_counts = cells.iter().map(|c| c.len() as u64).collect();
    Ok(FqeQ {
        q_est: q,
        nu_est: nu,
        visit_counts,
        coverage_gaps: gaps,
    })
}

/// Second pass on the transformed rewards `r̂ = 2 r q_t(s,a) − r²` with the
/// same backward averaging, clamped at 0 at the end.
pub fn fqe_q_hat(
    dataset: &OfflineDataset,
    target: &Policy,
    q_est: &StateActionTable,
) -> Result<StateActionTable> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    dataset.check_policy(target)?;
    let (horizon, ns, na) = (dataset.horizon, dataset.num_states, dataset.num_actions);
    if q_est.dims() != (horizon, ns, na) {
        return Err(Error::DimensionMismatch {
            what: "q_est entries",
            expected: horizon * ns * na,
            found: q_est.as_slice().len(),
        });
    }
    let cells = dataset.cells();
    let mut q_hat = StateActionTable::zeros(horizon, ns, na);
    let mut next_value = vec![0.0; ns];
    for t in (0..horizon).rev() {
        let terminal = t + 1 == horizon;
        if !terminal {
            for (s, value) in next_value.iter_mut().enumerate() {
                *value = crate::dp::dot(target.action_probs(t + 1, s), q_hat.row(t + 1, s));
            }
        }
        for s in 0..ns {
            for a in 0..na {
                let members = &cells[(t * ns + s) * na + a];
                let total: f64 = members.iter().map(|&i| dataset.weight(i)).sum();
                if total <= 0.0 {
                    continue;
                }
                let q = q_est.get(t, s, a);
                let sum: f64 = members
                    .iter()
                    .map(|&i| {
                        let tr = &dataset.transitions[i];
                        let r_hat = 2.0 * tr.r * q - tr.r * tr.r;
                        let next = if terminal { 0.0 } else { next_value[tr.s_next] };
                        dataset.weight(i) * (r_hat + next)
                    })
                    .sum();
                q_hat.set(t, s, a, sum / total);
            }
        }
    }
    let scale = q_est.max_abs().powi(2).max(1.0);
    let most_negative = q_hat.as_slice().iter().copied().fold(0.0, f64::min);
    if most_negative < -1e-9 * scale {
        log::warn!("fitted q_hat reached {most_negative:.3e} before clamping at 0");
    }
    Ok(q_hat.map(|x| x.max(0.0)))
}

/// Both passes for one target.
pub fn fit_target(dataset: &OfflineDataset, target: &Policy) -> Result<FqeTables> {
    let first = fqe_q(dataset, target)?;
    let q_hat_est = fqe_q_hat(dataset, target, &first.q_est)?;
    Ok(FqeTables {
        q_est: first.q_est,
        q_hat_est,
        nu_est: first.nu_est,
        visit_counts: first.visit_counts,
        coverage_gaps: first.coverage_gaps,
    })
}

/// Offline data to tailored behavior: fit `q` and `q̂` for every target, then
/// `μ̂_t(a|s) ∝ √(Σ_k π_k² q̂_k)` on the fitted tables. Coverage gaps are
/// logged as warnings and returned with the tables.
pub fn fit_tailored_behavior(
    dataset: &OfflineDataset,
    targets: &PolicySet,
) -> Result<(BehaviorPolicy, Vec<FqeTables>)> {
    let tables = targets
        .iter()
        .map(|pi| fit_target(dataset, pi))
        .collect::<Result<Vec<_>>>()?;
    for (k, table) in tables.iter().enumerate() {
        if let Some(&(t, s, a)) = table.coverage_gaps.first() {
            log::warn!(
                "offline data never visits {} cell(s) where target {k} acts, first (t={t}, s={s}, a={a})",
                table.coverage_gaps.len()
            );
        }
    }
    let behavior = mu_hat_rl(targets, &tables)?;
    Ok((behavior, tables))
}
