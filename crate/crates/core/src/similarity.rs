//! Policy similarity `η` and the sufficient conditions under which the
//! tailored behavior policy beats on-policy Monte Carlo for every target.
//!
//! With `w_k = π_k² q̂_k` (multi-step) or `w_k = (π_k q)²` (single-step),
//! `w̄ = Σ_j w_j / K` and `η_k = w_k / w̄`. The tailored policy's second moment
//! for target `k` is bounded by `√(η̄/η̲) (Σ_a √w_k(a))²`; each condition
//! compares that bound with the on-policy second moment. Cells where `w̄ = 0`
//! have no defined `η` and are left out of the extrema.

use serde::{Deserialize, Serialize};

use crate::behavior::BanditInstance;
use crate::dp::{dot, ActionValues};
use crate::error::{Error, Result};
use crate::mdp::{Policy, PolicySet, TabularMdp};

/// Slack for floating comparisons in the condition checks, relative to the
/// right-hand side.
pub const CONDITION_TOL: f64 = 1e-12;

/// Similarity and sufficient conditions for a single-step instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditSimilarity {
    /// `η_k(a)`, `None` where `w̄(a) = 0`.
    pub eta: Vec<Vec<Option<f64>>>,
    pub eta_min: f64,
    pub eta_max: f64,
    /// `Δ_k = Σ_a π_k q² − (Σ_a π_k q)²`
    pub delta: Vec<f64>,
    /// Same-total-samples condition, per target.
    pub same_budget_wins: Vec<bool>,
    /// `n`-versus-`nK` condition, per target.
    pub variance_reduced: Vec<bool>,
}

/// `split[k]` is the number of on-policy samples for target `k`; the tailored
/// policy gets their sum.
pub fn similarity_report_bandit(
    instance: &BanditInstance,
    split: &[usize],
) -> Result<BanditSimilarity> {
    let k_count = instance.targets.len();
    check_split(split, k_count)?;
    let n: usize = split.iter().sum();
    let na = instance.num_actions();
    let w: Vec<Vec<f64>> = instance
        .targets
        .iter()
        .map(|pi| {
            (0..na)
                .map(|a| (pi[a] * instance.payoff[a]).powi(2))
                .collect()
        })
        .collect();
    let eta: Vec<Vec<Option<f64>>> = (0..k_count)
        .map(|k| {
            (0..na)
                .map(|a| {
                    let mean = w.iter().map(|wk| wk[a]).sum::<f64>() / k_count as f64;
                    (mean > 0.0).then(|| w[k][a] / mean)
                })
                .collect()
        })
        .collect();
    let (eta_min, eta_max) = extrema(eta.iter().flatten().flatten().copied());

    let mut delta = Vec::with_capacity(k_count);
    let mut same_budget = Vec::with_capacity(k_count);
    let mut reduced = Vec::with_capacity(k_count);
    for (k, pi) in instance.targets.iter().enumerate() {
        let second: f64 = (0..na).map(|a| pi[a] * instance.payoff[a].powi(2)).sum();
        let mean = instance.mean(k);
        let abs_mean: f64 = (0..na).map(|a| pi[a] * instance.payoff[a].abs()).sum();
        let bound = scaled_bound(eta_min, eta_max, abs_mean * abs_mean);
        let d = second - mean * mean;
        delta.push(d);
        let slack = CONDITION_TOL * second.abs().max(1.0);
        reduced.push(bound <= second + slack);
        let factor = n as f64 / split[k] as f64 - 1.0;
        same_budget.push(bound - factor * d <= second + slack);
    }
    Ok(BanditSimilarity {
        eta,
        eta_min,
        eta_max,
        delta,
        same_budget_wins: same_budget,
        variance_reduced: reduced,
    })
}

/// Similarity and sufficient conditions for a multi-step problem.
///
/// Per-target arrays are flattened row-major over `(k, t, s)` (and `a` for `eta`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub num_targets: usize,
    pub horizon: usize,
    pub num_states: usize,
    pub num_actions: usize,
    /// `η_k,t(s,a)`, `None` where `w̄_t(s,a) = 0`.
    pub eta: Vec<Option<f64>>,
    /// `η̲_t`, minimum over `(k, s, a)`.
    pub eta_min: Vec<f64>,
    /// `η̄_t`, maximum over `(k, s, a)`.
    pub eta_max: Vec<f64>,
    /// `Δ_k,t(s) = E_μ[ρ² ν] + Var_μ(ρ q)`
    pub delta: Vec<f64>,
    /// Same-total-samples condition at `(k, t, s)`.
    pub same_budget_wins: Vec<bool>,
    /// `n`-versus-`nK` condition at `(k, t, s)`.
    pub variance_reduced: Vec<bool>,
    /// `variance_reduced` holds at `(k, t, s)` and at every later `(k, t', s')`
    /// reachable from it under the target with the behavior's support. This is
    /// what the variance-reduction guarantee at `(k, t, s)` actually needs.
    pub variance_reduced_downstream: Vec<bool>,
}

impl SimilarityReport {
    #[inline]
    pub fn index(&self, k: usize, t: usize, s: usize) -> usize {
        (k * self.horizon + t) * self.num_states + s
    }

    pub fn eta_at(&self, k: usize, t: usize, s: usize, a: usize) -> Option<f64> {
        self.eta[self.index(k, t, s) * self.num_actions + a]
    }

    pub fn variance_reduced_everywhere(&self) -> bool {
        self.variance_reduced.iter().all(|&c| c)
    }
}

/// `behavior` should be the tailored policy built from the same `values`;
/// `Δ` is taken under it.
pub fn similarity_report_rl<V: ActionValues>(
    mdp: &TabularMdp,
    targets: &PolicySet,
    values: &[V],
    behavior: &Policy,
    split: &[usize],
) -> Result<SimilarityReport> {
    let k_count = targets.len();
    check_split(split, k_count)?;
    if values.len() != k_count {
        return Err(Error::DimensionMismatch {
            what: "value tables per target",
            expected: k_count,
            found: values.len(),
        });
    }
    targets.check_dims(mdp)?;
    behavior.check_dims(mdp)?;
    let n: usize = split.iter().sum();
    let (horizon, ns, na) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());

    let weight = |k: usize, t: usize, s: usize, a: usize| {
        targets.get(k).prob(t, s, a).powi(2) * values[k].q_hat().get(t, s, a)
    };
    let mut eta = vec![None; k_count * horizon * ns * na];
    let mut eta_min = vec![1.0; horizon];
    let mut eta_max = vec![1.0; horizon];
    for t in 0..horizon {
        let mut defined = Vec::new();
        for s in 0..ns {
            for a in 0..na {
                let mean = (0..k_count).map(|k| weight(k, t, s, a)).sum::<f64>() / k_count as f64;
                if mean <= 0.0 {
                    continue;
                }
                for k in 0..k_count {
                    let e = weight(k, t, s, a) / mean;
                    eta[((k * horizon + t) * ns + s) * na + a] = Some(e);
                    defined.push(e);
                }
            }
        }
        (eta_min[t], eta_max[t]) = extrema(defined.into_iter());
    }

    let cells = k_count * horizon * ns;
    let mut delta = vec![0.0; cells];
    let mut same_budget = vec![false; cells];
    let mut reduced = vec![false; cells];
    for (k, pi) in targets.iter().enumerate() {
        let v = &values[k];
        let share = split[k] as f64 / n as f64;
        for t in 0..horizon {
            for s in 0..ns {
                let probs = pi.action_probs(t, s);
                let q_hat = v.q_hat().row(t, s);
                let rhs = dot(probs, q_hat);
                let root_mean: f64 = probs
                    .iter()
                    .zip(q_hat)
                    .map(|(p, x)| p * x.max(0.0).sqrt())
                    .sum();
                let bound = scaled_bound(eta_min[t], eta_max[t], root_mean * root_mean);
                let d = delta_under(behavior, pi, v, t, s);
                let i = (k * horizon + t) * ns + s;
                let slack = CONDITION_TOL * rhs.abs().max(1.0);
                delta[i] = d;
                reduced[i] = bound <= rhs + slack;
                same_budget[i] = bound - (1.0 - share) * d <= rhs + slack;
            }
        }
    }

    let mut guarantee = reduced.clone();
    for k in 0..k_count {
        let pi = targets.get(k);
        for t in (0..horizon.saturating_sub(1)).rev() {
            for s in 0..ns {
                let i = (k * horizon + t) * ns + s;
                if !guarantee[i] {
                    continue;
                }
                let successors_ok = (0..na)
                    .filter(|&a| pi.prob(t, s, a) > 0.0 && behavior.prob(t, s, a) > 0.0)
                    .all(|a| {
                        mdp.next_state_probs(s, a)
                            .iter()
                            .enumerate()
                            .filter(|(_, &p)| p > 0.0)
                            .all(|(sn, _)| guarantee[(k * horizon + t + 1) * ns + sn])
                    });
                guarantee[i] = successors_ok;
            }
        }
    }

    Ok(SimilarityReport {
        num_targets: k_count,
        horizon,
        num_states: ns,
        num_actions: na,
        eta,
        eta_min,
        eta_max,
        delta,
        same_budget_wins: same_budget,
        variance_reduced: reduced,
        variance_reduced_downstream: guarantee,
    })
}

/// `E_μ[ρ² ν] + Var_μ(ρ q)` at `(t, s)`, over actions `μ` can take.
fn delta_under<V: ActionValues>(behavior: &Policy, pi: &Policy, v: &V, t: usize, s: usize) -> f64 {
    let mut weighted_nu = 0.0;
    let mut second = 0.0;
    let mut mean = 0.0;
    for a in 0..pi.num_actions() {
        let mu = behavior.prob(t, s, a);
        if mu <= 0.0 {
            continue;
        }
        let p = pi.prob(t, s, a);
        let q = v.q().get(t, s, a);
        weighted_nu += p * p / mu * v.nu().get(t, s, a);
        second += p * p * q * q / mu;
        mean += p * q;
    }
    weighted_nu + (second - mean * mean).max(0.0)
}

/// `√(η̄/η̲) · x`, treating `0 · ∞` as `0` (no weight means no bound to pay).
fn scaled_bound(eta_min: f64, eta_max: f64, x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    if eta_min <= 0.0 {
        return f64::INFINITY;
    }
    (eta_max / eta_min).sqrt() * x
}

fn extrema(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
        (lo.min(x), hi.max(x))
    });
    if lo.is_finite() {
        (lo, hi)
    } else {
        (1.0, 1.0)
    }
}

fn check_split(split: &[usize], k_count: usize) -> Result<()> {
    if split.len() != k_count {
        return Err(Error::DimensionMismatch {
            what: "sample split",
            expected: k_count,
            found: split.len(),
        });
    }
    if split.contains(&0) {
        return Err(Error::InvalidArgument("every n_k must be positive".into()));
    }
    Ok(())
}

/// `n_k = n / K`, with the remainder spread over the first targets.
pub fn even_split(n: usize, k_count: usize) -> Vec<usize> {
    (0..k_count)
        .map(|k| n / k_count + usize::from(k < n % k_count))
        .collect()
}
