//! Tailored behavior policies for evaluating several target policies at once.
//!
//! In the single-step (bandit) case the variance-minimizing sampling
//! distribution is `μ*(a) ∝ √(Σ_k π_k(a)² q(a)²)`. In the multi-step case the
//! per-step optimum is `μ̂_t(a|s) ∝ √(Σ_k π_k,t(a|s)² q̂_k,t(s,a))`. Rows where
//! every weight vanishes fall back to the uniform distribution.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dp::{dot, ActionValues, ZERO_TOL};
use crate::error::{Error, Result};
use crate::mdp::{Policy, PolicySet};
use crate::tables::StateActionTable;

/// A single-step problem: `K` distributions over actions and a payoff `q(a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditInstance {
    pub targets: Vec<Vec<f64>>,
    pub payoff: Vec<f64>,
}

impl BanditInstance {
    pub fn new(targets: Vec<Vec<f64>>, payoff: Vec<f64>) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::InvalidArgument("no target distributions".into()));
        }
        for (k, pi) in targets.iter().enumerate() {
            if pi.len() != payoff.len() {
                return Err(Error::DimensionMismatch {
                    what: "target distribution",
                    expected: payoff.len(),
                    found: pi.len(),
                });
            }
            let sum: f64 = pi.iter().sum();
            if pi.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > crate::mdp::PROB_TOL {
                return Err(Error::InvalidPolicy(format!(
                    "target {k} is not a distribution"
                )));
            }
        }
        Ok(Self { targets, payoff })
    }

    pub fn num_actions(&self) -> usize {
        self.payoff.len()
    }

    /// `E_{π_k}[q]`
    pub fn mean(&self, k: usize) -> f64 {
        dot(&self.targets[k], &self.payoff)
    }

    /// `Var_{A~μ}(ρ_k(A) q(A))`, summing over `{a : μ(a) > 0}`. Infinite when
    /// `μ` misses an action with `π_k q ≠ 0`.
    pub fn offpolicy_variance(&self, k: usize, mu: &[f64]) -> f64 {
        let pi = &self.targets[k];
        let mut second = 0.0;
        let mut mean = 0.0;
        for a in 0..self.num_actions() {
            let weighted = pi[a] * self.payoff[a];
            if mu[a] <= 0.0 {
                if weighted.abs() > ZERO_TOL {
                    return f64::INFINITY;
                }
                continue;
            }
            second += weighted * weighted / mu[a];
            mean += weighted;
        }
        second - mean * mean
    }

    /// `Var_{A~π_k}(q(A))`
    pub fn onpolicy_variance(&self, k: usize) -> f64 {
        let mean = self.mean(k);
        self.targets[k]
            .iter()
            .zip(&self.payoff)
            .map(|(p, q)| p * (q - mean) * (q - mean))
            .sum()
    }

    /// `Σ_k Var_μ(ρ_k q)`, the quantity `μ*` minimizes.
    pub fn objective(&self, mu: &[f64]) -> f64 {
        (0..self.targets.len())
            .map(|k| self.offpolicy_variance(k, mu))
            .sum()
    }
}

/// Normalizes `√w` into a distribution, or returns uniform when all `w` are zero.
pub fn proportional_to_sqrt(weights: &[f64]) -> Vec<f64> {
    let roots: Vec<f64> = weights.iter().map(|w| w.max(0.0).sqrt()).collect();
    let total: f64 = roots.iter().sum();
    if total > 0.0 {
        roots.iter().map(|r| r / total).collect()
    } else {
        vec![1.0 / weights.len() as f64; weights.len()]
    }
}

/// `μ*(a) ∝ √(Σ_k π_k(a)² q(a)²)`.
pub fn mu_star_bandit(instance: &BanditInstance) -> Vec<f64> {
    let weights: Vec<f64> = (0..instance.num_actions())
        .map(|a| {
            let q2 = instance.payoff[a] * instance.payoff[a];
            instance.targets.iter().map(|pi| pi[a] * pi[a] * q2).sum()
        })
        .collect();
    proportional_to_sqrt(&weights)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    StatisticsMuStar,
    RlMuHat,
    Custom,
}

/// A behavior policy tagged with how it was built.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorPolicy {
    pub policy: Policy,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct BehaviorJson {
    probs: StateActionTable,
    provenance: Provenance,
}

impl BehaviorPolicy {
    pub fn custom(policy: Policy) -> Self {
        Self {
            policy,
            provenance: Provenance::Custom,
        }
    }

    /// Policy JSON plus a `"provenance"` field.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&BehaviorJson {
            probs: self.policy.table().clone(),
            provenance: self.provenance,
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BehaviorJson = serde_json::from_str(text)?;
        Ok(Self {
            policy: Policy::new(raw.probs)?,
            provenance: raw.provenance,
        })
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// `μ̂_t(a|s) ∝ √(Σ_k π_k,t(a|s)² q̂_k,t(s,a))` with the uniform fallback.
pub fn mu_hat_rl<V: ActionValues>(targets: &PolicySet, values: &[V]) -> Result<BehaviorPolicy> {
    check_value_count(targets, values)?;
    let first = targets.get(0);
    let (horizon, ns, na) = (first.horizon(), first.num_states(), first.num_actions());
    for v in values {
        let q_hat = v.q_hat();
        if q_hat.dims() != (horizon, ns, na) {
            return Err(Error::DimensionMismatch {
                what: "q_hat table entries",
                expected: horizon * ns * na,
                found: q_hat.as_slice().len(),
            });
        }
        if let Some(i) = q_hat.as_slice().iter().position(|&x| x < 0.0 || x.is_nan()) {
            let (t, rest) = (i / (ns * na), i % (ns * na));
            return Err(Error::NegativeQHat {
                t,
                state: rest / na,
                action: rest % na,
                value: q_hat.as_slice()[i],
            });
        }
    }
    let mut weights = vec![0.0; na];
    let policy = Policy::from_rows(horizon, ns, na, |t, s| {
        for (a, w) in weights.iter_mut().enumerate() {
            *w = targets
                .iter()
                .zip(values)
                .map(|(pi, v)| {
                    let p = pi.prob(t, s, a);
                    p * p * v.q_hat().get(t, s, a)
                })
                .sum();
        }
        let mut row = proportional_to_sqrt(&weights);
        renormalize(&mut row);
        row
    })?;
    Ok(BehaviorPolicy {
        policy,
        provenance: Provenance::RlMuHat,
    })
}

/// The per-step objective μ̂ minimizes at `(t, s)`:
/// `Σ_k Σ_{a: μ>0} π_k² q̂_k / μ`, or infinity if `μ` leaves out an action
/// with `π_k q̂_k > 0`. The exact per-step variance sum differs from this by
/// terms that do not depend on `μ`.
pub fn step_objective<V: ActionValues>(
    targets: &PolicySet,
    values: &[V],
    t: usize,
    s: usize,
    mu: &[f64],
) -> f64 {
    let mut total = 0.0;
    for (pi, v) in targets.iter().zip(values) {
        for (a, &m) in mu.iter().enumerate() {
            let w = pi.prob(t, s, a).powi(2) * v.q_hat().get(t, s, a);
            if m <= 0.0 {
                if w > ZERO_TOL {
                    return f64::INFINITY;
                }
                continue;
            }
            total += w / m;
        }
    }
    total
}

/// Support predicates at one `(t, s, a)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageCell {
    /// `μ = 0 ⇒ π_k = 0` for all `k`
    pub in_lambda_minus: bool,
    /// `μ = 0 ⇒ π_k q_k = 0` for all `k`
    pub in_lambda: bool,
    /// `μ = 0 ⇒ π_k q̂_k = 0` for all `k`
    pub in_lambda_hat: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub horizon: usize,
    pub num_states: usize,
    pub num_actions: usize,
    /// Row-major over `(t, s, a)`.
    pub cells: Vec<CoverageCell>,
    pub in_lambda_minus: bool,
    pub in_lambda: bool,
    pub in_lambda_hat: bool,
}

impl CoverageReport {
    pub fn cell(&self, t: usize, s: usize, a: usize) -> CoverageCell {
        self.cells[(t * self.num_states + s) * self.num_actions + a]
    }

    /// First `(t, s, a)` outside the `Λ̂` support condition.
    pub fn first_hat_violation(&self) -> Option<(usize, usize, usize)> {
        let i = self.cells.iter().position(|c| !c.in_lambda_hat)?;
        let per_t = self.num_states * self.num_actions;
        Some((
            i / per_t,
            (i % per_t) / self.num_actions,
            i % self.num_actions,
        ))
    }
}

/// Evaluates the three support conditions at every `(t, s, a)`; "zero" means
/// an absolute value at most `1e-12`.
pub fn coverage_check<V: ActionValues>(
    behavior: &Policy,
    targets: &PolicySet,
    values: &[V],
) -> Result<CoverageReport> {
    check_value_count(targets, values)?;
    let (horizon, ns, na) = behavior.table().dims();
    if targets.get(0).table().dims() != (horizon, ns, na) {
        return Err(Error::InvalidArgument(
            "behavior and target policies have different shapes".into(),
        ));
    }
    let mut cells = Vec::with_capacity(horizon * ns * na);
    for t in 0..horizon {
        for s in 0..ns {
            for a in 0..na {
                let mut cell = CoverageCell {
                    in_lambda_minus: true,
                    in_lambda: true,
                    in_lambda_hat: true,
                };
                if behavior.prob(t, s, a).abs() <= ZERO_TOL {
                    for (pi, v) in targets.iter().zip(values) {
                        let p = pi.prob(t, s, a);
                        cell.in_lambda_minus &= p.abs() <= ZERO_TOL;
                        cell.in_lambda &= (p * v.q().get(t, s, a)).abs() <= ZERO_TOL;
                        cell.in_lambda_hat &= (p * v.q_hat().get(t, s, a)).abs() <= ZERO_TOL;
                    }
                }
                cells.push(cell);
            }
        }
    }
    Ok(CoverageReport {
        horizon,
        num_states: ns,
        num_actions: na,
        in_lambda_minus: cells.iter().all(|c| c.in_lambda_minus),
        in_lambda: cells.iter().all(|c| c.in_lambda),
        in_lambda_hat: cells.iter().all(|c| c.in_lambda_hat),
        cells,
    })
}

fn check_value_count<V>(targets: &PolicySet, values: &[V]) -> Result<()> {
    if values.len() != targets.len() {
        return Err(Error::DimensionMismatch {
            what: "value tables per target",
            expected: targets.len(),
            found: values.len(),
        });
    }
    Ok(())
}

/// Pushes any rounding residue into the largest entry so rows sum to 1 within 1e-12.
fn renormalize(row: &mut [f64]) {
    let total: f64 = row.iter().sum();
    let residue = 1.0 - total;
    if residue != 0.0 {
        if let Some(max) = row
            .iter_mut()
            .max_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal))
        {
            *max += residue;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp::value_tables;
    use crate::mdp::TabularMdp;

    #[test]
    fn mu_star_single_target() {
        let instance = BanditInstance::new(vec![vec![0.5, 0.5]], vec![1.0, 2.0]).unwrap();
        let mu = mu_star_bandit(&instance);
        assert!((mu[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((mu[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn mu_star_grid_search_agrees() {
        let instance = BanditInstance::new(vec![vec![0.5, 0.5]], vec![1.0, 2.0]).unwrap();
        let best = (1..1000)
            .map(|i| {
                let x = i as f64 * 1e-3;
                (x, instance.objective(&[x, 1.0 - x]))
            })
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        assert!((best.0 - 0.333).abs() < 1.5e-3, "{best:?}");
        let mu = mu_star_bandit(&instance);
        assert!(instance.objective(&mu) <= best.1 + 1e-12);
    }

    #[test]
    fn mu_star_zero_payoff_is_uniform() {
        let instance = BanditInstance::new(vec![vec![0.2, 0.3, 0.5]], vec![0.0; 3]).unwrap();
        assert_eq!(mu_star_bandit(&instance), vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn mu_star_disjoint_targets_symmetric() {
        let instance =
            BanditInstance::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![2.0, 2.0]).unwrap();
        assert_eq!(mu_star_bandit(&instance), vec![0.5, 0.5]);
    }

    fn two_by_two() -> TabularMdp {
        TabularMdp::new(
            2,
            2,
            2,
            vec![0.3, 0.7, 0.9, 0.1, 0.5, 0.5, 0.2, 0.8],
            vec![1.0, 0.2, 0.4, 2.0],
            vec![0.4, 0.6],
        )
        .unwrap()
    }

    #[test]
    fn deterministic_target_keeps_its_support() {
        let mdp = TabularMdp::new(
            2,
            2,
            3,
            vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0],
            vec![1.0, 2.0, 3.0, 4.0],
            vec![1.0, 0.0],
        )
        .unwrap();
        let pi = Policy::stationary(3, 2, &[0.0, 1.0]).unwrap();
        let targets = PolicySet::new(vec![pi.clone()]).unwrap();
        let tables = vec![value_tables(&mdp, &pi).unwrap()];
        let mu = mu_hat_rl(&targets, &tables).unwrap();
        assert_eq!(mu.policy, pi);
    }

    #[test]
    fn identical_targets_collapse_to_single_policy_form() {
        let mdp = two_by_two();
        let pi = Policy::stationary(2, 2, &[0.3, 0.7]).unwrap();
        let tables = value_tables(&mdp, &pi).unwrap();
        let single = mu_hat_rl(
            &PolicySet::new(vec![pi.clone()]).unwrap(),
            std::slice::from_ref(&tables),
        )
        .unwrap();
        let triple = mu_hat_rl(
            &PolicySet::new(vec![pi.clone(), pi.clone(), pi.clone()]).unwrap(),
            &[tables.clone(), tables.clone(), tables.clone()],
        )
        .unwrap();
        for t in 0..2 {
            for s in 0..2 {
                let weights: Vec<f64> = (0..2)
                    .map(|a| pi.prob(t, s, a).powi(2) * tables.q_hat.get(t, s, a))
                    .collect();
                let expected = proportional_to_sqrt(&weights);
                for a in 0..2 {
                    assert!((single.policy.prob(t, s, a) - expected[a]).abs() < 1e-12);
                    assert!((triple.policy.prob(t, s, a) - expected[a]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn negative_q_hat_rejected() {
        let mdp = two_by_two();
        let pi = Policy::uniform(2, 2, 2);
        let mut tables = value_tables(&mdp, &pi).unwrap();
        tables.q_hat.set(1, 0, 1, -0.5);
        let err = mu_hat_rl(&PolicySet::new(vec![pi]).unwrap(), &[tables]).unwrap_err();
        assert!(matches!(
            err,
            Error::NegativeQHat {
                t: 1,
                state: 0,
                action: 1,
                ..
            }
        ));
    }

    #[test]
    fn uniform_behavior_is_in_lambda_minus() {
        let mdp = two_by_two();
        let pi = Policy::stationary(2, 2, &[0.0, 1.0]).unwrap();
        let tables = vec![value_tables(&mdp, &pi).unwrap()];
        let report = coverage_check(
            &Policy::uniform(2, 2, 2),
            &PolicySet::new(vec![pi]).unwrap(),
            &tables,
        )
        .unwrap();
        assert!(report.in_lambda_minus && report.in_lambda && report.in_lambda_hat);
    }

    #[test]
    fn missing_an_action_with_positive_weight_leaves_lambda_hat() {
        let mdp = two_by_two();
        let pi = Policy::uniform(2, 2, 2);
        let tables = vec![value_tables(&mdp, &pi).unwrap()];
        let mu = Policy::stationary(2, 2, &[1.0, 0.0]).unwrap();
        let report = coverage_check(&mu, &PolicySet::new(vec![pi]).unwrap(), &tables).unwrap();
        assert!(!report.in_lambda_hat);
        assert_eq!(report.first_hat_violation(), Some((0, 0, 1)));
    }

    #[test]
    fn behavior_json_carries_provenance() {
        let behavior = BehaviorPolicy {
            policy: Policy::uniform(1, 1, 2),
            provenance: Provenance::RlMuHat,
        };
        let json = behavior.to_json().unwrap();
        assert!(json.contains("\"provenance\": \"rl_mu_hat\""));
        assert_eq!(BehaviorPolicy::from_json(&json).unwrap(), behavior);
    }
}
