//! Exact backward dynamic programming for every value-like quantity used by
//! behavior synthesis: `q`, `v`, `ν` (next-state value variance), `r̂`, `q̂`,
//! the performance `J`, and the conditional variance of the per-decision
//! importance sampling (PDIS) return under any covering behavior policy.
//!
//! `q̂` is computed from its Bellman form
//! `q̂_t(s,a) = r̂_t(s,a) + Σ_{s',a'} p(s'|s,a) π_{t+1}(a'|s') q̂_{t+1}(s',a')`
//! with `r̂ = 2 r q − r²`, and cross-checked against its defining form
//! `q² + ν + Σ_{s'} p(s'|s,a) Var_π(G | S_{t+1} = s')`, where the on-policy
//! variance comes from the PDIS variance recursion with behavior = target.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{Policy, TabularMdp};
use crate::tables::{StateActionTable, StateTable};

/// Agreement required between the Bellman and defining forms of `q̂`.
pub const Q_HAT_IDENTITY_TOL: f64 = 1e-9;

/// Negative variances no larger than this (relative to the squared value
/// scale) are treated as rounding and clamped to zero.
pub const VARIANCE_CLAMP_TOL: f64 = 1e-12;

/// Threshold below which `π·q̂` counts as zero in coverage checks.
pub const ZERO_TOL: f64 = 1e-12;

/// Deliberate formula faults, used to confirm the verification suites catch
/// transcription errors. [`ExactDp::default`] has none.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FormulaFault {
    #[default]
    None,
    /// `r̂ = 2 r q + r²`
    FlipRHatSign,
    /// `ν ≡ 0`
    DropNu,
}

/// Read access to the per-policy tables behavior synthesis needs. Implemented
/// by exact [`ValueTables`] and by fitted estimates.
pub trait ActionValues {
    fn q(&self) -> &StateActionTable;
    fn nu(&self) -> &StateActionTable;
    fn q_hat(&self) -> &StateActionTable;
}

/// All exact per-policy tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTables {
    pub q: StateActionTable,
    pub v: StateTable,
    pub nu: StateActionTable,
    pub q_hat: StateActionTable,
    pub r_hat: StateActionTable,
    /// `J(π) = Σ_s p0(s) v_0(s)`
    pub performance: f64,
}

impl ActionValues for ValueTables {
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

/// The DP routines. `ExactDp::default()` is the correct implementation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExactDp {
    fault: FormulaFault,
}

impl ExactDp {
    pub fn with_fault(fault: FormulaFault) -> Self {
        Self { fault }
    }

    pub fn fault(&self) -> FormulaFault {
        self.fault
    }

    /// Backward recursion `q_t(s,a) = r(s,a) + Σ_{s'} p(s'|s,a) v_{t+1}(s')`,
    /// `v_t(s) = Σ_a π_t(a|s) q_t(s,a)`, and `J = Σ_s p0(s) v_0(s)`.
    pub fn q_v(
        &self,
        mdp: &TabularMdp,
        policy: &Policy,
    ) -> Result<(StateActionTable, StateTable, f64)> {
        policy.check_dims(mdp)?;
        let (horizon, ns, na) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
        let mut q = StateActionTable::zeros(horizon, ns, na);
        let mut v = StateTable::zeros(horizon, ns);
        for t in (0..horizon).rev() {
            for s in 0..ns {
                let mut value = 0.0;
                for a in 0..na {
                    let mut qa = mdp.reward(s, a);
                    if t + 1 < horizon {
                        qa += dot(mdp.next_state_probs(s, a), v.at(t + 1));
                    }
                    q.set(t, s, a, qa);
                    value += policy.prob(t, s, a) * qa;
                }
                v.set(t, s, value);
            }
        }
        let performance = dot(mdp.initial_dist(), v.at(0));
        Ok((q, v, performance))
    }

    /// `ν_t(s,a) = Var_{S' ~ p(·|s,a)}[v_{t+1}(S')]`, zero at `t = T−1`.
    pub fn nu(&self, mdp: &TabularMdp, v: &StateTable) -> StateActionTable {
        let (horizon, ns, na) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
        let mut nu = StateActionTable::zeros(horizon, ns, na);
        if self.fault == FormulaFault::DropNu {
            return nu;
        }
        for t in 0..horizon.saturating_sub(1) {
            let next = v.at(t + 1);
            for s in 0..ns {
                for a in 0..na {
                    let probs = mdp.next_state_probs(s, a);
                    let mean = dot(probs, next);
                    let var = probs
                        .iter()
                        .zip(next)
                        .map(|(p, x)| p * (x - mean) * (x - mean))
                        .sum();
                    nu.set(t, s, a, var);
                }
            }
        }
        nu
    }

    /// `r̂_t(s,a) = 2 r(s,a) q_t(s,a) − r(s,a)²`.
    pub fn r_hat(&self, mdp: &TabularMdp, q: &StateActionTable) -> StateActionTable {
        let (horizon, ns, na) = q.dims();
        let sign = match self.fault {
            FormulaFault::FlipRHatSign => 1.0,
            _ => -1.0,
        };
        StateActionTable::from_fn(horizon, ns, na, |t, s, a| {
            let r = mdp.reward(s, a);
            2.0 * r * q.get(t, s, a) + sign * r * r
        })
    }

    /// `q̂` by its Bellman recursion.
    pub fn q_hat(
        &self,
        mdp: &TabularMdp,
        policy: &Policy,
        r_hat: &StateActionTable,
    ) -> StateActionTable {
        let (horizon, ns, na) = r_hat.dims();
        let mut q_hat = StateActionTable::zeros(horizon, ns, na);
        let mut next_value = vec![0.0; ns];
        for t in (0..horizon).rev() {
            for s in 0..ns {
                for a in 0..na {
                    let mut x = r_hat.get(t, s, a);
                    if t + 1 < horizon {
                        x += dot(mdp.next_state_probs(s, a), &next_value);
                    }
                    q_hat.set(t, s, a, x);
                }
            }
            for (s, slot) in next_value.iter_mut().enumerate() {
                *slot = dot(policy.action_probs(t, s), q_hat.row(t, s));
            }
        }
        q_hat
    }

    /// `q̂` by its defining form, given the on-policy conditional variance.
    pub fn q_hat_by_definition(
        &self,
        mdp: &TabularMdp,
        q: &StateActionTable,
        nu: &StateActionTable,
        onpolicy_var: &StateTable,
    ) -> StateActionTable {
        let (horizon, ns, na) = q.dims();
        StateActionTable::from_fn(horizon, ns, na, |t, s, a| {
            let mut x = q.get(t, s, a).powi(2) + nu.get(t, s, a);
            if t + 1 < horizon {
                x += dot(mdp.next_state_probs(s, a), onpolicy_var.at(t + 1));
            }
            x
        })
    }

    /// Every table for `policy`, with the `q̂` identity verified.
    pub fn value_tables(&self, mdp: &TabularMdp, policy: &Policy) -> Result<ValueTables> {
        let (q, v, performance) = self.q_v(mdp, policy)?;
        let nu = self.nu(mdp, &v);
        let r_hat = self.r_hat(mdp, &q);
        let q_hat = self.q_hat(mdp, policy, &r_hat);
        let onpolicy = self.variance_recursion(mdp, policy, policy, &q, &v, &nu)?;
        let definition = self.q_hat_by_definition(mdp, &q, &nu, &onpolicy);
        check_identity(&q_hat, &definition)?;
        Ok(ValueTables {
            q,
            v,
            nu,
            q_hat,
            r_hat,
            performance,
        })
    }

    /// Exact `Var(G^PDIS | S_t = s)` for all `(t, s)` when trajectories follow
    /// `behavior` and are reweighted toward `target`.
    ///
    /// Requires `behavior` to cover `target` wherever `π·q̂ > 0`; sums run only
    /// over actions the behavior can take.
    pub fn pdis_variance(
        &self,
        mdp: &TabularMdp,
        target: &Policy,
        behavior: &Policy,
    ) -> Result<StateTable> {
        behavior.check_dims(mdp)?;
        let (q, v, _) = self.q_v(mdp, target)?;
        let nu = self.nu(mdp, &v);
        let q_hat = self.q_hat(mdp, target, &self.r_hat(mdp, &q));
        for t in 0..mdp.horizon() {
            for s in 0..mdp.num_states() {
                for a in 0..mdp.num_actions() {
                    if behavior.prob(t, s, a) <= 0.0
                        && target.prob(t, s, a) * q_hat.get(t, s, a) > ZERO_TOL
                    {
                        return Err(Error::CoverageViolation {
                            k: 0,
                            t,
                            state: s,
                            action: a,
                        });
                    }
                }
            }
        }
        self.variance_recursion(mdp, target, behavior, &q, &v, &nu)
    }

    /// The backward variance recursion
    /// `V_t(s) = Σ_{a: μ>0} (π²/μ)(ν + Σ_{s'} p V_{t+1}(s')) + Var_μ(ρ q)`,
    /// where the last term is evaluated as `Σ_{a: μ>0} μ (π q / μ − v)²`.
    fn variance_recursion(
        &self,
        mdp: &TabularMdp,
        target: &Policy,
        behavior: &Policy,
        q: &StateActionTable,
        v: &StateTable,
        nu: &StateActionTable,
    ) -> Result<StateTable> {
        let (horizon, ns, na) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
        let mut var = StateTable::zeros(horizon, ns);
        for t in (0..horizon).rev() {
            for s in 0..ns {
                let value = v.get(t, s);
                let mut total = 0.0;
                for a in 0..na {
                    let mu = behavior.prob(t, s, a);
                    if mu <= 0.0 {
                        continue;
                    }
                    let pi = target.prob(t, s, a);
                    let mut spread = nu.get(t, s, a);
                    if t + 1 < horizon {
                        spread += dot(mdp.next_state_probs(s, a), var.at(t + 1));
                    }
                    let centered = pi * q.get(t, s, a) / mu - value;
                    total += pi * pi / mu * spread + mu * centered * centered;
                }
                var.set(t, s, clamp_variance(total, value * value, t, s)?);
            }
        }
        Ok(var)
    }

    /// On-policy conditional variance in closed form:
    /// `Var_π(G | S_t = s) = Σ_a π_t(a|s) q̂_t(s,a) − v_t(s)²`.
    pub fn onpolicy_variance(&self, policy: &Policy, tables: &ValueTables) -> Result<StateTable> {
        let (horizon, ns, _) = tables.q_hat.dims();
        let mut var = StateTable::zeros(horizon, ns);
        for t in 0..horizon {
            for s in 0..ns {
                let second = dot(policy.action_probs(t, s), tables.q_hat.row(t, s));
                let value = tables.v.get(t, s);
                var.set(t, s, clamp_variance(second - value * value, second, t, s)?);
            }
        }
        Ok(var)
    }
}

/// Law of total variance over the initial state:
/// `Var(G) = Σ_s p0(s) Var(G | S_0 = s) + Var_{p0}(v_0(S_0))`.
pub fn total_variance(mdp: &TabularMdp, conditional: &StateTable, v: &StateTable) -> f64 {
    let p0 = mdp.initial_dist();
    let values = v.at(0);
    let mean = dot(p0, values);
    let between: f64 = p0
        .iter()
        .zip(values)
        .map(|(p, x)| p * (x - mean) * (x - mean))
        .sum();
    dot(p0, conditional.at(0)) + between
}

pub fn compute_q_v(
    mdp: &TabularMdp,
    policy: &Policy,
) -> Result<(StateActionTable, StateTable, f64)> {
    ExactDp::default().q_v(mdp, policy)
}

pub fn compute_nu(mdp: &TabularMdp, v: &StateTable) -> StateActionTable {
    ExactDp::default().nu(mdp, v)
}

pub fn compute_r_hat(mdp: &TabularMdp, q: &StateActionTable) -> StateActionTable {
    ExactDp::default().r_hat(mdp, q)
}

pub fn compute_q_hat(
    mdp: &TabularMdp,
    policy: &Policy,
    r_hat: &StateActionTable,
) -> StateActionTable {
    ExactDp::default().q_hat(mdp, policy, r_hat)
}

pub fn compute_pdis_variance(
    mdp: &TabularMdp,
    target: &Policy,
    behavior: &Policy,
) -> Result<StateTable> {
    ExactDp::default().pdis_variance(mdp, target, behavior)
}

pub fn compute_onpolicy_variance(policy: &Policy, tables: &ValueTables) -> Result<StateTable> {
    ExactDp::default().onpolicy_variance(policy, tables)
}

pub fn value_tables(mdp: &TabularMdp, policy: &Policy) -> Result<ValueTables> {
    ExactDp::default().value_tables(mdp, policy)
}

fn check_identity(bellman: &StateActionTable, definition: &StateActionTable) -> Result<()> {
    let (horizon, ns, na) = bellman.dims();
    for t in 0..horizon {
        for s in 0..ns {
            for a in 0..na {
                let (x, y) = (bellman.get(t, s, a), definition.get(t, s, a));
                if (x - y).abs() > Q_HAT_IDENTITY_TOL * y.abs().max(1.0) {
                    return Err(Error::QHatIdentity {
                        t,
                        state: s,
                        action: a,
                        bellman: x,
                        definition: y,
                    });
                }
            }
        }
    }
    Ok(())
}

fn clamp_variance(value: f64, scale: f64, t: usize, s: usize) -> Result<f64> {
    if value >= 0.0 {
        return Ok(value);
    }
    if value >= -VARIANCE_CLAMP_TOL * scale.abs().max(1.0) {
        if value < -f64::EPSILON * scale.abs().max(1.0) {
            log::warn!("clamping variance {value:e} at (t={t}, s={s}) to zero");
        }
        return Ok(0.0);
    }
    Err(Error::NegativeVariance { t, state: s, value })
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(horizon: usize) -> TabularMdp {
        // three states in a deterministic cycle, one action, unit reward
        TabularMdp::new(
            3,
            1,
            horizon,
            vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0],
            vec![1.0; 3],
            vec![1.0, 0.0, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn single_step_q_is_reward() {
        let mdp = TabularMdp::new(
            2,
            2,
            1,
            vec![0.5; 8],
            vec![1.0, -2.0, 0.5, 3.0],
            vec![0.5, 0.5],
        )
        .unwrap();
        let (q, _, _) = compute_q_v(&mdp, &Policy::uniform(1, 2, 2)).unwrap();
        for s in 0..2 {
            for a in 0..2 {
                assert_eq!(q.get(0, s, a), mdp.reward(s, a));
            }
        }
    }

    #[test]
    fn unit_reward_chain_performance_is_horizon() {
        let (_, _, j) = compute_q_v(&chain(4), &Policy::uniform(4, 3, 1)).unwrap();
        assert_eq!(j, 4.0);
    }

    #[test]
    fn deterministic_dynamics_have_zero_nu_and_squared_q_hat() {
        let mdp = chain(4);
        let tables = value_tables(&mdp, &Policy::uniform(4, 3, 1)).unwrap();
        assert!(tables.nu.as_slice().iter().all(|&x| x == 0.0));
        assert!(tables.q_hat.max_abs_diff(&tables.q.map(|x| x * x)) < 1e-12);
    }

    #[test]
    fn even_split_between_values_zero_and_two_gives_unit_nu() {
        // state 0 action 0 goes to state 1 or 2 evenly; v_1 = 0 at state 1, 2 at state 2
        let mdp = TabularMdp::new(
            3,
            1,
            2,
            vec![0.0, 0.5, 0.5, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            vec![0.0, 0.0, 2.0],
            vec![1.0, 0.0, 0.0],
        )
        .unwrap();
        let (_, v, _) = compute_q_v(&mdp, &Policy::uniform(2, 3, 1)).unwrap();
        assert_eq!(compute_nu(&mdp, &v).get(0, 0, 0), 1.0);
    }

    #[test]
    fn r_hat_arithmetic() {
        let mdp = TabularMdp::new(1, 2, 1, vec![1.0, 1.0], vec![3.0, 0.0], vec![1.0]).unwrap();
        let q = StateActionTable::from_fn(1, 1, 2, |_, _, a| if a == 0 { 3.0 } else { 7.0 });
        let r_hat = compute_r_hat(&mdp, &q);
        assert_eq!(r_hat.get(0, 0, 0), 9.0);
        assert_eq!(r_hat.get(0, 0, 1), 0.0);

        let mdp = TabularMdp::new(1, 1, 1, vec![1.0], vec![2.0], vec![1.0]).unwrap();
        let q = StateActionTable::filled(1, 1, 1, 5.0);
        assert_eq!(compute_r_hat(&mdp, &q).get(0, 0, 0), 16.0);
    }

    #[test]
    fn bandit_variance_closed_form() {
        let mdp = TabularMdp::new(1, 3, 1, vec![1.0; 3], vec![1.0, -2.0, 4.0], vec![1.0]).unwrap();
        let pi = [0.2, 0.5, 0.3];
        let mu = [0.5, 0.25, 0.25];
        let target = Policy::stationary(1, 1, &pi).unwrap();
        let behavior = Policy::stationary(1, 1, &mu).unwrap();
        let q = [1.0, -2.0, 4.0];
        let second: f64 = (0..3).map(|a| pi[a] * pi[a] * q[a] * q[a] / mu[a]).sum();
        let mean: f64 = (0..3).map(|a| pi[a] * q[a]).sum();
        let var = compute_pdis_variance(&mdp, &target, &behavior).unwrap();
        assert!((var.get(0, 0) - (second - mean * mean)).abs() < 1e-12);
    }

    #[test]
    fn onpolicy_forms_agree() {
        let mdp = TabularMdp::new(
            2,
            2,
            3,
            vec![0.3, 0.7, 0.9, 0.1, 0.5, 0.5, 0.2, 0.8],
            vec![1.0, 0.0, -0.5, 2.0],
            vec![0.4, 0.6],
        )
        .unwrap();
        let policy = Policy::stationary(3, 2, &[0.35, 0.65]).unwrap();
        let tables = value_tables(&mdp, &policy).unwrap();
        let closed = compute_onpolicy_variance(&policy, &tables).unwrap();
        let recursive = compute_pdis_variance(&mdp, &policy, &policy).unwrap();
        assert!(closed.max_abs_diff(&recursive) < 1e-12);
    }

    #[test]
    fn uncovered_behavior_rejected() {
        let mdp = TabularMdp::new(1, 2, 1, vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0]).unwrap();
        let target = Policy::stationary(1, 1, &[0.5, 0.5]).unwrap();
        let behavior = Policy::stationary(1, 1, &[1.0, 0.0]).unwrap();
        assert!(matches!(
            compute_pdis_variance(&mdp, &target, &behavior),
            Err(Error::CoverageViolation { action: 1, .. })
        ));
    }

    #[test]
    fn zero_q_hat_actions_may_be_dropped() {
        // action 1 has zero reward and no future: π q̂ = 0 there
        let mdp = TabularMdp::new(1, 2, 1, vec![1.0, 1.0], vec![1.0, 0.0], vec![1.0]).unwrap();
        let target = Policy::stationary(1, 1, &[0.5, 0.5]).unwrap();
        let behavior = Policy::stationary(1, 1, &[1.0, 0.0]).unwrap();
        let var = compute_pdis_variance(&mdp, &target, &behavior).unwrap();
        assert_eq!(var.get(0, 0), 0.0);
    }

    #[test]
    fn faults_break_the_identity() {
        let mdp = TabularMdp::new(
            2,
            2,
            3,
            vec![0.3, 0.7, 0.9, 0.1, 0.5, 0.5, 0.2, 0.8],
            vec![1.0, 0.0, -0.5, 2.0],
            vec![0.4, 0.6],
        )
        .unwrap();
        let policy = Policy::stationary(3, 2, &[0.35, 0.65]).unwrap();
        for fault in [FormulaFault::FlipRHatSign, FormulaFault::DropNu] {
            let err = ExactDp::with_fault(fault).value_tables(&mdp, &policy);
            assert!(matches!(err, Err(Error::QHatIdentity { .. })), "{fault:?}");
        }
    }
}
