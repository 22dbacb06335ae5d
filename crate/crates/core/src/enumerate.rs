//! Exhaustive trajectory enumeration, used as the exactness oracle for
//! expectations and variances.
//!
//! Only positive-probability branches are expanded. The terminal successor
//! state is marginalized out, so a full enumeration has at most `(|S|·|A|)^T`
//! entries.

use crate::error::{Error, Result};
use crate::mdp::{Policy, Step, TabularMdp, Trajectory};

pub const DEFAULT_ENUMERATION_CAP: usize = 1_000_000;

/// Every positive-probability trajectory under `behavior`, with its probability.
pub fn enumerate_trajectories(
    mdp: &TabularMdp,
    behavior: &Policy,
) -> Result<Vec<(Trajectory, f64)>> {
    enumerate_with_cap(mdp, behavior, DEFAULT_ENUMERATION_CAP)
}

pub fn enumerate_with_cap(
    mdp: &TabularMdp,
    behavior: &Policy,
    cap: usize,
) -> Result<Vec<(Trajectory, f64)>> {
    behavior.check_dims(mdp)?;
    check_cap(mdp, 0, cap)?;
    let mut out = Vec::new();
    for (s, &p0) in mdp.initial_dist().iter().enumerate() {
        if p0 > 0.0 {
            expand(mdp, behavior, 0, s, p0, &mut Vec::new(), &mut out);
        }
    }
    Ok(out)
}

/// Every positive-probability segment from `S_t = state` to the horizon,
/// with its conditional probability.
pub fn enumerate_from(
    mdp: &TabularMdp,
    behavior: &Policy,
    t: usize,
    state: usize,
    cap: usize,
) -> Result<Vec<(Trajectory, f64)>> {
    behavior.check_dims(mdp)?;
    if t >= mdp.horizon() || state >= mdp.num_states() {
        return Err(Error::InvalidArgument(format!(
            "start (t={t}, s={state}) outside the MDP"
        )));
    }
    check_cap(mdp, t, cap)?;
    let mut out = Vec::new();
    expand(mdp, behavior, t, state, 1.0, &mut Vec::new(), &mut out);
    Ok(out)
}

fn check_cap(mdp: &TabularMdp, t: usize, cap: usize) -> Result<()> {
    let branching = (mdp.num_states() * mdp.num_actions()) as f64;
    let bound = branching.powi((mdp.horizon() - t) as i32);
    if bound > cap as f64 {
        Err(Error::EnumerationCap { bound, cap })
    } else {
        Ok(())
    }
}

fn expand(
    mdp: &TabularMdp,
    behavior: &Policy,
    t: usize,
    state: usize,
    prob: f64,
    prefix: &mut Vec<Step>,
    out: &mut Vec<(Trajectory, f64)>,
) {
    let last = t + 1 == mdp.horizon();
    for (action, &pa) in behavior.action_probs(t, state).iter().enumerate() {
        if pa <= 0.0 {
            continue;
        }
        let reward = mdp.reward(state, action);
        if last {
            let mut steps = prefix.clone();
            steps.push(Step {
                t,
                state,
                action,
                reward,
                next_state: None,
            });
            out.push((Trajectory { steps }, prob * pa));
            continue;
        }
        for (next, &p) in mdp.next_state_probs(state, action).iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            prefix.push(Step {
                t,
                state,
                action,
                reward,
                next_state: Some(next),
            });
            expand(mdp, behavior, t + 1, next, prob * pa * p, prefix, out);
            prefix.pop();
        }
    }
}

/// Probability-weighted mean and variance of `f` over an enumeration.
pub fn weighted_moments(
    entries: &[(Trajectory, f64)],
    mut f: impl FnMut(&Trajectory) -> f64,
) -> (f64, f64) {
    let values: Vec<(f64, f64)> = entries.iter().map(|(traj, p)| (f(traj), *p)).collect();
    let mean: f64 = values.iter().map(|(x, p)| x * p).sum();
    let var: f64 = values
        .iter()
        .map(|(x, p)| p * (x - mean) * (x - mean))
        .sum();
    (mean, var)
}

/// Like [`weighted_moments`] but for a fallible statistic.
pub fn try_weighted_moments(
    entries: &[(Trajectory, f64)],
    mut f: impl FnMut(&Trajectory) -> Result<f64>,
) -> Result<(f64, f64)> {
    let values = entries
        .iter()
        .map(|(traj, p)| Ok((f(traj)?, *p)))
        .collect::<Result<Vec<_>>>()?;
    let mean: f64 = values.iter().map(|(x, p)| x * p).sum();
    let var: f64 = values
        .iter()
        .map(|(x, p)| p * (x - mean) * (x - mean))
        .sum();
    Ok((mean, var))
}
