#![allow(dead_code)]

use mpe_core::envs::{random_mdp, random_policy};
use mpe_core::{Policy, PolicySet, TabularMdp};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One path segment: `(state, action, reward)` per step, and its probability.
pub type Path = (Vec<(usize, usize, f64)>, f64);
type Frame = (usize, usize, Vec<(usize, usize, f64)>, f64);

/// Every positive-probability segment from `S_t = state` to the horizon under
/// `behavior`, optionally forcing the first action. Written independently of
/// the library's enumeration.
pub fn paths_from(
    mdp: &TabularMdp,
    behavior: &Policy,
    t: usize,
    state: usize,
    first_action: Option<usize>,
) -> Vec<Path> {
    let mut out = Vec::new();
    let mut stack: Vec<Frame> = vec![(t, state, Vec::new(), 1.0)];
    while let Some((time, s, prefix, prob)) = stack.pop() {
        if time == mdp.horizon() {
            out.push((prefix, prob));
            continue;
        }
        for a in 0..mdp.num_actions() {
            let pa = match first_action {
                Some(forced) if time == t => {
                    if a == forced {
                        1.0
                    } else {
                        0.0
                    }
                }
                _ => behavior.prob(time, s, a),
            };
            if pa == 0.0 {
                continue;
            }
            let mut steps = prefix.clone();
            steps.push((s, a, mdp.reward(s, a)));
            if time + 1 == mdp.horizon() {
                stack.push((time + 1, s, steps, prob * pa));
                continue;
            }
            for next in 0..mdp.num_states() {
                let p = mdp.transition(s, a, next);
                if p > 0.0 {
                    stack.push((time + 1, next, steps.clone(), prob * pa * p));
                }
            }
        }
    }
    out
}

/// Every full trajectory from the initial distribution.
pub fn all_paths(mdp: &TabularMdp, behavior: &Policy) -> Vec<Path> {
    let mut out = Vec::new();
    for (s, &p0) in mdp.initial_dist().iter().enumerate() {
        if p0 > 0.0 {
            out.extend(
                paths_from(mdp, behavior, 0, s, None)
                    .into_iter()
                    .map(|(steps, p)| (steps, p * p0)),
            );
        }
    }
    out
}

/// Product-of-ratios form: `Σ_i (Π_{j ≤ i} π/μ) r_i`, starting at time `t0`.
pub fn pdis_value(
    steps: &[(usize, usize, f64)],
    t0: usize,
    target: &Policy,
    behavior: &Policy,
) -> f64 {
    let mut weight = 1.0;
    let mut total = 0.0;
    for (i, &(s, a, r)) in steps.iter().enumerate() {
        weight *= target.prob(t0 + i, s, a) / behavior.prob(t0 + i, s, a);
        total += weight * r;
    }
    total
}

pub fn plain_return(steps: &[(usize, usize, f64)]) -> f64 {
    steps.iter().map(|x| x.2).sum()
}

pub fn moments(paths: &[Path], f: impl Fn(&[(usize, usize, f64)]) -> f64) -> (f64, f64) {
    let mean: f64 = paths.iter().map(|(steps, p)| p * f(steps)).sum();
    let second: f64 = paths.iter().map(|(steps, p)| p * f(steps).powi(2)).sum();
    (mean, second - mean * mean)
}

pub fn second_moment(paths: &[Path], f: impl Fn(&[(usize, usize, f64)]) -> f64) -> f64 {
    paths.iter().map(|(steps, p)| p * f(steps).powi(2)).sum()
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// Small random instance: 2–3 states, 2–3 actions, horizon 2–4, `k` targets,
/// some policies with zero entries.
pub fn random_instance(seed: u64, k: usize) -> (TabularMdp, PolicySet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ns = 2 + (seed % 2) as usize;
    let na = 2 + (seed / 2 % 2) as usize;
    let horizon = 2 + (seed / 4 % 3) as usize;
    let mdp = random_mdp(ns, na, horizon, &mut rng).unwrap();
    let zero_fraction = if seed.is_multiple_of(3) { 0.3 } else { 0.0 };
    let targets = (0..k)
        .map(|_| random_policy(horizon, ns, na, zero_fraction, &mut rng).unwrap())
        .collect();
    (mdp, PolicySet::new(targets).unwrap())
}
