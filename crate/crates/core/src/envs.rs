//! Instance generators: the slippery gridworld family, hand-built micro MDPs
//! small enough to enumerate, random MDPs and policies for property tests,
//! and target-policy families with a similarity knob.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{Policy, PolicySet, TabularMdp};
use crate::tables::StateActionTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartDistribution {
    Uniform,
    /// All initial mass on one cell, given as `row * m + col`.
    Cell(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridworldSpec {
    pub m: usize,
    #[serde(default = "default_slip")]
    pub slip: f64,
    #[serde(default)]
    pub reward_seed: u64,
    #[serde(default = "default_start")]
    pub start: StartDistribution,
}

fn default_slip() -> f64 {
    0.9
}

fn default_start() -> StartDistribution {
    StartDistribution::Uniform
}

impl GridworldSpec {
    pub fn new(m: usize) -> Self {
        Self {
            m,
            slip: default_slip(),
            reward_seed: 0,
            start: default_start(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::InvalidArgument(format!(
                "gridworld side must be at least 2, got {}",
                self.m
            )));
        }
        if !(0.0..=1.0).contains(&self.slip) {
            return Err(Error::InvalidArgument(format!(
                "slip must lie in [0, 1], got {}",
                self.slip
            )));
        }
        if let StartDistribution::Cell(c) = self.start {
            if c >= self.m * self.m {
                return Err(Error::InvalidArgument(format!(
                    "start cell {c} outside the {0}x{0} grid",
                    self.m
                )));
            }
        }
        Ok(())
    }
}

pub const GRID_ACTIONS: [&str; 4] = ["up", "down", "left", "right"];

fn grid_move(m: usize, cell: usize, direction: usize) -> usize {
    let (row, col) = (cell / m, cell % m);
    let (row, col) = match direction {
        0 if row > 0 => (row - 1, col),
        1 if row + 1 < m => (row + 1, col),
        2 if col > 0 => (row, col - 1),
        3 if col + 1 < m => (row, col + 1),
        _ => (row, col),
    };
    row * m + col
}

/// `m × m` cells, four moves, horizon `m`. The intended move happens with
/// probability `slip`; otherwise one of the four moves (the intended one
/// included) is taken uniformly. Moves into a wall leave the agent in place.
/// Rewards are i.i.d. Uniform[0, 1) per (cell, action).
pub fn build_gridworld(spec: &GridworldSpec) -> Result<TabularMdp> {
    spec.validate()?;
    let m = spec.m;
    let ns = m * m;
    let mut transition = vec![0.0; ns * 4 * ns];
    for s in 0..ns {
        for a in 0..4 {
            let row = &mut transition[(s * 4 + a) * ns..(s * 4 + a + 1) * ns];
            row[grid_move(m, s, a)] += spec.slip;
            for d in 0..4 {
                row[grid_move(m, s, d)] += (1.0 - spec.slip) / 4.0;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.reward_seed);
    let reward = (0..ns * 4).map(|_| rng.gen::<f64>()).collect();
    let initial = match spec.start {
        StartDistribution::Uniform => vec![1.0 / ns as f64; ns],
        StartDistribution::Cell(c) => {
            let mut p = vec![0.0; ns];
            p[c] = 1.0;
            p
        }
    };
    TabularMdp::new(ns, 4, m, transition, reward, initial)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasePolicy {
    /// Softmax of i.i.d. Gaussian logits per `(t, s)`.
    RandomSoftmax,
    /// Deterministic greedy policy on the optimal action values.
    GreedyOnQ,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySetSpec {
    pub k: usize,
    #[serde(default = "default_base")]
    pub base: BasePolicy,
    /// Weight of each policy's own random perturbation: 0 gives `k` copies of
    /// the base, 1 gives `k` independent random policies.
    pub epsilon: f64,
    /// Standard deviation of the Gaussian softmax logits.
    #[serde(default = "default_logit_scale")]
    pub logit_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_base() -> BasePolicy {
    BasePolicy::RandomSoftmax
}

fn default_logit_scale() -> f64 {
    1.0
}

impl PolicySetSpec {
    pub fn new(k: usize, epsilon: f64, seed: u64) -> Self {
        Self {
            k,
            base: default_base(),
            epsilon,
            logit_scale: default_logit_scale(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument(
                "policy set needs at least one policy".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must lie in [0, 1], got {}",
                self.epsilon
            )));
        }
        if !(self.logit_scale.is_finite() && self.logit_scale >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "invalid logit scale {}",
                self.logit_scale
            )));
        }
        Ok(())
    }
}

fn softmax_table<R: Rng>(mdp: &TabularMdp, scale: f64, rng: &mut R) -> StateActionTable {
    let (horizon, ns, na) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    let mut table = StateActionTable::zeros(horizon, ns, na);
    for t in 0..horizon {
        for s in 0..ns {
            let row = table.row_mut(t, s);
            for x in row.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *x = scale * z;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for x in row.iter_mut() {
                *x = (*x - max).exp();
            }
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= total);
        }
    }
    table
}

/// Optimal action values by backward induction with a max over actions.
pub fn optimal_q(mdp: &TabularMdp) -> StateActionTable {
    let (horizon, ns, na) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    let mut q = StateActionTable::zeros(horizon, ns, na);
    let mut next_v = vec![0.0; ns];
    for t in (0..horizon).rev() {
        for s in 0..ns {
            for a in 0..na {
                let future: f64 = if t + 1 < horizon {
                    crate::dp::dot(mdp.next_state_probs(s, a), &next_v)
                } else {
                    0.0
                };
                q.set(t, s, a, mdp.reward(s, a) + future);
            }
        }
        for (s, v) in next_v.iter_mut().enumerate() {
            *v = q
                .row(t, s)
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
        }
    }
    q
}

/// `k` policies, each `(1 − ε)·base + ε·(own random softmax)`.
pub fn build_policy_set(mdp: &TabularMdp, spec: &PolicySetSpec) -> Result<PolicySet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let base = match spec.base {
        BasePolicy::RandomSoftmax => softmax_table(mdp, spec.logit_scale, &mut rng),
        BasePolicy::GreedyOnQ => {
            let q = optimal_q(mdp);
            let (horizon, ns, na) = q.dims();
            StateActionTable::from_fn(horizon, ns, na, |t, s, a| {
                let row = q.row(t, s);
                let best = (0..na).fold(0, |b, i| if row[i] > row[b] { i } else { b });
                if a == best {
                    1.0
                } else {
                    0.0
                }
            })
        }
    };
    let policies = (0..spec.k)
        .map(|_| {
            let noise = softmax_table(mdp, spec.logit_scale, &mut rng);
            let (horizon, ns, na) = base.dims();
            let mut mixed = StateActionTable::from_fn(horizon, ns, na, |t, s, a| {
                (1.0 - spec.epsilon) * base.get(t, s, a) + spec.epsilon * noise.get(t, s, a)
            });
            for t in 0..horizon {
                for s in 0..ns {
                    let row = mixed.row_mut(t, s);
                    let total: f64 = row.iter().sum();
                    row.iter_mut().for_each(|x| *x /= total);
                }
            }
            Policy::new(mixed)
        })
        .collect::<Result<Vec<_>>>()?;
    PolicySet::new(policies)
}

/// Dense random MDP: Dirichlet(1) transition rows and initial distribution,
/// rewards Uniform[−1, 1).
pub fn random_mdp<R: Rng>(
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<TabularMdp> {
    let transition: Vec<f64> = (0..num_states * num_actions)
        .flat_map(|_| dirichlet_row(num_states, rng))
        .collect();
    let reward = (0..num_states * num_actions)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let initial = dirichlet_row(num_states, rng);
    TabularMdp::new(
        num_states,
        num_actions,
        horizon,
        transition,
        reward,
        initial,
    )
}

/// Random policy with Dirichlet(1) rows. Each action is independently
/// zeroed with probability `zero_fraction`, keeping at least one positive
/// action per row.
pub fn random_policy<R: Rng>(
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    zero_fraction: f64,
    rng: &mut R,
) -> Result<Policy> {
    Policy::from_rows(horizon, num_states, num_actions, |_, _| {
        let mut row = dirichlet_row(num_actions, rng);
        let keep = rng.gen_range(0..num_actions);
        for (a, x) in row.iter_mut().enumerate() {
            if a != keep && rng.gen_bool(zero_fraction) {
                *x = 0.0;
            }
        }
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= total);
        row
    })
}

fn dirichlet_row<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let mut row = Dirichlet::new_with_size(1.0, n)
        .expect("Dirichlet with unit concentration")
        .sample(rng);
    let total: f64 = row.iter().sum();
    row.iter_mut().for_each(|x| *x /= total);
    row
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub name: &'static str,
    pub mdp: TabularMdp,
    pub targets: PolicySet,
}

fn fixture(name: &'static str, mdp: TabularMdp, rows: &[&[f64]]) -> Fixture {
    let policies = rows
        .iter()
        .map(|row| {
            Policy::stationary(mdp.horizon(), mdp.num_states(), row).expect("fixture policy")
        })
        .collect();
    Fixture {
        name,
        targets: PolicySet::new(policies).expect("fixture policy set"),
        mdp,
    }
}

/// Small hand-built instances, each enumerable well within the default cap.
pub fn build_micro_suite() -> Vec<Fixture> {
    let mdp = |ns, na, horizon, transition: Vec<f64>, reward: Vec<f64>, initial: Vec<f64>| {
        TabularMdp::new(ns, na, horizon, transition, reward, initial).expect("fixture MDP")
    };
    // Both actions advance 0 -> 1 -> 2 -> 0 and pay 1.
    let chain = mdp(
        3,
        2,
        4,
        vec![
            0., 1., 0., 0., 1., 0., 0., 0., 1., 0., 0., 1., 1., 0., 0., 1., 0., 0.,
        ],
        vec![1.0; 6],
        vec![1.0, 0.0, 0.0],
    );
    let two_state = mdp(
        2,
        2,
        4,
        vec![0.3, 0.7, 0.9, 0.1, 0.5, 0.5, 0.2, 0.8],
        vec![1.0, 0.2, 0.4, 2.0],
        vec![0.4, 0.6],
    );
    let disjoint = mdp(
        2,
        2,
        3,
        vec![0.6, 0.4, 0.1, 0.9, 0.7, 0.3, 0.25, 0.75],
        vec![0.5, 1.5, 2.0, 0.3],
        vec![0.5, 0.5],
    );
    let identical = mdp(
        3,
        2,
        3,
        vec![
            0.2, 0.5, 0.3, 0.6, 0.2, 0.2, 0.1, 0.1, 0.8, 0.3, 0.3, 0.4, 0.5, 0.0, 0.5, 0.0, 0.9,
            0.1,
        ],
        vec![0.7, 1.2, 0.1, 0.9, 1.6, 0.4],
        vec![0.2, 0.3, 0.5],
    );
    let zero_reward = two_state.with_rewards(|_, _, _| 0.0).expect("fixture MDP");
    // State 2 absorbs with zero reward; one action there is taken with tiny
    // probability, so its behavior probability is tiny as well.
    let near_singular = mdp(
        3,
        2,
        4,
        vec![
            0.5, 0.3, 0.2, 0.1, 0.1, 0.8, 0.4, 0.4, 0.2, 0.0, 0.5, 0.5, 0., 0., 1., 0., 0., 1.,
        ],
        vec![1.0, 0.5, 2.0, 0.1, 0.0, 0.0],
        vec![0.7, 0.3, 0.0],
    );
    let three_action = mdp(
        2,
        3,
        3,
        vec![0.5, 0.5, 0.9, 0.1, 0.2, 0.8, 0.3, 0.7, 1.0, 0.0, 0.6, 0.4],
        vec![1.0, -0.5, 0.3, -1.2, 0.8, 0.0],
        vec![0.5, 0.5],
    );
    vec![
        fixture("deterministic-chain", chain, &[&[0.3, 0.7], &[0.9, 0.1]]),
        fixture(
            "two-state-stochastic",
            two_state,
            &[&[0.3, 0.7], &[0.6, 0.4], &[0.5, 0.5]],
        ),
        fixture("disjoint-support", disjoint, &[&[1.0, 0.0], &[0.0, 1.0]]),
        fixture(
            "identical-policies",
            identical,
            &[&[0.35, 0.65], &[0.35, 0.65], &[0.35, 0.65]],
        ),
        fixture("zero-reward", zero_reward, &[&[0.2, 0.8], &[0.7, 0.3]]),
        fixture(
            "near-singular-coverage",
            near_singular,
            &[&[1.0 - 1e-6, 1e-6], &[0.999, 0.001]],
        ),
        fixture(
            "three-action-mixed",
            three_action,
            &[&[0.2, 0.3, 0.5], &[0.6, 0.0, 0.4], &[0.1, 0.8, 0.1]],
        ),
    ]
}

pub fn micro_fixture(name: &str) -> Option<Fixture> {
    build_micro_suite().into_iter().find(|f| f.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp::value_tables;
    use crate::enumerate::enumerate_trajectories;

    #[test]
    fn gridworld_dimensions_and_rows() {
        for m in [2, 3, 5, 10] {
            let mdp = build_gridworld(&GridworldSpec::new(m)).unwrap();
            assert_eq!(
                (mdp.num_states(), mdp.num_actions(), mdp.horizon()),
                (m * m, 4, m)
            );
            for s in 0..m * m {
                for a in 0..4 {
                    let sum: f64 = mdp.next_state_probs(s, a).iter().sum();
                    assert!((sum - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn walls_keep_the_agent_in_place() {
        let spec = GridworldSpec {
            slip: 1.0,
            ..GridworldSpec::new(3)
        };
        let mdp = build_gridworld(&spec).unwrap();
        assert_eq!(mdp.transition(0, 0, 0), 1.0);
        assert_eq!(mdp.transition(0, 2, 0), 1.0);
        assert_eq!(mdp.transition(0, 3, 1), 1.0);
    }

    #[test]
    fn intended_move_gets_slip_plus_a_quarter_of_the_rest() {
        let mdp = build_gridworld(&GridworldSpec::new(4)).unwrap();
        let center = 5;
        for a in 0..4 {
            let target = grid_move(4, center, a);
            assert!(mdp.transition(center, a, target) >= 0.9 + 0.025 - 1e-12);
        }
    }

    #[test]
    fn generators_are_deterministic() {
        let spec = GridworldSpec {
            reward_seed: 7,
            ..GridworldSpec::new(3)
        };
        assert_eq!(
            build_gridworld(&spec).unwrap(),
            build_gridworld(&spec).unwrap()
        );
        let mdp = build_gridworld(&spec).unwrap();
        let ps = PolicySetSpec::new(4, 0.3, 9);
        assert_eq!(
            build_policy_set(&mdp, &ps).unwrap(),
            build_policy_set(&mdp, &ps).unwrap()
        );
    }

    #[test]
    fn epsilon_zero_gives_copies() {
        let mdp = build_gridworld(&GridworldSpec::new(3)).unwrap();
        for base in [BasePolicy::RandomSoftmax, BasePolicy::GreedyOnQ] {
            let spec = PolicySetSpec {
                base,
                ..PolicySetSpec::new(5, 0.0, 3)
            };
            let set = build_policy_set(&mdp, &spec).unwrap();
            assert!(set.iter().all(|p| p == set.get(0)));
        }
        let set = build_policy_set(&mdp, &PolicySetSpec::new(2, 1.0, 3)).unwrap();
        assert_ne!(set.get(0), set.get(1));
    }

    #[test]
    fn micro_suite_is_enumerable() {
        let suite = build_micro_suite();
        assert!(suite.len() >= 6);
        for f in &suite {
            let uniform = Policy::uniform(f.mdp.horizon(), f.mdp.num_states(), f.mdp.num_actions());
            assert!(
                enumerate_trajectories(&f.mdp, &uniform).is_ok(),
                "{}",
                f.name
            );
        }
    }

    #[test]
    fn chain_value_is_horizon_times_reward() {
        let f = micro_fixture("deterministic-chain").unwrap();
        for pi in f.targets.iter() {
            assert!((value_tables(&f.mdp, pi).unwrap().performance - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn random_helpers_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let mdp = random_mdp(3, 2, 3, &mut rng).unwrap();
            let pi = random_policy(3, 3, 2, 0.3, &mut rng).unwrap();
            pi.check_dims(&mdp).unwrap();
        }
    }
}
