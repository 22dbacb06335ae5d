//! Finite-horizon tabular MDPs, time-indexed policies and trajectories.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tables::StateActionTable;

/// Tolerance for probability rows in validation.
pub const PROB_TOL: f64 = 1e-12;

/// One violated invariant found by [`TabularMdp::validate`] or [`TabularMdp::new`].
#[derive(Debug, Clone, PartialEq)]
pub enum ValidationIssue {
    ZeroDimension(&'static str),
    Shape {
        field: &'static str,
        expected: usize,
        found: usize,
    },
    NegativeTransition {
        state: usize,
        action: usize,
        next: usize,
        value: f64,
    },
    TransitionRowSum {
        state: usize,
        action: usize,
        sum: f64,
    },
    NegativeInitialMass {
        state: usize,
        value: f64,
    },
    InitialSum(f64),
    NonFiniteReward {
        state: usize,
        action: usize,
    },
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ZeroDimension(field) => write!(f, "{field} must be positive"),
            Self::Shape {
                field,
                expected,
                found,
            } => write!(f, "{field} has {found} entries, expected {expected}"),
            Self::NegativeTransition {
                state,
                action,
                next,
                value,
            } => write!(
                f,
                "negative transition probability {value} at (s={state},a={action},s'={next})"
            ),
            Self::TransitionRowSum { state, action, sum } => {
                write!(f, "row sum {sum} at (s={state},a={action})")
            }
            Self::NegativeInitialMass { state, value } => {
                write!(f, "negative initial mass {value} at s={state}")
            }
            Self::InitialSum(sum) => write!(f, "initial distribution sums to {sum}"),
            Self::NonFiniteReward { state, action } => {
                write!(f, "non-finite reward at (s={state},a={action})")
            }
        }
    }
}

/// A finite-horizon MDP with deterministic rewards `r(s, a)`.
///
/// Transitions are stored densely, row-major over `(s, a, s')`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    initial_dist: Vec<f64>,
}

impl TabularMdp {
    /// Builds a validated MDP from flat row-major arrays.
    pub fn new(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        let mdp = Self {
            num_states,
            num_actions,
            horizon,
            transition,
            reward,
            initial_dist,
        };
        let issues = mdp.validate();
        if issues.is_empty() {
            Ok(mdp)
        } else {
            Err(Error::InvalidMdp(issues))
        }
    }

    /// Builds a validated MDP from nested arrays `transition[s][a][s']`,
    /// `reward[s][a]` and `initial_dist[s]`.
    pub fn from_nested(
        horizon: usize,
        transition: Vec<Vec<Vec<f64>>>,
        reward: Vec<Vec<f64>>,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        MdpJson {
            num_states: initial_dist.len(),
            num_actions: reward.first().map_or(0, Vec::len),
            horizon,
            transition,
            reward,
            initial_dist,
        }
        .try_into()
    }

    /// Every violated invariant, with indices. Empty means the MDP is well formed.
    pub fn validate(&self) -> Vec<ValidationIssue> {
        let mut issues = Vec::new();
        let (ns, na) = (self.num_states, self.num_actions);
        for (field, value) in [
            ("num_states", ns),
            ("num_actions", na),
            ("horizon", self.horizon),
        ] {
            if value == 0 {
                issues.push(ValidationIssue::ZeroDimension(field));
            }
        }
        for (field, expected, found) in [
            ("transition", ns * na * ns, self.transition.len()),
            ("reward", ns * na, self.reward.len()),
            ("initial_dist", ns, self.initial_dist.len()),
        ] {
            if expected != found {
                issues.push(ValidationIssue::Shape {
                    field,
                    expected,
                    found,
                });
            }
        }
        if !issues.is_empty() {
            return issues;
        }

        for s in 0..ns {
            for a in 0..na {
                let row = self.next_state_probs(s, a);
                for (next, &value) in row.iter().enumerate() {
                    if value < 0.0 || !value.is_finite() {
                        issues.push(ValidationIssue::NegativeTransition {
                            state: s,
                            action: a,
                            next,
                            value,
                        });
                    }
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > PROB_TOL {
                    issues.push(ValidationIssue::TransitionRowSum {
                        state: s,
                        action: a,
                        sum,
                    });
                }
                if !self.reward(s, a).is_finite() {
                    issues.push(ValidationIssue::NonFiniteReward {
                        state: s,
                        action: a,
                    });
                }
            }
        }
        for (state, &value) in self.initial_dist.iter().enumerate() {
            if value < 0.0 || !value.is_finite() {
                issues.push(ValidationIssue::NegativeInitialMass { state, value });
            }
        }
        let sum: f64 = self.initial_dist.iter().sum();
        if (sum - 1.0).abs() > PROB_TOL {
            issues.push(ValidationIssue::InitialSum(sum));
        }
        issues
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

    /// `p(s' | s, a)` for all `s'`.
    #[inline]
    pub fn next_state_probs(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.num_actions + a) * self.num_states;
        &self.transition[start..start + self.num_states]
    }

    #[inline]
    pub fn transition(&self, s: usize, a: usize, next: usize) -> f64 {
        self.next_state_probs(s, a)[next]
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.num_actions + a]
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    /// A copy with every reward replaced by `f(s, a, r)`.
    pub fn with_rewards(&self, f: impl Fn(usize, usize, f64) -> f64) -> Result<Self> {
        let reward = (0..self.num_states)
            .flat_map(|s| (0..self.num_actions).map(move |a| (s, a)))
            .map(|(s, a)| f(s, a, self.reward(s, a)))
            .collect();
        Self::new(
            self.num_states,
            self.num_actions,
            self.horizon,
            self.transition.clone(),
            reward,
            self.initial_dist.clone(),
        )
    }

    /// State distribution at each time step when actions follow `policy`.
    pub fn state_marginals(&self, policy: &Policy) -> Vec<Vec<f64>> {
        let mut marginals = Vec::with_capacity(self.horizon);
        let mut current = self.initial_dist.clone();
        for t in 0..self.horizon {
            let mut next = vec![0.0; self.num_states];
            for (s, &mass) in current.iter().enumerate() {
                if mass == 0.0 {
                    continue;
                }
                for (a, &pa) in policy.action_probs(t, s).iter().enumerate() {
                    if pa == 0.0 {
                        continue;
                    }
                    for (sn, &p) in self.next_state_probs(s, a).iter().enumerate() {
                        next[sn] += mass * pa * p;
                    }
                }
            }
            marginals.push(std::mem::replace(&mut current, next));
        }
        marginals
    }

    pub fn to_json(&self) -> MdpJson {
        let ns = self.num_states;
        let na = self.num_actions;
        MdpJson {
            num_states: ns,
            num_actions: na,
            horizon: self.horizon,
            transition: (0..ns)
                .map(|s| {
                    (0..na)
                        .map(|a| self.next_state_probs(s, a).to_vec())
                        .collect()
                })
                .collect(),
            reward: (0..ns)
                .map(|s| (0..na).map(|a| self.reward(s, a)).collect())
                .collect(),
            initial_dist: self.initial_dist.clone(),
        }
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let raw: MdpJson = serde_json::from_str(&text)?;
        raw.try_into()
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_json())?)?;
        Ok(())
    }
}

/// JSON interchange form of a [`TabularMdp`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpJson {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    /// `[s][a][s']`
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `[s][a]`
    pub reward: Vec<Vec<f64>>,
    pub initial_dist: Vec<f64>,
}

impl TryFrom<MdpJson> for TabularMdp {
    type Error = Error;

    fn try_from(raw: MdpJson) -> Result<Self> {
        let (ns, na) = (raw.num_states, raw.num_actions);
        let mut issues = Vec::new();
        if raw.transition.len() != ns {
            issues.push(ValidationIssue::Shape {
                field: "transition",
                expected: ns,
                found: raw.transition.len(),
            });
        }
        if raw.reward.len() != ns {
            issues.push(ValidationIssue::Shape {
                field: "reward",
                expected: ns,
                found: raw.reward.len(),
            });
        }
        for per_state in &raw.transition {
            if per_state.len() != na || per_state.iter().any(|row| row.len() != ns) {
                issues.push(ValidationIssue::Shape {
                    field: "transition row",
                    expected: na * ns,
                    found: per_state.iter().map(Vec::len).sum(),
                });
            }
        }
        for row in &raw.reward {
            if row.len() != na {
                issues.push(ValidationIssue::Shape {
                    field: "reward row",
                    expected: na,
                    found: row.len(),
                });
            }
        }
        if !issues.is_empty() {
            return Err(Error::InvalidMdp(issues));
        }
        TabularMdp::new(
            ns,
            na,
            raw.horizon,
            raw.transition.into_iter().flatten().flatten().collect(),
            raw.reward.into_iter().flatten().collect(),
            raw.initial_dist,
        )
    }
}

/// A time-indexed stochastic policy `π_t(a | s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyJson", into = "PolicyJson")]
pub struct Policy {
    probs: StateActionTable,
}

#[derive(Serialize, Deserialize)]
struct PolicyJson {
    probs: StateActionTable,
}

impl TryFrom<PolicyJson> for Policy {
    type Error = Error;

    fn try_from(raw: PolicyJson) -> Result<Self> {
        Policy::new(raw.probs)
    }
}

impl From<Policy> for PolicyJson {
    fn from(policy: Policy) -> Self {
        Self {
            probs: policy.probs,
        }
    }
}

impl Policy {
    /// Wraps a probability table, checking every `(t, s)` row is a distribution.
    pub fn new(probs: StateActionTable) -> Result<Self> {
        let (horizon, ns, na) = probs.dims();
        if horizon == 0 || ns == 0 || na == 0 {
            return Err(Error::InvalidPolicy("empty probability table".into()));
        }
        for t in 0..horizon {
            for s in 0..ns {
                let row = probs.row(t, s);
                if let Some(a) = row.iter().position(|&p| p < 0.0 || !p.is_finite()) {
                    return Err(Error::InvalidPolicy(format!(
                        "invalid probability {} at (t={t},s={s},a={a})",
                        row[a]
                    )));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > PROB_TOL {
                    return Err(Error::InvalidPolicy(format!(
                        "row sum {sum} at (t={t},s={s})"
                    )));
                }
            }
        }
        Ok(Self { probs })
    }

    /// Builds a policy from `f(t, s) -> row`.
    pub fn from_rows(
        horizon: usize,
        num_states: usize,
        num_actions: usize,
        mut f: impl FnMut(usize, usize) -> Vec<f64>,
    ) -> Result<Self> {
        let mut probs = StateActionTable::zeros(horizon, num_states, num_actions);
        for t in 0..horizon {
            for s in 0..num_states {
                let row = f(t, s);
                if row.len() != num_actions {
                    return Err(Error::DimensionMismatch {
                        what: "policy row",
                        expected: num_actions,
                        found: row.len(),
                    });
                }
                probs.row_mut(t, s).copy_from_slice(&row);
            }
        }
        Self::new(probs)
    }

    pub fn uniform(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        Self {
            probs: StateActionTable::filled(
                horizon,
                num_states,
                num_actions,
                1.0 / num_actions as f64,
            ),
        }
    }

    /// Same action distribution at every `(t, s)`.
    pub fn stationary(horizon: usize, num_states: usize, row: &[f64]) -> Result<Self> {
        Self::from_rows(horizon, num_states, row.len(), |_, _| row.to_vec())
    }

    #[inline]
    pub fn prob(&self, t: usize, s: usize, a: usize) -> f64 {
        self.probs.get(t, s, a)
    }

    #[inline]
    pub fn action_probs(&self, t: usize, s: usize) -> &[f64] {
        self.probs.row(t, s)
    }

    pub fn table(&self) -> &StateActionTable {
        &self.probs
    }

    pub fn horizon(&self) -> usize {
        self.probs.horizon()
    }

    pub fn num_states(&self) -> usize {
        self.probs.num_states()
    }

    pub fn num_actions(&self) -> usize {
        self.probs.num_actions()
    }

    /// Errors unless the policy has the MDP's `(T, |S|, |A|)`.
    pub fn check_dims(&self, mdp: &TabularMdp) -> Result<()> {
        for (what, expected, found) in [
            ("policy horizon", mdp.horizon(), self.horizon()),
            ("policy states", mdp.num_states(), self.num_states()),
            ("policy actions", mdp.num_actions(), self.num_actions()),
        ] {
            if expected != found {
                return Err(Error::DimensionMismatch {
                    what,
                    expected,
                    found,
                });
            }
        }
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// The `K` target policies, all shaped like one MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PolicySet {
    policies: Vec<Policy>,
}

impl PolicySet {
    pub fn new(policies: Vec<Policy>) -> Result<Self> {
        let first = policies
            .first()
            .ok_or_else(|| Error::InvalidPolicy("policy set is empty".into()))?;
        let dims = first.table().dims();
        if let Some(other) = policies.iter().find(|p| p.table().dims() != dims) {
            return Err(Error::InvalidPolicy(format!(
                "policy shapes differ: {:?} vs {:?}",
                dims,
                other.table().dims()
            )));
        }
        Ok(Self { policies })
    }

    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    pub fn get(&self, k: usize) -> &Policy {
        &self.policies[k]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Policy> {
        self.policies.iter()
    }

    pub fn as_slice(&self) -> &[Policy] {
        &self.policies
    }

    pub fn check_dims(&self, mdp: &TabularMdp) -> Result<()> {
        self.policies[0].check_dims(mdp)
    }
}

impl<'a> IntoIterator for &'a PolicySet {
    type Item = &'a Policy;
    type IntoIter = std::slice::Iter<'a, Policy>;

    fn into_iter(self) -> Self::IntoIter {
        self.policies.iter()
    }
}

/// One transition of an episode. `next_state` is `None` only for the final step
/// of an enumerated trajectory, where the terminal successor is marginalized out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub t: usize,
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: Option<usize>,
}

/// A trajectory segment from some start time up to `T - 1`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Undiscounted sum of rewards.
    pub fn total_return(&self) -> f64 {
        self.steps.iter().map(|step| step.reward).sum()
    }
}
