use std::path::{Path, PathBuf};

use mpe_core::envs::{
    build_gridworld, build_policy_set, micro_fixture, GridworldSpec, PolicySetSpec,
};
use mpe_core::{PolicySet, Strategy, TabularMdp};
use serde::{Deserialize, Serialize};

use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvConfig {
    Gridworld(GridworldSpec),
    Micro { fixture: String },
}

impl EnvConfig {
    pub fn build(&self) -> Result<TabularMdp, HarnessError> {
        match self {
            EnvConfig::Gridworld(spec) => Ok(build_gridworld(spec)?),
            EnvConfig::Micro { fixture } => micro_fixture(fixture)
                .map(|f| f.mdp)
                .ok_or_else(|| HarnessError::Config(format!("unknown micro fixture {fixture:?}"))),
        }
    }

    /// The fixture's own targets, for micro environments.
    pub fn fixture_targets(&self) -> Option<PolicySet> {
        match self {
            EnvConfig::Micro { fixture } => micro_fixture(fixture).map(|f| f.targets),
            EnvConfig::Gridworld(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueSource {
    /// Exact tables from dynamic programming.
    Exact,
    /// Fitted Q evaluation on sampled offline data.
    Fqe,
    /// Fitted Q evaluation on exactly weighted data.
    ExactWeighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loggers {
    Uniform,
    Targets,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfflineConfig {
    #[serde(default = "default_source")]
    pub source: ValueSource,
    /// Episodes per logging policy.
    #[serde(default = "default_offline_episodes")]
    pub episodes: usize,
    #[serde(default = "default_loggers")]
    pub loggers: Loggers,
}

fn default_source() -> ValueSource {
    ValueSource::Fqe
}

fn default_offline_episodes() -> usize {
    10_000
}

fn default_loggers() -> Loggers {
    Loggers::Uniform
}

impl Default for OfflineConfig {
    fn default() -> Self {
        Self {
            source: default_source(),
            episodes: default_offline_episodes(),
            loggers: default_loggers(),
        }
    }
}

/// Policy-set draws take their seed from the master seed and group index;
/// any `seed` given here is ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    /// Absent for micro environments that bring their own targets.
    #[serde(default)]
    pub policies: Option<PolicySetSpec>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    pub sample_grid: Vec<usize>,
    #[serde(default = "default_reference_n")]
    pub reference_n: usize,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_groups")]
    pub groups: usize,
    #[serde(default)]
    pub offline: OfflineConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Also write every individual estimate to `reports.csv`.
    #[serde(default)]
    pub write_reports: bool,
}

fn default_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}

fn default_reference_n() -> usize {
    1000
}

fn default_runs() -> usize {
    30
}

fn default_groups() -> usize {
    30
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let config: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.sample_grid.is_empty() || self.sample_grid.windows(2).any(|w| w[0] >= w[1]) {
            return bad("sample_grid must be non-empty and strictly increasing".into());
        }
        if !self.sample_grid.contains(&self.reference_n) {
            return bad(format!(
                "reference_n {} must be one of the sample_grid points",
                self.reference_n
            ));
        }
        if self.runs == 0 {
            return bad("runs must be at least 1".into());
        }
        if self.groups == 0 {
            return bad("groups must be at least 1".into());
        }
        if self.strategies.is_empty() {
            return bad("no strategies selected".into());
        }
        match (&self.env, &self.policies) {
            (EnvConfig::Gridworld(spec), policies) => {
                spec.validate()
                    .map_err(|e| HarnessError::Config(e.to_string()))?;
                let Some(policies) = policies else {
                    return bad("a gridworld environment needs a [policies] section".into());
                };
                policies
                    .validate()
                    .map_err(|e| HarnessError::Config(e.to_string()))?;
            }
            (EnvConfig::Micro { fixture }, policies) => {
                if micro_fixture(fixture).is_none() {
                    return bad(format!("unknown micro fixture {fixture:?}"));
                }
                if let Some(p) = policies {
                    p.validate()
                        .map_err(|e| HarnessError::Config(e.to_string()))?;
                }
            }
        }
        let k = self.num_targets();
        if self.sample_grid[0] < k {
            return bad(format!(
                "the smallest sample size must give every one of the {k} targets an episode"
            ));
        }
        if self.offline.source == ValueSource::Fqe && self.offline.episodes == 0 {
            return bad("offline.episodes must be positive for fitted values".into());
        }
        Ok(())
    }

    pub fn num_targets(&self) -> usize {
        match &self.policies {
            Some(p) => p.k,
            None => self.env.fixture_targets().map_or(0, |t| t.len()),
        }
    }

    /// Target set for group `group`.
    pub fn targets(&self, mdp: &TabularMdp, group_seed: u64) -> Result<PolicySet, HarnessError> {
        match &self.policies {
            Some(spec) => {
                let spec = PolicySetSpec {
                    seed: group_seed,
                    ..spec.clone()
                };
                Ok(build_policy_set(mdp, &spec)?)
            }
            None => self
                .env
                .fixture_targets()
                .ok_or_else(|| HarnessError::Config("no policy set configured".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GRID: &str = r#"
seed = 3
sample_grid = [100, 300, 1000]
runs = 4
groups = 2

[env]
kind = "gridworld"
m = 3

[policies]
k = 5
epsilon = 0.1
"#;

    #[test]
    fn parses_with_defaults() {
        let c = ExperimentConfig::from_toml(GRID).unwrap();
        assert_eq!(c.reference_n, 1000);
        assert_eq!(c.strategies.len(), 5);
        assert_eq!(c.offline.source, ValueSource::Fqe);
        match &c.env {
            EnvConfig::Gridworld(g) => assert_eq!((g.m, g.slip), (3, 0.9)),
            _ => panic!(),
        }
    }

    #[test]
    fn rejects_bad_grids() {
        let unsorted = GRID.replace("[100, 300, 1000]", "[300, 100, 1000]");
        assert!(matches!(
            ExperimentConfig::from_toml(&unsorted),
            Err(HarnessError::Config(_))
        ));
        let no_reference = GRID.replace("[100, 300, 1000]", "[100, 300]");
        assert!(ExperimentConfig::from_toml(&no_reference).is_err());
        let unknown = format!("{GRID}\nbogus = 1\n");
        assert!(ExperimentConfig::from_toml(&unknown).is_err());
    }

    #[test]
    fn micro_fixture_brings_targets() {
        let text = r#"
sample_grid = [100, 1000]
[env]
kind = "micro"
fixture = "two-state-stochastic"
"#;
        let c = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(c.num_targets(), 3);
    }
}
