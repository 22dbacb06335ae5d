//! Dense time-indexed arrays.
//!
//! Both tables are row-major with time as the slowest axis. They serialize as
//! nested JSON arrays (`[t][s][a]` and `[t][s]`) so debugging dumps line up with
//! the MDP and policy interchange format.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Real values indexed by `(t, s, a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<Vec<f64>>>", try_from = "Vec<Vec<Vec<f64>>>")]
pub struct StateActionTable {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    data: Vec<f64>,
}

impl StateActionTable {
    pub fn zeros(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        Self::filled(horizon, num_states, num_actions, 0.0)
    }

    pub fn filled(horizon: usize, num_states: usize, num_actions: usize, value: f64) -> Self {
        Self {
            horizon,
            num_states,
            num_actions,
            data: vec![value; horizon * num_states * num_actions],
        }
    }

    pub fn from_fn(
        horizon: usize,
        num_states: usize,
        num_actions: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(horizon * num_states * num_actions);
        for t in 0..horizon {
            for s in 0..num_states {
                for a in 0..num_actions {
                    data.push(f(t, s, a));
                }
            }
        }
        Self {
            horizon,
            num_states,
            num_actions,
            data,
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.horizon, self.num_states, self.num_actions)
    }

    #[inline]
    fn offset(&self, t: usize, s: usize, a: usize) -> usize {
        debug_assert!(t < self.horizon && s < self.num_states && a < self.num_actions);
        (t * self.num_states + s) * self.num_actions + a
    }

    #[inline]
    pub fn get(&self, t: usize, s: usize, a: usize) -> f64 {
        self.data[self.offset(t, s, a)]
    }

    #[inline]
    pub fn set(&mut self, t: usize, s: usize, a: usize, value: f64) {
        let i = self.offset(t, s, a);
        self.data[i] = value;
    }

    /// The action row at `(t, s)`.
    #[inline]
    pub fn row(&self, t: usize, s: usize) -> &[f64] {
        let start = self.offset(t, s, 0);
        &self.data[start..start + self.num_actions]
    }

    #[inline]
    pub fn row_mut(&mut self, t: usize, s: usize) -> &mut [f64] {
        let start = self.offset(t, s, 0);
        &mut self.data[start..start + self.num_actions]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&x| f(x)).collect(),
            ..*self
        }
    }

    /// Largest absolute elementwise difference. Panics on mismatched shapes.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.dims(), other.dims(), "table shapes differ");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|x| x.abs()).fold(0.0, f64::max)
    }
}

impl From<StateActionTable> for Vec<Vec<Vec<f64>>> {
    fn from(table: StateActionTable) -> Self {
        (0..table.horizon)
            .map(|t| {
                (0..table.num_states)
                    .map(|s| table.row(t, s).to_vec())
                    .collect()
            })
            .collect()
    }
}

impl TryFrom<Vec<Vec<Vec<f64>>>> for StateActionTable {
    type Error = Error;

    fn try_from(nested: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let horizon = nested.len();
        let num_states = nested.first().map_or(0, Vec::len);
        let num_actions = nested
            .first()
            .and_then(|rows| rows.first())
            .map_or(0, Vec::len);
        let mut data = Vec::with_capacity(horizon * num_states * num_actions);
        for rows in &nested {
            if rows.len() != num_states {
                return Err(Error::DimensionMismatch {
                    what: "states per time step",
                    expected: num_states,
                    found: rows.len(),
                });
            }
            for row in rows {
                if row.len() != num_actions {
                    return Err(Error::DimensionMismatch {
                        what: "actions per state",
                        expected: num_actions,
                        found: row.len(),
                    });
                }
                data.extend_from_slice(row);
            }
        }
        Ok(Self {
            horizon,
            num_states,
            num_actions,
            data,
        })
    }
}

/// Real values indexed by `(t, s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<f64>>", try_from = "Vec<Vec<f64>>")]
pub struct StateTable {
    horizon: usize,
    num_states: usize,
    data: Vec<f64>,
}

impl StateTable {
    pub fn zeros(horizon: usize, num_states: usize) -> Self {
        Self {
            horizon,
            num_states,
            data: vec![0.0; horizon * num_states],
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    #[inline]
    pub fn get(&self, t: usize, s: usize) -> f64 {
        debug_assert!(t < self.horizon && s < self.num_states);
        self.data[t * self.num_states + s]
    }

    #[inline]
    pub fn set(&mut self, t: usize, s: usize, value: f64) {
        debug_assert!(t < self.horizon && s < self.num_states);
        self.data[t * self.num_states + s] = value;
    }

    /// All states at time `t`.
    pub fn at(&self, t: usize) -> &[f64] {
        &self.data[t * self.num_states..(t + 1) * self.num_states]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(
            (self.horizon, self.num_states),
            (other.horizon, other.num_states),
            "table shapes differ"
        );
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl From<StateTable> for Vec<Vec<f64>> {
    fn from(table: StateTable) -> Self {
        (0..table.horizon).map(|t| table.at(t).to_vec()).collect()
    }
}

impl TryFrom<Vec<Vec<f64>>> for StateTable {
    type Error = Error;

    fn try_from(nested: Vec<Vec<f64>>) -> Result<Self> {
        let horizon = nested.len();
        let num_states = nested.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(horizon * num_states);
        for row in &nested {
            if row.len() != num_states {
                return Err(Error::DimensionMismatch {
                    what: "states per time step",
                    expected: num_states,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            horizon,
            num_states,
            data,
        })
    }
}
