//! Observation grids and sampled paths.
//!
//! A grid holds strictly increasing times `t_0 < ... < t_{n-1} = T` in
//! `(0, T]`; the origin is implicit. Cell `j` is `[t_{j-1}, t_j)` with
//! `t_{-1} = 0`, so a function sampled "at left endpoints" has one value per
//! cell and a path has one value per grid time.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Relative tolerance used when matching a time to a grid node.
const NODE_MATCH_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return domain("time grid must contain at least one time");
        }
        if !(times[0] > 0.0) {
            return domain(format!("grid times must be positive, first is {}", times[0]));
        }
        for w in times.windows(2) {
            if !(w[1] > w[0]) {
                return domain(format!("grid times must increase strictly: {} then {}", w[0], w[1]));
            }
        }
        if !times[times.len() - 1].is_finite() {
            return domain("grid horizon must be finite");
        }
        Ok(Self { times })
    }

    /// `n` equally spaced times `T/n, 2T/n, ..., T`.
    pub fn uniform(horizon: f64, n: usize) -> Result<Self> {
        if n == 0 {
            return domain("grid needs at least one point");
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return domain(format!("horizon must be positive and finite, got {horizon}"));
        }
        let times: Vec<f64> = (1..=n).map(|i| i as f64 * horizon / n as f64).collect();
        Self::new(times)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    /// Left end of cell `j`.
    pub fn cell_start(&self, j: usize) -> f64 {
        if j == 0 {
            0.0
        } else {
            self.times[j - 1]
        }
    }

    pub fn cell(&self, j: usize) -> (f64, f64) {
        (self.cell_start(j), self.times[j])
    }

    pub fn cell_width(&self, j: usize) -> f64 {
        self.times[j] - self.cell_start(j)
    }

    /// Index of the grid node equal to `t` (up to rounding).
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let tol = NODE_MATCH_RTOL * self.horizon().max(1.0);
        let pos = self.times.partition_point(|&x| x < t - tol);
        if pos < self.times.len() && (self.times[pos] - t).abs() <= tol {
            Ok(pos)
        } else {
            Err(Error::OffGrid { time: t })
        }
    }

    /// Index of the cell containing `s`, i.e. the `j` with `t_{j-1} <= s < t_j`.
    pub fn cell_containing(&self, s: f64) -> Option<usize> {
        if s < 0.0 || s >= self.horizon() {
            return None;
        }
        Some(self.times.partition_point(|&x| x <= s))
    }

    /// Discrete indicator of `[0, times[k])`: ones on cells `0..=k`.
    pub fn indicator(&self, k: usize) -> Vec<f64> {
        (0..self.len()).map(|j| if j <= k { 1.0 } else { 0.0 }).collect()
    }

    pub fn same_nodes(&self, other: &TimeGrid) -> bool {
        let tol = NODE_MATCH_RTOL * self.horizon().max(1.0);
        self.len() == other.len()
            && self
                .times
                .iter()
                .zip(&other.times)
                .all(|(a, b)| (a - b).abs() <= tol)
    }

    /// Grid made of the first `len` nodes.
    pub fn prefix(&self, len: usize) -> Result<Self> {
        if len == 0 || len > self.len() {
            return domain(format!("prefix length {len} outside 1..={}", self.len()));
        }
        Ok(Self {
            times: self.times[..len].to_vec(),
        })
    }
}

/// Process values at the grid times; the value at time 0 is 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePath {
    grid: TimeGrid,
    values: Vec<f64>,
}

impl SamplePath {
    pub fn new(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: TimeGrid) -> Self {
        let values = vec![0.0; grid.len()];
        Self { grid, values }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Value at grid node `t`.
    pub fn at(&self, t: f64) -> Result<f64> {
        Ok(self.values[self.grid.index_of(t)?])
    }

    /// Increments over the cells; the first one starts from 0.
    pub fn increments(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.values
            .iter()
            .map(|&v| {
                let d = v - prev;
                prev = v;
                d
            })
            .collect()
    }

    /// Path rebuilt from cell increments.
    pub fn from_increments(grid: TimeGrid, increments: &[f64]) -> Result<Self> {
        let mut acc = 0.0;
        let values = increments
            .iter()
            .map(|d| {
                acc += d;
                acc
            })
            .collect();
        Self::new(grid, values)
    }
}
