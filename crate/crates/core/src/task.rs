//! Synthetic conditional mixture used for pretraining and as the reward's mode layout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// K Gaussian modes evenly spaced on a circle in the first two coordinates.
///
/// A sample for condition `c` comes from mode `c` with probability
/// `own_mode_prob`, otherwise from one of the other modes chosen uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyTask {
    pub dim: usize,
    pub conditions: usize,
    pub radius: f64,
    pub own_mode_prob: f64,
    pub mode_std: f64,
}

impl ToyTask {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::InvalidArgument("task dim must be at least 2".into()));
        }
        if self.conditions == 0 {
            return Err(Error::InvalidArgument("task needs at least one condition".into()));
        }
        if !(0.0..=1.0).contains(&self.own_mode_prob) {
            return Err(Error::InvalidArgument(format!(
                "own_mode_prob {} outside [0, 1]",
                self.own_mode_prob
            )));
        }
        if self.conditions == 1 && self.own_mode_prob < 1.0 {
            return Err(Error::InvalidArgument(
                "a single condition has no other modes to draw from".into(),
            ));
        }
        if !(self.mode_std >= 0.0 && self.radius > 0.0) {
            return Err(Error::InvalidArgument("radius must be positive, mode_std non-negative".into()));
        }
        Ok(())
    }

    /// `[K, dim]` matrix of mode centers.
    pub fn centers(&self) -> Tensor {
        let mut data = vec![0.0; self.conditions * self.dim];
        for k in 0..self.conditions {
            let a = 2.0 * std::f64::consts::PI * k as f64 / self.conditions as f64;
            data[k * self.dim] = self.radius * a.cos();
            data[k * self.dim + 1] = self.radius * a.sin();
        }
        Tensor::matrix(self.conditions, self.dim, data).expect("center shape")
    }

    pub fn sample_conditions(&self, n: usize, rng: &mut RngStream) -> Vec<usize> {
        (0..n).map(|_| rng.below(self.conditions)).collect()
    }

    /// One clean sample per condition id, plus the mode each came from.
    pub fn sample(&self, cond: &[usize], rng: &mut RngStream) -> (Tensor, Vec<usize>) {
        let centers = self.centers();
        let mut data = Vec::with_capacity(cond.len() * self.dim);
        let mut modes = Vec::with_capacity(cond.len());
        for &c in cond {
            let mode = if rng.uniform() < self.own_mode_prob {
                c
            } else {
                (c + 1 + rng.below(self.conditions - 1)) % self.conditions
            };
            modes.push(mode);
            for j in 0..self.dim {
                data.push(centers.row(mode)[j] + self.mode_std * rng.normal());
            }
        }
        let t = Tensor::matrix(cond.len(), self.dim, data).expect("sample shape");
        (t, modes)
    }

    /// Index of the nearest center for each row.
    pub fn assign_modes(&self, y: &Tensor) -> Vec<usize> {
        let centers = self.centers();
        (0..y.rows())
            .map(|r| {
                let row = y.row(r);
                (0..self.conditions)
                    .map(|k| {
                        let d: f64 = row
                            .iter()
                            .zip(centers.row(k))
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum();
                        (k, d)
                    })
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .map_or(0, |(k, _)| k)
            })
            .collect()
    }
}
