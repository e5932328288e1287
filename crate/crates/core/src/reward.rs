//! Differentiable toy rewards, the fixed decoder, and the scalar reward loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::DiffTensor;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum Decoder {
    Identity,
    /// Fixed `[d_out, d]` map applied as `y = A·x`.
    Linear(Tensor),
}

impl Decoder {
    pub fn decode(&self, x: &DiffTensor) -> Result<DiffTensor> {
        match self {
            Self::Identity => Ok(x.clone()),
            Self::Linear(a) => {
                if x.shape().len() != 2 || x.shape()[1] != a.cols() {
                    return Err(Error::InvalidArgument(format!(
                        "decoder expects [batch, {}], got {:?}",
                        a.cols(),
                        x.shape()
                    )));
                }
                Ok(x.matmul(&DiffTensor::constant(a.transpose()?))?)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RewardKind {
    /// `−β‖y − μ_c‖²`.
    ModeTarget { beta: f64 },
    /// `Σ_k w_ck·exp(−β‖y − μ_k‖²) − align·‖y − μ_c‖²` with `w_cc = 1` and
    /// `w_ck = other_weight` otherwise.
    Composite {
        beta: f64,
        other_weight: f64,
        align: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    kind: RewardKind,
    centers: Tensor,
}

impl RewardModel {
    /// `centers` is `[K, d_out]`.
    pub fn new(kind: RewardKind, centers: Tensor) -> Result<Self> {
        if centers.shape().len() != 2 || centers.rows() == 0 {
            return Err(Error::InvalidArgument(format!(
                "reward centers must be a non-empty [K, d] matrix, got {:?}",
                centers.shape()
            )));
        }
        let bad = match &kind {
            RewardKind::ModeTarget { beta } => !(*beta > 0.0),
            RewardKind::Composite {
                beta,
                other_weight,
                align,
            } => !(*beta > 0.0 && *other_weight >= 0.0 && *align >= 0.0),
        };
        if bad {
            return Err(Error::InvalidArgument(format!(
                "reward parameters out of range: {kind:?}"
            )));
        }
        Ok(Self { kind, centers })
    }

    pub fn kind(&self) -> &RewardKind {
        &self.kind
    }

    pub fn centers(&self) -> &Tensor {
        &self.centers
    }

    fn check(&self, y: &DiffTensor, cond: &[usize]) -> Result<()> {
        let shape = y.shape();
        if shape.len() != 2 || shape[1] != self.centers.cols() || shape[0] != cond.len() {
            return Err(Error::InvalidArgument(format!(
                "reward expects [{}, {}], got {:?}",
                cond.len(),
                self.centers.cols(),
                shape
            )));
        }
        if let Some(c) = cond.iter().find(|&&c| c >= self.centers.rows()) {
            return Err(Error::InvalidArgument(format!("condition {c} has no reward center")));
        }
        Ok(())
    }

    fn sq_dist_to_own(&self, y: &DiffTensor, cond: &[usize]) -> Result<DiffTensor> {
        let d = self.centers.cols();
        let mut rows = Vec::with_capacity(cond.len() * d);
        for &c in cond {
            rows.extend_from_slice(self.centers.row(c));
        }
        let mu = DiffTensor::constant(Tensor::matrix(cond.len(), d, rows)?);
        Ok(y.sub(&mu)?.square().sum_rows()?)
    }

    /// Reward for each row, shape `[batch]`.
    pub fn per_sample(&self, y: &DiffTensor, cond: &[usize]) -> Result<DiffTensor> {
        self.check(y, cond)?;
        match &self.kind {
            RewardKind::ModeTarget { beta } => Ok(self.sq_dist_to_own(y, cond)?.scale(-beta)),
            RewardKind::Composite {
                beta,
                other_weight,
                align,
            } => {
                let mut total: Option<DiffTensor> = None;
                for k in 0..self.centers.rows() {
                    let neg_mu = DiffTensor::constant(Tensor::vector(
                        self.centers.row(k).iter().map(|v| -v).collect(),
                    ));
                    let bump = y
                        .add_row_vector(&neg_mu)?
                        .square()
                        .sum_rows()?
                        .scale(-beta)
                        .exp();
                    let w: Vec<f64> = cond
                        .iter()
                        .map(|&c| if c == k { 1.0 } else { *other_weight })
                        .collect();
                    let term = bump.mul(&DiffTensor::constant(Tensor::vector(w)))?;
                    total = Some(match total {
                        Some(t) => t.add(&term)?,
                        None => term,
                    });
                }
                let total = total.expect("at least one center");
                if *align > 0.0 {
                    Ok(total.sub(&self.sq_dist_to_own(y, cond)?.scale(*align))?)
                } else {
                    Ok(total)
                }
            }
        }
    }

    /// Batch-mean reward.
    pub fn reward(&self, y: &DiffTensor, cond: &[usize]) -> Result<DiffTensor> {
        Ok(self.per_sample(y, cond)?.mean())
    }

    /// Largest attainable per-sample reward (reached at the own center).
    pub fn max_reward(&self) -> f64 {
        match &self.kind {
            RewardKind::ModeTarget { .. } => 0.0,
            RewardKind::Composite { beta, other_weight, .. } => {
                let k = self.centers.rows();
                let own = 0;
                let mut r = 1.0;
                for j in 1..k {
                    let d: f64 = self
                        .centers
                        .row(own)
                        .iter()
                        .zip(self.centers.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    r += other_weight * (-beta * d).exp();
                }
                r
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RewardLoss {
    /// `−R`.
    Negate,
    /// `(r* − R)²`.
    TargetGap { target: f64 },
}

impl RewardLoss {
    /// Batch mean of the per-sample loss; `rewards` has shape `[batch]`.
    pub fn apply(&self, rewards: &DiffTensor) -> Result<DiffTensor> {
        match self {
            Self::Negate => Ok(rewards.mean().neg()),
            Self::TargetGap { target } => Ok(rewards.neg().add_scalar(*target).square().mean()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::rng::RngStream;

    fn centers() -> Tensor {
        Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap()
    }

    fn rows(r: &[Vec<f64>]) -> DiffTensor {
        DiffTensor::constant(Tensor::from_rows(r).unwrap())
    }

    #[test]
    fn decoders() {
        let x = rows(&[vec![1.0, -1.0]]);
        assert_eq!(Decoder::Identity.decode(&x).unwrap().data(), x.data());
        let two = Decoder::Linear(Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap());
        assert_eq!(two.decode(&x).unwrap().data(), &[2.0, -2.0]);
        let wide = Decoder::Linear(Tensor::zeros(&[2, 3]));
        assert!(wide.decode(&x).is_err());
    }

    #[test]
    fn decoder_gradient() {
        let a = RngStream::new(1, "a").normal_tensor(&[3, 2]);
        let dec = Decoder::Linear(a);
        let x = RngStream::new(1, "x").normal_tensor(&[4, 2]);
        let report = grad_check(
            |p| Ok(dec.decode(&p[0])?.frobenius_sq()),
            &[x],
            1e-5,
            8,
            &mut RngStream::new(1, "probe"),
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-6);
    }

    #[test]
    fn mode_target_values() {
        let rm = RewardModel::new(RewardKind::ModeTarget { beta: 1.0 }, centers()).unwrap();
        let at = rm.reward(&rows(&[vec![0.0, 1.0]]), &[1]).unwrap();
        assert_eq!(at.item(), Some(0.0));
        let off = rm.reward(&rows(&[vec![2.0, 0.0]]), &[0]).unwrap();
        assert_eq!(off.item(), Some(-1.0));
        assert!(rm.reward(&rows(&[vec![0.0, 0.0]]), &[3]).is_err());
    }

    #[test]
    fn composite_peaks_at_own_mode() {
        let kind = RewardKind::Composite {
            beta: 10.0,
            other_weight: 0.3,
            align: 0.1,
        };
        let rm = RewardModel::new(kind, centers()).unwrap();
        let at = rm.reward(&rows(&[vec![1.0, 0.0]]), &[0]).unwrap().item().unwrap();
        let other = rm.reward(&rows(&[vec![0.0, 1.0]]), &[0]).unwrap().item().unwrap();
        let between = rm.reward(&rows(&[vec![0.5, 0.5]]), &[0]).unwrap().item().unwrap();
        assert!(at > other && other > between);
        assert!((at - rm.max_reward()).abs() < 1e-12);
    }

    #[test]
    fn batch_order_invariance() {
        let rm = RewardModel::new(RewardKind::ModeTarget { beta: 2.0 }, centers()).unwrap();
        let a = rm
            .reward(&rows(&[vec![0.3, 0.1], vec![-0.2, 0.9]]), &[0, 1])
            .unwrap();
        let b = rm
            .reward(&rows(&[vec![-0.2, 0.9], vec![0.3, 0.1]]), &[1, 0])
            .unwrap();
        assert!((a.item().unwrap() - b.item().unwrap()).abs() < 1e-15);
    }

    #[test]
    fn loss_modes() {
        let r = DiffTensor::constant(Tensor::vector(vec![0.3]));
        assert_eq!(RewardLoss::Negate.apply(&r).unwrap().item(), Some(-0.3));
        let gap = RewardLoss::TargetGap { target: 0.3 };
        assert_eq!(gap.apply(&r).unwrap().item(), Some(0.0));
        let zero = DiffTensor::constant(Tensor::vector(vec![0.0]));
        let one = RewardLoss::TargetGap { target: 1.0 };
        assert_eq!(one.apply(&zero).unwrap().item(), Some(1.0));
    }

    #[test]
    fn gradient_step_improves_reward() {
        let rm = RewardModel::new(RewardKind::ModeTarget { beta: 1.0 }, centers()).unwrap();
        let y = DiffTensor::param(Tensor::from_rows(&[vec![0.2, -0.4]]).unwrap());
        let r = rm.reward(&y, &[0]).unwrap();
        let g = r.backward().unwrap();
        let step: Vec<f64> = y
            .data()
            .iter()
            .zip(g.get(&y).unwrap().data())
            .map(|(v, d)| v + 0.01 * d)
            .collect();
        let r2 = rm.reward(&rows(&[step]), &[0]).unwrap();
        assert!(r2.item().unwrap() > r.item().unwrap());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn mode_target_decreases_along_rays(dx in -1.0f64..1.0, dy in -1.0f64..1.0, t in 0.01f64..3.0) {
                prop_assume!(dx.abs() + dy.abs() > 1e-3);
                let rm = RewardModel::new(RewardKind::ModeTarget { beta: 1.0 }, centers()).unwrap();
                let at = |s: f64| rm.reward(&rows(&[vec![1.0 + s * dx, s * dy]]), &[0]).unwrap().item().unwrap();
                prop_assert!(at(t * 1.1) < at(t));
            }

            #[test]
            fn linear_decoder_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..100) {
                let mut r = RngStream::new(seed, "lin");
                let dec = Decoder::Linear(r.normal_tensor(&[2, 2]));
                let x = r.normal_tensor(&[1, 2]);
                let y = r.normal_tensor(&[1, 2]);
                let mix = x.zip_map(&y, "mix", |p, q| a * p + b * q).unwrap();
                let lhs = dec.decode(&DiffTensor::constant(mix)).unwrap();
                let dx = dec.decode(&DiffTensor::constant(x)).unwrap();
                let dy = dec.decode(&DiffTensor::constant(y)).unwrap();
                for i in 0..2 {
                    let rhs = a * dx.data()[i] + b * dy.data()[i];
                    prop_assert!((lhs.data()[i] - rhs).abs() < 1e-12);
                }
            }
        }
    }
}
