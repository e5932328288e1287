//! Horizon divergences, the shaping aggregate, the reward gate and the total loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::DiffTensor;
use crate::error::{Error, Result};
use crate::sampler::Trajectory;
use crate::schedule::{HorizonMatch, HorizonSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DivergenceWeights {
    pub cosine: f64,
    pub l2: f64,
}

impl DivergenceWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.cosine >= 0.0 && self.l2 >= 0.0) || (self.cosine == 0.0 && self.l2 == 0.0) {
            return Err(Error::InvalidArgument(format!(
                "divergence weights must be non-negative and not both zero: {self:?}"
            )));
        }
        Ok(())
    }
}

impl Default for DivergenceWeights {
    fn default() -> Self {
        Self {
            cosine: 1.0,
            l2: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Divergence {
    pub value: DiffTensor,
    /// Samples where either side had zero norm.
    pub zero_norm: usize,
}

/// Batch mean of `λ_cos·(1 − cos(xs_i, xt_i)) + λ_ℓ2·‖xs_i − xt_i‖²`.
///
/// A row with zero norm on either side contributes exactly `λ_cos` to the
/// cosine part, with no gradient through that part.
pub fn horizon_divergence(xs: &DiffTensor, xt: &DiffTensor, w: &DivergenceWeights) -> Result<Divergence> {
    if xt.requires_grad() {
        return Err(Error::InvalidArgument(
            "teacher prediction must be detached".into(),
        ));
    }
    if xs.shape() != xt.shape() || xs.shape().len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "divergence needs equal [batch, d] shapes, got {:?} and {:?}",
            xs.shape(),
            xt.shape()
        )));
    }
    let b = xs.shape()[0];
    let ns = xs.square().sum_rows()?;
    let nt = xt.square().sum_rows()?;
    let mut pad = vec![0.0; b];
    let mut mask = vec![1.0; b];
    let mut zero_norm = 0;
    for i in 0..b {
        if ns.data()[i] == 0.0 || nt.data()[i] == 0.0 {
            pad[i] = 1.0;
            mask[i] = 0.0;
            zero_norm += 1;
        }
    }
    let pad = DiffTensor::constant(Tensor::vector(pad));
    let mask = DiffTensor::constant(Tensor::vector(mask));
    let denom = ns.add(&pad)?.mul(&nt.add(&pad)?)?.sqrt();
    let cos = xs.mul(xt)?.sum_rows()?.div(&denom)?.mul(&mask)?;
    let cos_term = cos.neg().add_scalar(1.0).scale(w.cosine);
    let l2_term = xs.sub(xt)?.square().sum_rows()?.scale(w.l2);
    Ok(Divergence {
        value: cos_term.add(&l2_term)?.mean(),
        zero_norm,
    })
}

#[derive(Debug, Clone)]
pub struct Shaping {
    pub loss: DiffTensor,
    pub per_horizon: Vec<f64>,
    pub zero_norm: usize,
}

/// `Σ_m w_m·D(x̂0^S[π^S_m], x̂0^T[π^T_m])`.
pub fn shaping_loss(
    student: &Trajectory,
    teacher: &Trajectory,
    pairs: &[HorizonMatch],
    horizons: &HorizonSet,
    w: &DivergenceWeights,
) -> Result<Shaping> {
    if pairs.len() != horizons.len() || pairs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} matched pairs for {} horizons",
            pairs.len(),
            horizons.len()
        )));
    }
    let mut loss: Option<DiffTensor> = None;
    let mut per_horizon = Vec::with_capacity(pairs.len());
    let mut zero_norm = 0;
    for (p, &weight) in pairs.iter().zip(horizons.weights()) {
        if p.student == 0 || p.student > student.steps() || p.teacher == 0 || p.teacher > teacher.steps() {
            return Err(Error::InvalidArgument(format!("pair {p:?} outside the trajectories")));
        }
        if !student.in_window(p.student) {
            return Err(Error::InvalidArgument(format!(
                "student step {} precedes the gradient window starting at {}",
                p.student, student.window_start
            )));
        }
        let d = horizon_divergence(
            student.prediction(p.student),
            &teacher.prediction(p.teacher).stop_gradient(),
            w,
        )?;
        per_horizon.push(d.value.item().expect("scalar divergence"));
        zero_norm += d.zero_norm;
        let term = d.value.scale(weight);
        loss = Some(match loss {
            Some(l) => l.add(&term)?,
            None => term,
        });
    }
    Ok(Shaping {
        loss: loss.expect("non-empty pairs"),
        per_horizon,
        zero_norm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateConfig {
    pub temperature: f64,
    pub enabled: bool,
    pub override_value: Option<f64>,
}

impl GateConfig {
    pub fn new(temperature: f64) -> Self {
        Self {
            temperature,
            enabled: true,
            override_value: None,
        }
    }
}

/// `sigmoid((R_T − R_S)/τ)` on plain numbers. A disabled gate passes 1.
pub fn reward_gate(teacher_reward: f64, student_reward: f64, cfg: &GateConfig) -> f64 {
    if let Some(g) = cfg.override_value {
        return g;
    }
    if !cfg.enabled {
        return 1.0;
    }
    sigmoid((teacher_reward - student_reward) / cfg.temperature)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub reward_loss: f64,
    pub reward_weight: f64,
    pub per_horizon: Vec<f64>,
    pub shape_loss: f64,
    pub gate: f64,
    pub alpha: f64,
    pub total: f64,
    pub teacher_reward: f64,
    pub student_reward: f64,
}

impl LossBreakdown {
    pub fn recompute_total(&self) -> f64 {
        self.reward_weight * self.reward_loss + self.alpha * self.gate * self.shape_loss
    }
}

/// `w_r·L_reward + α·g·L_shape`, with `g` entering as a plain constant.
pub fn total_loss(
    reward_loss: &DiffTensor,
    shape_loss: &DiffTensor,
    reward_weight: f64,
    gate: f64,
    alpha: f64,
) -> Result<(DiffTensor, LossBreakdown)> {
    let r = reward_loss.item().ok_or_else(|| Error::InvalidArgument("reward loss must be scalar".into()))?;
    let s = shape_loss.item().ok_or_else(|| Error::InvalidArgument("shape loss must be scalar".into()))?;
    for (what, v) in [("reward loss", r), ("shape loss", s), ("gate", gate), ("alpha", alpha)] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: what.into(),
                step: 0,
            });
        }
    }
    if alpha < 0.0 {
        return Err(Error::InvalidArgument(format!("alpha {alpha} is negative")));
    }
    let total = reward_loss
        .scale(reward_weight)
        .add(&shape_loss.scale(alpha * gate))?;
    let breakdown = LossBreakdown {
        reward_loss: r,
        reward_weight,
        per_horizon: Vec::new(),
        shape_loss: s,
        gate,
        alpha,
        total: total.item().expect("scalar"),
        teacher_reward: f64::NAN,
        student_reward: f64::NAN,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn c(rows: &[Vec<f64>]) -> DiffTensor {
        DiffTensor::constant(Tensor::from_rows(rows).unwrap())
    }

    fn val(xs: &DiffTensor, xt: &DiffTensor, w: DivergenceWeights) -> f64 {
        horizon_divergence(xs, xt, &w).unwrap().value.item().unwrap()
    }

    #[test]
    fn divergence_examples() {
        let w = DivergenceWeights::default();
        let a = c(&[vec![1.0, 2.0]]);
        assert!(val(&a, &a, w).abs() < 1e-15);
        let only_cos = DivergenceWeights { cosine: 1.0, l2: 0.0 };
        assert!((val(&c(&[vec![1.0, 0.0]]), &c(&[vec![-1.0, 0.0]]), only_cos) - 2.0).abs() < 1e-15);
        assert!((val(&c(&[vec![1.0, 0.0]]), &c(&[vec![0.0, 1.0]]), w) - 1.1).abs() < 1e-15);
    }

    #[test]
    fn zero_norm_convention() {
        let w = DivergenceWeights::default();
        let xs = DiffTensor::param(Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap());
        let xt = c(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let d = horizon_divergence(&xs, &xt, &w).unwrap();
        assert_eq!(d.zero_norm, 1);
        // Row 0: λ_cos + λ_ℓ2·1, row 1: 0.
        assert!((d.value.item().unwrap() - (1.0 + 0.05) / 2.0).abs() < 1e-15);
        let g = d.value.backward().unwrap();
        assert!(g.get(&xs).unwrap().all_finite());
    }

    #[test]
    fn rejects_tracked_teacher() {
        let xt = DiffTensor::param(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        assert!(horizon_divergence(&c(&[vec![1.0, 0.0]]), &xt, &DivergenceWeights::default()).is_err());
        assert!(DivergenceWeights { cosine: 0.0, l2: 0.0 }.validate().is_err());
    }

    #[test]
    fn gate_values() {
        let cfg = GateConfig::new(0.02);
        assert_eq!(reward_gate(0.3, 0.3, &cfg), 0.5);
        assert!((reward_gate(0.02, 0.0, &cfg) - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((reward_gate(0.0, 0.2, &cfg) - 4.539_786_870_243_439e-5).abs() < 1e-15);
        assert_eq!(reward_gate(1e6, 0.0, &cfg), 1.0);
        assert_eq!(reward_gate(-1e6, 0.0, &cfg), 0.0);
        let fixed = GateConfig {
            override_value: Some(1.0),
            ..cfg
        };
        assert_eq!(reward_gate(-1.0, 0.0, &fixed), 1.0);
        let off = GateConfig { enabled: false, ..cfg };
        assert_eq!(reward_gate(-1.0, 0.0, &off), 1.0);
    }

    #[test]
    fn total_examples() {
        let r = DiffTensor::scalar(0.5);
        let s = DiffTensor::scalar(2.0);
        let (t, b) = total_loss(&r, &s, 1.0, 0.5, 1.0).unwrap();
        assert_eq!(t.item(), Some(1.5));
        assert_eq!(b.recompute_total(), b.total);
        assert_eq!(total_loss(&r, &s, 1.0, 0.0, 2.0).unwrap().0.item(), Some(0.5));
        assert_eq!(total_loss(&r, &s, 1.0, 0.7, 0.0).unwrap().0.item(), Some(0.5));
        let nan = DiffTensor::scalar(f64::NAN);
        match total_loss(&r, &nan, 1.0, 0.5, 1.0) {
            Err(Error::NonFinite { what, .. }) => assert_eq!(what, "shape loss"),
            other => panic!("{other:?}"),
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn gate_complement(delta in -5.0f64..5.0, tau in 0.001f64..1.0) {
                let cfg = GateConfig::new(tau);
                let g = reward_gate(delta, 0.0, &cfg) + reward_gate(-delta, 0.0, &cfg);
                prop_assert!((g - 1.0).abs() <= 1e-12);
            }

            #[test]
            fn gate_monotone(a in -0.5f64..0.5, b in -0.5f64..0.5) {
                prop_assume!((a - b).abs() > 1e-6);
                let cfg = GateConfig::new(0.5);
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                prop_assert!(reward_gate(lo, 0.0, &cfg) < reward_gate(hi, 0.0, &cfg));
            }

            #[test]
            fn divergence_nonnegative_and_symmetric(seed in 0u64..500, lc in 0.0f64..2.0, l2 in 0.01f64..1.0) {
                let mut r = RngStream::new(seed, "div");
                let a = DiffTensor::constant(r.normal_tensor(&[3, 2]));
                let b = DiffTensor::constant(r.normal_tensor(&[3, 2]));
                let w = DivergenceWeights { cosine: lc, l2 };
                let ab = val(&a, &b, w);
                prop_assert!(ab >= 0.0);
                prop_assert!((ab - val(&b, &a, w)).abs() < 1e-12);
            }

            #[test]
            fn breakdown_identity(r in -3.0f64..3.0, s in 0.0f64..5.0, g in 0.0f64..1.0, alpha in 0.0f64..4.0, wr in 0.0f64..1.0) {
                let (t, b) = total_loss(&DiffTensor::scalar(r), &DiffTensor::scalar(s), wr, g, alpha).unwrap();
                let rel = (b.recompute_total() - t.item().unwrap()).abs() / t.item().unwrap().abs().max(1e-300);
                prop_assert!(rel <= 1e-12 || (b.recompute_total() - t.item().unwrap()).abs() < 1e-15);
            }
        }
    }
}
