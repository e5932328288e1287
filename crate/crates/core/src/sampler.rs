//! Few-step stochastic re-interpolation sampler with a gradient-tracking window.

use crate::autodiff::DiffTensor;
use crate::error::{Error, Result};
use crate::model::{x0_predict, BoundParams, VelocityField};
use crate::rng::RngStream;
use crate::schedule::{match_horizon_pair, HorizonSet, NoiseSchedule};
use crate::tensor::Tensor;

/// `(1 − σ_next)·x̂0 + σ_next·ε`.
pub fn sampling_step(x0hat: &DiffTensor, sigma_next: f64, eps: &DiffTensor) -> Result<DiffTensor> {
    if !(0.0..=1.0).contains(&sigma_next) {
        return Err(Error::InvalidArgument(format!("sigma {sigma_next} outside [0, 1]")));
    }
    Ok(x0hat.scale(1.0 - sigma_next).add(&eps.scale(sigma_next))?)
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    /// Prediction index, `1..=N`.
    pub step: usize,
    pub sigma: f64,
    pub x0hat: DiffTensor,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub x1: Tensor,
    pub records: Vec<StepRecord>,
    pub window_start: usize,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.records.len()
    }

    /// The `i`-th x0-prediction, `i` in `1..=N`.
    pub fn prediction(&self, i: usize) -> &DiffTensor {
        &self.records[i - 1].x0hat
    }

    /// The sample, equal to the last prediction since the schedule ends at zero.
    pub fn output(&self) -> &DiffTensor {
        &self.records.last().expect("non-empty trajectory").x0hat
    }

    pub fn in_window(&self, i: usize) -> bool {
        i >= self.window_start
    }
}

/// Runs the sampler from `x1`.
///
/// Step `i` draws its re-noising from `noise.child(i)`. Steps before
/// `window_start` run on detached parameters; the latent entering step
/// `window_start` is cut from any history. `window_start = N + 1` detaches
/// everything.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    field: &VelocityField,
    backbone: &BoundParams,
    adapter: &BoundParams,
    schedule: &NoiseSchedule,
    x1: &Tensor,
    cond: &[usize],
    noise: &RngStream,
    window_start: usize,
) -> Result<Trajectory> {
    let frozen = adapter.detached();
    rollout_split(field, backbone, adapter, &frozen, schedule, x1, cond, noise, window_start)
}

/// [`rollout`] with explicit parameters for the steps before the window.
#[allow(clippy::too_many_arguments)]
pub fn rollout_split(
    field: &VelocityField,
    backbone: &BoundParams,
    adapter: &BoundParams,
    frozen: &BoundParams,
    schedule: &NoiseSchedule,
    x1: &Tensor,
    cond: &[usize],
    noise: &RngStream,
    window_start: usize,
) -> Result<Trajectory> {
    let n = schedule.steps();
    if !(1..=n + 1).contains(&window_start) {
        return Err(Error::InvalidArgument(format!(
            "window start {window_start} outside 1..={}",
            n + 1
        )));
    }
    if frozen.leaves().iter().any(DiffTensor::requires_grad) {
        return Err(Error::InvalidArgument("pre-window parameters must not require grad".into()));
    }
    let mut x = DiffTensor::constant(x1.clone());
    let mut records = Vec::with_capacity(n);
    for i in 1..=n {
        let params = if i < window_start { frozen } else { adapter };
        if i == window_start {
            x = x.stop_gradient();
        }
        let sigma = schedule.prediction_sigma(i);
        let v = field.eval_velocity(backbone, Some(params), &x, sigma, cond)?;
        let x0hat = x0_predict(&x, sigma, &v)?;
        if !x0hat.value().all_finite() {
            return Err(Error::NonFinite {
                what: "x0 prediction".into(),
                step: i,
            });
        }
        let next = schedule.next_sigma(i);
        if i < n {
            let eps = DiffTensor::constant(noise.child(i).normal_tensor(x1.shape()));
            x = sampling_step(&x0hat, next, &eps)?;
        }
        records.push(StepRecord {
            step: i,
            sigma,
            x0hat,
        });
    }
    Ok(Trajectory {
        x1: x1.clone(),
        records,
        window_start,
    })
}

/// First tracked step: the earliest matched student step when shaping is on, else `N`.
pub fn grad_window_for(
    horizons: &HorizonSet,
    student: &NoiseSchedule,
    shaping_enabled: bool,
) -> usize {
    if !shaping_enabled || horizons.is_empty() {
        return student.steps();
    }
    match_horizon_pair(student, student, horizons)
        .iter()
        .map(|p| p.student)
        .min()
        .unwrap_or(student.steps())
}
