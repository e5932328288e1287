//! Central-difference verification of analytic gradients.

use crate::autodiff::DiffTensor;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Floor applied to the relative-error denominator.
pub const REL_ERROR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Probe>,
    pub probes: Vec<Probe>,
}

/// `|a - n| / max(|a|, |n|, 1e-12)`; zero when both vanish.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares analytic gradients of `f` against central differences on
/// `n_probes` coordinates drawn uniformly over all entries of `params`.
///
/// `f` receives one trainable leaf per entry of `params` and must be
/// deterministic.
pub fn grad_check<F>(
    f: F,
    params: &[Tensor],
    eps: f64,
    n_probes: usize,
    rng: &mut RngStream,
) -> Result<GradCheckReport>
where
    F: Fn(&[DiffTensor]) -> Result<DiffTensor>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let total: usize = params.iter().map(Tensor::len).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("no parameters to probe".into()));
    }

    let leaves: Vec<DiffTensor> = params.iter().cloned().map(DiffTensor::param).collect();
    let loss = f(&leaves)?;
    let value = loss.item().ok_or_else(|| Error::InvalidArgument("loss must be a scalar".into()))?;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            what: "loss at unperturbed point".into(),
            step: 0,
        });
    }
    let grads = loss.backward()?;

    let eval_at = |param: usize, index: usize, delta: f64| -> Result<f64> {
        let perturbed: Vec<DiffTensor> = params
            .iter()
            .enumerate()
            .map(|(p, t)| {
                let mut t = t.clone();
                if p == param {
                    t.data_mut()[index] += delta;
                }
                DiffTensor::constant(t)
            })
            .collect();
        let v = f(&perturbed)?.item().unwrap_or(f64::NAN);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: format!("loss with parameter {param} coordinate {index} perturbed"),
                step: index,
            });
        }
        Ok(v)
    };

    let mut probes = Vec::with_capacity(n_probes);
    for _ in 0..n_probes {
        let mut flat = rng.below(total);
        let mut param = 0;
        while flat >= params[param].len() {
            flat -= params[param].len();
            param += 1;
        }
        let index = flat;
        let analytic = grads
            .get(&leaves[param])
            .map_or(0.0, |g| g.data()[index]);
        let numeric = (eval_at(param, index, eps)? - eval_at(param, index, -eps)?) / (2.0 * eps);
        probes.push(Probe {
            param,
            index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }

    let worst = probes
        .iter()
        .copied()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error));
    Ok(GradCheckReport {
        max_rel_error: worst.map_or(0.0, |p| p.rel_error),
        worst,
        probes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_two() {
        let mut rng = RngStream::new(0, "gc");
        let report = grad_check(
            |p| Ok(p[0].square().sum()),
            &[Tensor::scalar(2.0)],
            1e-4,
            1,
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-8, "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut rng = RngStream::new(0, "gc");
        let report = grad_check(
            |p| Ok(p[0].scale(0.0).sum().add_scalar(3.0)),
            &[Tensor::vector(vec![1.0, 2.0, 3.0])],
            1e-4,
            5,
            &mut rng,
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert!(report.probes.iter().all(|p| p.analytic == 0.0 && p.numeric == 0.0));
    }

    #[test]
    fn non_finite_loss_names_coordinate() {
        let mut rng = RngStream::new(0, "gc");
        // sqrt(x) at x = 0 + eps is fine but at x - eps it is NaN.
        let err = grad_check(
            |p| Ok(p[0].sqrt().sum()),
            &[Tensor::vector(vec![0.5e-4])],
            1e-4,
            1,
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 0, .. }), "{err}");
    }

    #[test]
    fn rejects_bad_eps() {
        let mut rng = RngStream::new(0, "gc");
        assert!(grad_check(|p| Ok(p[0].sum()), &[Tensor::scalar(1.0)], 0.0, 1, &mut rng).is_err());
    }
}
