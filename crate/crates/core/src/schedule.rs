//! Time-shifted sigma schedules and sigma-proximity horizon matching.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `s·t / (1 + (s−1)·t)`.
pub fn time_shift(t: f64, shift: f64) -> f64 {
    shift * t / (1.0 + (shift - 1.0) * t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    shift: f64,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// `σ[i] = φ_s(1 − i/N)` for `i = 0..=N`, with the endpoints pinned to 1 and 0.
    pub fn new(steps: usize, shift: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(shift > 0.0 && shift.is_finite()) {
            return Err(Error::InvalidArgument(format!("shift must be positive, got {shift}")));
        }
        let n = steps as f64;
        let mut sigmas: Vec<f64> = (0..=steps)
            .map(|i| time_shift(1.0 - i as f64 / n, shift))
            .collect();
        sigmas[0] = 1.0;
        sigmas[steps] = 0.0;
        Ok(Self {
            steps,
            shift,
            sigmas,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    /// All `N + 1` levels, from 1 down to 0.
    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// Noise level at which the `i`-th x0-prediction is made (`i` in `1..=N`).
    pub fn prediction_sigma(&self, i: usize) -> f64 {
        assert!((1..=self.steps).contains(&i), "prediction index {i} outside 1..={}", self.steps);
        self.sigmas[i - 1]
    }

    /// Level the latent is re-noised to after the `i`-th prediction.
    pub fn next_sigma(&self, i: usize) -> f64 {
        self.sigmas[i]
    }

    /// Nearest prediction index to `target`; ties go to the smaller index.
    ///
    /// The prediction sigmas are strictly decreasing, so the distance to the
    /// target is unimodal along the index and a binary search finds it.
    pub fn match_horizon(&self, target: f64) -> usize {
        // Prediction sigmas are sigmas[0..N]; find the first one below target.
        let preds = &self.sigmas[..self.steps];
        let below = preds.partition_point(|&s| s >= target);
        let candidates = [below, below + 1];
        let mut best = None::<(usize, f64)>;
        for i in candidates {
            if i == 0 || i > self.steps {
                continue;
            }
            let d = (preds[i - 1] - target).abs();
            match best {
                Some((_, bd)) if d >= bd => {}
                _ => best = Some((i, d)),
            }
        }
        best.map_or(1, |(i, _)| i)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonSet {
    targets: Vec<f64>,
    weights: Vec<f64>,
}

impl HorizonSet {
    /// Validates ordering and normalizes the weights to sum to one.
    ///
    /// Targets must lie in `(0, 1)` and strictly decrease; weights must be
    /// positive and strictly increase in the same order.
    pub fn new(targets: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::InvalidArgument("horizon set is empty".into()));
        }
        if targets.len() != weights.len() {
            return Err(Error::InvalidArgument(format!(
                "{} horizon targets but {} weights",
                targets.len(),
                weights.len()
            )));
        }
        if let Some(t) = targets.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(Error::InvalidArgument(format!("horizon target {t} outside (0, 1)")));
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidArgument(format!("horizon weight {w} must be positive")));
        }
        if targets.windows(2).any(|p| p[1] >= p[0]) {
            return Err(Error::InvalidArgument(format!(
                "horizon targets must strictly decrease: {targets:?}"
            )));
        }
        if weights.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::InvalidArgument(format!(
                "horizon weights must strictly increase toward low noise: {weights:?}"
            )));
        }
        let total: f64 = weights.iter().sum();
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self { targets, weights })
    }

    /// Equal weights over the given targets.
    ///
    /// Ablation scheme only; it deliberately skips the increasing-weight rule.
    pub fn uniform(targets: Vec<f64>) -> Result<Self> {
        let base = Self::new(targets.clone(), (1..=targets.len()).map(|i| i as f64).collect())?;
        let m = base.targets.len() as f64;
        Ok(Self {
            weights: vec![1.0 / m; base.targets.len()],
            targets: base.targets,
        })
    }

    /// Targets {0.75, 0.40, 0.15} weighted {0.2, 0.3, 0.5}.
    pub fn standard() -> Self {
        Self::new(vec![0.75, 0.40, 0.15], vec![0.2, 0.3, 0.5]).expect("valid defaults")
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Matched `(student index, teacher index)` for one horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HorizonMatch {
    pub student: usize,
    pub teacher: usize,
}

/// Per-horizon nearest prediction steps in each schedule. Duplicates are kept.
pub fn match_horizon_pair(
    student: &NoiseSchedule,
    teacher: &NoiseSchedule,
    horizons: &HorizonSet,
) -> Vec<HorizonMatch> {
    horizons
        .targets()
        .iter()
        .map(|&t| HorizonMatch {
            student: student.match_horizon(t),
            teacher: teacher.match_horizon(t),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scan(s: &NoiseSchedule, target: f64) -> usize {
        let mut best = 1;
        let mut bd = f64::INFINITY;
        for i in 1..=s.steps() {
            let d = (s.prediction_sigma(i) - target).abs();
            if d < bd {
                best = i;
                bd = d;
            }
        }
        best
    }

    #[test]
    fn five_step_shift_three() {
        let s = NoiseSchedule::new(5, 3.0).unwrap();
        let expected = [1.0, 0.9231, 0.8182, 0.6667, 0.4286, 0.0];
        for (a, e) in s.sigmas().iter().zip(expected) {
            assert!((a - e).abs() < 5e-5, "{a} vs {e}");
        }
    }

    #[test]
    fn shift_one_is_linear() {
        let s = NoiseSchedule::new(7, 1.0).unwrap();
        for (i, v) in s.sigmas().iter().enumerate() {
            assert!((v - (1.0 - i as f64 / 7.0)).abs() < 1e-15);
        }
        assert_eq!(time_shift(0.5, 3.0), 0.75);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(NoiseSchedule::new(0, 3.0).is_err());
        assert!(NoiseSchedule::new(4, 0.0).is_err());
        assert!(NoiseSchedule::new(4, -1.0).is_err());
    }

    #[test]
    fn matching_examples() {
        let s = NoiseSchedule::new(5, 3.0).unwrap();
        assert_eq!(s.match_horizon(0.75), 3);
        assert_eq!(s.match_horizon(0.15), 5);
        assert_eq!(s.match_horizon(s.prediction_sigma(4)), 4);
    }

    #[test]
    fn ties_go_to_the_noisier_step() {
        let s = NoiseSchedule::new(4, 1.0).unwrap();
        // Prediction sigmas 1, 0.75, 0.5, 0.25; 0.625 is equidistant from steps 2 and 3.
        assert_eq!(s.match_horizon(0.625), 2);
        assert_eq!(scan(&s, 0.625), 2);
    }

    #[test]
    fn pair_matching() {
        let student = NoiseSchedule::new(5, 3.0).unwrap();
        let teacher = NoiseSchedule::new(50, 3.0).unwrap();
        let h = HorizonSet::standard();
        let pairs = match_horizon_pair(&student, &teacher, &h);
        let s: Vec<usize> = pairs.iter().map(|p| p.student).collect();
        assert_eq!(s, vec![3, 5, 5]);
        for (p, &t) in pairs.iter().zip(h.targets()) {
            assert_eq!(p.teacher, scan(&teacher, t));
        }
        let same = match_horizon_pair(&student, &student, &h);
        assert!(same.iter().all(|p| p.student == p.teacher));
        let single = HorizonSet::new(vec![0.5], vec![1.0]).unwrap();
        assert_eq!(match_horizon_pair(&student, &teacher, &single).len(), 1);
    }

    #[test]
    fn horizon_validation() {
        assert!(HorizonSet::new(vec![0.4, 0.75], vec![0.2, 0.3]).is_err());
        assert!(HorizonSet::new(vec![0.75, 0.4], vec![0.3, 0.2]).is_err());
        assert!(HorizonSet::new(vec![1.0], vec![1.0]).is_err());
        assert!(HorizonSet::new(vec![0.5], vec![]).is_err());
        let h = HorizonSet::new(vec![0.75, 0.4], vec![1.0, 3.0]).unwrap();
        assert_eq!(h.weights(), &[0.25, 0.75]);
        let u = HorizonSet::uniform(vec![0.75, 0.4, 0.15]).unwrap();
        assert!(u.weights().iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn standard_weights_sum_to_one() {
        let h = HorizonSet::standard();
        assert!((h.weights().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(h.weights(), &[0.2, 0.3, 0.5]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn matches_linear_scan(n in 1usize..=200, shift in 0.2f64..6.0, target in 0.0001f64..0.9999) {
                let s = NoiseSchedule::new(n, shift).unwrap();
                let i = s.match_horizon(target);
                prop_assert!((1..=n).contains(&i));
                prop_assert_eq!(i, scan(&s, target));
            }

            #[test]
            fn schedule_strictly_decreasing(n in 1usize..=300, shift in 0.05f64..20.0) {
                let s = NoiseSchedule::new(n, shift).unwrap();
                prop_assert_eq!(s.sigmas()[0], 1.0);
                prop_assert_eq!(s.sigmas()[n], 0.0);
                prop_assert!(s.sigmas().windows(2).all(|w| w[1] < w[0]));
            }

            #[test]
            fn refinement_along_doublings(n in 1usize..=25, shift in 0.5f64..5.0, target in 0.01f64..0.99) {
                let mut prev = f64::INFINITY;
                for k in 0..4 {
                    let s = NoiseSchedule::new(n << k, shift).unwrap();
                    let d = (s.prediction_sigma(s.match_horizon(target)) - target).abs();
                    prop_assert!(d <= prev + 1e-15, "n={} d={} prev={}", n << k, d, prev);
                    prev = d;
                }
            }
        }
    }
}
