//! Box constraints over the tuned parameters and the exponential moving
//! average statistic shared by the composer, the memory and the surrogate.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};

/// Guard added to every standard deviation before a z-score division.
pub const Z_EPS: f64 = 1e-8;

/// Default EMA momentum.
pub const DEFAULT_MOMENTUM: f64 = 0.97;

/// Logistic sigmoid, written to stay finite for large negative inputs.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Axis-aligned box `lower <= theta <= upper`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl ParamBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() {
            return Err(Error::InvalidBounds("dimension must be at least 1".into()));
        }
        check_dim(lower.len(), upper.len())?;
        check_finite(&lower, "lower bounds")?;
        check_finite(&upper, "upper bounds")?;
        if let Some(i) = (0..lower.len()).find(|&i| lower[i] >= upper[i]) {
            return Err(Error::InvalidBounds(format!(
                "lower[{i}] = {} is not below upper[{i}] = {}",
                lower[i], upper[i]
            )));
        }
        Ok(Self { lower, upper })
    }

    /// The same interval `[lo, hi]` on every coordinate.
    pub fn uniform(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| u - l)
            .collect()
    }

    pub fn mean_width(&self) -> f64 {
        self.widths().iter().sum::<f64>() / self.dim() as f64
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(t, (l, u))| *l <= *t && *t <= *u)
    }

    /// Returns an error naming the first coordinate outside the box.
    pub fn check_contains(&self, theta: &[f64]) -> Result<()> {
        check_dim(self.dim(), theta.len())?;
        for (i, &value) in theta.iter().enumerate() {
            if !(self.lower[i] <= value && value <= self.upper[i]) {
                return Err(Error::OutOfBounds {
                    index: i,
                    value,
                    lower: self.lower[i],
                    upper: self.upper[i],
                });
            }
        }
        Ok(())
    }

    pub fn clip(&self, theta: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), theta.len())?;
        Ok(theta
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(t, (l, u))| t.max(*l).min(*u))
            .collect())
    }

    /// Affine map of the box onto `[0, 1]^d`. Callers clip first.
    pub fn normalize(&self, theta: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), theta.len())?;
        Ok(theta
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(t, (l, u))| (t - l) / (u - l))
            .collect())
    }

    /// Inverse of [`normalize`](Self::normalize). Inputs outside `[0, 1]` are
    /// clamped before mapping, so the result is always inside the box.
    pub fn denormalize(&self, theta_norm: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), theta_norm.len())?;
        Ok(theta_norm
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(t, (l, u))| {
                let t = t.clamp(0.0, 1.0);
                (l + t * (u - l)).min(*u)
            })
            .collect())
    }
}

/// Exponential moving average of mean and (centred) variance.
///
/// Starts at mean 0 and variance 1; the variance update uses the
/// freshly-updated mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunningEma {
    mean: f64,
    var: f64,
    momentum: f64,
    count: u64,
}

impl RunningEma {
    pub fn new(momentum: f64) -> Self {
        Self::with_state(0.0, 1.0, momentum)
    }

    pub fn with_state(mean: f64, var: f64, momentum: f64) -> Self {
        assert!(
            momentum > 0.0 && momentum < 1.0,
            "EMA momentum must lie in (0, 1), got {momentum}"
        );
        assert!(var >= 0.0, "EMA variance must be non-negative");
        Self {
            mean,
            var,
            momentum,
            count: 0,
        }
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn var(&self) -> f64 {
        self.var
    }

    pub fn std(&self) -> f64 {
        self.var.sqrt()
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn update(&mut self, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite("EMA update value"));
        }
        let m = self.momentum;
        self.mean = m * self.mean + (1.0 - m) * value;
        let dev = value - self.mean;
        self.var = (m * self.var + (1.0 - m) * dev * dev).max(0.0);
        self.count += 1;
        Ok(())
    }

    /// Functional form of [`update`](Self::update).
    pub fn updated(mut self, value: f64) -> Result<Self> {
        self.update(value)?;
        Ok(self)
    }

    pub fn z(&self, value: f64, eps: f64) -> f64 {
        (value - self.mean) / (self.std() + eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn unit_box() -> ParamBounds {
        ParamBounds::new(vec![-1.0, 0.0, 10.0], vec![1.0, 5.0, 20.0]).unwrap()
    }

    #[test]
    fn rejects_bad_boxes() {
        assert!(ParamBounds::new(vec![], vec![]).is_err());
        assert!(ParamBounds::new(vec![0.0], vec![0.0]).is_err());
        assert!(ParamBounds::new(vec![0.0, 1.0], vec![1.0]).is_err());
        assert!(ParamBounds::new(vec![f64::NAN], vec![1.0]).is_err());
    }

    #[test]
    fn clip_cases() {
        let b = unit_box();
        let inside = vec![0.5, 2.0, 15.0];
        assert_eq!(b.clip(&inside).unwrap(), inside);

        let below = vec![-2.0, 2.0, 15.0];
        assert_eq!(b.clip(&below).unwrap()[0], -1.0);

        let above: Vec<f64> = b.upper().iter().map(|u| u + 1.0).collect();
        assert_eq!(b.clip(&above).unwrap(), b.upper());

        assert!(matches!(
            b.clip(&[0.0]),
            Err(Error::DimensionMismatch { expected: 3, got: 1 })
        ));
    }

    #[test]
    fn normalize_corners_and_midpoint() {
        let b = unit_box();
        assert_eq!(b.normalize(b.lower()).unwrap(), vec![0.0; 3]);
        assert_eq!(b.normalize(b.upper()).unwrap(), vec![1.0; 3]);
        assert_eq!(b.normalize(&b.midpoint()).unwrap(), vec![0.5; 3]);
        assert_eq!(b.denormalize(&[0.0; 3]).unwrap(), b.lower());
        assert_eq!(b.denormalize(&[1.0; 3]).unwrap(), b.upper());
    }

    #[test]
    fn denormalize_clamps_out_of_range() {
        let b = unit_box();
        assert_eq!(b.denormalize(&[-0.5, 2.0, 0.5]).unwrap(), vec![-1.0, 5.0, 15.0]);
    }

    #[test]
    fn round_trip_on_random_vectors() {
        let b = unit_box();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let u: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
            let theta = b.denormalize(&u).unwrap();
            // independent recomputation of the affine map
            for i in 0..3 {
                let direct = b.lower()[i] + u[i] * (b.upper()[i] - b.lower()[i]);
                assert_relative_eq!(theta[i], direct, max_relative = 1e-15);
            }
            let back = b.normalize(&theta).unwrap();
            for i in 0..3 {
                assert!((back[i] - u[i]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn ema_single_step() {
        let mut ema = RunningEma::new(0.97);
        ema.update(1.0).unwrap();
        assert_relative_eq!(ema.mean(), 0.03, epsilon = 1e-15);
        assert_eq!(ema.count(), 1);
        assert!(ema.update(f64::NAN).is_err());
        assert_eq!(ema.count(), 1);
    }

    #[test]
    fn ema_constant_stream_converges_monotonically() {
        let c = 2.5;
        let mut ema = RunningEma::new(0.97);
        let mut prev_gap = f64::INFINITY;
        let mut prev_var = f64::INFINITY;
        for _ in 0..300 {
            ema.update(c).unwrap();
            let gap = (ema.mean() - c).abs();
            assert!(gap < prev_gap);
            prev_gap = gap;
            // variance decreases once the mean is past its initial transient
            if ema.count() > 120 {
                assert!(ema.var() <= prev_var);
            }
            prev_var = ema.var();
        }
        assert!((ema.mean() - c).abs() < 1e-3);
        assert!(ema.var() < 1e-3);
    }

    #[test]
    fn ema_weights_match_unrolled_form() {
        // mean_t = (1-m) sum_j m^{t-j} v_j + m^t mean_0: an impulse at step 1
        // contributes (1-m) m^{t-1}.
        let m = 0.97;
        for t in [1usize, 5, 33, 100] {
            let mut ema = RunningEma::new(m);
            ema.update(1.0).unwrap();
            for _ in 1..t {
                ema.update(0.0).unwrap();
            }
            let expected = (1.0 - m) * m.powi(t as i32 - 1);
            assert_relative_eq!(ema.mean(), expected, max_relative = 1e-12);
        }
    }

    #[test]
    fn z_score_cases() {
        let mut ema = RunningEma::new(0.97);
        ema.update(0.4).unwrap();
        assert_eq!(ema.z(ema.mean(), Z_EPS), 0.0);
        let a = 0.3;
        assert_relative_eq!(ema.z(ema.mean() + a, Z_EPS), -ema.z(ema.mean() - a, Z_EPS));

        let flat = RunningEma::with_state(1.0, 0.0, 0.97);
        assert_relative_eq!(flat.z(1.0 + 1e-8, 1e-8), 1.0, max_relative = 1e-7);
    }

    #[test]
    fn ema_concentration_of_mean() {
        // i.i.d. N(0, 1) stream: stddev of the EMA mean across trials stays
        // within 1.2 x sqrt((1-m)/(1+m)).
        let m = 0.97;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trials = 1000;
        let finals: Vec<f64> = (0..trials)
            .map(|_| {
                let mut ema = RunningEma::new(m);
                for _ in 0..300 {
                    ema.update(rng.sample::<f64, _>(StandardNormal)).unwrap();
                }
                ema.mean()
            })
            .collect();
        let mean = finals.iter().sum::<f64>() / trials as f64;
        let sd = (finals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (trials - 1) as f64).sqrt();
        let limit = ((1.0 - m) / (1.0 + m)).sqrt() * 1.2;
        assert!(sd <= limit, "sd {sd} above {limit}");
    }

    proptest! {
        #[test]
        fn clip_is_idempotent(xs in prop::collection::vec(-50.0f64..50.0, 3)) {
            let b = unit_box();
            let once = b.clip(&xs).unwrap();
            prop_assert_eq!(b.clip(&once).unwrap(), once.clone());
            prop_assert!(b.contains(&once));
        }

        #[test]
        fn normalize_round_trip_on_random_boxes(
            lo in prop::collection::vec(-1e3f64..1e3, 4),
            width in prop::collection::vec(1e-3f64..1e3, 4),
            u in prop::collection::vec(0.0f64..=1.0, 4),
        ) {
            let hi: Vec<f64> = lo.iter().zip(&width).map(|(l, w)| l + w).collect();
            let b = ParamBounds::new(lo, hi).unwrap();
            let theta = b.denormalize(&u).unwrap();
            let back = b.denormalize(&b.normalize(&theta).unwrap()).unwrap();
            for (x, y) in theta.iter().zip(&back) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }

        #[test]
        fn ema_mean_stays_in_stream_hull(values in prop::collection::vec(-5.0f64..5.0, 1..200)) {
            // start from the first value so the initial mean is inside the hull
            let mut ema = RunningEma::with_state(values[0], 1.0, 0.97);
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for v in &values {
                ema.update(*v).unwrap();
                prop_assert!(ema.mean() >= lo - 1e-12 && ema.mean() <= hi + 1e-12);
                prop_assert!(ema.var() >= 0.0);
            }
        }
    }
}
