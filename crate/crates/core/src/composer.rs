//! Scalarization of a heterogeneous metric map into one error in `[0, 1]`.
//!
//! Every metric is standardized against its own running EMA, squashed with
//! a logistic and flipped when higher is better. The weighted average of the
//! resulting badness scores is the composed error. A second EMA over the
//! composed errors yields the anomaly score used to trigger emergency
//! surrogate updates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param_space::{logistic, RunningEma, DEFAULT_MOMENTUM, Z_EPS};

/// Metric name to observed value. Ordered so composition is deterministic.
pub type Metrics = BTreeMap<String, f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    #[default]
    LowerIsBetter,
    HigherIsBetter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub key: String,
    #[serde(default)]
    pub polarity: Polarity,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

fn default_weight() -> f64 {
    1.0
}

impl MetricSpec {
    pub fn new(key: impl Into<String>, polarity: Polarity, weight: f64) -> Result<Self> {
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "metric weight must be positive, got {weight}"
            )));
        }
        Ok(Self {
            key: key.into(),
            polarity,
            weight,
        })
    }

    pub fn lower(key: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            polarity: Polarity::LowerIsBetter,
            weight: 1.0,
        }
    }

    fn badness(&self, score: f64) -> f64 {
        match self.polarity {
            Polarity::LowerIsBetter => score,
            Polarity::HigherIsBetter => 1.0 - score,
        }
    }
}

/// Result of one composition.
#[derive(Debug, Clone, PartialEq)]
pub struct Composition {
    pub error: f64,
    pub badness: BTreeMap<String, f64>,
    /// z-score of `error` against the error EMA before `error` was folded in.
    pub anomaly: f64,
}

#[derive(Debug, Clone)]
pub struct ErrorComposer {
    specs: BTreeMap<String, MetricSpec>,
    stats: BTreeMap<String, RunningEma>,
    error_ema: RunningEma,
    momentum: f64,
    eps: f64,
}

impl Default for ErrorComposer {
    fn default() -> Self {
        Self::new(DEFAULT_MOMENTUM)
    }
}

impl ErrorComposer {
    pub fn new(momentum: f64) -> Self {
        Self {
            specs: BTreeMap::new(),
            stats: BTreeMap::new(),
            error_ema: RunningEma::new(momentum),
            momentum,
            eps: Z_EPS,
        }
    }

    pub fn with_specs(momentum: f64, specs: impl IntoIterator<Item = MetricSpec>) -> Result<Self> {
        let mut composer = Self::new(momentum);
        for spec in specs {
            composer.register(spec)?;
        }
        Ok(composer)
    }

    pub fn register(&mut self, spec: MetricSpec) -> Result<()> {
        if !(spec.weight > 0.0 && spec.weight.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "metric `{}` has non-positive weight {}",
                spec.key, spec.weight
            )));
        }
        if self.specs.contains_key(&spec.key) {
            return Err(Error::InvalidConfig(format!("duplicate metric key `{}`", spec.key)));
        }
        self.specs.insert(spec.key.clone(), spec);
        Ok(())
    }

    pub fn spec(&self, key: &str) -> Option<&MetricSpec> {
        self.specs.get(key)
    }

    pub fn metric_stats(&self, key: &str) -> Option<&RunningEma> {
        self.stats.get(key)
    }

    pub fn error_ema(&self) -> &RunningEma {
        &self.error_ema
    }

    fn validate(metrics: &Metrics) -> Result<()> {
        if metrics.is_empty() {
            return Err(Error::EmptyMetrics);
        }
        if metrics.values().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("metric value"));
        }
        Ok(())
    }

    /// Updates every metric EMA, then scores each value against the updated
    /// statistics. The error EMA is advanced with the composed error after
    /// the anomaly score has been taken.
    pub fn compose(&mut self, metrics: &Metrics) -> Result<Composition> {
        Self::validate(metrics)?;
        let mut badness = BTreeMap::new();
        let mut weighted = 0.0;
        let mut total_weight = 0.0;
        for (key, &value) in metrics {
            let spec = self
                .specs
                .entry(key.clone())
                .or_insert_with(|| MetricSpec::lower(key.clone()))
                .clone();
            let ema = self
                .stats
                .entry(key.clone())
                .or_insert_with(|| RunningEma::new(self.momentum));
            ema.update(value)?;
            let b = spec.badness(logistic(ema.z(value, self.eps)));
            weighted += spec.weight * b;
            total_weight += spec.weight;
            badness.insert(key.clone(), b);
        }
        let error = (weighted / total_weight).clamp(0.0, 1.0);
        let anomaly = self.anomaly_score(error);
        self.error_ema.update(error)?;
        Ok(Composition {
            error,
            badness,
            anomaly,
        })
    }

    /// z-score of `error` against the current error EMA.
    pub fn anomaly_score(&self, error: f64) -> f64 {
        self.error_ema.z(error, self.eps)
    }

    /// Composed error with every EMA held fixed at its current state. Keys not
    /// seen yet are scored against a fresh EMA and the default spec.
    pub fn evaluate_frozen(&self, metrics: &Metrics) -> Result<f64> {
        Self::validate(metrics)?;
        let fresh = RunningEma::new(self.momentum);
        let mut weighted = 0.0;
        let mut total_weight = 0.0;
        for (key, &value) in metrics {
            let spec = self
                .specs
                .get(key)
                .cloned()
                .unwrap_or_else(|| MetricSpec::lower(key.clone()));
            let ema = self.stats.get(key).unwrap_or(&fresh);
            let b = spec.badness(logistic(ema.z(value, self.eps)));
            weighted += spec.weight * b;
            total_weight += spec.weight;
        }
        Ok((weighted / total_weight).clamp(0.0, 1.0))
    }

    /// Composes on a scratch copy and reports whether the error landed in
    /// `[0, 1]`.
    pub fn composed_error_bound_check(&self, metrics: &Metrics) -> bool {
        let mut scratch = self.clone();
        match scratch.compose(metrics) {
            Ok(c) => (0.0..=1.0).contains(&c.error),
            Err(_) => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn metrics(pairs: &[(&str, f64)]) -> Metrics {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    /// Composer whose EMA for `key` is already at (mean, var).
    fn primed(key: &str, polarity: Polarity, mean: f64, var: f64) -> ErrorComposer {
        let mut c = ErrorComposer::new(0.97);
        c.register(MetricSpec::new(key, polarity, 1.0).unwrap()).unwrap();
        c.stats
            .insert(key.to_string(), RunningEma::with_state(mean, var, 0.97));
        c
    }

    #[test]
    fn value_at_mean_gives_half() {
        // after the update the mean moves to exactly v when v already equals it
        let mut c = primed("loss", Polarity::LowerIsBetter, 0.7, 0.25);
        let out = c.compose(&metrics(&[("loss", 0.7)])).unwrap();
        assert_relative_eq!(out.error, 0.5, epsilon = 1e-15);

        let mut flipped = primed("loss", Polarity::HigherIsBetter, 0.7, 0.25);
        let out = flipped.compose(&metrics(&[("loss", 0.7)])).unwrap();
        assert_relative_eq!(out.badness["loss"], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn flip_symmetry() {
        let lower = primed("m", Polarity::LowerIsBetter, 0.0, 1.0);
        let higher = primed("m", Polarity::HigherIsBetter, 0.0, 1.0);
        for v in [-3.0, -0.2, 0.0, 1.5, 40.0] {
            let a = lower.evaluate_frozen(&metrics(&[("m", v)])).unwrap();
            let b = higher.evaluate_frozen(&metrics(&[("m", v)])).unwrap();
            assert_relative_eq!(a + b, 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn convex_combination_of_badness() {
        // z = logit(0.2) and logit(0.8) around mean 0, unit std
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let mut c = ErrorComposer::new(0.97);
        for key in ["a", "b"] {
            c.stats.insert(key.into(), RunningEma::with_state(0.0, 1.0, 0.97));
        }
        let e = c
            .evaluate_frozen(&metrics(&[("a", logit(0.2)), ("b", logit(0.8))]))
            .unwrap();
        assert_relative_eq!(e, 0.5, epsilon = 1e-7);
    }

    #[test]
    fn frozen_stats_increasing_values_increase_error() {
        let c = primed("loss", Polarity::LowerIsBetter, 1.0, 0.5);
        let mut prev = -1.0;
        for i in 0..50 {
            let e = c.evaluate_frozen(&metrics(&[("loss", 0.5 + 0.05 * i as f64)])).unwrap();
            assert!(e > prev);
            prev = e;
        }
    }

    #[test]
    fn errors_on_empty_or_nan() {
        let mut c = ErrorComposer::default();
        assert!(matches!(c.compose(&Metrics::new()), Err(Error::EmptyMetrics)));
        assert!(matches!(
            c.compose(&metrics(&[("x", f64::NAN)])),
            Err(Error::NonFinite(_))
        ));
        assert!(MetricSpec::new("x", Polarity::LowerIsBetter, 0.0).is_err());
    }

    #[test]
    fn unknown_keys_get_default_spec() {
        let mut c = ErrorComposer::default();
        c.compose(&metrics(&[("latency", 3.0)])).unwrap();
        let spec = c.spec("latency").unwrap();
        assert_eq!(spec.polarity, Polarity::LowerIsBetter);
        assert_eq!(spec.weight, 1.0);
    }

    #[test]
    fn anomaly_on_jump() {
        // replay the error EMA by hand alongside the composer
        let mut c = ErrorComposer::default();
        let mut oracle = RunningEma::new(0.97);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let v = 1.0 + 0.01 * (rng.random::<f64>() - 0.5);
            let out = c.compose(&metrics(&[("loss", v)])).unwrap();
            assert_relative_eq!(out.anomaly, oracle.z(out.error, Z_EPS), epsilon = 1e-9);
            oracle.update(out.error).unwrap();
        }
        let ema = *c.error_ema();
        let spike = ema.mean() + 5.0 * ema.std();
        assert!(c.anomaly_score(spike) >= 3.0);
        assert_relative_eq!(c.anomaly_score(ema.mean()), 0.0, epsilon = 1e-12);
        let a = 0.05;
        assert_relative_eq!(
            c.anomaly_score(ema.mean() + a),
            -c.anomaly_score(ema.mean() - a),
            epsilon = 1e-9
        );
    }

    #[test]
    fn bound_check_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = ErrorComposer::default();
        let random: Metrics = (0..5)
            .map(|i| (format!("m{i}"), rng.random_range(-10.0..10.0)))
            .collect();
        assert!(c.composed_error_bound_check(&random));
        assert!(c.composed_error_bound_check(&metrics(&[("a", 1e9), ("b", -1e9)])));
        let heavy = ErrorComposer::with_specs(
            0.97,
            [MetricSpec::new("w", Polarity::HigherIsBetter, 1e6).unwrap()],
        )
        .unwrap();
        assert!(heavy.composed_error_bound_check(&metrics(&[("w", 4.2)])));
    }

    #[test]
    fn logistic_is_quarter_lipschitz() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100_000 {
            let a: f64 = rng.random_range(-40.0..40.0);
            let b: f64 = a + rng.random_range(-5.0..5.0);
            assert!((logistic(a) - logistic(b)).abs() <= (a - b).abs() / 4.0 + 1e-15);
        }
    }

    #[test]
    fn local_stability_under_one_metric_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..5_000 {
            let n = rng.random_range(1..6);
            let mut c = ErrorComposer::new(0.97);
            let mut m = Metrics::new();
            let mut total_w = 0.0;
            let mut specs = Vec::new();
            for i in 0..n {
                let key = format!("k{i}");
                let pol = if rng.random::<bool>() {
                    Polarity::LowerIsBetter
                } else {
                    Polarity::HigherIsBetter
                };
                let w = rng.random_range(0.1..5.0);
                total_w += w;
                c.register(MetricSpec::new(key.clone(), pol, w).unwrap()).unwrap();
                let var: f64 = rng.random_range(1e-4..4.0);
                c.stats
                    .insert(key.clone(), RunningEma::with_state(rng.random_range(-2.0..2.0), var, 0.97));
                m.insert(key.clone(), rng.random_range(-3.0..3.0));
                specs.push((key, w, var.sqrt()));
            }
            let (key, w, sigma) = &specs[rng.random_range(0..n)];
            let delta: f64 = rng.random_range(-2.0..2.0);
            let base = c.evaluate_frozen(&m).unwrap();
            let mut perturbed = m.clone();
            *perturbed.get_mut(key).unwrap() += delta;
            let moved = c.evaluate_frozen(&perturbed).unwrap();
            let bound = (w / total_w) * delta.abs() / (4.0 * (sigma + Z_EPS));
            assert!((moved - base).abs() <= bound + 1e-12);
        }
    }
}
