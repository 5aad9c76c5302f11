//! Synthetic non-stationary benchmark domains.
//!
//! Every unspecified constant (targets, centers, weights, mixing matrices) is
//! drawn once from the domain's seeded generator and can be dumped with
//! [`ExperimentDomain::constants`]. Per-step randomness (context noise,
//! metric noise, fresh draws) comes from streams keyed by `(seed, t)`, so a
//! step's observation never depends on how many steps were taken before it.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::composer::{MetricSpec, Metrics};
use crate::error::{check_dim, Error, Result};
use crate::param_space::ParamBounds;
use crate::seeding::{self, label, SimRng};

/// Fraction of the typical loss used as metric noise standard deviation.
pub const DEFAULT_NOISE_FRACTION: f64 = 0.05;

pub const SCENARIOS: [&str; 10] = [
    "1_LLM_Inference",
    "2_AutoML_HPO",
    "3_Robot_ISP_Tuning",
    "4_Wafer_Etching_Drift",
    "5_Switching_LQR",
    "6_Smooth_Quadratic",
    "7_Regime_Switch_Simple",
    "8_Server_Flash_Crowd",
    "9_Real_Trace_Replay",
    "A1_Adversarial_Context",
];

/// The nine non-adversarial scenarios.
pub fn standard_scenarios() -> &'static [&'static str] {
    &SCENARIOS[..9]
}

/// Latent condition at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub t: usize,
    pub mode: usize,
    /// Loss minimizer in physical units (may leave the box).
    pub target: Vec<f64>,
    /// Scenario-specific extras: dataset features, load level, fresh context.
    pub features: Vec<f64>,
}

pub trait ExperimentDomain: Send + Sync {
    fn name(&self) -> &'static str;
    fn seed(&self) -> u64;
    fn bounds(&self) -> &ParamBounds;
    fn context_dim(&self) -> usize;
    fn metric_name(&self) -> &'static str;
    /// Standard deviation of the additive metric noise; zero when noise-free.
    fn noise_sd(&self) -> f64;
    /// No-op for noise-free domains.
    fn set_noise_sd(&mut self, _sd: f64) {}
    /// Whether the tuner should use its wide step scale here.
    fn wide_steps(&self) -> bool {
        false
    }

    fn latent(&self, t: usize, horizon: usize) -> Latent;
    fn context_fn(&self, latent: &Latent) -> Vec<f64>;
    fn true_loss(&self, theta: &[f64], latent: &Latent) -> f64;
    fn oracle_min(&self, latent: &Latent) -> f64;

    /// Maps the true loss to the noise-free metric value.
    fn metric_value(&self, loss: f64) -> f64 {
        loss
    }

    fn constants(&self) -> serde_json::Value;

    fn build_sequence(&self, horizon: usize) -> Vec<Latent> {
        (0..horizon).map(|t| self.latent(t, horizon)).collect()
    }

    fn metric_specs(&self) -> Vec<MetricSpec> {
        vec![MetricSpec::lower(self.metric_name())]
    }

    fn metric_fn(&self, theta: &[f64], latent: &Latent) -> Result<Metrics> {
        self.bounds().check_contains(theta)?;
        let mut value = self.metric_value(self.true_loss(theta, latent));
        let sd = self.noise_sd();
        if sd > 0.0 {
            let mut rng = seeding::stream(self.seed(), &[label("metric-noise"), latent.t as u64]);
            value += sd * rng.sample::<f64, _>(StandardNormal);
        }
        if !value.is_finite() {
            return Err(Error::Environment(format!("{} produced a non-finite metric", self.name())));
        }
        Ok(Metrics::from([(self.metric_name().to_string(), value)]))
    }
}

/// Builds a domain by name (full name, or its leading tag such as `7` or
/// `A1`) with the default noise level.
pub fn make_domain(name: &str, seed: u64) -> Result<Box<dyn ExperimentDomain>> {
    make_domain_with_noise(name, seed, DEFAULT_NOISE_FRACTION)
}

pub fn make_domain_with_noise(name: &str, seed: u64, noise_fraction: f64) -> Result<Box<dyn ExperimentDomain>> {
    let full = resolve_scenario(name)?;
    let mut rng = seeding::stream(seed, &[label(full), label("constants")]);
    let mut domain: Box<dyn ExperimentDomain> = match full {
        "1_LLM_Inference" => Box::new(LlmInference::new(seed, &mut rng)),
        "2_AutoML_HPO" => Box::new(AutoMl::new(seed, &mut rng)),
        "3_Robot_ISP_Tuning" => Box::new(RobotIsp::new(seed, &mut rng)),
        "4_Wafer_Etching_Drift" => Box::new(Wafer::new(seed, &mut rng)),
        "5_Switching_LQR" => Box::new(SwitchingLqr::new(seed, &mut rng)),
        "6_Smooth_Quadratic" => Box::new(SmoothQuadratic::new(seed, &mut rng)),
        "7_Regime_Switch_Simple" => Box::new(RegimeSwitch::new(seed, &mut rng)),
        "8_Server_Flash_Crowd" => Box::new(FlashCrowd::new(seed, &mut rng)),
        "9_Real_Trace_Replay" => Box::new(TraceReplay::new(seed, &mut rng)),
        "A1_Adversarial_Context" => Box::new(Adversarial::new(seed)),
        _ => unreachable!("resolved names are exhaustive"),
    };
    if noise_fraction > 0.0 && domain.noise_sd() > 0.0 {
        let scale = loss_scale(domain.as_ref());
        domain.set_noise_sd(noise_fraction * scale);
    } else {
        domain.set_noise_sd(0.0);
    }
    Ok(domain)
}

pub fn resolve_scenario(name: &str) -> Result<&'static str> {
    let lower = name.to_ascii_lowercase();
    SCENARIOS
        .iter()
        .find(|s| {
            let s_lower = s.to_ascii_lowercase();
            s_lower == lower || s_lower.split('_').next() == Some(lower.as_str())
        })
        .copied()
        .ok_or_else(|| Error::UnknownScenario(name.to_string()))
}

/// Mean noise-free metric over 256 uniform parameter draws at the initial
/// latent state.
fn loss_scale(domain: &dyn ExperimentDomain) -> f64 {
    let mut rng = seeding::stream(domain.seed(), &[label("loss-scale")]);
    let latent = domain.latent(0, 100);
    let b = domain.bounds();
    let n = 256;
    let total: f64 = (0..n)
        .map(|_| {
            let theta: Vec<f64> = b
                .lower()
                .iter()
                .zip(b.upper())
                .map(|(&l, &u)| rng.random_range(l..=u))
                .collect();
            domain.metric_value(domain.true_loss(&theta, &latent)).abs()
        })
        .sum();
    total / n as f64
}

/// One step's outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub metrics: Metrics,
    pub true_loss: f64,
    pub oracle_min: f64,
    pub regret: f64,
}

/// A domain advanced through a fixed horizon.
pub struct Environment {
    domain: Box<dyn ExperimentDomain>,
    horizon: usize,
    t: usize,
    latent: Latent,
}

impl Environment {
    pub fn new(domain: Box<dyn ExperimentDomain>, horizon: usize) -> Self {
        let latent = domain.latent(0, horizon);
        Self {
            domain,
            horizon,
            t: 0,
            latent,
        }
    }

    pub fn domain(&self) -> &dyn ExperimentDomain {
        self.domain.as_ref()
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn latent(&self) -> &Latent {
        &self.latent
    }

    /// Context observed before deploying at the current step.
    pub fn context(&self) -> Vec<f64> {
        self.domain.context_fn(&self.latent)
    }

    pub fn oracle_min(&self) -> f64 {
        self.domain.oracle_min(&self.latent)
    }

    /// Evaluates `theta` at the current step and advances the latent state.
    pub fn step(&mut self, theta: &[f64]) -> Result<StepOutcome> {
        let metrics = self.domain.metric_fn(theta, &self.latent)?;
        let true_loss = self.domain.true_loss(theta, &self.latent);
        let oracle_min = self.domain.oracle_min(&self.latent);
        self.t += 1;
        self.latent = self.domain.latent(self.t, self.horizon);
        Ok(StepOutcome {
            metrics,
            true_loss,
            oracle_min,
            regret: (true_loss - oracle_min).max(0.0),
        })
    }
}

/// Functional form: returns the outcome and the next step's context.
pub fn step_env(env: &mut Environment, theta: &[f64]) -> Result<(StepOutcome, Vec<f64>)> {
    let out = env.step(theta)?;
    Ok((out, env.context()))
}

fn gaussian(rng: &mut SimRng) -> f64 {
    rng.sample(StandardNormal)
}

fn uniform_vec(rng: &mut SimRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// `scale * sum_i w_i ((theta_i - target_i) / s_i)^2`.
#[derive(Debug, Clone, Serialize)]
struct WeightedQuadratic {
    scale: f64,
    weights: Vec<f64>,
    spans: Vec<f64>,
}

impl WeightedQuadratic {
    fn plain(d: usize, scale: f64) -> Self {
        Self {
            scale,
            weights: vec![1.0; d],
            spans: vec![1.0; d],
        }
    }

    fn eval(&self, theta: &[f64], target: &[f64]) -> f64 {
        self.scale
            * theta
                .iter()
                .zip(target)
                .zip(self.weights.iter().zip(&self.spans))
                .map(|((x, t), (w, s))| w * ((x - t) / s).powi(2))
                .sum::<f64>()
    }

    /// The loss is separable, so the box minimum sits at the projection.
    fn boxed_min(&self, bounds: &ParamBounds, target: &[f64]) -> f64 {
        let proj = bounds.clip(target).expect("target has the box dimension");
        self.eval(&proj, target)
    }
}

/// Normalized-space point mapped into the box.
fn physical(bounds: &ParamBounds, unit: &[f64]) -> Vec<f64> {
    bounds.denormalize(unit).expect("unit point has the box dimension")
}

macro_rules! noise_field {
    () => {
        fn noise_sd(&self) -> f64 {
            self.noise
        }
        fn set_noise_sd(&mut self, sd: f64) {
            self.noise = sd;
        }
        fn seed(&self) -> u64 {
            self.seed
        }
    };
}

// ---------------------------------------------------------------- scenario 1

struct LlmInference {
    seed: u64,
    noise: f64,
    bounds: ParamBounds,
    centers: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    loss: WeightedQuadratic,
}

impl LlmInference {
    const DC: usize = 768;
    const CONTEXT_NOISE: f64 = 0.1;

    fn new(seed: u64, rng: &mut SimRng) -> Self {
        // temperature, top-k, batch size, draft length
        let bounds = ParamBounds::new(vec![0.0, 1.0, 1.0, 1.0], vec![2.0, 100.0, 64.0, 16.0]).unwrap();
        let centers = (0..3)
            .map(|_| {
                let v: Vec<f64> = (0..Self::DC).map(|_| gaussian(rng)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        let targets = (0..3)
            .map(|_| physical(&bounds, &uniform_vec(rng, 4, 0.15, 0.85)))
            .collect();
        let loss = WeightedQuadratic {
            scale: 0.25,
            weights: vec![1.0; 4],
            spans: bounds.widths(),
        };
        Self {
            seed,
            noise: 1.0,
            bounds,
            centers,
            targets,
            loss,
        }
    }

    /// Clusters 0, 1, 2 over the first three quarters, then 0 again.
    fn cluster(t: usize, horizon: usize) -> usize {
        match (4 * t) / horizon.max(1) {
            0 => 0,
            1 => 1,
            2 => 2,
            _ => 0,
        }
    }
}

impl ExperimentDomain for LlmInference {
    noise_field!();

    fn name(&self) -> &'static str {
        "1_LLM_Inference"
    }

    fn bounds(&self) -> &ParamBounds {
        &self.bounds
    }

    fn context_dim(&self) -> usize {
        Self::DC
    }

    fn metric_name(&self) -> &'static str {
        "neg_reward"
    }

    fn latent(&self, t: usize, horizon: usize) -> Latent {
        let mode = Self::cluster(t, horizon);
        Latent {
            t,
            mode,
            target: self.targets[mode].clone(),
            features: Vec::new(),
        }
    }

    fn context_fn(&self, latent: &Latent) -> Vec<f64> {
        let mut rng = seeding::stream(self.seed, &[label("context"), latent.t as u64]);
        let sd = Self::CONTEXT_NOISE / (Self::DC as f64).sqrt();
        self.centers[latent.mode]
            .iter()
            .map(|c| c + sd * gaussian(&mut rng))
            .collect()
    }

    fn true_loss(&self, theta: &[f64], latent: &Latent) -> f64 {
        self.loss.eval(theta, &latent.target)
    }

    fn oracle_min(&self, latent: &Latent) -> f64 {
        self.loss.boxed_min(&self.bounds, &latent.target)
    }

    fn constants(&self) -> serde_json::Value {
        json!({
            "bounds": self.bounds,
            "cluster_centers": self.centers,
            "cluster_targets": self.targets,
            "loss": self.loss,
            "context_noise_norm": Self::CONTEXT_NOISE,
            "noise_sd": self.noise,
        })
    }
}

// ---------------------------------------------------------------- scenario 2

struct AutoMl {
    seed: u64,
    noise: f64,
    bounds: ParamBounds,
    mix: Vec<Vec<f64>>,
    offset: Vec<f64>,
}

impl AutoMl {
    const D: usize = 6;
    const DC: usize = 10;
    const BLOCK: usize = 100;

    fn new(seed: u64, rng: &mut SimRng) -> Self {
        let sd = 1.0 / (Self::DC as f64).sqrt();
        let mix = (0..Self::D)
            .map(|_| (0..Self::DC).map(|_| sd * gaussian(rng)).collect())
            .collect();
        let offset = (0..Self::D).map(|_| 0.5 * gaussian(rng)).collect();
        Self {
            seed,
            noise: 1.0,
            bounds: ParamBounds::uniform(Self::D, 0.0, 1.0).unwrap(),
            mix,
            offset,
        }
    }

    fn features(&self, block: usize) -> Vec<f64> {
        let mut rng = seeding::stream(self.seed, &[label("dataset"), block as u64]);
        (0..Self::DC).map(|_| gaussian(&mut rng)).collect()
    }

    /// sigmoid(A f + b): always strictly inside the unit box.
    fn optimum(&self, features: &[f64]) -> Vec<f64> {
        self.mix
            .iter()
            .zip(&self.offset)
            .map(|(row, b)| {
                let z = b + row.iter().zip(features).map(|(a, f)| a * f).sum::<f64>();
                1.0 / (1.0 + (-z).exp())
            })
            .collect()
    }
}

/// Rosenbrock valley shifted so that `o` is a global minimizer with value 0.
pub fn shifted_rosenbrock(theta: &[f64], o: &[f64]) -> f64 {
    (0..theta.len() - 1)
        .map(|i| {
            let valley = (theta[i + 1] - o[i + 1]) - (theta[i] * theta[i] - o[i] * o[i]);
            100.0 * valley * valley + (theta[i] - o[i]).powi(2)
        })
        .sum()
}

impl ExperimentDomain for AutoMl {
    noise_field!();

    fn name(&self) -> &'static str {
        "2_AutoML_HPO"
    }

    fn bounds(&self) -> &ParamBounds {
        &self.bounds
    }

    fn context_dim(&self) -> usize {
        Self::DC
    }

    fn metric_name(&self) -> &'static str {
        "val_err"
    }

    fn latent(&self, t: usize, _horizon: usize) -> Latent {
        let block = t / Self::BLOCK;
        let features = self.features(block);
        Latent {
            t,
            mode: block,
            target: self.optimum(&features),
            features,
        }
    }

    fn context_fn(&self, latent: &Latent) -> Vec<f64> {
        latent.features.clone()
    }

    fn true_loss(&self, theta: &[f64], latent: &Latent) -> f64 {
        shifted_rosenbrock(theta, &latent.target)
    }

    fn oracle_min(&self, _latent: &Latent) -> f64 {
        0.0
    }

    fn constants(&self) -> serde_json::Value {
        json!({
            "bounds": self.bounds,
            "feature_map": self.mix,
            "feature_offset": self.offset,
            "redraw_every": Self::BLOCK,
            "noise_sd": self.noise,
        })
    }
}

// ---------------------------------------------------------------- scenario 3

struct RobotIsp {
    seed: u64,
    noise: f64,
    bounds: ParamBounds,
    /// day, tunnel, fog, night
    targets: Vec<Vec<f64>>,
    context_means: Vec<Vec<f64>>,
    loss: WeightedQuadratic,
}

impl RobotIsp {
    const D: usize = 8;
    const DC: usize = 4;
    const CONTEXT_NOISE: f64 = 0.05;
    const SEGMENTS: [usize; 5] = [0, 1, 0, 2, 3];
    const MODE_NAMES: [&'static str; 4] = ["day", "tunnel", "fog", "night"];

    fn new(seed: u64, rng: &mut SimRng) -> Self {
        let targets = (0..4).map(|_| uniform_vec(rng, Self::D, 0.1, 0.9)).collect();
        let context_means = (0..4).map(|_| uniform_vec(rng, Self::DC, 0.0, 1.0)).collect();
        let loss = WeightedQuadratic {
            scale: 1.0,
            weights: uniform_vec(rng, Self::D, 0.5, 1.5),
            spans: vec![1.0; Self::D],
        };
        Self {
            seed,
            noise: 1.0,
            bounds: ParamBounds::uniform(Self::D, 0.0, 1.0).unwrap(),
            targets,
            context_means,
            loss,
        }
    }
}

impl ExperimentDomain for RobotIsp {
    noise_field!();

    fn name(&self) -> &'static str {
        "3_Robot_ISP_Tuning"
    }

    fn bounds(&self) -> &ParamBounds {
        &self.bounds
    }

    fn context_dim(&self) -> usize {
        Self::DC
    }

    fn metric_name(&self) -> &'static str {
        "image_quality_loss"
    }

    fn wide_steps(&self) -> bool {
        true
    }

    fn latent(&self, t: usize, horizon: usize) -> Latent {
        let segment = ((5 * t) / horizon.max(1)).min(4);
        let mode = Self::SEGMENTS[segment];
        Latent {
            t,
            mode,
            target: self.targets[mode].clone(),
            features: Vec::new(),
        }
    }

    fn context_fn(&self, latent: &Latent) -> Vec<f64> {
        let mut rng = seeding::stream(self.seed, &[label("context"), latent.t as u64]);
        self.context_means[latent.mode]
            .iter()
            .map(|m| m + Self::CONTEXT_NOISE * gaussian(&mut rng))
            .collect()
    }

    fn true_loss(&self, theta: &[f64], latent: &Latent) -> f64 {
        self.loss.eval(theta, &latent.target)
    }

    fn oracle_min(&self, latent: &Latent) -> f64 {
        self.loss.boxed_min(&self.bounds, &latent.target)
    }

    fn constants(&self) -> serde_json::Value {
        json!({
            "bounds": self.bounds,
            "modes": Self::MODE_NAMES,
            "segments": Self::SEGMENTS,
            "mode_targets": self.targets,
            "context_means": self.context_means,
            "context_noise": Self::CONTEXT_NOISE,
            "loss": self.loss,
            "noise_sd": self.noise,
        })
    }
}

// ---------------------------------------------------------------- scenario 4

struct Wafer {
    seed: u64,
    noise: f64,
    bounds: ParamBounds,
    start: Vec<f64>,
    drift: Vec<f64>,
    loss: WeightedQuadratic,
}

impl Wafer {
    fn new(seed: u64, rng: &mut SimRng) -> Self {
        // pressure (mTorr), RF power (W), gas flow (sccm), chuck temperature (C), etch time (s)
        let bounds = ParamBounds::new(
            vec![10.0, 100.0, 10.0, 20.0, 10.0],
            vec![100.0, 1000.0, 200.0, 80.0, 120.0],
        )
        .unwrap();
        let start = uniform_vec(rng, 5, 0.25, 0.55);
        // pressure and power drift the most
        let drift = (0..5)
            .map(|i| {
                let mag: f64 = if i < 2 { rng.random_range(0.2..0.35) } else { rng.random_range(0.0..0.15) };
                if rng.random::<bool>() { mag } else { -mag.min(0.2) }
            })
            .collect();
        let loss = WeightedQuadratic {
            scale: 1.0,
            weights: vec![1.0; 5],
            spans: bounds.widths(),
        };
        Self {
            seed,
            noise: 1.0,
            bounds,
            start,
            drift,
            loss,
        }
    }

    pub fn wear(t: usize, horizon: usize) -> f64 {
        (t as f64 / horizon.max(1) as f64).min(1.0)
    }
}

impl ExperimentDomain for Wafer {
    noise_field!();

    fn name(&self) -> &'static str {
        "4_Wafer_Etching_Drift"
    }

    fn bounds(&self) -> &ParamBounds {
        &self.bounds
    }

    fn context_dim(&self) -> usize {
        1
    }

    fn metric_name(&self) -> &'static str {
        "bias"
    }

    fn latent(&self, t: usize, horizon: usize) -> Latent {
        let wear = Self::wear(t, horizon);
        let unit: Vec<f64> = self.start.iter().zip(&self.drift).map(|(s, d)| s + wear * d).collect();
        Latent {
            t,
            mode: 0,
            target: physical(&self.bounds, &unit),
            features: vec![wear],
        }
    }

    fn context_fn(&self, latent: &Latent) -> Vec<f64> {
        latent.features.clone()
    }

    fn true_loss(&self, theta: &[f64], latent: &Latent) -> f64 {
        self.loss.eval(theta, &latent.target)
    }

    fn oracle_min(&self, latent: &Latent) -> f64 {
        self.loss.boxed_min(&self.bounds, &latent.target)
    }

    fn constants(&self) -> serde_json::Value {
        json!({
            "bounds": self.bounds,
            "unit_target_at_zero_wear": self.start,
            "unit_drift_per_unit_wear": self.drift,
            "loss": self.loss,
            "noise_sd": self.noise,
        })
    }
}

// ---------------------------------------------------------------- scenario 5

struct SwitchingLqr {
    seed: u64,
    bounds: ParamBounds,
    targets: Vec<Vec<f64>>,
    losses: Vec<WeightedQuadratic>,
}

impl SwitchingLqr {
    const D: usize = 6;
    const PERIOD: usize = 100;

    fn new(seed: u64, rng: &mut SimRng) -> Self {
        let targets = (0..2).map(|_| uniform_vec(rng, Self::D, -3.0, 3.0)).collect();
        let losses = (0..2)
            .map(|_| WeightedQuadratic {
                scale: 1.0 / Self::D as f64,
                weights: uniform_vec(rng, Self::D, 0.5, 2.0),
                spans: vec![1.0; Self::D],
            })
            .collect();
        Self {
            seed,
            bounds: ParamBounds::uniform(Self::D, -5.0, 5.0).unwrap(),
            targets,
            losses,
        }
    }

    fn mode(t: usize) -> usize {
        (t / Self::PERIOD) % 2
    }
}

impl ExperimentDomain for SwitchingLqr {
    fn name(&self) -> &'static str {
        "5_Switching_LQR"
    }

    fn seed(&self) -> u64 {
        self.seed
    }

    fn noise_sd(&self) -> f64 {
        0.0
    }

    fn bounds(&self) -> &ParamBounds {
        &self.bounds
    }

    fn context_dim(&self) -> usize {
        1
    }

    fn metric_name(&self) -> &'static str {
        "cost"
    }

    fn latent(&self, t: usize, _horizon: usize) -> Latent {
        let mode = Self::mode(t);
        Latent {
            t,
            mode,
            target: self.targets[mode].clone(),
            features: Vec::new(),
        }
    }

    fn context_fn(&self, latent: &Latent) -> Vec<f64> {
        vec![latent.mode as f64]
    }

    fn true_loss(&self, theta: &[f64], latent: &Latent) -> f64 {
        self.losses[latent.mode].eval(theta, &latent.target)
    }

    fn oracle_min(&self, latent: &Latent) -> f64 {
        self.losses[latent.mode].boxed_min(&self.bounds, &latent.target)
    }

    fn constants(&self) -> serde_json::Value {
        json!({
            "bounds": self.bounds,
            "mode_targets": self.targets,
            "mode_losses": self.losses,
            "period": Self::PERIOD,
        })
    }
}

// ---------------------------------------------------------------- scenario 6

struct SmoothQuadratic {
    seed: u64,
    bounds: ParamBounds,
    w: Vec<Vec<f64>>,
    loss: WeightedQuadratic,
}

impl SmoothQuadratic {
    const D: usize = 5;
    const DC: usize = 3;

    fn new(seed: u64, rng: &mut SimRng) -> Self {
        let w = (0..Self::D)
            .map(|_| (0..Self::DC).map(|_| 0.4 * gaussian(rng)).collect())
            .collect();
        Self {
            seed,
            bounds: ParamBounds::uniform(Self::D, -2.0, 2.0).unwrap(),
            w,
            loss: WeightedQuadratic::plain(Self::D, 1.0),
        }
    }
}

impl ExperimentDomain for SmoothQuadratic {
    fn name(&self) -> &'static str {
        "6_Smooth_Quadratic"
    }

    fn seed(&self) -> u64 {
        self.seed
    }

    fn noise_sd(&self) -> f64 {
        0.0
    }

    fn bounds(&self) -> &ParamBounds {
        &self.bounds
    }

    fn context_dim(&self) -> usize {
        Self::DC
    }

    fn metric_name(&self) -> &'static str {
        "mse"
    }

    fn latent(&self, t: usize, _horizon: usize) -> Latent {
        let mut rng = seeding::stream(self.seed, &[label("context"), t as u64]);
        let c: Vec<f64> = (0..Self::DC).map(|_| gaussian(&mut rng)).collect();
        let target = self
            .w
            .iter()
            .map(|row| row.iter().zip(&c).map(|(a, b)| a * b).sum())
            .collect();
        Latent {
            t,
            mode: 0,
            target,
            features: c,
        }
    }

    fn context_fn(&self, latent: &Latent) -> Vec<f64> {
        latent.features.clone()
    }

    fn true_loss(&self, theta: &[f64], latent: &Latent) -> f64 {
        self.loss.eval(theta, &latent.target)
    }

    fn oracle_min(&self, latent: &Latent) -> f64 {
        self.loss.boxed_min(&self.bounds, &latent.target)
    }

    fn constants(&self) -> serde_json::Value {
        json!({ "bounds": self.bounds, "w": self.w })
    }
}

// ---------------------------------------------------------------- scenario 7

struct RegimeSwitch {
    seed: u64,
    noise: f64,
    bounds: ParamBounds,
    prototypes: Vec<Vec<f64>>,
    categories: [usize; 2],
    loss: WeightedQuadratic,
}

impl RegimeSwitch {
    const D: usize = 5;

    fn new(seed: u64, rng: &mut SimRng) -> Self {
        let prototypes = (0..2).map(|_| uniform_vec(rng, Self::D, -1.5, 1.5)).collect();
        let first = rng.random_range(0..3);
        let second = (first + rng.random_range(1..3)) % 3;
        Self {
            seed,
            noise: 1.0,
            bounds: ParamBounds::uniform(Self::D, -2.0, 2.0).unwrap(),
            prototypes,
            categories: [first, second],
            loss: WeightedQuadratic::plain(Self::D, 1.0),
        }
    }
}

impl ExperimentDomain for RegimeSwitch {
    noise_field!();

    fn name(&self) -> &'static str {
        "7_Regime_Switch_Simple"
    }

    fn bounds(&self) -> &ParamBounds {
        &self.bounds
    }

    fn context_dim(&self) -> usize {
        4
    }

    fn metric_name(&self) -> &'static str {
        "err"
    }

    fn latent(&self, t: usize, horizon: usize) -> Latent {
        let mode = usize::from(2 * t >= horizon);
        Latent {
            t,
            mode,
            target: self.prototypes[mode].clone(),
            features: Vec::new(),
        }
    }

    fn context_fn(&self, latent: &Latent) -> Vec<f64> {
        let mut c = vec![0.0; 4];
        c[self.categories[latent.mode]] = 1.0;
        c[3] = latent.mode as f64;
        c
    }

    fn true_loss(&self, theta: &[f64], latent: &Latent) -> f64 {
        self.loss.eval(theta, &latent.target)
    }

    fn oracle_min(&self, latent: &Latent) -> f64 {
        self.loss.boxed_min(&self.bounds, &latent.target)
    }

    fn constants(&self) -> serde_json::Value {
        json!({
            "bounds": self.bounds,
            "prototypes": self.prototypes,
            "regime_categories": self.categories,
            "noise_sd": self.noise,
        })
    }
}

// ---------------------------------------------------------------- scenario 8

struct FlashCrowd {
    seed: u64,
    noise: f64,
    bounds: ParamBounds,
    /// normal, panic
    targets: Vec<Vec<f64>>,
    loss: WeightedQuadratic,
}

impl FlashCrowd {
    const D: usize = 5;
    const PANIC_STARTS: [f64; 2] = [0.2, 0.7];
    const PANIC_LEN: f64 = 0.1;
    const PANIC_LOAD: f64 = 0.8;

    fn new(seed: u64, rng: &mut SimRng) -> Self {
        let targets = (0..2).map(|_| uniform_vec(rng, Self::D, 0.1, 0.9)).collect();
        Self {
            seed,
            noise: 1.0,
            bounds: ParamBounds::uniform(Self::D, 0.0, 1.0).unwrap(),
            targets,
            loss: WeightedQuadratic::plain(Self::D, 2.0),
        }
    }

    /// Panic windows as integer step ranges.
    fn panic_windows(horizon: usize) -> [(usize, usize); 2] {
        let h = horizon.max(1) as f64;
        let len = (Self::PANIC_LEN * h).round() as usize;
        Self::PANIC_STARTS.map(|s| {
            let start = (s * h).round() as usize;
            (start, start + len)
        })
    }

    fn in_panic(t: usize, horizon: usize) -> bool {
        Self::panic_windows(horizon).iter().any(|&(a, b)| t >= a && t < b)
    }

    fn load(t: usize, horizon: usize) -> f64 {
        let period = (horizon.max(2) as f64) / 2.0;
        let base = 0.5 + 0.3 * (2.0 * std::f64::consts::PI * t as f64 / period).sin();
        if Self::in_panic(t, horizon) {
            base + Self::PANIC_LOAD
        } else {
            base
        }
    }
}

impl ExperimentDomain for FlashCrowd {
    noise_field!();

    fn name(&self) -> &'static str {
        "8_Server_Flash_Crowd"
    }

    fn bounds(&self) -> &ParamBounds {
        &self.bounds
    }

    fn context_dim(&self) -> usize {
        2
    }

    fn metric_name(&self) -> &'static str {
        "latency"
    }

    fn wide_steps(&self) -> bool {
        true
    }

    fn latent(&self, t: usize, horizon: usize) -> Latent {
        let mode = usize::from(Self::in_panic(t, horizon));
        Latent {
            t,
            mode,
            target: self.targets[mode].clone(),
            features: vec![Self::load(t, horizon)],
        }
    }

    fn context_fn(&self, latent: &Latent) -> Vec<f64> {
        vec![latent.features[0], latent.mode as f64]
    }

    fn true_loss(&self, theta: &[f64], latent: &Latent) -> f64 {
        self.loss.eval(theta, &latent.target)
    }

    fn oracle_min(&self, latent: &Latent) -> f64 {
        self.loss.boxed_min(&self.bounds, &latent.target)
    }

    fn constants(&self) -> serde_json::Value {
        json!({
            "bounds": self.bounds,
            "normal_target": self.targets[0],
            "panic_target": self.targets[1],
            "panic_starts": Self::PANIC_STARTS,
            "panic_length": Self::PANIC_LEN,
            "noise_sd": self.noise,
        })
    }
}

// ---------------------------------------------------------------- scenario 9

struct TraceReplay {
    seed: u64,
    noise: f64,
    bounds: ParamBounds,
    trace: Vec<Vec<f64>>,
    context_noise: Vec<Vec<f64>>,
    projection: Vec<Vec<f64>>,
    loss: WeightedQuadratic,
}

impl TraceReplay {
    const D: usize = 5;
    const DC: usize = 3;
    const LEN: usize = 2000;

    fn new(seed: u64, rng: &mut SimRng) -> Self {
        let phases: Vec<(f64, f64)> = (0..Self::D)
            .map(|_| (rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..std::f64::consts::TAU)))
            .collect();
        let mut walk = vec![0.0; Self::D];
        let trace = (0..Self::LEN)
            .map(|t| {
                let tt = t as f64;
                (0..Self::D)
                    .map(|i| {
                        walk[i] = 0.95 * walk[i] + 0.02 * gaussian(rng);
                        let (a, b) = phases[i];
                        0.5 + 0.15 * (std::f64::consts::TAU * tt / 200.0 + a).sin()
                            + 0.1 * (std::f64::consts::TAU * tt / 50.0 + b).sin()
                            + walk[i]
                    })
                    .collect()
            })
            .collect();
        let psd = 1.0 / (Self::D as f64).sqrt();
        let projection = (0..Self::DC)
            .map(|_| (0..Self::D).map(|_| psd * gaussian(rng)).collect())
            .collect();
        let mut ar = vec![0.0; Self::DC];
        let context_noise = (0..Self::LEN)
            .map(|_| {
                ar.iter_mut()
                    .map(|a| {
                        *a = 0.8 * *a + 0.05 * gaussian(rng);
                        *a
                    })
                    .collect()
            })
            .collect();
        Self {
            seed,
            noise: 1.0,
            bounds: ParamBounds::uniform(Self::D, 0.0, 1.0).unwrap(),
            trace,
            context_noise,
            projection,
            loss: WeightedQuadratic::plain(Self::D, 10.0 / Self::D as f64),
        }
    }
}

impl ExperimentDomain for TraceReplay {
    noise_field!();

    fn name(&self) -> &'static str {
        "9_Real_Trace_Replay"
    }

    fn bounds(&self) -> &ParamBounds {
        &self.bounds
    }

    fn context_dim(&self) -> usize {
        Self::DC
    }

    fn metric_name(&self) -> &'static str {
        "log_latency"
    }

    fn metric_value(&self, loss: f64) -> f64 {
        loss.ln_1p()
    }

    fn latent(&self, t: usize, _horizon: usize) -> Latent {
        let row = t % Self::LEN;
        Latent {
            t,
            mode: row,
            target: self.trace[row].clone(),
            features: self.context_noise[row].clone(),
        }
    }

    fn context_fn(&self, latent: &Latent) -> Vec<f64> {
        self.projection
            .iter()
            .zip(&latent.features)
            .map(|(row, n)| n + row.iter().zip(&latent.target).map(|(p, x)| p * x).sum::<f64>())
            .collect()
    }

    fn true_loss(&self, theta: &[f64], latent: &Latent) -> f64 {
        self.loss.eval(theta, &latent.target)
    }

    fn oracle_min(&self, latent: &Latent) -> f64 {
        self.loss.boxed_min(&self.bounds, &latent.target)
    }

    fn constants(&self) -> serde_json::Value {
        json!({
            "bounds": self.bounds,
            "trace_length": Self::LEN,
            "trace": self.trace,
            "context_projection": self.projection,
            "loss": self.loss,
            "noise_sd": self.noise,
        })
    }
}

// ---------------------------------------------------------------- adversarial

struct Adversarial {
    seed: u64,
    noise: f64,
    bounds: ParamBounds,
    loss: WeightedQuadratic,
}

impl Adversarial {
    const D: usize = 5;

    fn new(seed: u64) -> Self {
        Self {
            seed,
            noise: 1.0,
            bounds: ParamBounds::uniform(Self::D, 0.0, 1.0).unwrap(),
            loss: WeightedQuadratic::plain(Self::D, 1.0),
        }
    }
}

impl ExperimentDomain for Adversarial {
    noise_field!();

    fn name(&self) -> &'static str {
        "A1_Adversarial_Context"
    }

    fn bounds(&self) -> &ParamBounds {
        &self.bounds
    }

    fn context_dim(&self) -> usize {
        Self::D
    }

    fn metric_name(&self) -> &'static str {
        "loss"
    }

    fn latent(&self, t: usize, _horizon: usize) -> Latent {
        let mut rng = seeding::stream(self.seed, &[label("context"), t as u64]);
        Latent {
            t,
            mode: 0,
            target: vec![0.5; Self::D],
            features: (0..Self::D).map(|_| gaussian(&mut rng)).collect(),
        }
    }

    fn context_fn(&self, latent: &Latent) -> Vec<f64> {
        latent.features.clone()
    }

    fn true_loss(&self, theta: &[f64], latent: &Latent) -> f64 {
        self.loss.eval(theta, &latent.target)
    }

    fn oracle_min(&self, _latent: &Latent) -> f64 {
        0.0
    }

    fn constants(&self) -> serde_json::Value {
        json!({ "bounds": self.bounds, "optimum": vec![0.5; Self::D], "noise_sd": self.noise })
    }
}

/// Dimension check used by callers that build parameter vectors by hand.
pub fn check_theta(domain: &dyn ExperimentDomain, theta: &[f64]) -> Result<()> {
    check_dim(domain.bounds().dim(), theta.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn random_theta(b: &ParamBounds, rng: &mut SimRng) -> Vec<f64> {
        b.lower()
            .iter()
            .zip(b.upper())
            .map(|(&l, &u)| rng.random_range(l..=u))
            .collect()
    }

    #[test]
    fn names_resolve() {
        assert_eq!(resolve_scenario("7").unwrap(), "7_Regime_Switch_Simple");
        assert_eq!(resolve_scenario("a1").unwrap(), "A1_Adversarial_Context");
        assert_eq!(resolve_scenario("2_AutoML_HPO").unwrap(), "2_AutoML_HPO");
        assert!(matches!(make_domain("nope", 0), Err(Error::UnknownScenario(_))));
    }

    #[test]
    fn declared_dimensions() {
        let expected = [(4, 768), (6, 10), (8, 4), (5, 1), (6, 1), (5, 3), (5, 4), (5, 2), (5, 3), (5, 5)];
        for (name, (d, dc)) in SCENARIOS.iter().zip(expected) {
            let dom = make_domain(name, 1).unwrap();
            assert_eq!(dom.bounds().dim(), d, "{name}");
            assert_eq!(dom.context_dim(), dc, "{name}");
            let lat = dom.latent(0, 100);
            assert_eq!(dom.context_fn(&lat).len(), dc, "{name}");
        }
    }

    #[test]
    fn adversarial_optimum_is_zero() {
        let dom = make_domain("A1", 3).unwrap();
        let lat = dom.latent(5, 100);
        assert_eq!(dom.true_loss(&[0.5; 5], &lat), 0.0);
    }

    #[test]
    fn smooth_quadratic_minimizer_and_noise_free_metric() {
        let dom = make_domain("6", 4).unwrap();
        assert_eq!(dom.noise_sd(), 0.0);
        let mut checked = 0;
        for t in 0..50 {
            let lat = dom.latent(t, 100);
            if dom.bounds().contains(&lat.target) {
                assert_eq!(dom.true_loss(&lat.target, &lat), 0.0);
                checked += 1;
            }
            let theta = vec![0.3; 5];
            let m = dom.metric_fn(&theta, &lat).unwrap();
            assert_eq!(m["mse"], dom.true_loss(&theta, &lat));
        }
        assert!(checked > 10);
    }

    #[test]
    fn lqr_modes_alternate_every_hundred_steps() {
        let dom = make_domain("5", 5).unwrap();
        assert_eq!(dom.noise_sd(), 0.0);
        assert_eq!(dom.latent(0, 1000).mode, 0);
        assert_eq!(dom.latent(99, 1000).mode, 0);
        assert_eq!(dom.latent(100, 1000).mode, 1);
        assert_eq!(dom.latent(200, 1000).mode, 0);
        assert_ne!(dom.latent(0, 1000).target, dom.latent(100, 1000).target);
    }

    #[test]
    fn wafer_wear_runs_from_zero_to_one() {
        let dom = make_domain("4", 6).unwrap();
        assert_eq!(dom.context_fn(&dom.latent(0, 100)), vec![0.0]);
        assert_eq!(dom.context_fn(&dom.latent(100, 100)), vec![1.0]);
        assert_relative_eq!(dom.context_fn(&dom.latent(50, 100))[0], 0.5);
    }

    #[test]
    fn adversarial_contexts_are_uncorrelated_in_time() {
        let dom = make_domain("A1", 7).unwrap();
        let n = 10_000;
        let xs: Vec<f64> = (0..=n).map(|t| dom.context_fn(&dom.latent(t, n))[0]).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        let cov = (0..n).map(|t| (xs[t] - mean) * (xs[t + 1] - mean)).sum::<f64>() / n as f64;
        assert!((cov / var).abs() < 0.03, "lag-1 correlation {}", cov / var);
    }

    #[test]
    fn regret_is_never_negative() {
        for name in SCENARIOS {
            let dom = make_domain(name, 8).unwrap();
            let mut rng = seeding::stream(8, &[label(name)]);
            let draws = if name.starts_with('1') || name.starts_with('2') { 20_000 } else { 100_000 };
            for _ in 0..draws {
                let t = rng.random_range(0..4000);
                let lat = dom.latent(t, 100);
                let theta = random_theta(dom.bounds(), &mut rng);
                let gap = dom.true_loss(&theta, &lat) - dom.oracle_min(&lat);
                assert!(gap >= -1e-12, "{name} t={t}: {gap}");
            }
        }
    }

    #[test]
    fn boxed_minimum_matches_grid_search() {
        let bounds = ParamBounds::uniform(2, 0.0, 1.0).unwrap();
        let loss = WeightedQuadratic {
            scale: 1.5,
            weights: vec![0.7, 1.3],
            spans: vec![1.0, 2.0],
        };
        let target = [1.4, -0.3];
        let closed = loss.boxed_min(&bounds, &target);
        let n = 400;
        let mut best = f64::INFINITY;
        for i in 0..=n {
            for j in 0..=n {
                let th = [i as f64 / n as f64, j as f64 / n as f64];
                best = best.min(loss.eval(&th, &target));
            }
        }
        assert_relative_eq!(closed, best, max_relative = 1e-9);
        assert!(closed > 0.0);
    }

    #[test]
    fn trace_oracle_is_loss_at_clipped_row() {
        let dom = make_domain("9", 9).unwrap();
        for t in [0, 17, 999, 1999] {
            let lat = dom.latent(t, 100);
            let clipped = dom.bounds().clip(&lat.target).unwrap();
            assert_eq!(dom.oracle_min(&lat), dom.true_loss(&clipped, &lat));
        }
    }

    #[test]
    fn recurring_scenarios_revisit_latents() {
        let horizon = 100;
        let s1 = make_domain("1", 10).unwrap();
        for t in 0..25 {
            assert_eq!(s1.latent(t, horizon).target, s1.latent(t + 75, horizon).target);
        }
        let s5 = make_domain("5", 10).unwrap();
        for t in 0..200 {
            assert_eq!(s5.latent(t, 1000).target, s5.latent(t + 200, 1000).target);
        }
        let s8 = make_domain("8", 10).unwrap();
        for t in 0..50 {
            let (a, b) = (s8.latent(t, horizon), s8.latent(t + 50, horizon));
            assert_eq!(a.mode, b.mode, "t={t}");
            assert_relative_eq!(a.features[0], b.features[0], epsilon = 1e-12);
        }
        assert_eq!(s8.latent(20, horizon).mode, 1);
        assert_eq!(s8.latent(75, horizon).mode, 1);
        assert_eq!(s8.latent(30, horizon).mode, 0);
        let s9 = make_domain("9", 10).unwrap();
        for t in [0, 5, 1234] {
            let (a, b) = (s9.latent(t, horizon), s9.latent(t + 2000, horizon));
            assert_eq!(a.target, b.target);
            assert_eq!(s9.context_fn(&a), s9.context_fn(&b));
        }
    }

    #[test]
    fn robot_isp_segments() {
        let dom = make_domain("3", 11).unwrap();
        let modes: Vec<usize> = (0..5).map(|s| dom.latent(20 * s, 100).mode).collect();
        assert_eq!(modes, vec![0, 1, 0, 2, 3]);
        assert!(dom.wide_steps());
    }

    #[test]
    fn regime_switch_at_half_horizon() {
        let dom = make_domain("7", 12).unwrap();
        let a = dom.context_fn(&dom.latent(49, 100));
        let b = dom.context_fn(&dom.latent(50, 100));
        assert_eq!(a[3], 0.0);
        assert_eq!(b[3], 1.0);
        assert_eq!(a[..3].iter().sum::<f64>(), 1.0);
        assert_ne!(a[..3], b[..3]);
    }

    #[test]
    fn rosenbrock_minimum_at_mapped_point() {
        let dom = make_domain("2", 13).unwrap();
        let lat = dom.latent(0, 100);
        assert!(dom.bounds().contains(&lat.target));
        assert_eq!(dom.true_loss(&lat.target, &lat), 0.0);
        assert_eq!(dom.latent(99, 100).features, lat.features);
        assert_ne!(dom.latent(100, 200).features, lat.features);
    }

    #[test]
    fn steps_are_deterministic_and_checked() {
        let run = || {
            let mut env = Environment::new(make_domain("8", 14).unwrap(), 30);
            let mut out = Vec::new();
            for t in 0..30 {
                let theta = vec![t as f64 / 30.0; 5];
                let (o, c) = step_env(&mut env, &theta).unwrap();
                out.push((o.metrics["latency"].to_bits(), c));
            }
            out
        };
        assert_eq!(run(), run());
        let mut env = Environment::new(make_domain("8", 14).unwrap(), 30);
        assert!(matches!(env.step(&[1.5, 0.0, 0.0, 0.0, 0.0]), Err(Error::OutOfBounds { .. })));
        assert_eq!(env.t(), 0);
    }

    #[test]
    fn noise_level_is_a_fraction_of_loss_scale() {
        let quiet = make_domain_with_noise("A1", 15, 0.0).unwrap();
        assert_eq!(quiet.noise_sd(), 0.0);
        let noisy = make_domain("A1", 15).unwrap();
        // mean of sum of 5 squared U(-0.5, 0.5) is 5/12
        assert_relative_eq!(noisy.noise_sd(), 0.05 * 5.0 / 12.0, max_relative = 0.15);
    }

    #[test]
    fn constants_dump_is_json() {
        for name in SCENARIOS {
            let dom = make_domain(name, 16).unwrap();
            let v = dom.constants();
            assert!(v.get("bounds").is_some(), "{name}");
            serde_json::to_string(&v).unwrap();
        }
    }
}
