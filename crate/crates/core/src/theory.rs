//! Idealized regime-aware projected gradient descent on quadratic regimes,
//! with the constants and bounds that govern its dynamic regret.

use nalgebra::{DMatrix, DVector};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::param_space::ParamBounds;
use crate::seeding::{self, SimRng};

const VERTEX_ENUM_MAX_DIM: usize = 8;
/// Constant on the squared gradient error in the noisy bound.
pub const GRAD_ERROR_CONST: f64 = 2.0;

/// Quadratic regimes `f_r(w) = ½ (w − θ*_r)ᵀ A_r (w − θ*_r)` on a box, each
/// tagged with a context center.
#[derive(Debug, Clone)]
pub struct RegimeSpec {
    pub bounds: ParamBounds,
    pub mu: f64,
    pub smoothness: f64,
    pub hessians: Vec<DMatrix<f64>>,
    pub optima: Vec<DVector<f64>>,
    pub centers: Vec<DVector<f64>>,
    /// Contexts lie within this radius of their center when `sigma_c` is 0.
    pub radius: f64,
    /// Gaussian context noise; replaces the bounded ball when positive.
    pub sigma_c: f64,
}

fn random_orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    g.qr().q()
}

/// Symmetric matrix with spectrum exactly spanning `[mu, l]`.
pub fn quadratic_with_spectrum<R: Rng + ?Sized>(d: usize, mu: f64, l: f64, rng: &mut R) -> DMatrix<f64> {
    let mut eig: Vec<f64> = (0..d).map(|_| mu + (l - mu) * rng.random::<f64>()).collect();
    eig[0] = mu;
    if d > 1 {
        eig[d - 1] = l;
    }
    let q = random_orthogonal(d, rng);
    let a = &q * DMatrix::from_diagonal(&DVector::from_vec(eig)) * q.transpose();
    (&a + a.transpose()) * 0.5
}

impl RegimeSpec {
    /// A random spec on `[-1, 1]^d` with `R` regimes, spectrum `[mu, l]` and
    /// well separated centers in `context_dim` dimensions.
    pub fn random<R: Rng + ?Sized>(
        regimes: usize,
        dim: usize,
        mu: f64,
        l: f64,
        context_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if regimes == 0 || dim == 0 || context_dim == 0 {
            return Err(Error::InvalidConfig("spec needs regimes, dims and contexts".into()));
        }
        if !(mu > 0.0 && mu <= l && l.is_finite()) {
            return Err(Error::InvalidConfig(format!("need 0 < mu <= L, got mu={mu}, L={l}")));
        }
        let bounds = ParamBounds::uniform(dim, -1.0, 1.0)?;
        let hessians = (0..regimes).map(|_| quadratic_with_spectrum(dim, mu, l, rng)).collect();
        let optima = (0..regimes)
            .map(|_| DVector::from_fn(dim, |_, _| rng.random_range(-0.8..0.8)))
            .collect();
        let centers: Vec<DVector<f64>> = (0..regimes)
            .map(|_| DVector::from_fn(context_dim, |_, _| 5.0 * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let mut spec = Self {
            bounds,
            mu,
            smoothness: l,
            hessians,
            optima,
            centers,
            radius: 0.0,
            sigma_c: 0.0,
        };
        spec.radius = if regimes > 1 { 0.45 * spec.separation() } else { 1.0 };
        Ok(spec)
    }

    pub fn regimes(&self) -> usize {
        self.hessians.len()
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    /// Minimum pairwise center distance; infinite for one regime.
    pub fn separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.centers.len() {
            for j in i + 1..self.centers.len() {
                best = best.min((&self.centers[i] - &self.centers[j]).norm());
            }
        }
        best
    }

    pub fn loss(&self, r: usize, w: &DVector<f64>) -> f64 {
        let e = w - &self.optima[r];
        0.5 * e.dot(&(&self.hessians[r] * &e))
    }

    pub fn grad(&self, r: usize, w: &DVector<f64>) -> DVector<f64> {
        &self.hessians[r] * (w - &self.optima[r])
    }

    pub fn project(&self, w: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(w.len(), |i, _| w[i].clamp(self.bounds.lower()[i], self.bounds.upper()[i]))
    }

    fn vertices(&self) -> impl Iterator<Item = DVector<f64>> + '_ {
        let d = self.dim();
        (0u64..1 << d).map(move |mask| {
            DVector::from_fn(d, |i, _| {
                if mask >> i & 1 == 1 {
                    self.bounds.upper()[i]
                } else {
                    self.bounds.lower()[i]
                }
            })
        })
    }

    fn farthest_corner_dist(&self, r: usize) -> f64 {
        let o = &self.optima[r];
        (0..self.dim())
            .map(|i| {
                let lo = (o[i] - self.bounds.lower()[i]).abs();
                let hi = (self.bounds.upper()[i] - o[i]).abs();
                lo.max(hi).powi(2)
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Largest suboptimality over the box and regimes. Convex functions peak
    /// at a vertex, so small boxes are enumerated; larger ones use
    /// `(L/2)·(farthest corner distance)²`.
    pub fn delta_max(&self) -> f64 {
        (0..self.regimes())
            .map(|r| {
                if self.dim() <= VERTEX_ENUM_MAX_DIM {
                    self.vertices().map(|v| self.loss(r, &v)).fold(0.0, f64::max)
                } else {
                    0.5 * self.smoothness * self.farthest_corner_dist(r).powi(2)
                }
            })
            .fold(0.0, f64::max)
    }

    /// Bound on the gradient norm over the box. Reported only.
    pub fn gradient_bound(&self) -> f64 {
        (0..self.regimes())
            .map(|r| {
                if self.dim() <= VERTEX_ENUM_MAX_DIM {
                    self.vertices().map(|v| self.grad(r, &v).norm()).fold(0.0, f64::max)
                } else {
                    self.smoothness * self.farthest_corner_dist(r)
                }
            })
            .fold(0.0, f64::max)
    }

    /// Copy with every Hessian scaled by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            mu: self.mu * s,
            smoothness: self.smoothness * s,
            hessians: self.hessians.iter().map(|a| a * s).collect(),
            ..self.clone()
        }
    }

    /// Context observed in regime `r`.
    pub fn sample_context<R: Rng + ?Sized>(&self, r: usize, rng: &mut R) -> DVector<f64> {
        let dc = self.centers[r].len();
        let g = DVector::from_fn(dc, |_, _| rng.sample::<f64, _>(StandardNormal));
        if self.sigma_c > 0.0 {
            return &self.centers[r] + self.sigma_c * g;
        }
        let norm = g.norm();
        if norm == 0.0 {
            return self.centers[r].clone();
        }
        let radius = self.radius * rng.random::<f64>().powf(1.0 / dc as f64);
        &self.centers[r] + g * (radius / norm)
    }

    /// Nearest-center regime identification. Ties go to the lower index.
    pub fn identify(&self, context: &DVector<f64>) -> usize {
        let mut best = (0, f64::INFINITY);
        for (r, c) in self.centers.iter().enumerate() {
            let d = (context - c).norm_squared();
            if d < best.1 {
                best = (r, d);
            }
        }
        best.0
    }
}

pub fn check_step_size(smoothness: f64, eta: f64) -> Result<()> {
    if eta > 0.0 && eta < 2.0 / smoothness && eta.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidStepSize { eta, smoothness })
    }
}

/// Per-visit contraction of the squared distance to the optimum.
pub fn contraction_factor(mu: f64, smoothness: f64, eta: f64) -> Result<f64> {
    if !(mu > 0.0 && mu <= smoothness) {
        return Err(Error::InvalidConfig(format!("need 0 < mu <= L, got mu={mu}, L={smoothness}")));
    }
    check_step_size(smoothness, eta)?;
    let q = 1.0 - mu * eta * (2.0 - eta * smoothness);
    // rounding can leave q a hair below zero when mu = L and eta = 1/L
    Ok(q.max(0.0))
}

/// Per-regime regret constants and their sum.
#[derive(Debug, Clone, Serialize)]
pub struct RegretBound {
    pub per_regime: Vec<f64>,
    pub total: f64,
}

pub fn regret_bound(spec: &RegimeSpec, init_states: &[DVector<f64>], eta: f64) -> Result<RegretBound> {
    crate::error::check_dim(spec.regimes(), init_states.len())?;
    contraction_factor(spec.mu, spec.smoothness, eta)?;
    let denom = spec.mu * eta * (2.0 - eta * spec.smoothness);
    let per_regime: Vec<f64> = init_states
        .iter()
        .zip(&spec.optima)
        .map(|(w, o)| 0.5 * spec.smoothness * (w - o).norm_squared() / denom)
        .collect();
    let total = per_regime.iter().sum();
    Ok(RegretBound { per_regime, total })
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RegretTrace {
    pub regret: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub visits: Vec<usize>,
    /// Regret accrued on steps whose regime was identified correctly.
    pub per_regime_regret: Vec<f64>,
    pub mistakes: usize,
    /// Largest observed ratio of squared distances across one own-regime update.
    pub max_contraction_ratio: f64,
}

impl RegretTrace {
    fn new(regimes: usize, horizon: usize) -> Self {
        Self {
            regret: Vec::with_capacity(horizon),
            cumulative: Vec::with_capacity(horizon),
            visits: vec![0; regimes],
            per_regime_regret: vec![0.0; regimes],
            mistakes: 0,
            max_contraction_ratio: 0.0,
        }
    }

    fn push(&mut self, r: f64) {
        let total = self.total() + r;
        self.regret.push(r);
        self.cumulative.push(total);
    }

    pub fn total(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    /// Regret added over the last `n` steps.
    pub fn tail_increment(&self, n: usize) -> f64 {
        let len = self.cumulative.len();
        if len == 0 {
            return 0.0;
        }
        let before = if len > n { self.cumulative[len - n - 1] } else { 0.0 };
        self.total() - before
    }
}

/// How the gradient used by an update is perturbed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradientNoise {
    None,
    /// Uniform direction, norm exactly `ε_n`.
    Random,
    /// Norm `ε_n`, pointing against the true gradient.
    Adversarial,
}

struct Run<'a> {
    spec: &'a RegimeSpec,
    eta: f64,
    states: Vec<DVector<f64>>,
    trace: RegretTrace,
}

impl<'a> Run<'a> {
    fn new(spec: &'a RegimeSpec, eta: f64, init: &[DVector<f64>], horizon: usize) -> Result<Self> {
        check_step_size(spec.smoothness, eta)?;
        crate::error::check_dim(spec.regimes(), init.len())?;
        for w in init {
            crate::error::check_dim(spec.dim(), w.len())?;
        }
        Ok(Self {
            spec,
            eta,
            states: init.to_vec(),
            trace: RegretTrace::new(spec.regimes(), horizon),
        })
    }

    fn update(&mut self, state: usize, regime: usize, delta: Option<&DVector<f64>>) {
        let w = &self.states[state];
        let mut g = self.spec.grad(regime, w);
        if let Some(d) = delta {
            g += d;
        }
        let next = self.spec.project(&(w - self.eta * g));
        if state == regime {
            let before = (w - &self.spec.optima[regime]).norm_squared();
            if before > 1e-24 {
                let after = (&next - &self.spec.optima[regime]).norm_squared();
                self.trace.max_contraction_ratio = self.trace.max_contraction_ratio.max(after / before);
            }
        }
        self.states[state] = next;
    }
}

fn check_schedule(spec: &RegimeSpec, schedule: &[usize]) -> Result<()> {
    match schedule.iter().find(|&&r| r >= spec.regimes()) {
        Some(&r) => Err(Error::InvalidConfig(format!("schedule names regime {r} of {}", spec.regimes()))),
        None => Ok(()),
    }
}

/// Plays the identified regime's state, then takes a projected gradient step
/// on it with the current loss.
pub fn ra_gd_run(
    spec: &RegimeSpec,
    schedule: &[usize],
    eta: f64,
    init: &[DVector<f64>],
    rng: &mut SimRng,
) -> Result<RegretTrace> {
    check_schedule(spec, schedule)?;
    let mut run = Run::new(spec, eta, init, schedule.len())?;
    for &r in schedule {
        let c = spec.sample_context(r, rng);
        let s = spec.identify(&c);
        let loss = spec.loss(r, &run.states[s]);
        run.trace.push(loss);
        run.trace.visits[r] += 1;
        if s == r {
            run.trace.per_regime_regret[r] += loss;
        } else {
            run.trace.mistakes += 1;
        }
        run.update(s, r, None);
    }
    Ok(run.trace)
}

/// Like [`ra_gd_run`], but on the listed steps the agent plays a uniformly
/// chosen wrong regime's state. That state then takes a step on its own
/// loss, so a mistake costs at most one step of regret.
pub fn misretrieval_run(
    spec: &RegimeSpec,
    schedule: &[usize],
    eta: f64,
    init: &[DVector<f64>],
    forced: &[usize],
    rng: &mut SimRng,
) -> Result<RegretTrace> {
    check_schedule(spec, schedule)?;
    if let Some(&t) = forced.iter().find(|&&t| t >= schedule.len()) {
        return Err(Error::InvalidConfig(format!("forced step {t} past the horizon")));
    }
    if !forced.is_empty() && spec.regimes() < 2 {
        return Err(Error::InvalidConfig("forced mistakes need two regimes".into()));
    }
    let mut is_forced = vec![false; schedule.len()];
    for &t in forced {
        is_forced[t] = true;
    }
    let mut run = Run::new(spec, eta, init, schedule.len())?;
    for (t, &r) in schedule.iter().enumerate() {
        let c = spec.sample_context(r, rng);
        let mut s = spec.identify(&c);
        if is_forced[t] {
            let wrong: Vec<usize> = (0..spec.regimes()).filter(|&x| x != r).collect();
            s = *wrong.choose(rng).expect("two regimes");
        }
        let loss = spec.loss(r, &run.states[s]);
        run.trace.push(loss);
        run.trace.visits[r] += 1;
        if s == r {
            run.trace.per_regime_regret[r] += loss;
            run.update(s, r, None);
        } else {
            run.trace.mistakes += 1;
            run.update(s, s, None);
        }
    }
    Ok(run.trace)
}

pub fn misretrieval_bound(spec: &RegimeSpec, init: &[DVector<f64>], eta: f64, mistakes: usize) -> Result<f64> {
    Ok(regret_bound(spec, init, eta)?.total + mistakes as f64 * spec.delta_max())
}

/// RA-GD with correct identification and a perturbed gradient with
/// `‖δ_t‖ = ε_t` on every step.
pub fn noisy_gradient_run(
    spec: &RegimeSpec,
    schedule: &[usize],
    eta: f64,
    init: &[DVector<f64>],
    eps: &[f64],
    noise: GradientNoise,
    rng: &mut SimRng,
) -> Result<RegretTrace> {
    check_schedule(spec, schedule)?;
    crate::error::check_dim(schedule.len(), eps.len())?;
    let mut run = Run::new(spec, eta, init, schedule.len())?;
    let d = spec.dim();
    for (&r, &e) in schedule.iter().zip(eps) {
        let loss = spec.loss(r, &run.states[r]);
        run.trace.push(loss);
        run.trace.visits[r] += 1;
        run.trace.per_regime_regret[r] += loss;
        let delta = match noise {
            GradientNoise::None => None,
            GradientNoise::Random => {
                let g = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                let n = g.norm();
                (n > 0.0).then(|| g * (e / n))
            }
            GradientNoise::Adversarial => {
                let g = spec.grad(r, &run.states[r]);
                let n = g.norm();
                (n > 0.0).then(|| g * (-e / n))
            }
        };
        run.update(r, r, delta.as_ref());
    }
    Ok(run.trace)
}

/// Per-regime bound `C_r + (η/(1−q))·Σ c·ε_n²` over that regime's visits.
pub fn noisy_gradient_bound(
    spec: &RegimeSpec,
    schedule: &[usize],
    eta: f64,
    init: &[DVector<f64>],
    eps: &[f64],
) -> Result<Vec<f64>> {
    crate::error::check_dim(schedule.len(), eps.len())?;
    let q = contraction_factor(spec.mu, spec.smoothness, eta)?;
    let base = regret_bound(spec, init, eta)?;
    let mut extra = vec![0.0; spec.regimes()];
    for (&r, &e) in schedule.iter().zip(eps) {
        extra[r] += GRAD_ERROR_CONST * e * e;
    }
    Ok(base
        .per_regime
        .iter()
        .zip(extra)
        .map(|(c, s)| c + eta / (1.0 - q) * s)
        .collect())
}

/// Tail bound on misidentifying a regime from one Gaussian context. Solves
/// `σ_c(√d_c + √(2u)) = Δ/2` for `u` and returns `e^{−u}`; 1 when no
/// non-negative solution exists.
pub fn chi2_misretrieval_bound(sigma_c: f64, context_dim: usize, separation: f64) -> f64 {
    if sigma_c == 0.0 {
        return 0.0;
    }
    let s = separation / (2.0 * sigma_c) - (context_dim as f64).sqrt();
    if s <= 0.0 {
        return 1.0;
    }
    (-(s * s) / 2.0).exp()
}

/// Fraction of `draws` contexts, sampled round-robin over regimes, that the
/// nearest-center rule assigns to the wrong regime.
pub fn misretrieval_frequency(spec: &RegimeSpec, draws: usize, rng: &mut SimRng) -> f64 {
    let wrong = (0..draws)
        .filter(|i| {
            let r = i % spec.regimes();
            spec.identify(&spec.sample_context(r, rng)) != r
        })
        .count();
    wrong as f64 / draws.max(1) as f64
}

pub fn alternating_schedule(regimes: usize, horizon: usize) -> Vec<usize> {
    (0..horizon).map(|t| t % regimes.max(1)).collect()
}

pub fn random_schedule<R: Rng + ?Sized>(regimes: usize, horizon: usize, rng: &mut R) -> Vec<usize> {
    (0..horizon).map(|_| rng.random_range(0..regimes.max(1))).collect()
}

/// One row of the verification report.
#[derive(Debug, Clone, Serialize)]
pub struct TheoryCheck {
    pub spec_id: usize,
    pub check: String,
    pub bound: f64,
    pub observed: f64,
    pub margin: f64,
    pub pass: bool,
}

impl TheoryCheck {
    /// Passes when `observed <= bound`.
    pub fn upper(spec_id: usize, check: &str, bound: f64, observed: f64) -> Self {
        Self {
            spec_id,
            check: check.to_string(),
            bound,
            observed,
            margin: bound - observed,
            pass: observed <= bound,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteConfig {
    pub seed: u64,
    pub specs: usize,
    pub horizon: usize,
    pub noisy_seeds: usize,
    pub mistakes: usize,
    pub epsilon: f64,
    pub mc_draws: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            specs: 50,
            horizon: 10_000,
            noisy_seeds: 20,
            mistakes: 50,
            epsilon: 0.1,
            mc_draws: 100_000,
        }
    }
}

/// Draws a random spec with `R ≤ 5`, `d ≤ 8` and `L/μ ≤ 5`, a step size in
/// `[0.5/L, 1.5/L]`, and random initial states.
pub fn random_instance(
    rng: &mut SimRng,
    min_condition: f64,
) -> Result<(RegimeSpec, f64, Vec<DVector<f64>>)> {
    let regimes = rng.random_range(1..=5);
    let dim = rng.random_range(1..=8);
    let mu = rng.random_range(0.2..1.0);
    let cond = rng.random_range(min_condition.max(1.0)..=5.0f64.max(min_condition));
    let l = mu * cond;
    let spec = RegimeSpec::random(regimes, dim, mu, l, 4, rng)?;
    let eta = rng.random_range(0.5..1.5) / l;
    let init = (0..regimes)
        .map(|_| DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0)))
        .collect();
    Ok((spec, eta, init))
}

/// Every check used to verify the regret theory numerically.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<TheoryCheck>> {
    let mut rows = Vec::new();
    for id in 0..cfg.specs {
        let mut rng = seeding::stream(cfg.seed, &[seeding::label("theory-spec"), id as u64]);
        let (spec, eta, init) = random_instance(&mut rng, 1.0)?;
        let schedule = random_schedule(spec.regimes(), cfg.horizon, &mut rng);
        let trace = ra_gd_run(&spec, &schedule, eta, &init, &mut rng)?;
        let bound = regret_bound(&spec, &init, eta)?;
        rows.push(TheoryCheck::upper(id, "ra-gd regret", bound.total, trace.total()));
        rows.push(TheoryCheck::upper(id, "ra-gd plateau", 1e-9, trace.tail_increment((cfg.horizon / 10).max(1))));
        rows.push(TheoryCheck::upper(id, "identification mistakes", 0.0, trace.mistakes as f64));
        let q = contraction_factor(spec.mu, spec.smoothness, eta)?;
        rows.push(TheoryCheck::upper(id, "per-visit contraction", q + 1e-12, trace.max_contraction_ratio));
    }
    for id in 0..cfg.noisy_seeds {
        let mut rng = seeding::stream(cfg.seed, &[seeding::label("theory-misretrieval"), id as u64]);
        let (spec, eta, init) = loop {
            let inst = random_instance(&mut rng, 1.0)?;
            if inst.0.regimes() >= 2 {
                break inst;
            }
        };
        let schedule = random_schedule(spec.regimes(), cfg.horizon, &mut rng);
        let mut steps: Vec<usize> = (0..cfg.horizon).collect();
        let (forced, _) = steps.partial_shuffle(&mut rng, cfg.mistakes.min(cfg.horizon));
        let forced = forced.to_vec();
        let trace = misretrieval_run(&spec, &schedule, eta, &init, &forced, &mut rng)?;
        let bound = misretrieval_bound(&spec, &init, eta, trace.mistakes)?;
        rows.push(TheoryCheck::upper(id, "misretrieval regret", bound, trace.total()));
    }
    for id in 0..cfg.noisy_seeds {
        let mut rng = seeding::stream(cfg.seed, &[seeding::label("theory-noisy"), id as u64]);
        let (spec, eta, init) = random_instance(&mut rng, 2.0)?;
        let schedule = random_schedule(spec.regimes(), cfg.horizon, &mut rng);
        let eps = vec![cfg.epsilon; cfg.horizon];
        for (noise, name) in [(GradientNoise::Random, "noisy-gradient regret"), (GradientNoise::Adversarial, "adversarial-gradient regret")] {
            let trace = noisy_gradient_run(&spec, &schedule, eta, &init, &eps, noise, &mut rng)?;
            let bounds = noisy_gradient_bound(&spec, &schedule, eta, &init, &eps)?;
            // the tightest regime decides the row
            let (b, o) = bounds
                .iter()
                .zip(&trace.per_regime_regret)
                .map(|(b, o)| (*b, *o))
                .min_by(|x, y| (x.0 - x.1).total_cmp(&(y.0 - y.1)))
                .expect("at least one regime");
            rows.push(TheoryCheck::upper(id, name, b, o));
        }
    }
    let mut rng = seeding::stream(cfg.seed, &[seeding::label("theory-retrieval")]);
    let mut spec = RegimeSpec::random(4, 2, 1.0, 1.0, 5, &mut rng)?;
    spec.radius = 0.49 * spec.separation();
    let freq = misretrieval_frequency(&spec, cfg.mc_draws.min(10_000), &mut rng);
    rows.push(TheoryCheck::upper(0, "separated-cluster misretrievals", 0.0, freq));
    for (sigma, dc, sep) in [(1.0, 5, 20.0), (1.0, 2, 6.0), (0.5, 3, 4.0)] {
        let spec = two_center_spec(sigma, dc, sep)?;
        let freq = misretrieval_frequency(&spec, cfg.mc_draws, &mut rng);
        let bound = chi2_misretrieval_bound(sigma, dc, sep);
        let se = (bound * (1.0 - bound) / cfg.mc_draws as f64).sqrt();
        rows.push(TheoryCheck::upper(0, &format!("chi2 tail s={sigma} d={dc} D={sep}"), bound + 3.0 * se, freq));
    }
    Ok(rows)
}

/// Two regimes whose context centers are `separation` apart, with Gaussian
/// context noise.
pub fn two_center_spec(sigma_c: f64, context_dim: usize, separation: f64) -> Result<RegimeSpec> {
    let mut rng = seeding::stream(0, &[seeding::label("two-center")]);
    let mut spec = RegimeSpec::random(2, 1, 1.0, 1.0, context_dim, &mut rng)?;
    spec.centers[0] = DVector::zeros(context_dim);
    let mut far = DVector::zeros(context_dim);
    far[0] = separation;
    spec.centers[1] = far;
    spec.sigma_c = sigma_c;
    Ok(spec)
}

/// Fixed-width text table for the report.
pub fn format_report(rows: &[TheoryCheck]) -> String {
    let mut out = format!(
        "{:>4}  {:<36} {:>14} {:>14} {:>14}  {}\n",
        "spec", "check", "bound", "observed", "margin", "result"
    );
    for r in rows {
        out.push_str(&format!(
            "{:>4}  {:<36} {:>14.6e} {:>14.6e} {:>14.6e}  {}\n",
            r.spec_id,
            r.check,
            r.bound,
            r.observed,
            r.margin,
            if r.pass { "PASS" } else { "FAIL" }
        ));
    }
    out
}
