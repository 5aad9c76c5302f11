//! Sliding-window GP-UCB with a Matérn-5/2 ARD kernel.

use std::collections::VecDeque;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::agent::{Agent, StepRecord};
use crate::composer::{ErrorComposer, MetricSpec, Metrics};
use crate::error::{check_dim, check_finite, Error, Result};
use crate::param_space::{ParamBounds, DEFAULT_MOMENTUM};
use crate::seeding::{self, SimRng};

const LOG_LS: (f64, f64) = (-4.605_170_185_988_091, 4.605_170_185_988_091); // ln 0.01, ln 100
const LOG_SIGNAL: (f64, f64) = (-9.210_340_371_976_182, 2.302_585_092_994_046); // ln 1e-4, ln 10
const LOG_NOISE: (f64, f64) = (-18.420_680_743_952_367, 0.0); // ln 1e-8, ln 1
const MAX_JITTER: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpConfig {
    pub window: usize,
    pub kappa: f64,
    pub fit_restarts: usize,
    pub acquire_restarts: usize,
    /// Evaluations of the marginal likelihood per restart.
    pub fit_budget: usize,
    pub acquire_tol: f64,
    /// Contexts wider than this are randomly projected down to it.
    pub max_context_dim: usize,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            window: 200,
            kappa: 2.0,
            fit_restarts: 5,
            acquire_restarts: 5,
            fit_budget: 60,
            acquire_tol: 1e-4,
            max_context_dim: 32,
        }
    }
}

/// Log-space kernel hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub log_lengthscales: Vec<f64>,
    pub log_signal_var: f64,
    pub log_noise_var: f64,
}

impl GpHyper {
    pub fn default_for(dim: usize) -> Self {
        Self {
            log_lengthscales: vec![0.0; dim],
            log_signal_var: (0.1f64).ln(),
            log_noise_var: (1e-2f64).ln(),
        }
    }

    fn to_vec(&self) -> Vec<f64> {
        let mut v = self.log_lengthscales.clone();
        v.push(self.log_signal_var);
        v.push(self.log_noise_var);
        v
    }

    fn from_slice(v: &[f64]) -> Self {
        let d = v.len() - 2;
        Self {
            log_lengthscales: v[..d].to_vec(),
            log_signal_var: v[d],
            log_noise_var: v[d + 1],
        }
    }

    fn limits(dim: usize) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![LOG_LS.0; dim];
        let mut hi = vec![LOG_LS.1; dim];
        lo.extend([LOG_SIGNAL.0, LOG_NOISE.0]);
        hi.extend([LOG_SIGNAL.1, LOG_NOISE.1]);
        (lo, hi)
    }

    fn random<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let (lo, hi) = Self::limits(dim);
        let v: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| a + (b - a) * rng.random::<f64>()).collect();
        Self::from_slice(&v)
    }
}

pub fn matern52(a: &[f64], b: &[f64], hyper: &GpHyper) -> f64 {
    let r2: f64 = a
        .iter()
        .zip(b)
        .zip(&hyper.log_lengthscales)
        .map(|((x, y), l)| ((x - y) / l.exp()).powi(2))
        .sum();
    let r = (5.0 * r2).sqrt();
    hyper.log_signal_var.exp() * (1.0 + r + 5.0 * r2 / 3.0) * (-r).exp()
}

/// Minimizes `f` by coordinate-wise pattern search with per-coordinate step
/// halving. Only improvements are accepted, so the result is never worse
/// than the start.
pub fn coordinate_search(
    x0: &[f64],
    lo: &[f64],
    hi: &[f64],
    step0: f64,
    tol: f64,
    max_evals: usize,
    mut f: impl FnMut(&[f64]) -> f64,
) -> (Vec<f64>, f64) {
    let mut x: Vec<f64> = x0.iter().zip(lo.iter().zip(hi)).map(|(v, (a, b))| v.clamp(*a, *b)).collect();
    let mut fx = f(&x);
    let mut evals = 1;
    let mut steps = vec![step0; x.len()];
    while evals < max_evals && steps.iter().any(|s| *s >= tol) {
        for j in 0..x.len() {
            if steps[j] < tol {
                continue;
            }
            let mut moved = false;
            for dir in [1.0, -1.0] {
                let old = x[j];
                x[j] = (old + dir * steps[j]).clamp(lo[j], hi[j]);
                if x[j] == old {
                    continue;
                }
                let fy = f(&x);
                evals += 1;
                if fy < fx {
                    fx = fy;
                    moved = true;
                    break;
                }
                x[j] = old;
            }
            if !moved {
                steps[j] *= 0.5;
            }
            if evals >= max_evals {
                break;
            }
        }
    }
    (x, fx)
}

/// A factorized GP on a fixed data set.
pub struct GpPosterior {
    xs: Vec<Vec<f64>>,
    hyper: GpHyper,
    mean: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    jitter: f64,
    lml: f64,
}

impl GpPosterior {
    pub fn condition(xs: &[Vec<f64>], ys: &[f64], hyper: &GpHyper) -> Result<Self> {
        check_dim(xs.len(), ys.len())?;
        if xs.is_empty() {
            return Err(Error::InvalidConfig("cannot condition a GP on no data".into()));
        }
        let n = xs.len();
        let mean = ys.iter().sum::<f64>() / n as f64;
        let noise = hyper.log_noise_var.exp();
        let signal = hyper.log_signal_var.exp();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = matern52(&xs[i], &xs[j], hyper);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
            k[(i, i)] += noise;
        }
        let mut jitter = 0.0;
        let chol = loop {
            let mut kj = k.clone();
            for i in 0..n {
                kj[(i, i)] += jitter;
            }
            if let Some(c) = Cholesky::new(kj) {
                break c;
            }
            jitter = if jitter == 0.0 { 1e-10 * signal } else { jitter * 10.0 };
            if jitter > MAX_JITTER * signal.max(1.0) {
                return Err(Error::Factorization { jitter, points: n });
            }
        };
        let centered = DVector::from_iterator(n, ys.iter().map(|y| y - mean));
        let alpha = chol.solve(&centered);
        let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
        let lml = -0.5 * centered.dot(&alpha) - log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        Ok(Self {
            xs: xs.to_vec(),
            hyper: hyper.clone(),
            mean,
            chol,
            alpha,
            jitter,
            lml,
        })
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.lml
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn hyper(&self) -> &GpHyper {
        &self.hyper
    }

    /// Posterior mean and latent variance at `x`.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let n = self.xs.len();
        let k = DVector::from_iterator(n, self.xs.iter().map(|xi| matern52(xi, x, &self.hyper)));
        let mean = self.mean + k.dot(&self.alpha);
        let v = self.chol.l_dirty().solve_lower_triangular(&k).unwrap_or_else(|| DVector::zeros(n));
        let var = (self.hyper.log_signal_var.exp() - v.norm_squared()).max(0.0);
        (mean, var)
    }

    pub fn lcb(&self, x: &[f64], kappa: f64) -> f64 {
        let (m, v) = self.predict(x);
        m - kappa * v.sqrt()
    }
}

fn lml_or_neg_inf(xs: &[Vec<f64>], ys: &[f64], hyper: &GpHyper) -> f64 {
    GpPosterior::condition(xs, ys, hyper)
        .map(|p| p.lml)
        .unwrap_or(f64::NEG_INFINITY)
}

/// Result of a multi-start marginal likelihood fit.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub hyper: GpHyper,
    pub lml: f64,
    pub start_lml: Vec<f64>,
}

/// Windowed training data and current hyperparameters.
#[derive(Debug, Clone)]
pub struct GpModel {
    dim: usize,
    capacity: usize,
    xs: VecDeque<Vec<f64>>,
    ys: VecDeque<f64>,
    hyper: GpHyper,
}

impl GpModel {
    pub fn new(dim: usize, capacity: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::InvalidConfig("GP needs a positive dimension and window".into()));
        }
        Ok(Self {
            dim,
            capacity,
            xs: VecDeque::new(),
            ys: VecDeque::new(),
            hyper: GpHyper::default_for(dim),
        })
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn hyper(&self) -> &GpHyper {
        &self.hyper
    }

    pub fn set_hyper(&mut self, hyper: GpHyper) -> Result<()> {
        check_dim(self.dim, hyper.log_lengthscales.len())?;
        self.hyper = hyper;
        Ok(())
    }

    pub fn push(&mut self, x: Vec<f64>, y: f64) -> Result<()> {
        check_dim(self.dim, x.len())?;
        check_finite(&x, "GP input")?;
        check_finite(&[y], "GP target")?;
        if self.xs.len() == self.capacity {
            self.xs.pop_front();
            self.ys.pop_front();
        }
        self.xs.push_back(x);
        self.ys.push_back(y);
        Ok(())
    }

    fn data(&self) -> (Vec<Vec<f64>>, Vec<f64>) {
        (self.xs.iter().cloned().collect(), self.ys.iter().copied().collect())
    }

    /// Maximizes the log marginal likelihood from the current hyperparameters
    /// plus random starts. Does not modify the model.
    pub fn fit<R: Rng + ?Sized>(&self, restarts: usize, budget: usize, rng: &mut R) -> Result<FitReport> {
        if self.len() < 2 {
            return Err(Error::InvalidConfig("GP fit needs at least two points".into()));
        }
        let (xs, ys) = self.data();
        let (lo, hi) = GpHyper::limits(self.dim);
        let mut best: Option<(Vec<f64>, f64)> = None;
        let mut start_lml = Vec::with_capacity(restarts.max(1));
        for r in 0..restarts.max(1) {
            let start = if r == 0 { self.hyper.clone() } else { GpHyper::random(self.dim, rng) };
            start_lml.push(lml_or_neg_inf(&xs, &ys, &start));
            let (p, neg) = coordinate_search(&start.to_vec(), &lo, &hi, 1.0, 1e-2, budget, |v| {
                -lml_or_neg_inf(&xs, &ys, &GpHyper::from_slice(v))
            });
            if best.as_ref().is_none_or(|(_, b)| -neg > *b) {
                best = Some((p, -neg));
            }
        }
        let (p, lml) = best.expect("at least one restart");
        if !lml.is_finite() {
            return Err(Error::Factorization {
                jitter: MAX_JITTER,
                points: xs.len(),
            });
        }
        Ok(FitReport {
            hyper: GpHyper::from_slice(&p),
            lml,
            start_lml,
        })
    }

    pub fn posterior(&self, hyper: &GpHyper) -> Result<GpPosterior> {
        let (xs, ys) = self.data();
        GpPosterior::condition(&xs, &ys, hyper)
    }

    pub fn footprint_bytes(&self) -> usize {
        self.xs.len() * 8 * (self.dim + 1)
    }
}

/// Minimizes the LCB over `θ̃ ∈ [0,1]^d` with the trailing context fixed.
pub fn gp_acquire<R: Rng + ?Sized>(
    post: &GpPosterior,
    theta_dim: usize,
    context: &[f64],
    kappa: f64,
    restarts: usize,
    tol: f64,
    rng: &mut R,
) -> Vec<f64> {
    let lo = vec![0.0; theta_dim];
    let hi = vec![1.0; theta_dim];
    let mut x = vec![0.0; theta_dim + context.len()];
    x[theta_dim..].copy_from_slice(context);
    let mut best: Option<(Vec<f64>, f64)> = None;
    for _ in 0..restarts.max(1) {
        let start: Vec<f64> = (0..theta_dim).map(|_| rng.random::<f64>()).collect();
        let (th, val) = coordinate_search(&start, &lo, &hi, 0.1, tol, 20_000, |th| {
            x[..theta_dim].copy_from_slice(th);
            post.lcb(&x, kappa)
        });
        if best.as_ref().is_none_or(|(_, b)| val < *b) {
            best = Some((th, val));
        }
    }
    best.expect("at least one restart").0
}

struct GpPending {
    input: Vec<f64>,
    hyper: Option<GpHyper>,
    rng: SimRng,
}

pub struct GpUcb {
    bounds: ParamBounds,
    cfg: GpConfig,
    composer: ErrorComposer,
    model: GpModel,
    projection: Option<DMatrix<f64>>,
    rng: SimRng,
    pending: Option<GpPending>,
}

impl GpUcb {
    pub fn new(
        bounds: ParamBounds,
        context_dim: usize,
        metric_specs: impl IntoIterator<Item = MetricSpec>,
        cfg: GpConfig,
        seed: u64,
    ) -> Result<Self> {
        let projection = (context_dim > cfg.max_context_dim && cfg.max_context_dim > 0).then(|| {
            let mut prng = seeding::stream(seed, &[seeding::label("gp-projection")]);
            let scale = 1.0 / (cfg.max_context_dim as f64).sqrt();
            DMatrix::from_fn(cfg.max_context_dim, context_dim, |_, _| {
                scale * prng.sample::<f64, _>(StandardNormal)
            })
        });
        let c_dim = projection.as_ref().map_or(context_dim, |p| p.nrows());
        Ok(Self {
            model: GpModel::new(bounds.dim() + c_dim, cfg.window)?,
            composer: ErrorComposer::with_specs(DEFAULT_MOMENTUM, metric_specs)?,
            rng: seeding::stream(seed, &[seeding::label("gp-ucb")]),
            bounds,
            cfg,
            projection,
            pending: None,
        })
    }

    pub fn model(&self) -> &GpModel {
        &self.model
    }

    pub fn project(&self, context: &[f64]) -> Vec<f64> {
        match &self.projection {
            Some(p) => (p * DVector::from_column_slice(context)).iter().copied().collect(),
            None => context.to_vec(),
        }
    }
}

impl Agent for GpUcb {
    fn name(&self) -> &str {
        "gp"
    }

    fn propose(&mut self, context: &[f64]) -> Result<Vec<f64>> {
        let expected = self.projection.as_ref().map_or(self.model.dim - self.bounds.dim(), |p| p.ncols());
        check_dim(expected, context.len())?;
        let c = self.project(context);
        let d = self.bounds.dim();
        let mut rng = self.rng.clone();
        let (theta_norm, hyper) = if self.model.len() < 2 {
            ((0..d).map(|_| rng.random::<f64>()).collect(), None)
        } else {
            let fit = self.model.fit(self.cfg.fit_restarts, self.cfg.fit_budget, &mut rng)?;
            let post = self.model.posterior(&fit.hyper)?;
            let th = gp_acquire(&post, d, &c, self.cfg.kappa, self.cfg.acquire_restarts, self.cfg.acquire_tol, &mut rng);
            (th, Some(fit.hyper))
        };
        let theta = self.bounds.denormalize(&theta_norm)?;
        let mut input = theta_norm;
        input.extend(c);
        self.pending = Some(GpPending { input, hyper, rng });
        Ok(theta)
    }

    fn observe(&mut self, metrics: &Metrics) -> Result<StepRecord> {
        let pending = self
            .pending
            .take()
            .ok_or_else(|| Error::InvalidConfig("observe called without a proposal".into()))?;
        let c = match self.composer.compose(metrics) {
            Ok(c) => c,
            Err(e) => {
                self.pending = Some(pending);
                return Err(e);
            }
        };
        if let Some(h) = pending.hyper {
            self.model.set_hyper(h)?;
        }
        self.model.push(pending.input, c.error)?;
        self.rng = pending.rng;
        Ok(StepRecord {
            error: c.error,
            ..StepRecord::default()
        })
    }

    fn footprint_bytes(&self) -> usize {
        self.model.footprint_bytes()
    }
}
