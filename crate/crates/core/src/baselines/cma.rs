//! (μ/μ_w, λ)-CMA-ES with rank-one and rank-μ covariance updates and
//! cumulative step-size adaptation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::agent::{Agent, StepRecord};
use crate::composer::{ErrorComposer, MetricSpec, Metrics};
use crate::error::{check_dim, Error, Result};
use crate::param_space::{ParamBounds, DEFAULT_MOMENTUM};
use crate::seeding::{self, SimRng};

const SIGMA_FRACTION: f64 = 0.2;
const EIGEN_FLOOR: f64 = 1e-14;

/// Default population size for dimension `d`.
pub fn population_size(d: usize) -> usize {
    4 + (3.0 * (d.max(1) as f64).ln()).floor() as usize
}

#[derive(Debug, Clone)]
pub struct CmaState {
    pub mean: DVector<f64>,
    pub sigma: f64,
    pub cov: DMatrix<f64>,
    pub p_sigma: DVector<f64>,
    pub p_c: DVector<f64>,
    pub lambda: usize,
    pub weights: Vec<f64>,
    mu_eff: f64,
    c_sigma: f64,
    d_sigma: f64,
    c_c: f64,
    c_1: f64,
    c_mu: f64,
    chi_n: f64,
    generation: u64,
    basis: DMatrix<f64>,
    scales: DVector<f64>,
}

/// One sampled population. `steps` are the unscaled offsets `B D z`.
#[derive(Debug, Clone)]
pub struct Population {
    pub members: Vec<Vec<f64>>,
    steps: Vec<DVector<f64>>,
    generation: u64,
}

impl CmaState {
    pub fn new(mean: Vec<f64>, sigma: f64) -> Result<Self> {
        let n = mean.len();
        if n == 0 {
            return Err(Error::InvalidConfig("CMA-ES needs at least one dimension".into()));
        }
        if !(sigma > 0.0 && sigma.is_finite()) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("CMA-ES initial state"));
        }
        let lambda = population_size(n);
        let mu = lambda / 2;
        let raw: Vec<f64> = (0..mu)
            .map(|i| (mu as f64 + 0.5).ln() - ((i + 1) as f64).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let nf = n as f64;
        let c_sigma = (mu_eff + 2.0) / (nf + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (nf + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / nf) / (nf + 4.0 + 2.0 * mu_eff / nf);
        let c_1 = 2.0 / ((nf + 1.3).powi(2) + mu_eff);
        let c_mu = (1.0 - c_1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((nf + 2.0).powi(2) + mu_eff));
        let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));
        Ok(Self {
            mean: DVector::from_vec(mean),
            sigma,
            cov: DMatrix::identity(n, n),
            p_sigma: DVector::zeros(n),
            p_c: DVector::zeros(n),
            lambda,
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c_1,
            c_mu,
            chi_n,
            generation: 0,
            basis: DMatrix::identity(n, n),
            scales: DVector::from_element(n, 1.0),
        })
    }

    /// Mean at the box midpoint and σ a fixed fraction of the mean width.
    pub fn for_bounds(bounds: &ParamBounds) -> Result<Self> {
        Self::new(bounds.midpoint(), SIGMA_FRACTION * bounds.mean_width())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.cov.clone()).eigenvalues.min()
    }

    pub fn ask<R: Rng + ?Sized>(&self, rng: &mut R) -> Population {
        let n = self.dim();
        let mut members = Vec::with_capacity(self.lambda);
        let mut steps = Vec::with_capacity(self.lambda);
        for _ in 0..self.lambda {
            let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = &self.basis * z.component_mul(&self.scales);
            let x = &self.mean + self.sigma * &y;
            members.push(x.iter().copied().collect());
            steps.push(y);
        }
        Population {
            members,
            steps,
            generation: self.generation,
        }
    }

    pub fn tell(&mut self, pop: &Population, errors: &[f64]) -> Result<()> {
        check_dim(pop.members.len(), errors.len())?;
        if pop.generation != self.generation || pop.members.len() != self.lambda {
            return Err(Error::Population(format!(
                "generation {} told to state at generation {}",
                pop.generation, self.generation
            )));
        }
        if errors.iter().any(|e| !e.is_finite()) {
            return Err(Error::NonFinite("CMA-ES fitness"));
        }
        let n = self.dim() as f64;
        let mut order: Vec<usize> = (0..errors.len()).collect();
        order.sort_by(|&a, &b| errors[a].total_cmp(&errors[b]).then(a.cmp(&b)));

        let mut y_w = DVector::zeros(self.dim());
        for (w, &i) in self.weights.iter().zip(&order) {
            y_w += *w * &pop.steps[i];
        }
        self.mean += self.sigma * &y_w;

        // C^{-1/2} y_w = B D^{-1} B^T y_w
        let inv_sqrt = self.basis.transpose() * &y_w;
        let inv_sqrt = &self.basis * inv_sqrt.component_div(&self.scales);
        self.p_sigma = (1.0 - self.c_sigma) * &self.p_sigma
            + (self.c_sigma * (2.0 - self.c_sigma) * self.mu_eff).sqrt() * inv_sqrt;
        let gen = (self.generation + 1) as f64;
        let norm_ps = self.p_sigma.norm();
        let h_sigma = norm_ps / (1.0 - (1.0 - self.c_sigma).powf(2.0 * gen)).sqrt()
            < (1.4 + 2.0 / (n + 1.0)) * self.chi_n;
        let h = if h_sigma { 1.0 } else { 0.0 };
        self.p_c = (1.0 - self.c_c) * &self.p_c + h * (self.c_c * (2.0 - self.c_c) * self.mu_eff).sqrt() * &y_w;

        let mut rank_mu = DMatrix::zeros(self.dim(), self.dim());
        for (w, &i) in self.weights.iter().zip(&order) {
            rank_mu += *w * &pop.steps[i] * pop.steps[i].transpose();
        }
        let rank_one = &self.p_c * self.p_c.transpose() + (1.0 - h) * self.c_c * (2.0 - self.c_c) * &self.cov;
        self.cov = (1.0 - self.c_1 - self.c_mu) * &self.cov + self.c_1 * rank_one + self.c_mu * rank_mu;
        self.sigma *= ((self.c_sigma / self.d_sigma) * (norm_ps / self.chi_n - 1.0)).exp();
        self.generation += 1;
        self.refresh_eigen()?;
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::NonFinite("CMA-ES step size"));
        }
        Ok(())
    }

    /// Symmetrizes C, floors its spectrum and caches B and D.
    fn refresh_eigen(&mut self) -> Result<()> {
        let sym = (&self.cov + self.cov.transpose()) * 0.5;
        if sym.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("CMA-ES covariance"));
        }
        let eig = SymmetricEigen::new(sym);
        let top = eig.eigenvalues.max().max(f64::MIN_POSITIVE);
        let floor = top * EIGEN_FLOOR;
        let vals = eig.eigenvalues.map(|v| v.max(floor));
        self.cov = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
        self.cov = (&self.cov + self.cov.transpose()) * 0.5;
        self.scales = vals.map(f64::sqrt);
        self.basis = eig.eigenvectors;
        Ok(())
    }
}

/// CMA-ES in the normalized box, one population member per step.
pub struct CmaAgent {
    bounds: ParamBounds,
    composer: ErrorComposer,
    state: CmaState,
    rng: SimRng,
    population: Population,
    errors: Vec<f64>,
    pending: bool,
}

impl CmaAgent {
    pub fn new(bounds: ParamBounds, metric_specs: impl IntoIterator<Item = MetricSpec>, seed: u64) -> Result<Self> {
        let unit = ParamBounds::uniform(bounds.dim(), 0.0, 1.0)?;
        let state = CmaState::for_bounds(&unit)?;
        let mut rng = seeding::stream(seed, &[seeding::label("cma")]);
        let population = state.ask(&mut rng);
        Ok(Self {
            bounds,
            composer: ErrorComposer::with_specs(DEFAULT_MOMENTUM, metric_specs)?,
            state,
            rng,
            population,
            errors: Vec::new(),
            pending: false,
        })
    }

    pub fn state(&self) -> &CmaState {
        &self.state
    }
}

impl Agent for CmaAgent {
    fn name(&self) -> &str {
        "cma"
    }

    fn propose(&mut self, _context: &[f64]) -> Result<Vec<f64>> {
        let member = &self.population.members[self.errors.len()];
        let clipped: Vec<f64> = member.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        self.pending = true;
        self.bounds.denormalize(&clipped)
    }

    fn observe(&mut self, metrics: &Metrics) -> Result<StepRecord> {
        if !self.pending {
            return Err(Error::InvalidConfig("observe called without a proposal".into()));
        }
        let c = self.composer.compose(metrics)?;
        self.pending = false;
        self.errors.push(c.error);
        if self.errors.len() == self.state.lambda {
            self.state.tell(&self.population, &self.errors)?;
            self.errors.clear();
            self.population = self.state.ask(&mut self.rng);
        }
        Ok(StepRecord {
            error: c.error,
            ..StepRecord::default()
        })
    }

    fn footprint_bytes(&self) -> usize {
        let n = self.state.dim();
        8 * (2 * n * n + (self.state.lambda + 4) * n + self.errors.len())
    }
}
