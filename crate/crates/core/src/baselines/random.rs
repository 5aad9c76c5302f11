use rand::Rng;

use crate::agent::{Agent, StepRecord};
use crate::composer::{ErrorComposer, MetricSpec, Metrics};
use crate::error::{Error, Result};
use crate::param_space::{ParamBounds, DEFAULT_MOMENTUM};
use crate::seeding::{self, SimRng};

/// A uniform draw from the box.
pub fn rs_step<R: Rng + ?Sized>(bounds: &ParamBounds, rng: &mut R) -> Vec<f64> {
    bounds
        .lower()
        .iter()
        .zip(bounds.upper())
        .map(|(&lo, &hi)| (lo + (hi - lo) * rng.random::<f64>()).clamp(lo, hi))
        .collect()
}

pub struct RandomSearch {
    bounds: ParamBounds,
    composer: ErrorComposer,
    rng: SimRng,
    pending: bool,
}

impl RandomSearch {
    pub fn new(bounds: ParamBounds, metric_specs: impl IntoIterator<Item = MetricSpec>, seed: u64) -> Result<Self> {
        Ok(Self {
            bounds,
            composer: ErrorComposer::with_specs(DEFAULT_MOMENTUM, metric_specs)?,
            rng: seeding::stream(seed, &[seeding::label("random-search")]),
            pending: false,
        })
    }
}

impl Agent for RandomSearch {
    fn name(&self) -> &str {
        "rs"
    }

    fn propose(&mut self, _context: &[f64]) -> Result<Vec<f64>> {
        self.pending = true;
        Ok(rs_step(&self.bounds, &mut self.rng))
    }

    fn observe(&mut self, metrics: &Metrics) -> Result<StepRecord> {
        if !self.pending {
            return Err(Error::InvalidConfig("observe called without a proposal".into()));
        }
        let c = self.composer.compose(metrics)?;
        self.pending = false;
        Ok(StepRecord {
            error: c.error,
            ..StepRecord::default()
        })
    }

    fn footprint_bytes(&self) -> usize {
        0
    }
}
