use std::time::Instant;

use serde::Serialize;

use crate::agent::Agent;
use crate::composer::Metrics;
use crate::environments::Environment;
use crate::error::Result;

use super::stats::{mean, median};

/// Anything that hands out contexts and evaluates parameters.
pub trait StepSource {
    fn context(&self) -> Vec<f64>;
    fn evaluate(&mut self, theta: &[f64]) -> Result<Metrics>;
}

impl StepSource for Environment {
    fn context(&self) -> Vec<f64> {
        Environment::context(self)
    }

    fn evaluate(&mut self, theta: &[f64]) -> Result<Metrics> {
        Ok(self.step(theta)?.metrics)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LatencyStats {
    pub median_ns: f64,
    pub mean_ns: f64,
    /// Agent time per measured step, warm-up excluded.
    pub samples: Vec<u64>,
    /// Agent footprint after every step, warm-up included.
    pub footprint: Vec<usize>,
}

impl LatencyStats {
    /// Footprint change from the end of warm-up to the last step.
    pub fn memory_growth(&self, warmup: usize) -> i64 {
        match (self.footprint.get(warmup.saturating_sub(1)), self.footprint.last()) {
            (Some(a), Some(b)) => *b as i64 - *a as i64,
            _ => 0,
        }
    }
}

/// Runs `steps` steps and times only the agent's `propose` and `observe`.
pub fn measure_latency<S: StepSource + ?Sized>(
    agent: &mut dyn Agent,
    env: &mut S,
    steps: usize,
    warmup: usize,
) -> Result<LatencyStats> {
    let mut samples = Vec::with_capacity(steps.saturating_sub(warmup));
    let mut footprint = Vec::with_capacity(steps);
    for t in 0..steps {
        let context = env.context();
        let t0 = Instant::now();
        let theta = agent.propose(&context)?;
        let propose = t0.elapsed();
        let metrics = env.evaluate(&theta)?;
        let t1 = Instant::now();
        agent.observe(&metrics)?;
        let total = propose + t1.elapsed();
        if t >= warmup {
            samples.push(total.as_nanos() as u64);
        }
        footprint.push(agent.footprint_bytes());
    }
    let as_f: Vec<f64> = samples.iter().map(|&s| s as f64).collect();
    Ok(LatencyStats {
        median_ns: median(&as_f),
        mean_ns: mean(&as_f),
        samples,
        footprint,
    })
}
