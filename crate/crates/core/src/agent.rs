//! The one-evaluation-per-step interface shared by the tuner and baselines.

use serde::{Deserialize, Serialize};

use crate::composer::Metrics;
use crate::error::Result;

/// What an agent reports after observing the metrics of its last proposal.
/// Fields an algorithm does not produce are `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub error: f64,
    pub escalated: bool,
    pub novelty: Option<f64>,
    pub k_t: Option<usize>,
    pub z_err: Option<f64>,
    pub variance: Option<f64>,
}

/// An online tuner. Each environment step calls `propose` once and then
/// `observe` once with the metrics of the proposed parameters.
///
/// `propose` must not commit state: if the environment fails, the agent is
/// left as it was before the call.
pub trait Agent: Send {
    fn name(&self) -> &str;

    /// Parameters to deploy, inside the box.
    fn propose(&mut self, context: &[f64]) -> Result<Vec<f64>>;

    fn observe(&mut self, metrics: &Metrics) -> Result<StepRecord>;

    /// Logical bytes of growing state (memories, windows, buffers).
    fn footprint_bytes(&self) -> usize;
}

impl<A: Agent + ?Sized> Agent for Box<A> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn propose(&mut self, context: &[f64]) -> Result<Vec<f64>> {
        (**self).propose(context)
    }

    fn observe(&mut self, metrics: &Metrics) -> Result<StepRecord> {
        (**self).observe(metrics)
    }

    fn footprint_bytes(&self) -> usize {
        (**self).footprint_bytes()
    }
}
