//! Comparison agents and the factory that builds any agent by name.

pub mod cma;
pub mod gp;
pub mod random;

pub use cma::{CmaAgent, CmaState};
pub use gp::{GpConfig, GpModel, GpPosterior, GpUcb};
pub use random::{rs_step, RandomSearch};

use crate::agent::Agent;
use crate::environments::ExperimentDomain;
use crate::error::{Error, Result};
use crate::tuner::{RaspTuner, TunerConfig};

pub const ALGORITHMS: [&str; 5] = ["rasp", "nomem", "cma", "gp", "rs"];

/// Canonical algorithm name for a user-facing alias.
pub fn resolve_algorithm(name: &str) -> Result<&'static str> {
    let lower = name.trim().to_ascii_lowercase();
    let canonical = match lower.as_str() {
        "rasp" | "rasp-tuner" => "rasp",
        "nomem" | "nomemory" | "no-memory" => "nomem",
        "cma" | "cma-es" | "cmaes" => "cma",
        "gp" | "bo" | "gp-ucb" => "gp",
        "rs" | "random" | "random-search" => "rs",
        _ => return Err(Error::UnknownAlgorithm(name.to_string())),
    };
    Ok(canonical)
}

/// RASP with contexts masked to zero.
pub fn nomem_wrap(tuner: RaspTuner) -> RaspTuner {
    tuner.into_masked()
}

/// Builds the named agent for a domain. The tuner uses its wide step scale
/// on domains that ask for it.
pub fn make_agent(
    name: &str,
    domain: &dyn ExperimentDomain,
    tuner: &TunerConfig,
    gp: &GpConfig,
    seed: u64,
) -> Result<Box<dyn Agent>> {
    let bounds = domain.bounds().clone();
    let specs = domain.metric_specs();
    let cfg = if domain.wide_steps() { tuner.widened() } else { tuner.clone() };
    Ok(match resolve_algorithm(name)? {
        "rasp" => Box::new(RaspTuner::new(bounds, domain.context_dim(), specs, cfg, seed)?),
        "nomem" => Box::new(nomem_wrap(RaspTuner::new(bounds, domain.context_dim(), specs, cfg, seed)?)),
        "cma" => Box::new(CmaAgent::new(bounds, specs, seed)?),
        "gp" => Box::new(GpUcb::new(bounds, domain.context_dim(), specs, gp.clone(), seed)?),
        _ => Box::new(RandomSearch::new(bounds, specs, seed)?),
    })
}
