//! Fixtures shared by the benchmarks: an agent paired with a live
//! environment, warmed up so window-based agents run at steady size.

use rasp_core::agent::Agent;
use rasp_core::baselines::{make_agent, GpConfig};
use rasp_core::environments::{make_domain, Environment};
use rasp_core::tuner::TunerConfig;
use rasp_core::Result;

/// Long enough that benchmarks never run off the end of a schedule.
pub const BENCH_HORIZON: usize = 100_000;

pub struct Rig {
    pub agent: Box<dyn Agent>,
    pub env: Environment,
}

impl Rig {
    pub fn new(algorithm: &str, scenario: &str, seed: u64, warmup: usize) -> Result<Self> {
        let domain = make_domain(scenario, seed)?;
        let agent = make_agent(algorithm, domain.as_ref(), &TunerConfig::default(), &GpConfig::default(), seed)?;
        let mut rig = Self {
            agent,
            env: Environment::new(domain, BENCH_HORIZON),
        };
        for _ in 0..warmup {
            rig.step()?;
        }
        Ok(rig)
    }

    /// One propose, evaluate, observe round. Returns the composed error.
    pub fn step(&mut self) -> Result<f64> {
        let context = self.env.context();
        let theta = self.agent.propose(&context)?;
        let metrics = self.env.step(&theta)?.metrics;
        Ok(self.agent.observe(&metrics)?.error)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rig_steps_every_algorithm() {
        for alg in ["rasp", "nomem", "cma", "gp", "rs"] {
            let mut rig = Rig::new(alg, "7", 0, 3).unwrap();
            let e = rig.step().unwrap();
            assert!((0.0..=1.0).contains(&e));
            assert_eq!(rig.env.t(), 4);
        }
    }
}
