//! Retrieval-augmented online tuner with a mixture-of-experts surrogate,
//! the benchmark scenarios it is evaluated on, baseline optimizers, regret
//! checks on synthetic quadratics, and the experiment harness.

pub mod adaptation;
pub mod agent;
pub mod baselines;
pub mod composer;
pub mod environments;
pub mod error;
pub mod harness;
pub mod memory;
pub mod param_space;
pub mod seeding;
pub mod surrogate;
pub mod theory;
pub mod tuner;

pub use agent::{Agent, StepRecord};
pub use baselines::{make_agent, CmaAgent, GpConfig, GpUcb, RandomSearch};
pub use composer::{ErrorComposer, MetricSpec, Metrics, Polarity};
pub use environments::{make_domain, Environment, ExperimentDomain};
pub use error::{Error, Result};
pub use harness::{MetricRow, RunConfig};
pub use memory::{MemoryConfig, PromptMemory};
pub use param_space::{ParamBounds, RunningEma};
pub use surrogate::{MoeConfig, MoeSurrogate};
pub use tuner::{RaspTuner, StepInfo, TunerConfig};
