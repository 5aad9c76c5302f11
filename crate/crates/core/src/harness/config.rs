use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{resolve_algorithm, GpConfig};
use crate::environments::{resolve_scenario, DEFAULT_NOISE_FRACTION};
use crate::error::{Error, Result};
use crate::tuner::TunerConfig;

/// A batch of experiments. Every field has a default, so a config file only
/// needs the keys it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenarios: Vec<String>,
    pub algorithms: Vec<String>,
    pub horizon: usize,
    pub seeds: usize,
    /// Seeds run are `first_seed..first_seed + seeds`.
    pub first_seed: u64,
    pub output_dir: PathBuf,
    /// Metric noise as a fraction of each scenario's typical loss.
    pub noise_fraction: f64,
    /// Rolling window for adaptation speed.
    pub adaptation_window: usize,
    pub adaptation_alpha: f64,
    pub tuner: TunerConfig,
    pub gp: GpConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenarios: crate::environments::standard_scenarios().iter().map(|s| s.to_string()).collect(),
            algorithms: ["rasp", "cma", "gp", "rs"].map(String::from).to_vec(),
            horizon: 100,
            seeds: 5,
            first_seed: 0,
            output_dir: PathBuf::from("results"),
            noise_fraction: DEFAULT_NOISE_FRACTION,
            adaptation_window: 10,
            adaptation_alpha: 1.2,
            tuner: TunerConfig::default(),
            gp: GpConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidConfig("horizon must be at least 1".into()));
        }
        if self.seeds == 0 {
            return Err(Error::InvalidConfig("need at least one seed".into()));
        }
        if self.adaptation_window == 0 || !(self.adaptation_alpha >= 1.0) {
            return Err(Error::InvalidConfig("adaptation window must be positive and alpha >= 1".into()));
        }
        if !(self.noise_fraction >= 0.0 && self.noise_fraction.is_finite()) {
            return Err(Error::InvalidConfig("noise fraction must be non-negative".into()));
        }
        for s in &self.scenarios {
            resolve_scenario(s)?;
        }
        for a in &self.algorithms {
            resolve_algorithm(a)?;
        }
        self.tuner.validate()
    }

    /// Canonical scenario names, in config order, without duplicates.
    pub fn scenario_names(&self) -> Result<Vec<&'static str>> {
        let mut out: Vec<&'static str> = Vec::new();
        for s in &self.scenarios {
            let name = resolve_scenario(s)?;
            if !out.contains(&name) {
                out.push(name);
            }
        }
        Ok(out)
    }

    pub fn algorithm_names(&self) -> Result<Vec<&'static str>> {
        let mut out: Vec<&'static str> = Vec::new();
        for a in &self.algorithms {
            let name = resolve_algorithm(a)?;
            if !out.contains(&name) {
                out.push(name);
            }
        }
        Ok(out)
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.first_seed + i).collect()
    }
}
