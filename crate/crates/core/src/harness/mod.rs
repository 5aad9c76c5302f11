//! Batch experiments: every (scenario, algorithm, seed) cell runs
//! independently, rows go to one CSV per (scenario, algorithm), and
//! summaries are computed from those rows alone.

pub mod config;
pub mod plot;
pub mod probe;
pub mod stats;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::RunConfig;
pub use plot::emit_plots;
pub use probe::{measure_latency, LatencyStats, StepSource};
pub use stats::{adaptation_speed, paired_t_test, TTest};

use crate::baselines::make_agent;
use crate::environments::{make_domain_with_noise, Environment};
use crate::error::{Error, Result};

/// One logged step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scenario: String,
    pub algorithm: String,
    pub seed: u64,
    pub step: usize,
    pub true_loss: f64,
    pub oracle_min: f64,
    pub regret: f64,
    pub cumulative_regret: f64,
    pub e_t: f64,
    pub latency_ns: u64,
    pub escalated: bool,
    pub novelty: Option<f64>,
    pub k_t: Option<usize>,
    pub z_err: Option<f64>,
    pub variance: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub scenario: String,
    pub algorithm: String,
    pub seed: u64,
    pub rows: Vec<MetricRow>,
    /// Agent footprint at each step.
    pub footprint: Vec<usize>,
}

impl CellResult {
    pub fn terminal_regret(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.cumulative_regret)
    }
}

/// Runs one cell: a fresh domain and agent driven for `cfg.horizon` steps.
pub fn run_cell(cfg: &RunConfig, scenario: &str, algorithm: &str, seed: u64) -> Result<CellResult> {
    let domain = make_domain_with_noise(scenario, seed, cfg.noise_fraction)?;
    let mut agent = make_agent(algorithm, domain.as_ref(), &cfg.tuner, &cfg.gp, seed)?;
    let scenario = domain.name().to_string();
    let algorithm = agent.name().to_string();
    let mut env = Environment::new(domain, cfg.horizon);
    let mut rows = Vec::with_capacity(cfg.horizon);
    let mut footprint = Vec::with_capacity(cfg.horizon);
    let mut cumulative = 0.0;
    for step in 0..cfg.horizon {
        let context = env.context();
        let t0 = Instant::now();
        let theta = agent.propose(&context)?;
        let propose = t0.elapsed();
        let out = env.step(&theta)?;
        let t1 = Instant::now();
        let rec = agent.observe(&out.metrics)?;
        let latency = propose + t1.elapsed();
        cumulative += out.regret;
        rows.push(MetricRow {
            scenario: scenario.clone(),
            algorithm: algorithm.clone(),
            seed,
            step,
            true_loss: out.true_loss,
            oracle_min: out.oracle_min,
            regret: out.regret,
            cumulative_regret: cumulative,
            e_t: rec.error,
            latency_ns: latency.as_nanos() as u64,
            escalated: rec.escalated,
            novelty: rec.novelty,
            k_t: rec.k_t,
            z_err: rec.z_err,
            variance: rec.variance,
        });
        footprint.push(agent.footprint_bytes());
    }
    Ok(CellResult {
        scenario,
        algorithm,
        seed,
        rows,
        footprint,
    })
}

/// Per (scenario, algorithm) statistics at the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub algorithm: String,
    pub seeds: usize,
    pub terminal_regret_mean: f64,
    pub terminal_regret_ci95: f64,
    pub final_loss_mean: f64,
    pub final_loss_ci95: f64,
    /// Mean over the seeds that adapted.
    pub adaptation_steps_mean: Option<f64>,
    pub adapted_seeds: usize,
    pub median_latency_ns: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTestRow {
    pub scenario: String,
    pub algorithm: String,
    pub baseline: String,
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    pub p: f64,
    pub degenerate: bool,
}

type Series<'a> = BTreeMap<(String, String), BTreeMap<u64, Vec<&'a MetricRow>>>;

fn group(rows: &[MetricRow]) -> Series<'_> {
    let mut out: Series = BTreeMap::new();
    for r in rows {
        out.entry((r.scenario.clone(), r.algorithm.clone()))
            .or_default()
            .entry(r.seed)
            .or_default()
            .push(r);
    }
    for seeds in out.values_mut() {
        for series in seeds.values_mut() {
            series.sort_by_key(|r| r.step);
        }
    }
    out
}

/// Horizon summaries computed only from logged rows. The best loss for
/// adaptation speed is the lowest `W`-window mean any algorithm reached on
/// that scenario and seed.
pub fn summarize(rows: &[MetricRow], window: usize, alpha: f64) -> Vec<SummaryRow> {
    let grouped = group(rows);
    let mut best: BTreeMap<(String, u64), f64> = BTreeMap::new();
    for ((scenario, _), seeds) in &grouped {
        for (seed, series) in seeds {
            let losses: Vec<f64> = series.iter().map(|r| r.true_loss).collect();
            let b = stats::best_rolling_mean(&losses, window);
            let e = best.entry((scenario.clone(), *seed)).or_insert(f64::INFINITY);
            *e = e.min(b);
        }
    }
    grouped
        .iter()
        .map(|((scenario, algorithm), seeds)| {
            let terminal: Vec<f64> = seeds.values().map(|s| s.last().map_or(0.0, |r| r.cumulative_regret)).collect();
            let final_loss: Vec<f64> = seeds.values().map(|s| s.last().map_or(0.0, |r| r.true_loss)).collect();
            let speeds: Vec<f64> = seeds
                .iter()
                .filter_map(|(seed, series)| {
                    let losses: Vec<f64> = series.iter().map(|r| r.true_loss).collect();
                    let b = best[&(scenario.clone(), *seed)];
                    b.is_finite()
                        .then(|| adaptation_speed(&losses, window, alpha, b))
                        .flatten()
                        .map(|s| s as f64)
                })
                .collect();
            let latencies: Vec<f64> = seeds.values().flatten().map(|r| r.latency_ns as f64).collect();
            SummaryRow {
                scenario: scenario.clone(),
                algorithm: algorithm.clone(),
                seeds: seeds.len(),
                terminal_regret_mean: stats::mean(&terminal),
                terminal_regret_ci95: stats::ci95(&terminal),
                final_loss_mean: stats::mean(&final_loss),
                final_loss_ci95: stats::ci95(&final_loss),
                adaptation_steps_mean: (!speeds.is_empty()).then(|| stats::mean(&speeds)),
                adapted_seeds: speeds.len(),
                median_latency_ns: stats::median(&latencies),
            }
        })
        .collect()
}

/// Paired t-tests of `reference` against every other algorithm on terminal
/// regret, over the seeds both ran.
pub fn pairwise_tests(rows: &[MetricRow], reference: &str) -> Vec<TTestRow> {
    let grouped = group(rows);
    let terminal = |scenario: &str, alg: &str| -> BTreeMap<u64, f64> {
        grouped
            .get(&(scenario.to_string(), alg.to_string()))
            .map(|seeds| {
                seeds
                    .iter()
                    .map(|(s, series)| (*s, series.last().map_or(0.0, |r| r.cumulative_regret)))
                    .collect()
            })
            .unwrap_or_default()
    };
    let mut out = Vec::new();
    for (scenario, alg) in grouped.keys() {
        if alg == reference {
            continue;
        }
        let a = terminal(scenario, reference);
        let b = terminal(scenario, alg);
        let seeds: Vec<u64> = a.keys().filter(|s| b.contains_key(s)).copied().collect();
        let xa: Vec<f64> = seeds.iter().map(|s| a[s]).collect();
        let xb: Vec<f64> = seeds.iter().map(|s| b[s]).collect();
        if let Ok(t) = paired_t_test(&xa, &xb) {
            out.push(TTestRow {
                scenario: scenario.clone(),
                algorithm: reference.to_string(),
                baseline: alg.clone(),
                n: t.n,
                mean_diff: t.mean_diff,
                t: t.t,
                p: t.p,
                degenerate: t.degenerate,
            });
        }
    }
    out
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn cell_file_name(scenario: &str, algorithm: &str) -> String {
    format!("{scenario}__{algorithm}.csv")
}

/// Reads every per-cell CSV in a run directory.
pub fn read_run(dir: &Path) -> Result<Vec<MetricRow>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "csv")
                && p.file_stem().and_then(|s| s.to_str()).is_some_and(|s| s.contains("__"))
        })
        .collect();
    paths.sort();
    let mut rows = Vec::new();
    for p in paths {
        rows.extend(read_csv::<MetricRow>(&p)?);
    }
    Ok(rows)
}

#[derive(Debug)]
pub struct RunReport {
    pub cells: Vec<CellResult>,
    pub summary: Vec<SummaryRow>,
    pub tests: Vec<TTestRow>,
    pub files: Vec<PathBuf>,
}

impl RunReport {
    pub fn rows(&self) -> Vec<MetricRow> {
        self.cells.iter().flat_map(|c| c.rows.iter().cloned()).collect()
    }

    pub fn cell(&self, scenario: &str, algorithm: &str, seed: u64) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.scenario == scenario && c.algorithm == algorithm && c.seed == seed)
    }

    /// Terminal regrets in seed order.
    pub fn terminal_regrets(&self, scenario: &str, algorithm: &str) -> Vec<f64> {
        let mut cells: Vec<&CellResult> = self
            .cells
            .iter()
            .filter(|c| c.scenario == scenario && c.algorithm == algorithm)
            .collect();
        cells.sort_by_key(|c| c.seed);
        cells.iter().map(|c| c.terminal_regret()).collect()
    }
}

/// Runs all cells without touching the disk.
pub fn run_cells(cfg: &RunConfig) -> Result<(Vec<CellResult>, Vec<String>)> {
    cfg.validate()?;
    let scenarios = cfg.scenario_names()?;
    let algorithms = cfg.algorithm_names()?;
    let jobs: Vec<(&str, &str, u64)> = scenarios
        .iter()
        .flat_map(|s| algorithms.iter().flat_map(move |a| cfg.seed_list().into_iter().map(move |seed| (*s, *a, seed))))
        .collect();
    let results: Vec<Result<CellResult>> = jobs.par_iter().map(|(s, a, seed)| run_cell(cfg, s, a, *seed)).collect();
    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for ((s, a, seed), r) in jobs.iter().zip(results) {
        match r {
            Ok(c) => cells.push(c),
            Err(e) => failures.push(format!("{s}/{a}/seed {seed}: {e}")),
        }
    }
    Ok((cells, failures))
}

/// Runs the experiment and writes per-cell CSVs, `summary.csv`,
/// `ttests.csv`, `constants.json` and the resolved `config.toml`. Cells that
/// succeed are written even if others fail; the failure is then returned.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunReport> {
    let (cells, failures) = run_cells(cfg)?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    let mut by_file: BTreeMap<String, Vec<&MetricRow>> = BTreeMap::new();
    for c in &cells {
        by_file
            .entry(cell_file_name(&c.scenario, &c.algorithm))
            .or_default()
            .extend(c.rows.iter());
    }
    for (name, mut rows) in by_file {
        rows.sort_by_key(|r| (r.seed, r.step));
        let path = dir.join(name);
        write_csv(&path, &rows)?;
        files.push(path);
    }
    let rows: Vec<MetricRow> = cells.iter().flat_map(|c| c.rows.iter().cloned()).collect();
    let summary = summarize(&rows, cfg.adaptation_window, cfg.adaptation_alpha);
    let path = dir.join("summary.csv");
    write_csv(&path, &summary)?;
    files.push(path);
    let tests = pairwise_tests(&rows, "rasp");
    let path = dir.join("ttests.csv");
    write_csv(&path, &tests)?;
    files.push(path);
    let path = dir.join("constants.json");
    write_constants(&path, cfg)?;
    files.push(path);
    let path = dir.join("config.toml");
    fs::write(&path, cfg.to_toml_string()).map_err(|e| Error::io(&path, e))?;
    files.push(path);
    if let Some(first) = failures.first() {
        return Err(Error::PartialRun {
            failed: failures.len(),
            total: failures.len() + cells.len(),
            first: first.clone(),
        });
    }
    Ok(RunReport {
        cells,
        summary,
        tests,
        files,
    })
}

/// Generated constants of every scenario and seed in the config.
pub fn write_constants(path: &Path, cfg: &RunConfig) -> Result<()> {
    let mut all = serde_json::Map::new();
    for s in cfg.scenario_names()? {
        let mut per_seed = serde_json::Map::new();
        for seed in cfg.seed_list() {
            let d = make_domain_with_noise(s, seed, cfg.noise_fraction)?;
            per_seed.insert(seed.to_string(), d.constants());
        }
        all.insert(s.to_string(), serde_json::Value::Object(per_seed));
    }
    let text = serde_json::to_string_pretty(&serde_json::Value::Object(all))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub scenario: String,
    pub rasp_mean: f64,
    pub nomem_mean: f64,
    pub mean_diff: f64,
    pub t: f64,
    pub p: f64,
}

/// Full agent against its context-masked twin; writes `ablation.csv` next
/// to the usual run outputs.
pub fn ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let cfg = RunConfig {
        algorithms: vec!["rasp".into(), "nomem".into()],
        ..cfg.clone()
    };
    let report = run_experiment(&cfg)?;
    let mut out = Vec::new();
    for s in cfg.scenario_names()? {
        let a = report.terminal_regrets(s, "nomem");
        let b = report.terminal_regrets(s, "rasp");
        let (t, p) = paired_t_test(&a, &b).map_or((f64::NAN, f64::NAN), |r| (r.t, r.p));
        out.push(AblationRow {
            scenario: s.to_string(),
            rasp_mean: stats::mean(&b),
            nomem_mean: stats::mean(&a),
            mean_diff: stats::mean(&a) - stats::mean(&b),
            t,
            p,
        });
    }
    write_csv(&cfg.output_dir.join("ablation.csv"), &out)?;
    Ok(out)
}
