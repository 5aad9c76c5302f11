use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rasp_core::harness::{ablate, emit_plots, run_experiment, write_csv, RunConfig};
use rasp_core::theory::{format_report, run_suite, SuiteConfig};
use rasp_core::Error;

#[derive(Parser)]
#[command(name = "rasp", version, about = "Online tuner experiments, baselines and regret checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (scenario, algorithm, seed) cell and write CSVs and summaries.
    Run(RunArgs),
    /// Check the regret bounds on random synthetic instances.
    Theory(TheoryArgs),
    /// Render one SVG per scenario from the CSVs of an earlier run.
    Plot {
        #[arg(long, short = 'o', default_value = "results")]
        output_dir: PathBuf,
    },
    /// Compare the full tuner against its context-masked twin.
    Ablate(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML run config; flags below override its fields.
    #[arg(long, short = 'c')]
    config: Option<PathBuf>,
    /// Comma-separated scenario names or tags (e.g. 7,A1).
    #[arg(long, value_delimiter = ',')]
    scenarios: Option<Vec<String>>,
    /// Comma-separated algorithms: rasp, nomem, cma, gp, rs.
    #[arg(long, value_delimiter = ',')]
    algorithms: Option<Vec<String>>,
    /// Steps per run.
    #[arg(short = 'T', long = "horizon")]
    horizon: Option<usize>,
    /// Number of seeds.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    first_seed: Option<u64>,
    #[arg(long, short = 'o')]
    output_dir: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(self) -> rasp_core::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.scenarios {
            cfg.scenarios = s;
        }
        if let Some(a) = self.algorithms {
            cfg.algorithms = a;
        }
        if let Some(t) = self.horizon {
            cfg.horizon = t;
        }
        if let Some(n) = self.seeds {
            cfg.seeds = n;
        }
        if let Some(s) = self.first_seed {
            cfg.first_seed = s;
        }
        if let Some(d) = self.output_dir {
            cfg.output_dir = d;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TheoryArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances for the exact-gradient checks.
    #[arg(long, default_value_t = 50)]
    specs: usize,
    #[arg(short = 'T', long = "horizon", default_value_t = 10_000)]
    horizon: usize,
    /// Write theory.csv here as well as printing the table.
    #[arg(long, short = 'o')]
    output_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> rasp_core::Result<ExitCode> {
    match command {
        Command::Run(args) => {
            let cfg = args.resolve()?;
            match run_experiment(&cfg) {
                Ok(report) => {
                    for row in &report.summary {
                        println!(
                            "{:<26} {:<6} regret {:>12.4} +- {:<10.4} latency {:>10.0} ns",
                            row.scenario,
                            row.algorithm,
                            row.terminal_regret_mean,
                            row.terminal_regret_ci95,
                            row.median_latency_ns
                        );
                    }
                    println!("wrote {} files to {}", report.files.len(), cfg.output_dir.display());
                    Ok(ExitCode::SUCCESS)
                }
                Err(e @ Error::PartialRun { .. }) => {
                    eprintln!("warning: {e}; outputs for the other cells were written");
                    Ok(ExitCode::from(1))
                }
                Err(e) => Err(e),
            }
        }
        Command::Theory(args) => {
            let cfg = SuiteConfig {
                seed: args.seed,
                specs: args.specs,
                horizon: args.horizon,
                ..SuiteConfig::default()
            };
            let rows = run_suite(&cfg)?;
            print!("{}", format_report(&rows));
            if let Some(dir) = args.output_dir {
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                write_csv(&dir.join("theory.csv"), &rows)?;
            }
            let failed = rows.iter().filter(|r| !r.pass).count();
            println!("{} checks, {failed} failed", rows.len());
            Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Plot { output_dir } => {
            for path in emit_plots(&output_dir)? {
                println!("{}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablate(args) => {
            let cfg = args.resolve()?;
            for row in ablate(&cfg)? {
                println!(
                    "{:<26} rasp {:>12.4} nomem {:>12.4} diff {:>10.4} p {:.4}",
                    row.scenario, row.rasp_mean, row.nomem_mean, row.mean_diff, row.p
                );
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
