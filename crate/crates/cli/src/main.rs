use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use spde_amplitude::config::{self, Experiment, RunConfig, Task};
use spde_amplitude::report::annotate_csv;

mod selftest;

const USAGE_ERROR: u8 = 1;
const THRESHOLD_FAILURE: u8 = 2;

#[derive(Parser)]
#[command(
    name = "spde-amp",
    version,
    about = "Amplitude equations for SPDEs: coefficients, paths and experiments"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    #[arg(long, global = true, value_name = "INT")]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the amplitude-equation coefficients as JSON.
    Coeffs,
    /// Write path CSVs for the full system and the amplitude equation.
    Simulate,
    /// Run one experiment family and write its report.
    Experiment {
        /// Defaults to `experiment` in the config file.
        name: Option<ExperimentArg>,
    },
    /// Run the exact checks and print a summary.
    Selftest,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExperimentArg {
    Coupled,
    Weak,
    Qv,
    Stabilization,
    Averaging,
}

impl From<ExperimentArg> for Experiment {
    fn from(e: ExperimentArg) -> Self {
        match e {
            ExperimentArg::Coupled => Experiment::Coupled,
            ExperimentArg::Weak => Experiment::Weak,
            ExperimentArg::Qv => Experiment::Qv,
            ExperimentArg::Stabilization => Experiment::Stabilization,
            ExperimentArg::Averaging => Experiment::Averaging,
        }
    }
}

enum Failure {
    Usage(String),
    Threshold(String),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn load(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = cli.workers {
        cfg.workers = workers;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Usage(format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Selftest => {
            let outcomes = selftest::run();
            let failed = outcomes.iter().filter(|o| !o.pass).count();
            for o in &outcomes {
                println!(
                    "{} {}: {}",
                    if o.pass { "PASS" } else { "FAIL" },
                    o.name,
                    o.detail
                );
            }
            println!("{} checks, {failed} failed", outcomes.len());
            if failed > 0 {
                return Err(Failure::Threshold(format!(
                    "{failed} selftest checks failed"
                )));
            }
        }
        Command::Coeffs => {
            let cfg = load(cli)?.resolve(Task::Coeffs)?;
            let report = config::coefficient_report(&cfg)?;
            write(&cfg.out, "coefficients.json", &report.to_json()?)?;
            let c = &report.coefficients;
            println!(
                "nu_tilde = {}\neta_tilde = {}\nsigma_a = {}\nsigma_b = {}",
                c.nu_tilde, c.eta_tilde, c.sigma_a, c.sigma_b
            );
        }
        Command::Simulate => {
            let cfg = load(cli)?.resolve(Task::Simulate)?;
            for f in config::simulate_outputs(&cfg)? {
                write(&cfg.out, &f.name, &f.contents)?;
            }
        }
        Command::Experiment { name } => {
            let base = load(cli)?;
            let exp = match (name, base.experiment) {
                (Some(n), _) => Experiment::from(*n),
                (None, Some(e)) => e,
                (None, None) => {
                    return Err(Failure::Usage(
                        "no experiment given on the command line or in the config".into(),
                    ))
                }
            };
            let cfg = base.resolve(Task::Experiment(exp))?;
            eprintln!("running {exp} (seed {}, {} workers)", cfg.seed, cfg.workers);
            let report = config::run_experiment(&cfg)?;
            write(&cfg.out, &format!("{exp}_report.json"), &report.to_json()?)?;
            write(
                &cfg.out,
                &format!("{exp}_cells.csv"),
                &annotate_csv(&report.to_csv(), &cfg.to_json_value()),
            )?;
            for c in &report.checks {
                println!(
                    "{} {}: {}",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
            }
            if !report.pass {
                return Err(Failure::Threshold(format!(
                    "{exp}: threshold checks failed"
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { USAGE_ERROR } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(USAGE_ERROR)
        }
        Err(Failure::Threshold(msg)) => {
            eprintln!("failed: {msg}");
            ExitCode::from(THRESHOLD_FAILURE)
        }
    }
}
