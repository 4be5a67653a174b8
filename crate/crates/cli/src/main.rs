use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use boxeki::experiment::{compare_methods, run_experiment, ExperimentConfig, ExperimentError, Method};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "boxeki", version, about = "Box-constrained ensemble Kalman inversion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every method of an experiment config and write diagnostics.
    Run {
        /// JSON config with problem/method/flow/integration/output sections.
        config: PathBuf,
        /// Override `method.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Override `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated subset of methods, e.g. `eki,projected`.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        /// Override `integration.t_end`.
        #[arg(long = "t-end")]
        t_end: Option<f64>,
    },
}

const EXIT_VALIDATION: u8 = 2;
const EXIT_SOLVER: u8 = 3;
const EXIT_IO: u8 = 1;

fn exit_code(err: &ExperimentError) -> u8 {
    match err {
        ExperimentError::Validation(_) | ExperimentError::Setup(_) => EXIT_VALIDATION,
        ExperimentError::Solver(_) => EXIT_SOLVER,
        ExperimentError::Io(_) => EXIT_IO,
    }
}

fn load(
    path: &PathBuf,
    seed: Option<u64>,
    out: Option<PathBuf>,
    methods: Option<Vec<String>>,
    t_end: Option<f64>,
) -> Result<ExperimentConfig, ExperimentError> {
    let text = fs::read_to_string(path)
        .map_err(|e| ExperimentError::Validation(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(s) = seed {
        cfg.method.seed = s;
    }
    if let Some(dir) = out {
        cfg.output.dir = dir;
    }
    if let Some(names) = methods {
        cfg.method.methods = names.iter().map(|n| n.parse::<Method>()).collect::<Result<_, _>>()?;
    }
    if let Some(t) = t_end {
        cfg.integration.t_end = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let Command::Run {
        config,
        seed,
        out,
        methods,
        t_end,
    } = Cli::parse().command;
    let cfg = match load(&config, seed, out, methods, t_end) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    println!("{}", cfg.to_json());
    let report = match run_experiment(&cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    print!("{}", compare_methods(&report.outcomes));
    println!("outputs written to {}", cfg.output.dir.display());
    if report.any_failed() {
        for o in report.outcomes.iter().filter(|o| o.failed()) {
            eprintln!("error: method {} did not finish: {:?}", o.method, o.status);
        }
        return ExitCode::from(EXIT_SOLVER);
    }
    ExitCode::SUCCESS
}
