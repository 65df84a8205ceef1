//! Config-driven experiment runner.
//!
//! Pipeline: `certify` -> `train` -> `evaluate` -> `figure5`, with stages
//! handing artifacts to each other through the output directory. Exit codes
//! are a stable contract: 0 success, 1 config, 2 certification, 3 training,
//! 4 evaluation.

mod commands;
mod report;
mod svg;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "drip", version, about = "layered robust imitation learning laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// experiment config (TOML, or JSON by extension); defaults when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// master seed override
    #[arg(long)]
    seed: Option<u64>,
    /// worker thread cap (0 = rayon default); results are worker-invariant
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// output directory (default: $DRIP_OUT_DIR or ./drip_out)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Certify the contraction rate, growth constants, and policy Lipschitz
    /// estimates
    Certify {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Generate training data and train the imitation policy
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// also train the value-term-only (behavioral cloning) baseline
        #[arg(long)]
        bc: bool,
        /// skip the certification-artifact precondition
        #[arg(long)]
        skip_certify: bool,
    },
    /// Estimate policy/uncertainty/total gaps and run the bound checks
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the three-scenario gap comparison with 100-path ensembles
    Figure5 {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Grid sweep over the low-level controller parameters
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// comma-separated filter bandwidths
        #[arg(long, value_delimiter = ',', default_value = "10,20,40")]
        omega: Vec<f64>,
        /// comma-separated sampling periods
        #[arg(long, value_delimiter = ',', default_value = "0.005,0.01,0.02")]
        ts: Vec<f64>,
        /// comma-separated predictor gains
        #[arg(long, value_delimiter = ',', default_value = "5,10,20")]
        lambda_s: Vec<f64>,
    },
}

/// Error carrying the exit code contract.
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }
}

impl From<drip_core::Error> for CliError {
    fn from(e: drip_core::Error) -> Self {
        use drip_core::Error::*;
        let code = match &e {
            InvalidConfig(_) => 1,
            CertificationFailed { .. } => 2,
            TrainingAborted(_) | ExpertUnstable(_) => 3,
            _ => 4,
        };
        CliError::new(code, e.to_string())
    }
}

fn resolve_out_dir(common: &CommonArgs) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| std::env::var_os("DRIP_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("drip_out"))
}

fn load_config(common: &CommonArgs) -> Result<drip_core::config::ExperimentConfig, CliError> {
    let mut config = match &common.config {
        Some(path) => drip_core::config::ExperimentConfig::load(path).map_err(|e| {
            CliError::new(1, format!("{}: {e}", path.display()))
        })?,
        None => drip_core::config::ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.master_seed = seed;
    }
    config.validate().map_err(|e| CliError::new(1, e.to_string()))?;
    Ok(config)
}

fn run_in_pool<T>(workers: usize, f: impl FnOnce() -> T + Send) -> T
where
    T: Send,
{
    if workers == 0 {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("thread pool");
    pool.install(f)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Certify { common } => {
            let config = load_config(&common)?;
            let out = resolve_out_dir(&common);
            run_in_pool(common.workers, || commands::cmd_certify(&config, &out))
        }
        Command::Train {
            common,
            bc,
            skip_certify,
        } => {
            let config = load_config(&common)?;
            let out = resolve_out_dir(&common);
            run_in_pool(common.workers, || {
                commands::cmd_train(&config, &out, bc, skip_certify)
            })
        }
        Command::Evaluate { common } => {
            let config = load_config(&common)?;
            let out = resolve_out_dir(&common);
            run_in_pool(common.workers, || commands::cmd_evaluate(&config, &out))
        }
        Command::Figure5 { common } => {
            let config = load_config(&common)?;
            let out = resolve_out_dir(&common);
            run_in_pool(common.workers, || commands::cmd_figure5(&config, &out))
        }
        Command::Sweep {
            common,
            omega,
            ts,
            lambda_s,
        } => {
            let config = load_config(&common)?;
            let out = resolve_out_dir(&common);
            run_in_pool(common.workers, || {
                commands::cmd_sweep(&config, &out, &omega, &ts, &lambda_s)
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
