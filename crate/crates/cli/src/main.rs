//! Batch-experiment front door: train models, evaluate log-likelihood and
//! inference gaps, sweep regularization strengths, and run the oracle
//! verification suite.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration error,
//! 3 numerical divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use air_cli::{commands, CliError};

#[derive(Parser)]
#[command(name = "air", version, about = "Amortized inference regularization experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from an experiment config and write run artifacts.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output run directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Override the training seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a trained model: log-likelihood, bound, and gap split.
    Eval {
        /// Path to a model.airm parameter file.
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Override the evaluation seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Importance samples for the reported amortized bound.
        #[arg(long)]
        eval_k: Option<usize>,
        /// Per-example SVI gradient steps.
        #[arg(long)]
        svi_steps: Option<usize>,
    },
    /// Train/evaluate a grid of regularization strengths and k values.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Parallel child runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Override the base training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the closed-form oracle suite; exit 0 iff every check passes.
    Verify {
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Monte Carlo draws for regularizer/ordering checks.
        #[arg(long)]
        mc_draws: Option<usize>,
        /// Samples for the two-bound comparison.
        #[arg(long)]
        bound_samples: Option<usize>,
        /// Threshold overrides, repeatable: --tol check_name=value
        #[arg(long = "tol")]
        tol: Vec<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("AIR_LOG", "error"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result: Result<u8, CliError> = match cli.cmd {
        Cmd::Train { config, out, seed } => {
            commands::cmd_train(&config, &out, seed).map(|_| 0)
        }
        Cmd::Eval { model, config, out, seed, eval_k, svi_steps } => {
            commands::cmd_eval(&model, &config, &out, seed, eval_k, svi_steps).map(|_| 0)
        }
        Cmd::Sweep { config, out, jobs, seed } => {
            commands::cmd_sweep(&config, &out, jobs, seed).map(|_| 0)
        }
        Cmd::Verify { out, seed, mc_draws, bound_samples, tol } => {
            commands::cmd_verify(&out, seed, mc_draws, bound_samples, &tol)
                .map(|all_passed| if all_passed { 0 } else { 1 })
        }
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
