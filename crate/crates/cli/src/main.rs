//! `resplat`: umbrella binary for the Gaussian-splat trajectory pipeline —
//! simulate, track, weight, train, extrapolate, evaluate, verify.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use resplat_autodiff::AutodiffError;
use resplat_cli::commands::{self, NumericalFailure};
use resplat_cli::config::{load_opt, FileConfig};
use resplat_model::ModelError;

#[derive(Parser, Debug)]
#[command(
    name = "resplat",
    version,
    about = "Trajectory pipeline for Gaussian-splat densification: simulate scenes, \
             link trajectories, weight them, train stream models, synthesize finer \
             levels, and score the results"
)]
struct Cli {
    /// Seed for every randomized stage
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; all cores by default
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML file supplying defaults that flags override
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic densification series with ground truth
    Simulate(commands::simulate::SimulateArgs),
    /// Link a snapshot series into per-record trajectories
    Track(commands::track::TrackArgs),
    /// Compute importance weights from curvature or densification counts
    SampleHessian(commands::sample_hessian::SampleHessianArgs),
    /// Fit one stream's sequence model on a trajectory archive
    Train(commands::train::TrainArgs),
    /// Roll trained models forward to synthesize finer levels
    Extrapolate(commands::extrapolate::ExtrapolateArgs),
    /// Score method outputs against a ground-truth snapshot
    Eval(commands::eval_cmd::EvalArgs),
    /// Merge per-scene tables and summarize improvements
    Report(commands::report::ReportArgs),
    /// Verify gradients against central differences
    Gradcheck(commands::gradcheck::GradcheckArgs),
}

/// Default seed when neither the flag nor the config file provides one.
const DEFAULT_SEED: u64 = 42;

fn main() {
    // clap's own parse failures already exit with the validation code 2.
    let cli = Cli::parse();
    std::process::exit(match execute(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err:#}");
            classify(&err)
        }
    });
}

fn execute(cli: Cli) -> Result<()> {
    let file_cfg: FileConfig = load_opt(cli.config.as_deref())?;
    let seed = cli.seed.or(file_cfg.global.seed).unwrap_or(DEFAULT_SEED);
    if let Some(threads) = cli.threads.or(file_cfg.global.threads) {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    }

    match &cli.command {
        Command::Simulate(args) => commands::simulate::run(args, seed),
        Command::Track(args) => commands::track::run(args),
        Command::SampleHessian(args) => commands::sample_hessian::run(args),
        Command::Train(args) => commands::train::run(args, seed, &file_cfg),
        Command::Extrapolate(args) => commands::extrapolate::run(args, &file_cfg),
        Command::Eval(args) => commands::eval_cmd::run(args),
        Command::Report(args) => commands::report::run(args),
        Command::Gradcheck(args) => commands::gradcheck::run(args, seed),
    }
}

/// Map an error chain to the process exit code: 3 when any cause is a
/// numerical failure (non-finite values or divergence), 2 otherwise.
fn classify(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<NumericalFailure>() {
            return 3;
        }
        if let Some(m) = cause.downcast_ref::<ModelError>() {
            if matches!(m, ModelError::NonFinite(_) | ModelError::Diverged { .. }) {
                return 3;
            }
        }
        if let Some(a) = cause.downcast_ref::<AutodiffError>() {
            if matches!(a, AutodiffError::NonFinite(_)) {
                return 3;
            }
        }
    }
    2
}
