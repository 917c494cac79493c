//! `esmc` command-line tool.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! failures while running.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "esmc", version, about = "Entire-space conversion-rate models on simulated sessions")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides `paths.out_dir`).
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate sessions and export raw samples with a ground-truth manifest.
    Simulate(SimulateArgs),
    /// Split raw samples by session and calibrate both sides.
    Calibrate(CalibrateArgs),
    /// Train a model and write its checkpoint and training log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a sample file.
    Eval(EvalArgs),
    /// Train and evaluate over a grid of one loss weight and several seeds.
    Sweep(SweepArgs),
    /// Monte-Carlo comparison of realised and chain-rule conversion rates.
    VerifyGap(GapArgs),
    /// Train with and without sample calibration and compare.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Deferred purchase rate.
    #[arg(long)]
    rho: Option<f64>,
    /// Number of simulated users.
    #[arg(long)]
    users: Option<usize>,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Raw sample file (default: `<out>/data/raw.samples`).
    #[arg(long)]
    input: Option<PathBuf>,
    /// First test session; earlier sessions train.
    #[arg(long)]
    boundary: Option<u32>,
}

#[derive(Debug, Args, Default)]
struct TrainFlags {
    /// Model variant, e.g. `esmc`, `esmm2`, `shared-bottom`.
    #[arg(long)]
    variant: Option<String>,
    /// Seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Passes over the training samples.
    #[arg(long)]
    epochs: Option<usize>,
    /// Base learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Mini-batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Weight of the twin-tower KL term.
    #[arg(long)]
    kl: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training samples (default: `<out>/data/train.samples`).
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint (default: `<out>/checkpoints/model.ckpt`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Test samples (default: `<out>/data/test.samples`).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Training samples (default: `<out>/data/train.samples`).
    #[arg(long)]
    train: Option<PathBuf>,
    /// Test samples (default: `<out>/data/test.samples`).
    #[arg(long)]
    test: Option<PathBuf>,
    /// `kl`, `ctcar_global`, `ctcar`, `ctcvr` or `lr`.
    #[arg(long)]
    parameter: Option<String>,
    /// Comma-separated grid values.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Parallel training runs.
    #[arg(long)]
    workers: Option<usize>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Debug, Args)]
struct GapArgs {
    /// Deferred-purchase rate.
    #[arg(long)]
    rho: Option<f64>,
    /// Number of exposures.
    #[arg(long, default_value_t = 1_000_000)]
    n: u64,
    /// Seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Raw sample file (default: `<out>/data/raw.samples`).
    #[arg(long)]
    input: Option<PathBuf>,
    /// First test session; earlier sessions train.
    #[arg(long)]
    boundary: Option<u32>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[command(flatten)]
    flags: TrainFlags,
}

/// Marks an error as a usage or configuration problem (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub anyhow::Error);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(e: &anyhow::Error) -> u8 {
    let usage = e.chain().any(|c| {
        c.is::<UsageError>()
            || matches!(
                c.downcast_ref::<esmc_core::Error>(),
                Some(esmc_core::Error::Config(_) | esmc_core::Error::Usage(_))
            )
    });
    if usage {
        1
    } else {
        2
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    // Without --config, a run directory resumes from its own resolved config.
    let resumed = match (&cli.config, &cli.out) {
        (None, Some(out)) => Some(out.join("config.toml")).filter(|p| p.is_file()),
        _ => None,
    };
    let mut cfg = RunConfig::load(cli.config.as_deref().or(resumed.as_deref()))?;
    if let Some(out) = cli.out {
        cfg.paths.out_dir = out;
    }
    match cli.command {
        Command::Simulate(a) => commands::simulate(cfg, a),
        Command::Calibrate(a) => commands::calibrate(cfg, a),
        Command::Train(a) => commands::train(cfg, a),
        Command::Eval(a) => commands::eval(cfg, a),
        Command::Sweep(a) => commands::sweep(cfg, a),
        Command::VerifyGap(a) => commands::verify_gap(cfg, a),
        Command::Ablate(a) => commands::ablate(cfg, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
