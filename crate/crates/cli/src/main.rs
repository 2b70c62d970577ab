//! `emr`: search, retrain and evaluate cascaded MRI reconstruction networks.

mod commands;
mod config;
mod error;
mod images;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use emr_core::searchspace::OperationSpec;

use config::{resolve, Overrides};
use error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "emr", version, about = "NAS-searched cascaded MRI reconstruction")]
struct Cli {
    /// Run configuration (JSON); replaces the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data, masks, initialization and gate sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// `desk` (32x32 phantoms) or `paper` (full scale).
    #[arg(long)]
    preset: Option<String>,
    /// Test fold, 0..3.
    #[arg(long)]
    fold: Option<usize>,
    /// Fraction of phase-encode lines sampled.
    #[arg(long)]
    rate: Option<f64>,
    /// Dataset manifest; synthetic phantoms when omitted.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Repeat one operation in every cell instead of searching.
    #[arg(long)]
    homogeneous: Option<OperationSpec>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a random Cartesian sampling mask.
    Mask {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 256)]
        height: usize,
        #[arg(long, default_value_t = 256)]
        width: usize,
    },
    /// Export a synthetic phantom dataset with its manifest.
    Phantom {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        emit_images: bool,
    },
    /// Warmup and binarized architecture search on one fold.
    Search {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Sum the operation probabilities of three search runs.
    Ensemble {
        /// Search run directories.
        runs: Vec<PathBuf>,
    },
    /// Train a fixed genotype on train+validation and evaluate on the test fold.
    Retrain {
        #[command(flatten)]
        run: RunArgs,
        /// Genotype string, genotype.json, or a run directory holding one.
        #[arg(long)]
        genotype: Option<String>,
        #[arg(long)]
        emit_images: bool,
    },
    /// Evaluate a checkpoint on the test fold.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        emit_images: bool,
    },
    /// Print trainable parameter counts.
    AuditParams {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        genotype: Option<String>,
    },
    /// Aggregate fold metrics and timings.
    Report {
        /// Run directories (retrain/eval runs carry metrics; any run may carry timing).
        runs: Vec<PathBuf>,
    },
}

impl Cli {
    fn overrides(&self, run: &RunArgs, genotype: Option<&String>, emit_images: bool) -> Overrides {
        Overrides {
            config: self.config.clone(),
            preset: run.preset.clone(),
            seed: self.seed,
            fold: run.fold,
            rate: run.rate,
            dataset: run.dataset.clone(),
            homogeneous: run.homogeneous,
            genotype: genotype.cloned(),
            emit_images,
        }
    }

    fn out(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

fn configure_workers() -> CliResult<()> {
    let Ok(v) = std::env::var("EMR_NUM_WORKERS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("EMR_NUM_WORKERS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("worker pool: {e}")))
}

fn run(cli: &Cli) -> CliResult<()> {
    configure_workers()?;
    match &cli.command {
        Command::Mask { run, height, width } => {
            let cfg = resolve(&cli.overrides(run, None, false))?;
            commands::mask(&cfg, *height, *width, &cli.out("runs/mask"))
        }
        Command::Phantom { run, emit_images } => {
            let cfg = resolve(&cli.overrides(run, None, *emit_images))?;
            commands::phantom(&cfg, &cli.out("runs/phantom"))
        }
        Command::Search { run } => {
            let cfg = resolve(&cli.overrides(run, None, false))?;
            commands::search(&cfg, &cli.out(&format!("runs/search-fold{}", cfg.fold)))
        }
        Command::Ensemble { runs } => commands::ensemble(runs, &cli.out("runs/ensemble")),
        Command::Retrain { run, genotype, emit_images } => {
            let cfg = resolve(&cli.overrides(run, genotype.as_ref(), *emit_images))?;
            commands::retrain(&cfg, &cli.out(&format!("runs/retrain-fold{}", cfg.fold)))
        }
        Command::Eval { run, weights, emit_images } => {
            let cfg = resolve(&cli.overrides(run, None, *emit_images))?;
            commands::eval(&cfg, weights, &cli.out(&format!("runs/eval-fold{}", cfg.fold)))
        }
        Command::AuditParams { run, genotype } => {
            let cfg = resolve(&cli.overrides(run, genotype.as_ref(), false))?;
            commands::audit_params(&cfg)
        }
        Command::Report { runs } => commands::report(runs, cli.out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("emr: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
