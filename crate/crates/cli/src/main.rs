use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pseudoneg::par::Execution;
use pseudoneg_cli::commands::{self, AuditTarget, EvalOptions, TrainOptions};
use pseudoneg_cli::{resolve_out, CliError, ExperimentConfig, OUT_ENV};

#[derive(Parser)]
#[command(name = "pseudoneg", version, about = "Rotation-conditioned pseudo-negative experiments")]
struct Cli {
    /// Flat `key = value` config file; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: $PSEUDONEG_OUT, then ./runs).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed; overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Checkpoint to resume from (train) or to evaluate.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    /// Run single-threaded.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the encoder and predictor.
    Train,
    /// Estimate relative poses on held-out pairs and write the error table.
    EvalPose {
        /// Directory of `.xyz` clouds to evaluate on instead of the
        /// synthetic held-out set.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Comma-separated maximum angles in degrees.
        #[arg(long, value_delimiter = ',')]
        thetas: Option<Vec<f64>>,
    },
    /// Check the collapse diagnostics on the degenerate configuration and
    /// optionally on a trained checkpoint.
    CollapseAudit {
        /// `degenerate` or a checkpoint path.
        target: Option<String>,
    },
    /// Draw uniform rotations and test their angle distribution.
    SampleQuats {
        #[arg(long, default_value_t = 1000)]
        count: usize,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|source| CliError::Io {
                path: path.clone(),
                source,
            })?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let execution = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let out = resolve_out(cli.out.clone(), std::env::var(OUT_ENV).ok());
    let mut cfg = load_config(&cli)?;
    match &cli.command {
        Command::Train => {
            let outcome = commands::train(TrainOptions {
                config: cfg,
                config_given: cli.config.is_some(),
                out,
                resume: cli.checkpoint.clone(),
                quiet: cli.quiet,
                execution,
            })?;
            if !cli.quiet {
                println!("checkpoint written to {}", outcome.checkpoint.display());
            }
        }
        Command::EvalPose { dataset, thetas } => {
            let checkpoint = cli
                .checkpoint
                .clone()
                .ok_or_else(|| CliError::Usage("eval-pose needs --checkpoint".into()))?;
            if let Some(t) = thetas {
                cfg.eval.eval_thetas = t.clone();
            }
            let rows = commands::eval_pose(EvalOptions {
                config: cfg,
                checkpoint,
                dataset: dataset.clone(),
                out: out.clone(),
                execution,
            })?;
            if !cli.quiet {
                println!("{}", pseudoneg::pose::PoseRow::CSV_HEADER);
                for r in rows {
                    println!("{}", r.csv_row());
                }
            }
        }
        Command::CollapseAudit { target } => {
            let target = match (target.as_deref(), &cli.checkpoint) {
                (Some("degenerate"), _) | (None, None) => AuditTarget::Degenerate,
                (Some(path), _) => AuditTarget::Checkpoint(PathBuf::from(path)),
                (None, Some(path)) => AuditTarget::Checkpoint(path.clone()),
            };
            let report = commands::collapse_audit(&target, &cfg, execution)?;
            print!("{}", report.text());
            if cli.out.is_some() || std::env::var_os(OUT_ENV).is_some() {
                commands::write_audit(&report, &out)?;
            }
            if !report.passed {
                return Err(CliError::AuditFailed);
            }
        }
        Command::SampleQuats { count } => {
            let seed = cli.seed.unwrap_or(0);
            let sample = commands::sample_quats(*count, seed)?;
            commands::write_quats(&sample, *count, seed, &out)?;
            if !cli.quiet {
                println!("{}", commands::chi_square_line(&sample.chi_square));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
