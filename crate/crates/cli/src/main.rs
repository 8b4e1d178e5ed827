//! `dra`: train and analyze adversarially robust classifiers with
//! diffusion-representation alignment at desk scale.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use dra_cli::config::{Arm, RunConfig};
use dra_cli::pipeline::{Pipeline, StageOutcome};
use dra_cli::report::emit_report;
use dra_core::error::Error;

#[derive(Parser)]
#[command(
    name = "dra",
    version,
    about = "Adversarial training with diffusion-representation alignment: \
             train, generate, evaluate, analyze, report"
)]
struct Cli {
    /// Run configuration file (TOML).
    #[arg(long, global = true, default_value = "run.toml")]
    config: PathBuf,

    /// Root directory for run outputs (overrides config and DRA_RUN_ROOT).
    #[arg(long, global = true)]
    run_root: Option<PathBuf>,

    /// Accept a changed config for an existing run directory.
    #[arg(long, global = true)]
    accept_config_change: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the class-conditional diffusion model.
    TrainDiffusion,
    /// Generate the synthetic image pool from the trained diffusion model.
    GenSynth,
    /// Train robust classifiers (optionally filtered to one arm/seed).
    TrainRobust {
        #[arg(long)]
        arm: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate checkpoints with the configured attack preset.
    Eval {
        #[arg(long)]
        arm: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the representation-analysis battery on checkpoints.
    Analyze {
        #[arg(long)]
        arm: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Emit CSV/JSON tables, frequency maps and comparison reports.
    Report,
    /// Train and evaluate across the configured lambda grid.
    SweepLambda,
    /// Run the full grid: train, evaluate and analyze every (arm, seed).
    Pipeline,
}

fn cells(config: &RunConfig, arm: Option<&str>, seed: Option<u64>) -> Result<Vec<(Arm, u64)>, Error> {
    let arms: Vec<Arm> = match arm {
        Some(id) => vec![Arm::from_id(id)?],
        None => config.run.arms.clone(),
    };
    let seeds: Vec<u64> = match seed {
        Some(s) => vec![s],
        None => config.run.seeds.clone(),
    };
    Ok(arms
        .into_iter()
        .flat_map(|a| seeds.iter().map(move |&s| (a, s)))
        .collect())
}

fn summarize(outcome: &StageOutcome) {
    info!(
        "{} stage(s) executed, {} skipped",
        outcome.executed.len(),
        outcome.skipped.len()
    );
}

fn run(cli: Cli) -> Result<(), Error> {
    let config = RunConfig::load(&cli.config)?;
    let pipeline = Pipeline::open(config, cli.run_root.as_deref(), cli.accept_config_change)?;
    let mut outcome = StageOutcome::default();

    match cli.command {
        Command::TrainDiffusion => {
            let path = pipeline.ensure_diffusion(&mut outcome)?;
            info!("diffusion model at {}", path.display());
        }
        Command::GenSynth => {
            let path = pipeline.ensure_pool(&mut outcome)?;
            info!("synthetic pool at {}", path.display());
        }
        Command::TrainRobust { arm, seed } => {
            for (a, s) in cells(&pipeline.config, arm.as_deref(), seed)? {
                let path = pipeline.ensure_train(&mut outcome, a, s)?;
                info!("checkpoint for {a} seed {s} at {}", path.display());
            }
        }
        Command::Eval { arm, seed } => {
            for (a, s) in cells(&pipeline.config, arm.as_deref(), seed)? {
                pipeline.ensure_eval(&mut outcome, a, s)?;
            }
        }
        Command::Analyze { arm, seed } => {
            for (a, s) in cells(&pipeline.config, arm.as_deref(), seed)? {
                pipeline.ensure_analysis(&mut outcome, a, s)?;
            }
        }
        Command::Report => {
            let files = emit_report(&pipeline.run_dir)?;
            for f in &files {
                info!("emitted {}", f.display());
            }
            println!("report: {} file(s) under {}", files.len(), pipeline.run_dir.join("report").display());
        }
        Command::SweepLambda => {
            outcome = pipeline.sweep_lambda()?;
        }
        Command::Pipeline => {
            outcome = pipeline.run_all()?;
        }
    }
    summarize(&outcome);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are successes; anything else is user error.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is_user_error() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("internal error: {e}");
            ExitCode::from(2)
        }
    }
}
