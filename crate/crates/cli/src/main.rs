//! Command-line front end for the pruning/distillation pipeline. Each
//! subcommand is one stage; stages communicate only through the files named
//! in the config, so any stage can be rerun in isolation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prune_distill_core::config::PipelineConfig;
use prune_distill_core::error::Error;
use prune_distill_core::pipeline;

#[derive(Parser)]
#[command(
    name = "prune-distill",
    version,
    about = "Task-aware safe channel pruning and feature distillation \
             for a toy multi-task convnet"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher on synthetic data and save its checkpoint.
    Train(CommonArgs),
    /// Accumulate per-task importance and gradient statistics.
    Collect(CommonArgs),
    /// Build the pruning plan from the collected statistics.
    Plan(CommonArgs),
    /// Apply the plan to the teacher and save the pruned checkpoint.
    Prune(CommonArgs),
    /// Fine-tune the pruned model against the frozen teacher's features.
    Distill(CommonArgs),
    /// Evaluate a checkpoint against the teacher baseline.
    Eval(EvalArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Pipeline configuration file (strict JSON).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Override the config's random seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint to evaluate; defaults to the teacher.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Run the four-row ladder (teacher / prune / prune+conflict /
    /// prune+conflict+distill) instead of a single evaluation.
    #[arg(long)]
    ablation: bool,
}

fn load_config(args: &CommonArgs) -> Result<PipelineConfig, Error> {
    let mut cfg = PipelineConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train(args) => println!("{}", pipeline::run_train(&load_config(&args)?)?),
        Command::Collect(args) => println!("{}", pipeline::run_collect(&load_config(&args)?)?),
        Command::Plan(args) => println!("{}", pipeline::run_plan(&load_config(&args)?)?),
        Command::Prune(args) => println!("{}", pipeline::run_prune(&load_config(&args)?)?),
        Command::Distill(args) => println!("{}", pipeline::run_distill(&load_config(&args)?)?),
        Command::Eval(args) => {
            let cfg = load_config(&args.common)?;
            if args.ablation {
                println!("{}", pipeline::run_ablation(&cfg)?);
            } else {
                println!("{}", pipeline::run_eval(&cfg, args.checkpoint.as_deref())?);
            }
        }
    }
    Ok(())
}

/// 2 = bad config or parameters, 3 = missing/inconsistent stage inputs,
/// 4 = training divergence. clap's own usage errors also exit with 2.
fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::InvalidParam { .. }
        | Error::UnknownTask(_)
        | Error::UnknownLayer(_)
        | Error::Json(_) => 2,
        Error::Divergence(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
