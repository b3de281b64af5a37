//! Command-line pipelines: pretrain, finetune, prune, rewind, eval, sweep,
//! embed and ablate, each writing into `<out>/<command>/`.

pub mod commands;
pub mod spec;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use kvprompt::{Error, Precision, Scalar};

use crate::commands::Context;
use crate::spec::ExperimentSpec;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NAN: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "kvprompt", version, about = "Visual and key-value prompt tuning with cascade pruning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Experiment file (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Run directory; overrides `out` in the experiment file.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Seed for model initialisation and training.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,

    /// Element type: 32 or 64.
    #[arg(long, global = true, value_name = "BITS")]
    pub precision: Option<Precision>,

    /// Only print errors.
    #[arg(long, global = true)]
    pub quiet: bool,

    /// Input checkpoint directory; `embed` accepts several.
    #[arg(long, global = true, value_name = "DIR")]
    pub checkpoint: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Train a backbone and source head on the source task.
    Pretrain,
    /// Train prompts and head on the target task over a frozen backbone.
    Finetune,
    /// Score prompts, then prune tokens and segments.
    Prune,
    /// Retrain the surviving prompts once.
    Rewind,
    /// Report accuracy of a checkpoint on the target task.
    Eval,
    /// Grid search over learning rate, weight decay and optionally prune ratio.
    Sweep,
    /// Export embeddings, Poincaré scatter and Recall@K.
    Embed,
    /// Four-row component ablation.
    Ablate,
}

fn dispatch<T: Scalar>(command: Command, ctx: &Context) -> kvprompt::Result<()> {
    match command {
        Command::Pretrain => commands::pretrain::<T>(ctx),
        Command::Finetune => commands::finetune_cmd::<T>(ctx),
        Command::Prune => commands::prune::<T>(ctx),
        Command::Rewind => commands::rewind_cmd::<T>(ctx),
        Command::Eval => commands::eval::<T>(ctx),
        Command::Sweep => commands::sweep_cmd::<T>(ctx),
        Command::Embed => commands::embed::<T>(ctx),
        Command::Ablate => commands::ablate_cmd::<T>(ctx),
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Parse { .. } => EXIT_CONFIG,
        e if e.is_non_finite() => EXIT_NAN,
        _ => EXIT_RUNTIME,
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let spec = match &cli.config {
        Some(path) => ExperimentSpec::load(path),
        None => Err(Error::Config("--config is required".into())),
    };
    let spec = match spec {
        Ok(s) => s.with_overrides(cli.seed, cli.precision),
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let out = cli
        .out
        .clone()
        .or_else(|| spec.out.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    let precision = spec.model.precision;
    let ctx = Context {
        spec,
        out,
        checkpoints: cli.checkpoint,
        quiet: cli.quiet,
    };
    let result = match precision {
        Precision::F32 => dispatch::<f32>(cli.command, &ctx),
        Precision::F64 => dispatch::<f64>(cli.command, &ctx),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Parses `args` (program name first) and runs them.
pub fn main_with_args<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            code
        }
    }
}
