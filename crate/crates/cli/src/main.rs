//! `dam`: train, evaluate and inspect discourse-aware ECEC models.
//!
//! Exit codes: 0 success, 1 internal error, 2 usage or configuration
//! error, 3 data error, 4 training divergence. Failures print one line
//! `error[<category>]: <message>` to stderr.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dam_core::{DamError, ErrorCategory};

#[derive(Debug, Parser)]
#[command(name = "dam", version, about = "Discourse-aware emotion cause extraction in conversations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one variant, save a checkpoint and score the held-out split.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Train and score several variants from the same settings.
    Ablate(AblateArgs),
    /// Write the discourse links a checkpoint predicts.
    ParseDiscourse(ParseArgs),
    /// Write per-instance predictions of a checkpoint.
    Predict(EvalArgs),
}

#[derive(Debug, Args)]
struct SettingsArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Data directory (conversations.jsonl, ecec/, discourse/).
    #[arg(long, env = "DAM_DATA_DIR")]
    data_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Config override `key=value`; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    settings: SettingsArgs,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long, default_value = "runs/train")]
    run_dir: PathBuf,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    settings: SettingsArgs,
    /// Comma-separated variant names; all variants when omitted.
    #[arg(long)]
    variants: Option<String>,
    #[arg(long, default_value = "runs/ablate")]
    run_dir: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, env = "DAM_DATA_DIR")]
    data_dir: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Defaults to `runs/eval` or `runs/predict`.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    sequential: bool,
}

#[derive(Debug, Args)]
struct ParseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Discourse file to parse; defaults to the split's file in the data directory.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, env = "DAM_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value = "runs/parse")]
    run_dir: PathBuf,
}

fn exit_code(e: &DamError) -> u8 {
    match e.category() {
        ErrorCategory::Config => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Divergence => 4,
        ErrorCategory::Internal => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a, true),
        Command::Predict(a) => commands::eval(&a, false),
        Command::Ablate(a) => commands::ablate(&a),
        Command::ParseDiscourse(a) => commands::parse_discourse(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category().as_str(), e.to_string().replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
    }
}
