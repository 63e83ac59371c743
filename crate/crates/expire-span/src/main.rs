use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use expire_span::commands::{
    cmd_analyze, cmd_eval, cmd_selftest, cmd_train, AnalyzeArgs, EvalArgs, TrainArgs, EXIT_CONFIG,
    EXIT_NUMERIC,
};
use expire_span::error::Error;

#[derive(Parser)]
#[command(
    name = "expire-span",
    about = "Train and probe transformers whose attention memories learn when to expire"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON config, or resume from a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; prints a metrics JSON object.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Replace the task embedded in the checkpoint.
        #[arg(long)]
        task_config: Option<PathBuf>,
        /// Cap predicted spans at inference time (expire mode only).
        #[arg(long)]
        max_span_override: Option<usize>,
    },
    /// Export a per-token, per-layer span trace CSV from a checkpoint.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        /// JSON token array, or raw bytes for char-lm checkpoints.
        #[arg(long)]
        input: PathBuf,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the invariant suite (gradient checks, mask algebra, pruning).
    Selftest,
}

fn error_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Json(_) | Error::Checkpoint(_) => EXIT_CONFIG,
        Error::NonFinite(_) => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Train { config, resume } => match cmd_train(&TrainArgs { config, resume }) {
            Ok(code) => code,
            Err(e) => {
                eprintln!("error: {e}");
                error_code(&e)
            }
        },
        Command::Eval { ckpt, task_config, max_span_override } => {
            match cmd_eval(&EvalArgs { checkpoint: ckpt, task_config, max_span_override }) {
                Ok(row) => {
                    println!("{}", serde_json::to_string_pretty(&row).expect("metrics json"));
                    0
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    error_code(&e)
                }
            }
        }
        Command::Analyze { ckpt, input, output } => {
            match cmd_analyze(&AnalyzeArgs { checkpoint: ckpt, input, output: output.clone() }) {
                Ok(csv) => {
                    if output.is_none() {
                        print!("{csv}");
                    }
                    0
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    error_code(&e)
                }
            }
        }
        Command::Selftest => cmd_selftest(),
    };
    ExitCode::from(code as u8)
}
