use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use metaprep_cli::commands::{self, FinetuneArgs, PretrainArgs};
use metaprep_cli::gradcheck::{Options, Scale};
use metaprep_cli::CliError;

/// Meta-learning multi-task pre-training at toy scale.
///
/// Exit codes: 0 success, 1 invalid input, 2 numeric divergence,
/// 3 failed gradient check.
#[derive(Parser)]
#[command(name = "metaprep", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train the encoder; resumes from the newest checkpoint in the output directory.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: `out_dir` from the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the experiment seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Warm start from this parameter file instead of a random initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Stop after this many meta-test steps, leaving a resumable checkpoint.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Fine-tune checkpoints on the configured downstream tasks.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint directory, parameter file, or `random`; repeatable.
        #[arg(long, required = true)]
        checkpoint: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Fine-tune with this single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Verify gradients and meta-gradients against independent oracles.
    Gradcheck {
        /// Model size for the model-based checks: `tiny` or `small`.
        #[arg(long, default_value = "tiny")]
        scale: Scale,
        /// Also write CHECK records to this directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Write tab-separated accuracy series and loss curves from logs.
    Report {
        log_dir: PathBuf,
        /// Destination directory (default: LOG_DIR/report).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Pretrain {
            config,
            out,
            seed,
            checkpoint,
            stop_after,
        } => commands::cmd_pretrain(&PretrainArgs {
            config,
            out,
            seed,
            init: checkpoint,
            stop_after,
        })
        .map(drop),
        Command::Finetune {
            config,
            checkpoint,
            out,
            seed,
        } => commands::cmd_finetune(&FinetuneArgs {
            config,
            checkpoints: checkpoint,
            out,
            seed,
        })
        .map(drop),
        Command::Gradcheck {
            scale,
            out,
            corrupt_gradient,
        } => commands::cmd_gradcheck(
            Options {
                scale,
                corrupt_gradients: corrupt_gradient,
            },
            out.as_deref(),
        )
        .map(drop),
        Command::Report { log_dir, out } => commands::cmd_report(&log_dir, out.as_deref()).map(drop),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
