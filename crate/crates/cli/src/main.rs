use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use scout_cli::{execute, exit_code, Command};

/// Recursive latent refinement experiments.
///
/// Exit codes: 0 success, 2 invalid configuration or arguments, 3 runtime
/// failure.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `[seed] root`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Parallel evaluation chunks / ablation cells.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Train the non-recursive student backbone.
    Pretrain,
    /// Train the frozen teacher ladder.
    Ladder,
    /// Fine-tune the recursive student under one supervision plan.
    Train,
    /// Per-iteration accuracy of a checkpoint, optionally against a baseline.
    Eval,
    /// Run a matrix of fine-tunes and summarize it.
    Ablate,
    /// Per-iteration next-token probabilities of selected tokens.
    Heatmap,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let command = match cli.command {
        Cmd::Pretrain => Command::Pretrain,
        Cmd::Ladder => Command::Ladder,
        Cmd::Train => Command::Train,
        Cmd::Eval => Command::Eval,
        Cmd::Ablate => Command::Ablate,
        Cmd::Heatmap => Command::Heatmap,
    };
    let Some(config) = cli.config else {
        eprintln!("error: --config is required");
        return ExitCode::from(2);
    };
    match execute(command, &config, cli.out.clone(), cli.workers, cli.seed) {
        Ok(manifest) => {
            for n in &manifest.notices {
                eprintln!("notice: {n}");
            }
            for f in &manifest.failures {
                eprintln!("failed cell: {f}");
            }
            println!("{}", cli.out.join(command.name()).join("manifest.json").display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
