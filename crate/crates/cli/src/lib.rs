//! Configuration-driven experiment runner.

pub mod commands;
pub mod config;
pub mod manifest;

pub use commands::{load_ladder, Cell, CellResult, Runner};
pub use config::{Command, RunConfig};
pub use manifest::{Artifact, RunManifest};

use std::path::PathBuf;

use scout_core::Error;

/// Process exit code for a failed command: 2 for configuration problems,
/// 3 for failures while running.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_validation() {
        2
    } else {
        3
    }
}

/// Loads `config`, validates it for `command` and runs it.
pub fn execute(
    command: Command,
    config: &std::path::Path,
    out: PathBuf,
    workers: usize,
    seed: Option<u64>,
) -> Result<RunManifest, Error> {
    let cfg = RunConfig::load(config)?;
    Runner::new(cfg, command, out, workers, seed)?.run(command)
}
