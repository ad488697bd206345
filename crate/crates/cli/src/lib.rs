//! Experiment runner: versioned configuration, the five pipeline stages, and
//! the manifests that make each stage re-runnable.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use std::path::{Path, PathBuf};

pub use config::RunConfig;
pub use error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Reduce,
    Generate,
    Analyze,
    Duality,
}

/// Loads the config, applies the command-line overrides, and runs `command`.
/// A relative `out` resolves against the working directory.
pub fn run(command: Command, config: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(out) = out {
        cfg.out_dir = absolute(out)?;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    match command {
        Command::Train => {
            commands::train(&cfg)?;
        }
        Command::Reduce => {
            commands::reduce(&cfg)?;
        }
        Command::Generate => {
            commands::generate(&cfg)?;
        }
        Command::Analyze => {
            commands::analyze(&cfg)?;
        }
        Command::Duality => {
            commands::duality(&cfg)?;
        }
    }
    Ok(cfg)
}

fn absolute(p: &Path) -> Result<PathBuf> {
    if p.is_absolute() {
        return Ok(p.to_path_buf());
    }
    let cwd = std::env::current_dir().map_err(|e| CliError::io(".", e))?;
    Ok(cwd.join(p))
}
