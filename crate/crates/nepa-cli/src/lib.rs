//! `nepa` command-line driver: pretraining, fine-tuning, linear probes,
//! attention maps, gradient checks and ablation tables from one TOML config.

pub mod ablate;
pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, ValueEnum};

use nepa::parallel::{init_thread_pool, threads_from_env};

use crate::config::{AblationTable, RunConfig};
use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Pretrain,
    Finetune,
    Probe,
    Analyze,
    Gradcheck,
    Ablate,
}

#[derive(Debug, Parser)]
#[command(name = "nepa", version, about = "Next-embedding predictive autoregression at desk scale")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Pretraining checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Ablation table (a, c or e); defaults to `ablate.tables`.
    #[arg(long)]
    pub table: Option<AblationTable>,
}

/// Loads the config, applies overrides, echoes the resolved config into the
/// output directory and runs the command.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    init_thread_pool(threads_from_env()?);
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.resume.is_some() && cli.command != Command::Pretrain {
        return Err(CliError::Config("resume: only pretraining can be resumed".into()));
    }
    if cli.table.is_some() && cli.command != Command::Ablate {
        return Err(CliError::Config("table: only applies to ablate".into()));
    }
    cfg.write_echo()?;
    match cli.command {
        Command::Pretrain => commands::pretrain(&cfg, cli.resume.as_deref()).map(drop),
        Command::Finetune => commands::finetune(&cfg).map(drop),
        Command::Probe => commands::probe(&cfg).map(drop),
        Command::Analyze => commands::analyze(&cfg).map(drop),
        Command::Gradcheck => commands::gradcheck(&cfg),
        Command::Ablate => {
            let tables = match cli.table {
                Some(t) => vec![t],
                None => cfg.ablate.tables.clone(),
            };
            ablate::ablate(&cfg, &tables).map(drop)
        }
    }
}
