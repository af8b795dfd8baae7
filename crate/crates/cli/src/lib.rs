//! Command line front end for the `feded` simulator.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use feded::Result;

use crate::config::{ExperimentConfig, Overrides, REPORT_DIR_ENV};

#[derive(Debug, Parser)]
#[command(
    name = "feded",
    version,
    about = "Federated learning with empty-class distillation and logit suppression"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one method for every configured seed.
    Run(CommonArgs),
    /// Calibrated baseline, each extra term alone, and both.
    Ablate(CommonArgs),
    /// FedED over a grid of distillation weights.
    LambdaSweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated grid; defaults to 0.05,0.1,0.25,0.5,1.
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
    },
}

#[derive(Debug, clap::Args)]
pub struct CommonArgs {
    /// TOML experiment file, or a resolved_config.json from an earlier run.
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

impl CommonArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let env_dir = std::env::var_os(REPORT_DIR_ENV).map(PathBuf::from);
        ExperimentConfig::load(&self.config)?.resolve(&self.overrides, env_dir)
    }
}

/// Runs a parsed command and returns the text to print.
pub fn execute(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Run(args) => commands::cmd_run(&args.resolve()?),
        Command::Ablate(args) => commands::cmd_ablate(&args.resolve()?),
        Command::LambdaSweep { common, lambdas } => {
            commands::cmd_lambda_sweep(&common.resolve()?, lambdas.as_deref())
        }
    }
}
