//! Pipeline commands behind the `manipdiff` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;

use clap::{Parser, Subcommand};

pub use config::{Overrides, RunConfig};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "manipdiff",
    version,
    about = "Manipulability-aware bimanual diffusion pipeline"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Record scripted-expert demonstrations.
    GenDemos,
    /// Fit the ellipsoid mixture model and report reproduction accuracy.
    FitGmm,
    /// Train the diffusion policy on demonstrations.
    Train,
    /// Roll out the policy and write annotated trajectories.
    Sample,
    /// Evaluate unguided and guided rollouts.
    Eval,
    /// Write ellipse series for plotting.
    ExportPlots,
}

pub fn run(command: Command, flags: &Overrides) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(flags)?;
    match command {
        Command::GenDemos => commands::gen_demos(&cfg),
        Command::FitGmm => commands::fit_gmm(&cfg),
        Command::Train => commands::train_policy(&cfg),
        Command::Sample => commands::sample(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::ExportPlots => commands::export_plots(&cfg),
    }
}
