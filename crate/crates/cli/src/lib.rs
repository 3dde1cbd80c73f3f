//! Command-line front end: configuration, metric files and self-checks.

pub mod check;
pub mod commands;
pub mod csv;
pub mod dump;
pub mod settings;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "fedlora",
    version,
    about = "Federated LoRA scaling-factor simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment and write per-round metrics.
    Run(commands::RunArgs),
    /// Repeat an experiment over ranks or client counts.
    Sweep(commands::SweepArgs),
    /// Run the gradient, trajectory and moment self-checks.
    Check(commands::CheckArgs),
    /// Write the training set with each sample's client.
    PartitionDump(commands::DumpArgs),
}

/// Dispatches a parsed command line and returns the process exit code.
pub fn run(cli: &Cli) -> u8 {
    let result = match &cli.command {
        Command::Run(a) => commands::cmd_run(a),
        Command::Sweep(a) => commands::cmd_sweep(a),
        Command::Check(a) => commands::cmd_check(a, &mut std::io::stdout()),
        Command::PartitionDump(a) => commands::cmd_partition_dump(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            commands::EXIT_IO
        }
    }
}
