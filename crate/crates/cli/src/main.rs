//! `pivdml` command-line entry point.

mod args;
mod commands;
mod config;
mod error;

use clap::Parser;

use args::{Cli, Command};
use config::FileConfig;
use error::CliError;

fn run(cli: &Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    match &cli.command {
        Command::Estimate(a) => {
            let (plan, rt) = config::resolve_estimate(a, &file)?;
            commands::cmd_estimate(&plan, &rt)
        }
        Command::Simulate(a) => {
            let (plan, rt) = config::resolve_simulate(a, &file)?;
            commands::cmd_simulate(&plan, &rt)
        }
        Command::Tune(a) => {
            let (plan, rt) = config::resolve_tune(a, &file)?;
            commands::cmd_tune(&plan, &rt)
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
