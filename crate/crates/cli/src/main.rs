//! `kineta` command-line tool.
//!
//! Exit codes: 0 on success, 2 for invalid input or configuration, 1 when
//! a run fails. Logs go to stderr; `METRIC {json}` lines go to stdout.

mod cli;
mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;

use crate::cli::{Cli, Cmd};
use crate::config::ExperimentConfig;

fn run(cli: Cli) -> kineta::Result<()> {
    let mut cmd = cli.command;
    if let Cmd::Rerun { snapshot, out } = &cmd {
        if cli.config.is_some() || !cli.overrides.is_empty() {
            return Err(kineta::Error::validation("rerun takes its configuration from the snapshot"));
        }
        return commands::rerun(snapshot, out.as_deref());
    }
    let mut cfg = ExperimentConfig::load(cli.config.as_deref(), &cli.overrides)?;
    commands::apply_flags(&cmd, &mut cfg);
    cfg.validate()?;
    commands::prepare(&mut cmd)?;
    log::info!("{} (config {})", cmd.name(), cfg.fingerprint()?);
    commands::execute(&cmd, &cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
