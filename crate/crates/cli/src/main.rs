// SPDX-License-Identifier: Apache-2.0

//! `g2kin`: simulate, correlate and analyze three-level emitter click streams.

mod commands;
mod config;
mod fail;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Status;
use crate::config::{Format, Loaded};
use crate::fail::Failure;
use crate::output::Out;

#[derive(Parser)]
#[command(
    name = "g2kin",
    version,
    about = "Three-level emitter kinetics from photon correlations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default `g2kin-out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Format of summary tables.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate click streams, one file per power.
    Simulate,
    /// Coincidence histograms and normalized g2 curves from click streams.
    Correlate,
    /// Correct, fit and invert click streams or curves.
    Analyze {
        /// Signal fraction S/(S+B); overrides the config.
        #[arg(long)]
        rho: Option<f64>,
    },
    /// Rates from g2 shape parameters.
    Invert,
    /// Detection efficiency from analyzed points at several powers.
    CalibrateEta,
    /// Linear power dependence of the calibrated rates.
    PowerFit,
    /// Fit the count-rate saturation curve.
    Saturation,
    /// Closed loop: simulate a power ladder and recover the model.
    Pipeline,
}

fn run(cli: Cli) -> Result<Status, Failure> {
    let mut loaded = Loaded::read(cli.config.as_deref())?;
    let c = &mut loaded.config;
    if cli.seed.is_some() {
        c.seed = cli.seed;
    }
    if cli.out.is_some() {
        c.out = cli.out;
    }
    if cli.format.is_some() {
        c.format = cli.format;
    }
    if let Command::Analyze { rho: Some(r) } = cli.command {
        match c.analyze.as_mut() {
            Some(a) => a.rho = Some(r),
            None => return Err(Failure::config("[analyze] section missing from the config")),
        }
    }
    let dir = c.out.clone().unwrap_or_else(|| PathBuf::from("g2kin-out"));
    // Validate before touching the filesystem where that is cheap.
    if let Command::Pipeline = cli.command {
        commands::pipeline_config(&loaded)?;
    }
    let out = Out::create(dir, loaded.format(), loaded.provenance())?;
    match cli.command {
        Command::Simulate => commands::simulate(&loaded, &out),
        Command::Correlate => commands::correlate_cmd(&loaded, &out),
        Command::Analyze { .. } => commands::analyze(&loaded, &out),
        Command::Invert => commands::invert(&loaded, &out),
        Command::CalibrateEta => commands::calibrate(&loaded, &out),
        Command::PowerFit => commands::power_fit(&loaded, &out),
        Command::Saturation => commands::saturation(&loaded, &out),
        Command::Pipeline => commands::pipeline(&loaded, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Status::Done) => ExitCode::SUCCESS,
        Ok(Status::Flagged(msg)) => {
            eprintln!("warning: {msg}; outputs written and flagged");
            ExitCode::from(fail::NUMERICAL)
        }
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
