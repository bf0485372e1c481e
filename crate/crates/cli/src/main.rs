//! `uwbsim`: simulate UWB two-way ranging, localize a tag and evaluate
//! accuracy over a grid.
//!
//! Exit status is 0 on success, 1 on a runtime failure and 2 when the
//! configuration or input is invalid.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;
use uwbsim_core::{AnchorConfigError, Point3};

use crate::config::{Overrides, ScenarioConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Anchors(#[from] AnchorConfigError),
    #[error("geometry: {0}")]
    Geometry(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Anchors(_) | CliError::Geometry(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "uwbsim", version, about = "UWB two-way ranging and EKF localization simulator")]
struct Cli {
    /// Scenario file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Anchor table file; overrides `anchor_file` in the scenario.
    #[arg(long, global = true)]
    anchors: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Ranging slot length in milliseconds.
    #[arg(long, global = true)]
    slot_ms: Option<u64>,
    /// Rounds to simulate (per cell for `grid-eval`).
    #[arg(long, global = true)]
    rounds: Option<u64>,
    /// Tag position as `x,y,z` in meters.
    #[arg(long, global = true, allow_hyphen_values = true)]
    tag: Option<Point3>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print every ranging of a session as CSV.
    Range,
    /// Track the tag and print one estimate per round as CSV.
    Localize,
    /// Evaluate a grid of static tag positions and write CSV reports.
    GridEval {
        /// Output directory for cells.csv, fixes.csv and ellipses.csv.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// View or edit the anchor table: SET <id> <x> <y> <z>, GET <id>, DEL <id>, LIST.
    /// Reads one command per line from stdin when none is given.
    Config {
        /// Start from an empty table if the anchor file does not exist.
        #[arg(long)]
        create: bool,
        command: Vec<String>,
    },
}

fn run(cli: Cli) -> Result<bool, CliError> {
    let file = match &cli.config {
        Some(path) => ScenarioConfig::from_file(path)?,
        None => ScenarioConfig::default(),
    };
    let overrides =
        Overrides { anchors: cli.anchors.clone(), seed: cli.seed, slot_ms: cli.slot_ms, rounds: cli.rounds, tag: cli.tag };
    match cli.command {
        Command::Config { create, command } => commands::config(&file.anchor_path(&overrides)?, create, command),
        Command::Range => commands::range(&file.resolve(&overrides)?).map(|_| true),
        Command::Localize => commands::localize(&file.resolve(&overrides)?).map(|_| true),
        Command::GridEval { out } => commands::grid_eval(&file.resolve(&overrides)?, &out).map(|_| true),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        // a configuration command was rejected; the reply says why
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
