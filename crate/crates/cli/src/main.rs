// SPDX-License-Identifier: Apache-2.0

//! `pruneleak`: simulate protected inference traces and run the staged
//! classification, realignment and CPA pipeline on them.

mod artifacts;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use pruneleak_core::{AttackError, ConfigError, PatternError, PipelineError, PreprocessError, StoreError};

use crate::artifacts::Layout;
use crate::commands::{Ctx, Mode};

#[derive(Parser)]
#[command(name = "pruneleak", version, about)]
struct Cli {
    /// Experiment spec (TOML). Defaults apply to missing keys.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Overrides the spec seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, short, global = true, default_value = "out")]
    out: PathBuf,
    /// First point of the trace-count schedule.
    #[arg(long, global = true)]
    schedule_start: Option<usize>,
    /// Schedule points per decade.
    #[arg(long, global = true)]
    per_decade: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate every experiment and write traces, images and skip tables.
    Simulate,
    /// Pick the classification threshold on profiling traces.
    Calibrate,
    /// Label every MAC segment of the attacker-view traces.
    Classify,
    /// Partition, filter images and concatenate important segments.
    Preprocess,
    /// CPA with guessing-entropy curves.
    Attack {
        #[arg(long, value_enum, default_value_t = Mode::Aligned)]
        mode: Mode,
        /// Last point of the schedule (default: the spec's trace count).
        #[arg(long)]
        max_traces: Option<usize>,
    },
    /// Summarize attack and preprocessing results.
    Report,
    /// Derive the IaPAM from control-flow-free traces.
    CffStudy,
}

/// Exit codes, one per error class.
mod code {
    pub const OTHER: u8 = 1;
    pub const CONFIG: u8 = 3;
    pub const ARTIFACT: u8 = 4;
    pub const CONFIG_MISMATCH: u8 = 5;
    pub const VARIANT: u8 = 6;
    pub const CLASSIFY: u8 = 7;
    pub const ATTACK: u8 = 8;
}

fn store_code(e: &StoreError) -> u8 {
    match e {
        StoreError::ConfigMismatch { .. } => code::CONFIG_MISMATCH,
        _ => code::ARTIFACT,
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            return match e {
                PipelineError::Config(_) | PipelineError::Spec(_) => code::CONFIG,
                PipelineError::Pattern(_) | PipelineError::Preprocess(_) => code::CLASSIFY,
                PipelineError::Attack(_) => code::ATTACK,
                PipelineError::Store(s) => store_code(s),
                PipelineError::Variant { .. } => code::VARIANT,
            };
        }
        if let Some(e) = cause.downcast_ref::<StoreError>() {
            return store_code(e);
        }
        if cause.is::<ConfigError>() {
            return code::CONFIG;
        }
        if cause.is::<PatternError>() || cause.is::<PreprocessError>() {
            return code::CLASSIFY;
        }
        if cause.is::<AttackError>() {
            return code::ATTACK;
        }
        if cause.is::<std::io::Error>() || cause.is::<csv::Error>() {
            return code::ARTIFACT;
        }
    }
    code::OTHER
}

fn run(cli: Cli) -> Result<()> {
    let mut spec = match &cli.config {
        Some(path) => pruneleak_core::ExperimentSpec::load(path)?,
        None => pruneleak_core::ExperimentSpec::default(),
    };
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    if let Some(s) = cli.schedule_start {
        spec.attack.schedule_start = s;
    }
    if let Some(p) = cli.per_decade {
        spec.attack.schedule_per_decade = p;
    }
    spec.validate()?;
    let ctx = Ctx {
        spec,
        layout: Layout::new(cli.out),
    };
    match cli.command {
        Command::Simulate => commands::simulate(&ctx),
        Command::Calibrate => commands::calibrate_cmd(&ctx),
        Command::Classify => commands::classify(&ctx),
        Command::Preprocess => commands::preprocess(&ctx),
        Command::Attack { mode, max_traces } => commands::attack(&ctx, mode, max_traces),
        Command::Report => commands::report(&ctx),
        Command::CffStudy => commands::cff(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
