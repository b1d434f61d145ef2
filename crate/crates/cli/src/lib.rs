//! Batch front end for the attnlab analyses. Every command writes one
//! report as JSON or CSV and exits 0 only if its invariants hold.

pub mod commands;
pub mod error;
pub mod profile;

use std::io::Write;
use std::path::{Path, PathBuf};

use attnlab_core::roofline::{HardwareProfile, DEFAULT_PROFILE};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "attnlab", version, about = "Attention kernel cost models, numerics and schedulers")]
pub struct Cli {
    /// Hardware profile: a preset name, a profile in $ATTNLAB_PROFILE_DIR,
    /// or a path to a single-profile TOML file.
    #[arg(long, global = true, default_value = DEFAULT_PROFILE)]
    pub profile: String,

    /// Override one profile field, e.g. `--hw mufu_exp_per_clk=32`.
    #[arg(long = "hw", global = true, value_name = "FIELD=VALUE")]
    pub hw_overrides: Vec<String>,

    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,

    /// Write the report here instead of stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Accuracy of exp2 emulation against a double-precision reference.
    Exp2Accuracy(commands::exp2::Exp2Args),
    /// Per-resource cycle counts for one tile iteration.
    Roofline(commands::roofline::RooflineArgs),
    /// Tiled attention against dense oracles, with gradient checks.
    AttentionCheck(commands::attention::AttentionArgs),
    /// Tile scheduling makespan and dQ lock stalls.
    ScheduleSim(commands::schedule::ScheduleArgs),
    /// Steady-state throughput of the software pipeline.
    PipelineSim(commands::pipeline::PipelineArgs),
}

impl Cli {
    pub fn hardware(&self) -> CliResult<HardwareProfile> {
        let dir = std::env::var_os(profile::PROFILE_DIR_ENV).map(PathBuf::from);
        profile::resolve(&self.profile, dir.as_deref(), &self.hw_overrides)
    }
}

/// A command's result: the report in both encodings plus failed invariants.
pub struct Outcome {
    pub json: Vec<u8>,
    pub csv: Vec<u8>,
    pub failures: Vec<String>,
}

impl Outcome {
    pub fn new<J: Serialize, R: Serialize>(report: &J, rows: &[R], failures: Vec<String>) -> CliResult<Self> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        let csv = w.into_inner().map_err(|e| CliError::Io(e.into_error()))?;
        Ok(Self {
            json: to_json(report)?,
            csv,
            failures,
        })
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let hw = cli.hardware()?;
    let outcome = match &cli.command {
        Command::Exp2Accuracy(a) => commands::exp2::run(a, cli.seed)?,
        Command::Roofline(a) => commands::roofline::run(a, &hw)?,
        Command::AttentionCheck(a) => commands::attention::run(a, cli.seed)?,
        Command::ScheduleSim(a) => commands::schedule::run(a, &hw)?,
        Command::PipelineSim(a) => commands::pipeline::run(a, &hw)?,
    };
    write_outcome(&outcome, cli.format, cli.out.as_deref())?;
    if outcome.failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(outcome.failures.join("; ")))
    }
}

fn write_outcome(o: &Outcome, format: Format, out: Option<&Path>) -> CliResult<()> {
    let bytes = match format {
        Format::Json => &o.json,
        Format::Csv => &o.csv,
    };
    match out {
        Some(path) => std::fs::write(path, bytes)?,
        None => match std::io::stdout().lock().write_all(bytes) {
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
            r => r?,
        },
    }
    Ok(())
}

pub fn to_json<T: Serialize>(value: &T) -> CliResult<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(value)?;
    b.push(b'\n');
    Ok(b)
}

/// Parses `MxNxd`.
pub fn parse_dims(s: &str) -> Result<(u32, u32, u32), String> {
    let parts: Vec<_> = s.split('x').map(str::parse::<u32>).collect();
    match parts.as_slice() {
        [Ok(m), Ok(n), Ok(d)] if *m > 0 && *n > 0 && *d > 0 => Ok((*m, *n, *d)),
        _ => Err(format!("expected MxNxd with positive integers, got {s:?}")),
    }
}
