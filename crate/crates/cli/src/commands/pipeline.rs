use std::str::FromStr;

use attnlab_core::pipeline::{
    build_bwd_pipeline, build_fwd_pipeline_with, bwd_tmem_plan, exp_fraction_sweep, fwd_tmem_plan, steady_state,
    validate_tmem_plan, Bound, FractionPoint, FwdOptions, SteadyState, DEFAULT_EMULATED_EXP_COST,
};
use attnlab_core::roofline::{HardwareProfile, TileConfig};
use clap::Args;
use serde::{Deserialize, Serialize};

use super::roofline::{tiles_for, PassArg};
use crate::{parse_dims, CliError, CliResult, Outcome};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExpFraction {
    Auto,
    Fixed(f64),
}

impl FromStr for ExpFraction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "auto" {
            return Ok(ExpFraction::Auto);
        }
        match s.parse::<f64>() {
            Ok(f) if (0.0..=1.0).contains(&f) => Ok(ExpFraction::Fixed(f)),
            _ => Err(format!("expected a fraction in [0, 1] or `auto`, got {s:?}")),
        }
    }
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long, value_enum, default_value_t = PassArg::Fwd)]
    pub pass: PassArg,

    /// Tile shape MxNxd. With `--cta 2`, M spans the CTA pair.
    #[arg(long, value_parser = parse_dims)]
    pub tile: Option<(u32, u32, u32)>,

    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub cta: u8,

    /// Share of exponentials emulated on FMA units, or `auto` to search.
    #[arg(long, default_value = "0")]
    pub exp_fraction: ExpFraction,

    /// FMA operations per emulated exponential.
    #[arg(long, default_value_t = DEFAULT_EMULATED_EXP_COST)]
    pub exp_cost: f64,

    /// Share of iterations that rescale the output accumulator.
    #[arg(long, default_value_t = 1.0)]
    pub rescale_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub pass: String,
    pub tile: TileConfig,
    /// Forward only; the searched optimum under `auto`.
    pub exp_fraction: Option<f64>,
    pub steady_state: SteadyState,
    pub tmem_peak_columns: Option<u32>,
    /// Forward `auto` only.
    pub fraction_curve: Option<Vec<FractionPoint>>,
}

/// One CSV row per port.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortRow {
    pub pass: String,
    pub tile: String,
    pub exp_fraction: Option<f64>,
    pub cycles_per_iter: f64,
    pub bound: String,
    pub resource: String,
    pub busy: f64,
    pub utilization: f64,
}

pub fn bound_name(b: Bound) -> String {
    match b {
        Bound::Resource(r) => r.to_string(),
        Bound::Recurrence => "recurrence".into(),
    }
}

pub fn report(args: &PipelineArgs, hw: &HardwareProfile) -> CliResult<(PipelineReport, Vec<String>)> {
    let dims: Vec<_> = args.tile.into_iter().collect();
    let tile = tiles_for(args.pass, args.cta, &dims)?[0];
    let (pipeline, exp_fraction, curve) = match args.pass {
        PassArg::Fwd => {
            let base = FwdOptions {
                exp_fraction: 0.0,
                emulated_exp_cost: args.exp_cost,
                rescale_fraction: args.rescale_fraction,
                ..FwdOptions::default()
            };
            base.validate()?;
            let (f, curve) = match args.exp_fraction {
                ExpFraction::Fixed(f) => (f, None),
                ExpFraction::Auto => {
                    let s = exp_fraction_sweep(&tile, hw, &base)?;
                    (s.best, Some(s.curve))
                }
            };
            let opts = FwdOptions { exp_fraction: f, ..base };
            (build_fwd_pipeline_with(&tile, hw, &opts)?, Some(f), curve)
        }
        PassArg::Bwd => {
            if args.exp_fraction != ExpFraction::Fixed(0.0) {
                return Err(CliError::Usage("--exp-fraction applies to the forward pass only".into()));
            }
            (build_bwd_pipeline(&tile, hw, tile.cta_mode)?, None, None)
        }
    };
    let ss = steady_state(&pipeline)?;

    let mut failures = Vec::new();
    for (r, &b) in &ss.busy {
        if b > ss.cycles_per_iter * (1.0 + 1e-12) {
            failures.push(format!("period {} below {r} busy time {b}", ss.cycles_per_iter));
        }
    }
    let plan = match args.pass {
        PassArg::Fwd => fwd_tmem_plan(&tile),
        PassArg::Bwd => bwd_tmem_plan(&tile),
    };
    let tmem_peak_columns = match validate_tmem_plan(&plan) {
        Ok(u) => Some(u.peak_columns),
        Err(conflicts) => {
            failures.extend(conflicts.iter().map(|c| format!("tmem: {c:?}")));
            None
        }
    };
    let pass = match args.pass {
        PassArg::Fwd => "fwd",
        PassArg::Bwd => "bwd",
    };
    Ok((
        PipelineReport {
            pass: pass.into(),
            tile,
            exp_fraction,
            steady_state: ss,
            tmem_peak_columns,
            fraction_curve: curve,
        },
        failures,
    ))
}

pub fn port_rows(r: &PipelineReport) -> Vec<PortRow> {
    let ss = &r.steady_state;
    ss.busy
        .iter()
        .map(|(res, &busy)| PortRow {
            pass: r.pass.clone(),
            tile: r.tile.to_string(),
            exp_fraction: r.exp_fraction,
            cycles_per_iter: ss.cycles_per_iter,
            bound: bound_name(ss.bound),
            resource: res.to_string(),
            busy,
            utilization: ss.utilization.get(res).copied().unwrap_or(0.0),
        })
        .collect()
}

/// CSV holds the fraction curve under `auto`, the per-port table otherwise.
pub fn run(args: &PipelineArgs, hw: &HardwareProfile) -> CliResult<Outcome> {
    let (report, failures) = report(args, hw)?;
    match &report.fraction_curve {
        Some(curve) => Outcome::new(&report, curve, failures),
        None => Outcome::new(&report, &port_rows(&report), failures),
    }
}
