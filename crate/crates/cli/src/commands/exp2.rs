use attnlab_core::fastmath::{accuracy_sweep_with, fit_minimax, AccuracyReport, Exp2Method};
use clap::Args;

use crate::{CliResult, Outcome};

#[derive(Debug, Args)]
pub struct Exp2Args {
    /// Polynomial degrees to measure.
    #[arg(long, value_delimiter = ',', default_values_t = [3u8, 4, 5],
          value_parser = clap::value_parser!(u8).range(3..=5))]
    pub degrees: Vec<u8>,

    /// Uniform samples in [0, 1) per method.
    #[arg(long, default_value_t = 4_000_000, value_parser = clap::value_parser!(u64).range(1..))]
    pub samples: u64,
}

/// Reference rows first, then one row per requested degree in ascending order.
pub fn reports(args: &Exp2Args, seed: u64) -> CliResult<(Vec<AccuracyReport>, Vec<String>)> {
    let n = args.samples as usize;
    let mut degrees = args.degrees.clone();
    degrees.sort_unstable();
    degrees.dedup();

    let mut rows = vec![
        accuracy_sweep_with(Exp2Method::IdealRound, None, n, seed)?,
        accuracy_sweep_with(Exp2Method::HardwareLike, None, n, seed)?,
    ];
    let mut failures = Vec::new();
    let mut prev: Option<(u8, f64)> = None;
    for deg in degrees {
        let poly = fit_minimax(deg as usize)?;
        let r = accuracy_sweep_with(Exp2Method::from_degree(deg as usize)?, Some(&poly), n, seed)?;
        let max = r.fp32_max_rel.expect("polynomial rows have fp32 errors");
        let bound = poly.certified_max_rel_err() + 2.0 * f32::EPSILON as f64;
        if max > bound {
            failures.push(format!("degree {deg}: fp32 max {max:.3e} exceeds certified {bound:.3e}"));
        }
        if let Some((pd, pmax)) = prev {
            if max >= pmax {
                failures.push(format!("degree {deg} error {max:.3e} not below degree {pd} error {pmax:.3e}"));
            }
        }
        prev = Some((deg, max));
        rows.push(r);
    }
    Ok((rows, failures))
}

pub fn run(args: &Exp2Args, seed: u64) -> CliResult<Outcome> {
    let (rows, failures) = reports(args, seed)?;
    let mut csv = Vec::new();
    attnlab_core::fastmath::write_reports_csv(&rows, &mut csv)?;
    Ok(Outcome {
        json: crate::to_json(&rows)?,
        csv,
        failures,
    })
}
