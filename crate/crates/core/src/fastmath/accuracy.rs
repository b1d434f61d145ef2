//! Error ledger for the `2^x` paths on `[0, 1)`.

use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{exp2_emulated, exp2_reference, fit_minimax, round_f64_to_bf16, round_to_bf16, Poly2x};
use crate::error::{Error, Result};

/// Samples per independently seeded chunk. Fixed so results do not depend on
/// the thread count.
const CHUNK: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Exp2Method {
    /// Double-precision value rounded straight to bf16.
    IdealRound,
    /// Correctly rounded single-precision path.
    HardwareLike,
    PolyDegree3,
    PolyDegree4,
    PolyDegree5,
}

impl Exp2Method {
    pub const ALL: [Exp2Method; 5] = [
        Exp2Method::IdealRound,
        Exp2Method::HardwareLike,
        Exp2Method::PolyDegree3,
        Exp2Method::PolyDegree4,
        Exp2Method::PolyDegree5,
    ];

    pub fn poly_degree(self) -> Option<usize> {
        match self {
            Exp2Method::PolyDegree3 => Some(3),
            Exp2Method::PolyDegree4 => Some(4),
            Exp2Method::PolyDegree5 => Some(5),
            _ => None,
        }
    }

    pub fn from_degree(degree: usize) -> Result<Self> {
        match degree {
            3 => Ok(Exp2Method::PolyDegree3),
            4 => Ok(Exp2Method::PolyDegree4),
            5 => Ok(Exp2Method::PolyDegree5),
            d => Err(Error::UnsupportedDegree(d)),
        }
    }
}

impl fmt::Display for Exp2Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Exp2Method::IdealRound => "ideal-fp64-to-bf16",
            Exp2Method::HardwareLike => "hardware-like",
            Exp2Method::PolyDegree3 => "degree-3",
            Exp2Method::PolyDegree4 => "degree-4",
            Exp2Method::PolyDegree5 => "degree-5",
        };
        f.write_str(s)
    }
}

/// One row of the accuracy table.
///
/// The single-precision columns are `None` for [`Exp2Method::IdealRound`],
/// which never produces a single-precision value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub method: Exp2Method,
    pub fp32_max_rel: Option<f64>,
    pub fp32_mean_rel: Option<f64>,
    pub bf16_max_rel: f64,
    pub bf16_mean_rel: f64,
    pub n_samples: usize,
    pub ulp_match_fraction: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Partial {
    fp32_max: f64,
    fp32_sum: f64,
    bf16_max: f64,
    bf16_sum: f64,
    ulp_matches: usize,
}

impl Partial {
    fn merge(self, o: Partial) -> Partial {
        Partial {
            fp32_max: self.fp32_max.max(o.fp32_max),
            fp32_sum: self.fp32_sum + o.fp32_sum,
            bf16_max: self.bf16_max.max(o.bf16_max),
            bf16_sum: self.bf16_sum + o.bf16_sum,
            ulp_matches: self.ulp_matches + o.ulp_matches,
        }
    }
}

/// Draws `n_samples` uniform inputs in `[0, 1)` and measures `method`
/// against the double-precision reference.
///
/// Samples are generated in fixed-size chunks, each from its own ChaCha8
/// stream keyed by `(seed, chunk index)`, and chunk partials are combined
/// in chunk order, so the report is bit-identical for any thread count.
pub fn accuracy_sweep(method: Exp2Method, n_samples: usize, seed: u64) -> Result<AccuracyReport> {
    let poly = method.poly_degree().map(fit_minimax).transpose()?;
    accuracy_sweep_with(method, poly.as_ref(), n_samples, seed)
}

/// Like [`accuracy_sweep`] but with a caller-supplied polynomial for the
/// polynomial methods.
pub fn accuracy_sweep_with(
    method: Exp2Method,
    poly: Option<&Poly2x>,
    n_samples: usize,
    seed: u64,
) -> Result<AccuracyReport> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    if method.poly_degree().is_some() && poly.is_none() {
        return Err(Error::InvalidArgument(format!("{method} needs a polynomial")));
    }
    let n_chunks = n_samples.div_ceil(CHUNK);
    let partials: Vec<Partial> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let len = CHUNK.min(n_samples - chunk * CHUNK);
            sweep_chunk(method, poly, seed, chunk as u64, len)
        })
        .collect();
    let total = partials.into_iter().fold(Partial::default(), Partial::merge);
    let n = n_samples as f64;
    let has_fp32 = method != Exp2Method::IdealRound;
    Ok(AccuracyReport {
        method,
        fp32_max_rel: has_fp32.then_some(total.fp32_max),
        fp32_mean_rel: has_fp32.then_some(total.fp32_sum / n),
        bf16_max_rel: total.bf16_max,
        bf16_mean_rel: total.bf16_sum / n,
        n_samples,
        ulp_match_fraction: total.ulp_matches as f64 / n,
    })
}

fn sweep_chunk(method: Exp2Method, poly: Option<&Poly2x>, seed: u64, chunk: u64, len: usize) -> Partial {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk);
    let mut p = Partial::default();
    for _ in 0..len {
        let x: f32 = rng.random::<f32>();
        let exact = (x as f64).exp2();
        let reference = exp2_reference(x);
        let (fp32, bf) = match method {
            Exp2Method::IdealRound => (None, round_f64_to_bf16(exact)),
            Exp2Method::HardwareLike => (Some(reference), round_to_bf16(reference)),
            _ => {
                let y = exp2_emulated(x, poly.expect("checked by caller"));
                (Some(y), round_to_bf16(y))
            }
        };
        if let Some(y) = fp32 {
            let e = ((y as f64 - exact) / exact).abs();
            p.fp32_max = p.fp32_max.max(e);
            p.fp32_sum += e;
        }
        let e = ((bf.to_f64() - exact) / exact).abs();
        p.bf16_max = p.bf16_max.max(e);
        p.bf16_sum += e;
        if bf.ulp_distance(round_to_bf16(reference)) <= 1 {
            p.ulp_matches += 1;
        }
    }
    p
}

/// Column headers of the CSV table, in order.
pub const CSV_HEADER: [&str; 7] = [
    "method",
    "fp32_max_rel",
    "fp32_mean_rel",
    "bf16_max_rel",
    "bf16_mean_rel",
    "n_samples",
    "ulp_match_fraction",
];

#[derive(Serialize, Deserialize)]
struct CsvRow {
    method: String,
    fp32_max_rel: Option<f64>,
    fp32_mean_rel: Option<f64>,
    bf16_max_rel: f64,
    bf16_mean_rel: f64,
    n_samples: usize,
    ulp_match_fraction: f64,
}

/// Writes reports as CSV rows; missing single-precision columns are empty.
pub fn write_reports_csv<W: Write>(reports: &[AccuracyReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(CsvRow {
            method: r.method.to_string(),
            fp32_max_rel: r.fp32_max_rel,
            fp32_mean_rel: r.fp32_mean_rel,
            bf16_max_rel: r.bf16_max_rel,
            bf16_mean_rel: r.bf16_mean_rel,
            n_samples: r.n_samples,
            ulp_match_fraction: r.ulp_match_fraction,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_reports_csv<R: std::io::Read>(input: R) -> Result<Vec<AccuracyReport>> {
    let mut rd = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in rd.deserialize::<CsvRow>() {
        let row = row?;
        let method = Exp2Method::ALL
            .into_iter()
            .find(|m| m.to_string() == row.method)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {}", row.method)))?;
        out.push(AccuracyReport {
            method,
            fp32_max_rel: row.fp32_max_rel,
            fp32_mean_rel: row.fp32_mean_rel,
            bf16_max_rel: row.bf16_max_rel,
            bf16_mean_rel: row.bf16_mean_rel,
            n_samples: row.n_samples,
            ulp_match_fraction: row.ulp_match_fraction,
        });
    }
    Ok(out)
}
