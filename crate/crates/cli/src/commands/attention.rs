use std::str::FromStr;

use attnlab_core::attention::{
    attention_backward_tiled, attention_forward_tiled, attention_reference, AttentionParams, ExpMode, Precision,
    ATOMIC_D_CHUNK, ATOMIC_ROW_SPLITS,
};
use attnlab_core::matrix::Matrix;
use attnlab_core::CtaMode;
use clap::{Args, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult, Outcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    Fp64,
    KernelFaithful,
}

/// `reference`, `emulated:<degree>` or `mixed:<fraction>`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpArg(pub ExpMode);

impl FromStr for ExpArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mode = match s.split_once(':') {
            None if s == "reference" => ExpMode::Reference,
            Some(("emulated", d)) => ExpMode::Emulated(d.parse().map_err(|_| format!("bad degree {d:?}"))?),
            Some(("mixed", f)) => ExpMode::Mixed(f.parse().map_err(|_| format!("bad fraction {f:?}"))?),
            _ => return Err(format!("expected reference, emulated:<degree> or mixed:<fraction>, got {s:?}")),
        };
        Ok(ExpArg(mode))
    }
}

#[derive(Debug, Args)]
pub struct AttentionArgs {
    #[arg(long, default_value_t = 192)]
    pub nq: usize,

    #[arg(long, default_value_t = 192)]
    pub nkv: usize,

    #[arg(long, default_value_t = 64)]
    pub d: usize,

    #[arg(long)]
    pub causal: bool,

    #[arg(long, default_value_t = 64)]
    pub tile_m: usize,

    #[arg(long, default_value_t = 64)]
    pub tile_n: usize,

    /// Rescale threshold in log2 units.
    #[arg(long, default_value_t = attnlab_core::online_softmax::DEFAULT_TAU)]
    pub tau: f64,

    #[arg(long, value_enum, default_value_t = PrecisionArg::Fp64)]
    pub precision: PrecisionArg,

    #[arg(long, default_value = "reference")]
    pub exp: ExpArg,

    /// Gradient entries per input checked against finite differences; 0 skips.
    #[arg(long, default_value_t = 8)]
    pub grad_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub params: AttentionParams,
    pub seed: u64,
    pub checks: Vec<CheckRow>,
    pub n_rescales: usize,
    pub n_row_blocks: usize,
    pub skip_rate: f64,
    pub atomic_adds_one_cta: usize,
    pub atomic_adds_two_cta: usize,
}

const EXACT: f64 = 1e-12;
const FD_STEP: f64 = 1e-5;
const FD_LIMIT: f64 = 1e-6;
const BF16_STEP: f64 = 1.0 / 256.0;

fn check(checks: &mut Vec<CheckRow>, name: &str, value: f64, limit: f64) {
    checks.push(CheckRow {
        name: name.into(),
        value,
        limit,
        passed: value <= limit,
    });
}

fn lse_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| if x == y { 0.0 } else { (x - y).abs() })
        .fold(0.0, f64::max)
}

fn loss(q: &Matrix, k: &Matrix, v: &Matrix, d_o: &Matrix, p: &AttentionParams) -> CliResult<f64> {
    let o = attention_reference(q, k, v, p)?.o;
    Ok(o.as_slice().iter().zip(d_o.as_slice()).map(|(a, b)| a * b).sum())
}

pub fn report(args: &AttentionArgs, seed: u64) -> CliResult<(AttentionReport, Vec<String>)> {
    let mut params = AttentionParams::new(args.nq, args.nkv, args.d);
    params.causal = args.causal;
    params.tile_m = args.tile_m;
    params.tile_n = args.tile_n;
    params.tau = args.tau;
    params.exp_mode = args.exp.0;
    params.precision = match args.precision {
        PrecisionArg::Fp64 => Precision::Fp64Oracle,
        PrecisionArg::KernelFaithful => Precision::KernelFaithful,
    };
    params.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = Matrix::random_normal(args.nq, args.d, &mut rng);
    let k = Matrix::random_normal(args.nkv, args.d, &mut rng);
    let v = Matrix::random_normal(args.nkv, args.d, &mut rng);
    let d_o = Matrix::random_normal(args.nq, args.d, &mut rng);

    let exact_params = AttentionParams {
        exp_mode: ExpMode::Reference,
        precision: Precision::Fp64Oracle,
        ..params.clone()
    };
    let oracle = attention_reference(&q, &k, &v, &exact_params)?;
    let fwd = attention_forward_tiled(&q, &k, &v, &params)?;
    let exact = params == exact_params;
    let envelope = 8.0 * BF16_STEP * v.max_abs();
    let mut checks = Vec::new();

    if exact {
        check(&mut checks, "forward_rel_err", fwd.o.max_rel_diff(&oracle.o), EXACT);
        check(&mut checks, "lse_abs_err", lse_diff(&fwd.lse, &oracle.lse), EXACT);
    } else {
        check(&mut checks, "forward_envelope", fwd.o.max_abs_diff(&oracle.o), envelope);
        check(&mut checks, "lse_abs_err", lse_diff(&fwd.lse, &oracle.lse), 8.0 * BF16_STEP);
        if params.exp_mode != ExpMode::Reference {
            let paired = AttentionParams {
                exp_mode: ExpMode::Reference,
                ..params.clone()
            };
            let base = attention_forward_tiled(&q, &k, &v, &paired)?;
            check(&mut checks, "exp_path_delta", fwd.o.max_abs_diff(&base.o), BF16_STEP * v.max_abs());
        }
    }

    if args.causal {
        let open = AttentionParams {
            causal: false,
            ..params.clone()
        };
        let unmasked = attention_forward_tiled(&q, &k, &v, &open)?;
        let last = args.nq - 1;
        let diff = fwd.o.row(last).iter().zip(unmasked.o.row(last)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let limit = if exact { EXACT * v.max_abs() } else { BF16_STEP * v.max_abs() };
        check(&mut checks, "last_row_sees_all_keys", diff, limit);
    }

    // Backward runs in double precision with reference exponentials.
    let bwd_fwd = attention_forward_tiled(&q, &k, &v, &exact_params)?;
    let one = attention_backward_tiled(&q, &k, &v, &d_o, &bwd_fwd, &exact_params, CtaMode::OneCta)?;
    let two = attention_backward_tiled(&q, &k, &v, &d_o, &bwd_fwd, &exact_params, CtaMode::TwoCta)?;
    let cta_diff = [(&one.dq, &two.dq), (&one.dk, &two.dk), (&one.dv, &two.dv)]
        .iter()
        .map(|(a, b)| a.max_rel_diff(b))
        .fold(0.0, f64::max);
    check(&mut checks, "two_cta_vs_one_cta", cta_diff, EXACT);

    let expected = exact_params.n_kv_tiles() * exact_params.n_q_tiles() * ATOMIC_ROW_SPLITS * args.d.div_ceil(ATOMIC_D_CHUNK);
    check(&mut checks, "atomic_count_mismatch", one.atomic_adds.abs_diff(expected) as f64, 0.0);
    if exact_params.n_kv_tiles().is_multiple_of(2) {
        check(&mut checks, "two_cta_atomic_mismatch", (2 * two.atomic_adds).abs_diff(one.atomic_adds) as f64, 0.0);
    }

    if args.grad_samples > 0 {
        let mut inputs = [q.clone(), k.clone(), v.clone()];
        for (which, (name, grad)) in [("dq_fd_rel_err", &one.dq), ("dk_fd_rel_err", &one.dk), ("dv_fd_rel_err", &one.dv)]
            .into_iter()
            .enumerate()
        {
            let scale = grad.max_abs().max(1e-300);
            let mut worst = 0.0f64;
            for _ in 0..args.grad_samples {
                let (r, c) = (rng.random_range(0..grad.rows()), rng.random_range(0..grad.cols()));
                let x0 = inputs[which].get(r, c);
                inputs[which].set(r, c, x0 + FD_STEP);
                let up = loss(&inputs[0], &inputs[1], &inputs[2], &d_o, &exact_params)?;
                inputs[which].set(r, c, x0 - FD_STEP);
                let down = loss(&inputs[0], &inputs[1], &inputs[2], &d_o, &exact_params)?;
                inputs[which].set(r, c, x0);
                let fd = (up - down) / (2.0 * FD_STEP);
                worst = worst.max((grad.get(r, c) - fd).abs() / scale);
            }
            check(&mut checks, name, worst, FD_LIMIT);
        }
    }

    let failures = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{} = {:.3e} > {:.3e}", c.name, c.value, c.limit))
        .collect();
    let stats = &fwd.stats;
    let skip_rate = if stats.n_row_blocks == 0 {
        0.0
    } else {
        1.0 - stats.n_rescales as f64 / stats.n_row_blocks as f64
    };
    Ok((
        AttentionReport {
            params,
            seed,
            checks,
            n_rescales: stats.n_rescales,
            n_row_blocks: stats.n_row_blocks,
            skip_rate,
            atomic_adds_one_cta: one.atomic_adds,
            atomic_adds_two_cta: two.atomic_adds,
        },
        failures,
    ))
}

pub fn run(args: &AttentionArgs, seed: u64) -> CliResult<Outcome> {
    if args.nq == 0 || args.nkv == 0 || args.d == 0 {
        return Err(CliError::Usage("--nq, --nkv and --d must be positive".into()));
    }
    let (report, failures) = report(args, seed)?;
    Outcome::new(&report, &report.checks, failures)
}
