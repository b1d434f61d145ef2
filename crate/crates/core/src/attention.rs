//! Tiled attention forward and backward at the algorithm level.
//!
//! Scores are carried in the base-2 domain: `s = alpha * log2(e) * q.k`, so
//! `softmax` over natural-log scores equals `2^(s - lse)` with `lse` the
//! base-2 log-sum-exp. All `lse` values produced here use that convention.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::CtaMode;
use crate::fastmath::{exp2_emulated, fit_minimax, quantize_bf16, Poly2x};
use crate::matrix::Matrix;
use crate::online_softmax::{warp_uniform_predicate, ExpPath, Real, SoftmaxState, DEFAULT_TAU, WARP_ROWS};

/// Column width of one modeled dQ atomic reduction.
pub const ATOMIC_D_CHUNK: usize = 128;
/// Atomic reductions per query tile and d-chunk (one per row half).
pub const ATOMIC_ROW_SPLITS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ExpMode {
    Reference,
    /// Every exponential through the polynomial of this degree.
    Emulated(usize),
    /// This fraction of each row through the degree-3 polynomial, the rest
    /// through the reference path.
    Mixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    /// Double precision everywhere, no rounding.
    Fp64Oracle,
    /// bf16 inputs and `P`, single-precision accumulators.
    KernelFaithful,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub n_q: usize,
    pub n_kv: usize,
    pub d: usize,
    pub alpha: f64,
    pub causal: bool,
    pub tile_m: usize,
    pub tile_n: usize,
    pub tau: f64,
    pub exp_mode: ExpMode,
    pub precision: Precision,
}

impl AttentionParams {
    /// Defaults: `alpha = 1/sqrt(d)`, 128x128 tiles, `tau = 8`, reference
    /// exponentials, double precision, no mask.
    pub fn new(n_q: usize, n_kv: usize, d: usize) -> Self {
        Self {
            n_q,
            n_kv,
            d,
            alpha: 1.0 / (d as f64).sqrt(),
            causal: false,
            tile_m: 128,
            tile_n: 128,
            tau: DEFAULT_TAU,
            exp_mode: ExpMode::Reference,
            precision: Precision::Fp64Oracle,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile_m == 0 || self.tile_n == 0 {
            return Err(Error::InvalidArgument("tile sizes must be at least 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidArgument("alpha must be positive".into()));
        }
        if self.tau < 0.0 {
            return Err(Error::InvalidArgument("tau must be non-negative".into()));
        }
        match self.exp_mode {
            ExpMode::Mixed(f) if !(0.0..=1.0).contains(&f) => {
                return Err(Error::InvalidArgument(format!("mixed fraction {f} outside [0, 1]")))
            }
            ExpMode::Emulated(deg) if !(3..=5).contains(&deg) => return Err(Error::UnsupportedDegree(deg)),
            _ => {}
        }
        Ok(())
    }

    fn check_inputs(&self, q: &Matrix, k: &Matrix, v: &Matrix) -> Result<()> {
        self.validate()?;
        if q.shape() != (self.n_q, self.d) {
            return Err(Error::Shape(format!("Q is {:?}, expected ({}, {})", q.shape(), self.n_q, self.d)));
        }
        if k.shape() != (self.n_kv, self.d) {
            return Err(Error::Shape(format!("K is {:?}, expected ({}, {})", k.shape(), self.n_kv, self.d)));
        }
        if v.rows() != self.n_kv {
            return Err(Error::Shape(format!("V has {} rows, expected {}", v.rows(), self.n_kv)));
        }
        Ok(())
    }

    /// Score scale in the base-2 domain.
    pub fn log2_scale(&self) -> f64 {
        self.alpha * std::f64::consts::LOG2_E
    }

    pub fn n_q_tiles(&self) -> usize {
        self.n_q.div_ceil(self.tile_m)
    }

    pub fn n_kv_tiles(&self) -> usize {
        self.n_kv.div_ceil(self.tile_n)
    }
}

/// Causal mask with bottom-right alignment: query `i` sees keys
/// `j <= i + (n_kv - n_q)`. Returns `true` when the entry is masked.
#[inline]
pub fn causal_mask(i_query: usize, j_key: usize, n_q: usize, n_kv: usize) -> bool {
    j_key as i64 > i_query as i64 + n_kv as i64 - n_q as i64
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ForwardStats {
    /// KV tiles visited by each query tile (fully masked tiles are skipped).
    pub kv_tiles_per_q_tile: Vec<usize>,
    pub n_rescales: usize,
    pub n_row_blocks: usize,
    /// Largest value written into `P`.
    pub max_stored_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardOutput {
    pub o: Matrix,
    /// Base-2 log-sum-exp per query row; `-inf` for fully masked rows.
    pub lse: Vec<f64>,
    pub stats: ForwardStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackwardOutput {
    pub dq: Matrix,
    pub dk: Matrix,
    pub dv: Matrix,
    /// `D_i = sum_k dO_ik * O_ik`.
    pub d: Vec<f64>,
    /// Modeled global atomic reductions into dQ.
    pub atomic_adds: usize,
}

/// Dense double-precision attention with a row-wise stable softmax.
pub fn attention_reference(q: &Matrix, k: &Matrix, v: &Matrix, params: &AttentionParams) -> Result<ForwardOutput> {
    params.check_inputs(q, k, v)?;
    let (n_q, n_kv, dv) = (params.n_q, params.n_kv, v.cols());
    let mut o = Matrix::zeros(n_q, dv);
    let mut lse = vec![f64::NEG_INFINITY; n_q];
    let mut scores = vec![0.0; n_kv];
    for i in 0..n_q {
        for (j, s) in scores.iter_mut().enumerate() {
            *s = if params.causal && causal_mask(i, j, n_q, n_kv) {
                f64::NEG_INFINITY
            } else {
                params.alpha * dot(q.row(i), k.row(j))
            };
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut sum = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        let out = o.row_mut(i);
        for (j, &p) in scores.iter().enumerate() {
            if p != 0.0 {
                axpy(p / sum, v.row(j), out);
            }
        }
        lse[i] = (max + sum.ln()) * std::f64::consts::LOG2_E;
    }
    Ok(ForwardOutput {
        o,
        lse,
        stats: ForwardStats::default(),
    })
}

/// Resolved exponential path for one forward run.
struct KernelExp {
    poly: Option<Poly2x>,
    mixed_fraction: Option<f64>,
    quantize_p: bool,
}

impl KernelExp {
    fn new(params: &AttentionParams) -> Result<Self> {
        let (poly, mixed_fraction) = match params.exp_mode {
            ExpMode::Reference => (None, None),
            ExpMode::Emulated(deg) => (Some(fit_minimax(deg)?), None),
            ExpMode::Mixed(f) => (Some(fit_minimax(3)?), Some(f)),
        };
        Ok(Self {
            poly,
            mixed_fraction,
            quantize_p: params.precision == Precision::KernelFaithful,
        })
    }
}

/// Deterministic stride pattern: column `j` is emulated iff
/// `floor((j + 1) f) > floor(j f)`, so any prefix of `n` columns holds
/// `floor(n f)` emulated entries.
#[inline]
pub fn mixed_uses_emulation(col: usize, fraction: f64) -> bool {
    ((col + 1) as f64 * fraction).floor() > (col as f64 * fraction).floor()
}

impl<T: Real> ExpPath<T> for KernelExp {
    #[inline]
    fn exp2(&self, x: T, col: usize) -> T {
        let emulate = match (&self.poly, self.mixed_fraction) {
            (None, _) => false,
            (Some(_), None) => true,
            (Some(_), Some(f)) => mixed_uses_emulation(col, f),
        };
        match (&self.poly, emulate) {
            (Some(p), true) => T::from_f64(exp2_emulated(x.to_f64() as f32, p) as f64),
            _ => x.exp2(),
        }
    }

    #[inline]
    fn store_p(&self, p: T) -> T {
        if self.quantize_p {
            T::from_f64(quantize_bf16(p.to_f64() as f32) as f64)
        } else {
            p
        }
    }
}

/// Tiled forward pass using the conditional-rescaling online softmax with a
/// warp-uniform branch per group of 32 rows.
pub fn attention_forward_tiled(q: &Matrix, k: &Matrix, v: &Matrix, params: &AttentionParams) -> Result<ForwardOutput> {
    params.check_inputs(q, k, v)?;
    let exp = KernelExp::new(params)?;
    match params.precision {
        Precision::Fp64Oracle => forward_impl::<f64>(q, k, v, params, &exp, |x| x),
        Precision::KernelFaithful => forward_impl::<f32>(q, k, v, params, &exp, |x| quantize_bf16(x as f32)),
    }
}

fn forward_impl<T: Real>(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    params: &AttentionParams,
    exp: &KernelExp,
    load: impl Fn(f64) -> T + Sync,
) -> Result<ForwardOutput> {
    let conv = |m: &Matrix| -> Vec<T> { m.as_slice().iter().map(|&x| load(x)).collect() };
    let (qd, kd, vd) = (conv(q), conv(k), conv(v));
    let (n_q, n_kv, d, dv) = (params.n_q, params.n_kv, params.d, v.cols());
    let scale = T::from_f64(params.log2_scale());
    let tau = T::from_f64(params.tau);
    let offset = n_kv as i64 - n_q as i64;

    struct TileResult {
        rows: Vec<(Vec<f64>, f64)>,
        kv_tiles: usize,
        n_rescales: usize,
        n_row_blocks: usize,
        max_p: f64,
    }

    let tiles: Vec<TileResult> = (0..params.n_q_tiles())
        .into_par_iter()
        .map(|qt| {
            let i0 = qt * params.tile_m;
            let i1 = (i0 + params.tile_m).min(n_q);
            let mut states: Vec<SoftmaxState<T>> = (i0..i1).map(|_| SoftmaxState::new(dv, tau)).collect();
            let mut kv_tiles = 0;
            let mut scores = vec![vec![T::ZERO; params.tile_n]; i1 - i0];
            for kt in 0..params.n_kv_tiles() {
                let j0 = kt * params.tile_n;
                let j1 = (j0 + params.tile_n).min(n_kv);
                if params.causal && j0 as i64 > (i1 - 1) as i64 + offset {
                    break;
                }
                kv_tiles += 1;
                let v_rows: Vec<&[T]> = (j0..j1).map(|j| &vd[j * dv..(j + 1) * dv]).collect();
                for (r, i) in (i0..i1).enumerate() {
                    let qi = &qd[i * d..(i + 1) * d];
                    for (c, j) in (j0..j1).enumerate() {
                        scores[r][c] = if params.causal && causal_mask(i, j, n_q, n_kv) {
                            T::NEG_INFINITY
                        } else {
                            let kj = &kd[j * d..(j + 1) * d];
                            let mut acc = T::ZERO;
                            for (&a, &b) in qi.iter().zip(kj) {
                                acc = a.mul_add(b, acc);
                            }
                            acc * scale
                        };
                    }
                }
                let width = j1 - j0;
                for g0 in (0..i1 - i0).step_by(WARP_ROWS) {
                    let g1 = (g0 + WARP_ROWS).min(i1 - i0);
                    let flags: Vec<bool> = (g0..g1)
                        .map(|r| {
                            let bm = scores[r][..width].iter().fold(T::NEG_INFINITY, |m, &s| m.max(s));
                            states[r].needs_rescale(bm)
                        })
                        .collect();
                    let rescale = warp_uniform_predicate(&flags);
                    for r in g0..g1 {
                        states[r]
                            .update_with_decision(&scores[r][..width], &v_rows, j0, exp, rescale)
                            .expect("tile shapes are consistent");
                    }
                }
            }
            let mut n_rescales = 0;
            let mut n_row_blocks = 0;
            let mut max_p: f64 = 0.0;
            let rows = states
                .iter()
                .map(|st| {
                    n_rescales += st.n_rescales;
                    n_row_blocks += st.n_blocks;
                    max_p = max_p.max(st.max_stored_p.to_f64());
                    let (out, stats) = st.finalize();
                    (out.into_iter().map(Real::to_f64).collect(), stats.lse)
                })
                .collect();
            TileResult {
                rows,
                kv_tiles,
                n_rescales,
                n_row_blocks,
                max_p,
            }
        })
        .collect();

    let mut o = Matrix::zeros(n_q, dv);
    let mut lse = Vec::with_capacity(n_q);
    let mut stats = ForwardStats::default();
    let mut i = 0;
    for t in tiles {
        stats.kv_tiles_per_q_tile.push(t.kv_tiles);
        stats.n_rescales += t.n_rescales;
        stats.n_row_blocks += t.n_row_blocks;
        stats.max_stored_p = stats.max_stored_p.max(t.max_p);
        for (row, l) in t.rows {
            o.row_mut(i).copy_from_slice(&row);
            lse.push(l);
            i += 1;
        }
    }
    Ok(ForwardOutput { o, lse, stats })
}

/// `D_i = sum_k dO_ik * O_ik`.
pub fn attention_backward_preprocess(d_o: &Matrix, o: &Matrix) -> Result<Vec<f64>> {
    if d_o.shape() != o.shape() {
        return Err(Error::Shape(format!("dO is {:?} but O is {:?}", d_o.shape(), o.shape())));
    }
    Ok((0..o.rows()).map(|i| dot(d_o.row(i), o.row(i))).collect())
}

/// dQ accumulator that counts modeled global atomic reductions.
#[derive(Debug, Clone)]
pub struct DqAccumulator {
    dq: Matrix,
    atomic_adds: usize,
}

impl DqAccumulator {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            dq: Matrix::zeros(rows, cols),
            atomic_adds: 0,
        }
    }

    /// Adds a query-tile partial starting at `row0`. Counts one atomic per
    /// row half and 128-column chunk.
    pub fn add(&mut self, row0: usize, partial: &Matrix) {
        for r in 0..partial.rows() {
            for (a, &b) in self.dq.row_mut(row0 + r).iter_mut().zip(partial.row(r)) {
                *a += b;
            }
        }
        self.atomic_adds += ATOMIC_ROW_SPLITS * partial.cols().div_ceil(ATOMIC_D_CHUNK);
    }

    pub fn atomic_adds(&self) -> usize {
        self.atomic_adds
    }

    pub fn into_inner(self) -> (Matrix, usize) {
        (self.dq, self.atomic_adds)
    }
}

/// Per-CTA work item of the backward pass: the KV tiles it owns.
struct KvWork {
    dk: Matrix,
    dv: Matrix,
    j0: usize,
    /// dQ partial per query tile, in query-tile order.
    dq_partials: Vec<Matrix>,
}

/// Tiled backward pass in double precision.
///
/// Each CTA owns a KV tile (two adjacent KV tiles in `TwoCta` mode) and
/// streams over query tiles, recomputing `P = 2^(s - lse)`. The dQ partials
/// are reduced serially in KV order, so results are deterministic. In
/// `TwoCta` mode the partials of a KV-tile pair are combined before the
/// reduction, halving the atomic count when the KV tile count is even; an
/// odd trailing tile is reduced on its own.
pub fn attention_backward_tiled(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    d_o: &Matrix,
    fwd: &ForwardOutput,
    params: &AttentionParams,
    cta_mode: CtaMode,
) -> Result<BackwardOutput> {
    params.check_inputs(q, k, v)?;
    if fwd.lse.len() != params.n_q {
        return Err(Error::InvalidArgument(format!(
            "forward lse has {} entries, expected {}",
            fwd.lse.len(),
            params.n_q
        )));
    }
    if d_o.shape() != fwd.o.shape() || d_o.rows() != params.n_q || d_o.cols() != v.cols() {
        return Err(Error::Shape(format!("dO is {:?}, O is {:?}", d_o.shape(), fwd.o.shape())));
    }
    let d_vec = attention_backward_preprocess(d_o, &fwd.o)?;
    let (n_q, n_kv, d, dv) = (params.n_q, params.n_kv, params.d, v.cols());
    let scale = params.log2_scale();
    let alpha = params.alpha;
    let n_q_tiles = params.n_q_tiles();
    let kv_per_cta = match cta_mode {
        CtaMode::OneCta => 1,
        CtaMode::TwoCta => 2,
    };
    let span = kv_per_cta * params.tile_n;
    let n_ctas = n_kv.div_ceil(span);

    let work: Vec<KvWork> = (0..n_ctas)
        .into_par_iter()
        .map(|cta| {
            let j0 = cta * span;
            let j_end = (j0 + span).min(n_kv);
            let mut dk = Matrix::zeros(j_end - j0, d);
            let mut dvm = Matrix::zeros(j_end - j0, dv);
            let mut dq_partials = Vec::with_capacity(n_q_tiles);
            for qt in 0..n_q_tiles {
                let i0 = qt * params.tile_m;
                let i1 = (i0 + params.tile_m).min(n_q);
                let mut part = Matrix::zeros(i1 - i0, d);
                // Each KV tile of the CTA computes its own dS; the pair
                // contributions meet in `part` before the reduction.
                for t0 in (j0..j_end).step_by(params.tile_n) {
                    let t1 = (t0 + params.tile_n).min(j_end);
                    for i in i0..i1 {
                        let lse = fwd.lse[i];
                        if lse == f64::NEG_INFINITY {
                            continue;
                        }
                        let (qi, doi) = (q.row(i), d_o.row(i));
                        for j in t0..t1 {
                            if params.causal && causal_mask(i, j, n_q, n_kv) {
                                continue;
                            }
                            let p = (scale * dot(qi, k.row(j)) - lse).exp2();
                            axpy(p, doi, dvm.row_mut(j - j0));
                            let dp = dot(doi, v.row(j));
                            let ds = p * (dp - d_vec[i]);
                            axpy(alpha * ds, qi, dk.row_mut(j - j0));
                            axpy(alpha * ds, k.row(j), part.row_mut(i - i0));
                        }
                    }
                }
                dq_partials.push(part);
            }
            KvWork {
                dk,
                dv: dvm,
                j0,
                dq_partials,
            }
        })
        .collect();

    let mut acc = DqAccumulator::new(n_q, d);
    let mut dk = Matrix::zeros(n_kv, d);
    let mut dvm = Matrix::zeros(n_kv, dv);
    for w in &work {
        for r in 0..w.dk.rows() {
            dk.row_mut(w.j0 + r).copy_from_slice(w.dk.row(r));
            dvm.row_mut(w.j0 + r).copy_from_slice(w.dv.row(r));
        }
        for (qt, part) in w.dq_partials.iter().enumerate() {
            acc.add(qt * params.tile_m, part);
        }
    }
    let (dq, atomic_adds) = acc.into_inner();
    Ok(BackwardOutput {
        dq,
        dk,
        dv: dvm,
        d: d_vec,
        atomic_adds,
    })
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
