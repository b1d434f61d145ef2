//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use attnlab_core::attention::AttentionParams;
use attnlab_core::matrix::Matrix;
use attnlab_core::scheduler::{list_schedule, lpt_order};

/// Three-loop attention in natural-exponent form. Returns `O` and the
/// natural-log normalizer per row.
pub fn naive_attention(q: &Matrix, k: &Matrix, v: &Matrix, alpha: f64, causal: bool) -> (Matrix, Vec<f64>) {
    let (n_q, n_kv) = (q.rows(), k.rows());
    let shift = n_kv as i64 - n_q as i64;
    let mut o = Matrix::zeros(n_q, v.cols());
    let mut lse = vec![f64::NEG_INFINITY; n_q];
    for i in 0..n_q {
        let visible: Vec<usize> = (0..n_kv).filter(|&j| !causal || j as i64 <= i as i64 + shift).collect();
        if visible.is_empty() {
            continue;
        }
        let s: Vec<f64> = visible
            .iter()
            .map(|&j| alpha * (0..q.cols()).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>())
            .collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
        for (idx, &j) in visible.iter().enumerate() {
            let p = (s[idx] - m).exp() / z;
            for c in 0..v.cols() {
                o.set(i, c, o.get(i, c) + p * v.get(j, c));
            }
        }
        lse[i] = m + z.ln();
    }
    (o, lse)
}

/// `sum(dO * O)` for the naive oracle.
pub fn loss(q: &Matrix, k: &Matrix, v: &Matrix, d_o: &Matrix, params: &AttentionParams) -> f64 {
    let (o, _) = naive_attention(q, k, v, params.alpha, params.causal);
    o.as_slice().iter().zip(d_o.as_slice()).map(|(a, b)| a * b).sum()
}

/// Central-difference gradient of [`loss`] with respect to one input.
pub fn finite_diff_grad(
    which: usize,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    d_o: &Matrix,
    params: &AttentionParams,
    h: f64,
) -> Matrix {
    let mut inputs = [q.clone(), k.clone(), v.clone()];
    let mut g = Matrix::zeros(inputs[which].rows(), inputs[which].cols());
    for idx in 0..inputs[which].as_slice().len() {
        let x0 = inputs[which].as_slice()[idx];
        inputs[which].as_mut_slice()[idx] = x0 + h;
        let up = loss(&inputs[0], &inputs[1], &inputs[2], d_o, params);
        inputs[which].as_mut_slice()[idx] = x0 - h;
        let down = loss(&inputs[0], &inputs[1], &inputs[2], d_o, params);
        inputs[which].as_mut_slice()[idx] = x0;
        g.as_mut_slice()[idx] = (up - down) / (2.0 * h);
    }
    g
}

/// Dense softmax-weighted sum of one row in base 2, with its base-2
/// log-sum-exp.
pub fn dense_softmax_row(scores: &[f64], v: &[Vec<f64>]) -> (Vec<f64>, f64) {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores.iter().map(|s| (s - m).exp2()).collect();
    let z: f64 = w.iter().sum();
    let mut out = vec![0.0; v[0].len()];
    for (wi, row) in w.iter().zip(v) {
        for (o, x) in out.iter_mut().zip(row) {
            *o += wi / z * x;
        }
    }
    (out, m + z.log2())
}

/// Optimal makespan by plain enumeration of all assignments, without the
/// pruning used by the library search.
pub fn enumerate_optimal_makespan(costs: &[f64], n_processors: usize) -> f64 {
    let n = costs.len();
    let mut best = f64::INFINITY;
    let total = n_processors.pow(n as u32);
    for code in 0..total {
        let mut load = vec![0.0; n_processors];
        let mut c = code;
        for &x in costs {
            load[c % n_processors] += x;
            c /= n_processors;
        }
        best = best.min(load.iter().cloned().fold(0.0, f64::max));
    }
    best
}

/// Graham's bound for LPT on `m` identical processors.
pub fn graham_ratio(m: usize) -> f64 {
    4.0 / 3.0 - 1.0 / (3.0 * m as f64)
}

pub fn lpt_makespan(costs: &[f64], m: usize) -> f64 {
    list_schedule(&lpt_order(costs), m).unwrap().makespan
}
