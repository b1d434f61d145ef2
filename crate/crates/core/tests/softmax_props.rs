mod common;

use attnlab_core::online_softmax::{SoftmaxState, DEFAULT_TAU};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn stream(scores: &[f64], v: &[Vec<f64>], cuts: &[usize], tau: f64, conditional: bool) -> SoftmaxState<f64> {
    let mut st = SoftmaxState::new(v[0].len(), tau);
    let mut start = 0;
    for &end in cuts.iter().chain(std::iter::once(&scores.len())) {
        let rows: Vec<&[f64]> = v[start..end].iter().map(Vec::as_slice).collect();
        if conditional {
            st.update_conditional(&scores[start..end], &rows).unwrap();
        } else {
            st.update_always_rescale(&scores[start..end], &rows).unwrap();
        }
        start = end;
    }
    st
}

fn random_cuts(rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
    let n = rng.random_range(0..len.min(24));
    let mut cuts: Vec<usize> = (0..n).map(|_| rng.random_range(1..len)).collect();
    cuts.sort_unstable();
    cuts.dedup();
    cuts
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

#[test]
fn matches_dense_oracle_on_random_decompositions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..200 {
        let len = rng.random_range(1..=512);
        let spread: f64 = rng.random_range(0.5..40.0);
        let drift: f64 = rng.random_range(-0.2..0.2);
        let scores: Vec<f64> = (0..len)
            .map(|i| spread * rng.sample::<f64, _>(StandardNormal) + drift * i as f64)
            .collect();
        let v: Vec<Vec<f64>> = (0..len).map(|_| (0..4).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let cuts = random_cuts(&mut rng, len);
        let st = stream(&scores, &v, &cuts, DEFAULT_TAU, true);
        let (out, stats) = st.finalize();
        let (want, lse) = common::dense_softmax_row(&scores, &v);
        assert!(max_rel(&out, &want) <= 1e-12, "case {case}");
        assert!((stats.lse - lse).abs() <= 1e-12 * lse.abs().max(1.0), "case {case}");
        assert!(st.max_stored_p <= 2f64.powf(DEFAULT_TAU));
    }
}

#[test]
fn rare_rescales_on_gaussian_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (rows, blocks, width) = (256, 16, 128);
    let (mut fired, mut pairs) = (0, 0);
    for _ in 0..rows {
        let scores: Vec<f64> = (0..blocks * width).map(|_| rng.sample(StandardNormal)).collect();
        let v = vec![vec![1.0]; scores.len()];
        let cuts: Vec<usize> = (1..blocks).map(|b| b * width).collect();
        let st = stream(&scores, &v, &cuts, DEFAULT_TAU, true);
        fired += st.n_rescales;
        pairs += blocks;
    }
    assert!((fired as f64) < 0.1 * pairs as f64, "{fired} of {pairs}");
}

#[test]
fn rescale_count_non_increasing_in_tau() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let scores: Vec<f64> = (0..512).map(|i| 6.0 * rng.sample::<f64, _>(StandardNormal) + 0.05 * i as f64).collect();
        let v = vec![vec![0.0]; scores.len()];
        let cuts: Vec<usize> = (1..16).map(|b| b * 32).collect();
        let counts: Vec<usize> = [0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0]
            .iter()
            .map(|&t| stream(&scores, &v, &cuts, t, true).n_rescales)
            .collect();
        assert!(counts.windows(2).all(|w| w[0] >= w[1]), "{counts:?}");
    }
}

#[test]
fn tiny_tau_matches_always_on_increasing_maxima() {
    let scores: Vec<f64> = (0..256).map(|i| i as f64 * 0.25).collect();
    let v = vec![vec![1.0]; scores.len()];
    let cuts: Vec<usize> = (1..8).map(|b| b * 32).collect();
    let cond = stream(&scores, &v, &cuts, 1e-12, true);
    let always = stream(&scores, &v, &cuts, 0.0, false);
    assert_eq!(cond.n_rescales, always.n_rescales);
    assert_eq!(always.n_rescales, 7);
}

#[test]
fn fully_masked_row() {
    let scores = vec![f64::NEG_INFINITY; 8];
    let v = vec![vec![1.0, 2.0]; 8];
    let (out, stats) = stream(&scores, &v, &[4], DEFAULT_TAU, true).finalize();
    assert_eq!(out, vec![0.0, 0.0]);
    assert_eq!(stats.lse, f64::NEG_INFINITY);
}

proptest! {
    #[test]
    fn block_order_does_not_matter(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = rng.random_range(8..256);
        let scores: Vec<f64> = (0..len).map(|_| 20.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let v: Vec<Vec<f64>> = (0..len).map(|_| vec![rng.sample(StandardNormal), 1.0]).collect();
        let cuts = random_cuts(&mut rng, len);
        let (base, _) = stream(&scores, &v, &cuts, DEFAULT_TAU, true).finalize();

        let mut bounds = vec![0];
        bounds.extend(&cuts);
        bounds.push(len);
        let mut blocks: Vec<(usize, usize)> = bounds.windows(2).map(|w| (w[0], w[1])).collect();
        blocks.shuffle(&mut rng);
        let mut s2 = Vec::new();
        let mut v2 = Vec::new();
        let mut cuts2 = Vec::new();
        for (a, b) in blocks {
            s2.extend_from_slice(&scores[a..b]);
            v2.extend_from_slice(&v[a..b]);
            cuts2.push(s2.len());
        }
        cuts2.pop();
        let (shuffled, _) = stream(&s2, &v2, &cuts2, DEFAULT_TAU, true).finalize();
        prop_assert!(max_rel(&shuffled, &base) <= 1e-12);
    }
}
