mod common;

use attnlab_core::attention::*;
use attnlab_core::matrix::Matrix;
use attnlab_core::CtaMode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Case {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    d_o: Matrix,
    params: AttentionParams,
}

fn case(rng: &mut ChaCha8Rng, n_q: usize, n_kv: usize, d: usize, causal: bool, tile: (usize, usize)) -> Case {
    let mut params = AttentionParams::new(n_q, n_kv, d);
    params.causal = causal;
    params.tile_m = tile.0;
    params.tile_n = tile.1;
    Case {
        q: Matrix::random_normal(n_q, d, rng),
        k: Matrix::random_normal(n_kv, d, rng),
        v: Matrix::random_normal(n_kv, d, rng),
        d_o: Matrix::random_normal(n_q, d, rng),
        params,
    }
}

#[test]
fn tiled_forward_matches_three_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for &(n_q, n_kv, tile) in &[(37, 37, (8, 8)), (64, 64, (16, 32)), (1, 50, (4, 7)), (50, 20, (9, 5)), (33, 90, (32, 13))] {
        for causal in [false, true] {
            let c = case(&mut rng, n_q, n_kv, 12, causal, tile);
            let fwd = attention_forward_tiled(&c.q, &c.k, &c.v, &c.params).unwrap();
            let (o, lse) = common::naive_attention(&c.q, &c.k, &c.v, c.params.alpha, causal);
            assert!(fwd.o.max_abs_diff(&o) <= 1e-12, "{n_q}x{n_kv} causal={causal}");
            for (a, b) in fwd.lse.iter().zip(&lse) {
                if b.is_finite() {
                    assert!((a * std::f64::consts::LN_2 - b).abs() <= 1e-12);
                } else {
                    assert_eq!(*a, f64::NEG_INFINITY);
                }
            }
        }
    }
}

#[test]
fn tile_size_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let base = case(&mut rng, 70, 70, 8, true, (128, 128));
    let reference = attention_forward_tiled(&base.q, &base.k, &base.v, &base.params).unwrap();
    for tile in [(1, 1), (7, 9), (16, 16), (35, 70), (64, 3)] {
        let mut p = base.params.clone();
        p.tile_m = tile.0;
        p.tile_n = tile.1;
        let out = attention_forward_tiled(&base.q, &base.k, &base.v, &p).unwrap();
        assert!(out.o.max_abs_diff(&reference.o) <= 1e-12, "{tile:?}");
    }
}

#[test]
fn backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut checked = 0;
    for inst in 0..24 {
        let n_q = rng.random_range(2..=40);
        let n_kv = rng.random_range(2..=40);
        let d = rng.random_range(2..=16);
        let causal = inst % 2 == 0;
        let tile = (rng.random_range(3..=16), rng.random_range(3..=16));
        let c = case(&mut rng, n_q, n_kv, d, causal, tile);
        let fwd = attention_forward_tiled(&c.q, &c.k, &c.v, &c.params).unwrap();
        let bwd = attention_backward_tiled(&c.q, &c.k, &c.v, &c.d_o, &fwd, &c.params, CtaMode::OneCta).unwrap();
        for (which, got) in [(0, &bwd.dq), (1, &bwd.dk), (2, &bwd.dv)] {
            let fd = common::finite_diff_grad(which, &c.q, &c.k, &c.v, &c.d_o, &c.params, 1e-5);
            let err = got.max_rel_diff(&fd);
            assert!(err <= 1e-6, "instance {inst} input {which}: {err:e}");
        }
        checked += 1;
    }
    assert!(checked >= 20);
}

#[test]
fn two_cta_matches_one_cta() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for causal in [false, true] {
        let c = case(&mut rng, 48, 64, 16, causal, (16, 8));
        let fwd = attention_forward_tiled(&c.q, &c.k, &c.v, &c.params).unwrap();
        let one = attention_backward_tiled(&c.q, &c.k, &c.v, &c.d_o, &fwd, &c.params, CtaMode::OneCta).unwrap();
        let two = attention_backward_tiled(&c.q, &c.k, &c.v, &c.d_o, &fwd, &c.params, CtaMode::TwoCta).unwrap();
        assert!(one.dq.max_abs_diff(&two.dq) <= 1e-12);
        assert_eq!(one.dk, two.dk);
        assert_eq!(one.dv, two.dv);
    }
}

#[test]
fn atomic_count_law() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for &(n_q, n_kv, d, tile) in &[(32, 64, 8, (8, 8)), (40, 48, 130, (16, 12)), (7, 16, 256, (4, 4))] {
        let c = case(&mut rng, n_q, n_kv, d, false, tile);
        let fwd = attention_forward_tiled(&c.q, &c.k, &c.v, &c.params).unwrap();
        let one = attention_backward_tiled(&c.q, &c.k, &c.v, &c.d_o, &fwd, &c.params, CtaMode::OneCta).unwrap();
        let two = attention_backward_tiled(&c.q, &c.k, &c.v, &c.d_o, &fwd, &c.params, CtaMode::TwoCta).unwrap();
        let want = c.params.n_kv_tiles() * c.params.n_q_tiles() * ATOMIC_ROW_SPLITS * d.div_ceil(ATOMIC_D_CHUNK);
        assert_eq!(one.atomic_adds, want);
        assert_eq!(one.atomic_adds, 2 * two.atomic_adds);
    }
}

#[test]
fn conditional_rescaling_is_transparent() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut c = case(&mut rng, 64, 256, 16, true, (32, 32));
    // Scale Q so scores reach tens of units but stay bounded.
    let q = c.q.map(|x| 3.0 * x);
    let lazy = attention_forward_tiled(&q, &c.k, &c.v, &c.params).unwrap();
    c.params.tau = 0.0;
    let eager = attention_forward_tiled(&q, &c.k, &c.v, &c.params).unwrap();
    assert!(lazy.o.max_rel_diff(&eager.o) <= 1e-12);
    assert!(lazy.stats.n_rescales < eager.stats.n_rescales);
}

#[test]
fn conditional_rescaling_is_transparent_in_single_precision() {
    use attnlab_core::online_softmax::SoftmaxState;
    use rand_distr::StandardNormal;
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for _ in 0..200 {
        let scores: Vec<f32> = (0..1024).map(|i| (10.0 * rng.sample::<f32, _>(StandardNormal) + 0.02 * i as f32).clamp(-30.0, 30.0)).collect();
        let v: Vec<Vec<f32>> = (0..1024).map(|_| (0..8).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let run = |tau: f32| {
            let mut st = SoftmaxState::<f32>::new(8, tau);
            for (s, rows) in scores.chunks(64).zip(v.chunks(64)) {
                let rows: Vec<&[f32]> = rows.iter().map(Vec::as_slice).collect();
                st.update_conditional(s, &rows).unwrap();
            }
            st.finalize().0
        };
        let (lazy, eager) = (run(8.0), run(0.0));
        let scale = eager.iter().fold(0.0f32, |m, x| m.max(x.abs()));
        let diff = lazy.iter().zip(&eager).fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff <= 1e-5 * scale, "{diff} vs {scale}");
    }
}

#[test]
fn bf16_error_envelope() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for causal in [false, true] {
        let mut c = case(&mut rng, 96, 160, 32, causal, (32, 32));
        let exact = attention_reference(&c.q, &c.k, &c.v, &c.params).unwrap();
        c.params.precision = Precision::KernelFaithful;
        let bound = 8.0 * 2f64.powi(-8) * c.v.max_abs();
        for mode in [ExpMode::Reference, ExpMode::Emulated(3), ExpMode::Mixed(0.25)] {
            c.params.exp_mode = mode;
            let got = attention_forward_tiled(&c.q, &c.k, &c.v, &c.params).unwrap();
            let err = got.o.max_abs_diff(&exact.o);
            assert!(err <= bound, "{mode:?}: {err} > {bound}");
        }
    }
}

#[test]
fn partial_emulation_tracks_reference_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut c = case(&mut rng, 128, 256, 64, false, (64, 64));
    c.params.precision = Precision::KernelFaithful;
    let exact = attention_reference(&c.q, &c.k, &c.v, &c.params).unwrap();
    let reference = attention_forward_tiled(&c.q, &c.k, &c.v, &c.params).unwrap();
    c.params.exp_mode = ExpMode::Mixed(0.25);
    let mixed = attention_forward_tiled(&c.q, &c.k, &c.v, &c.params).unwrap();
    let (e_ref, e_mixed) = (reference.o.max_abs_diff(&exact.o), mixed.o.max_abs_diff(&exact.o));
    assert!(e_mixed <= 1.5 * e_ref, "{e_mixed} vs {e_ref}");
    assert!(mixed.o.max_abs_diff(&reference.o) <= 2f64.powi(-8) * c.v.max_abs());
}

#[test]
fn decode_row_sees_every_key() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let c = case(&mut rng, 1, 128, 16, true, (128, 128));
    let masked = attention_forward_tiled(&c.q, &c.k, &c.v, &c.params).unwrap();
    let mut open = c.params.clone();
    open.causal = false;
    let unmasked = attention_forward_tiled(&c.q, &c.k, &c.v, &open).unwrap();
    assert_eq!(masked.o, unmasked.o);
}
