use attnlab_core::fastmath::*;
use std::sync::OnceLock;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn degree3() -> &'static Poly2x {
    static P: OnceLock<Poly2x> = OnceLock::new();
    P.get_or_init(|| fit_minimax(3).unwrap())
}

fn polys() -> Vec<Poly2x> {
    (3..=5).map(|d| fit_minimax(d).unwrap()).collect()
}

#[test]
fn integers_are_exact_for_every_degree() {
    for p in polys() {
        for k in -126..=127 {
            let want = 2f64.powi(k) as f32;
            assert_eq!(exp2_emulated(k as f32, &p), want, "degree {} at {k}", p.degree());
        }
    }
}

#[test]
fn monotone_on_sorted_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut xs: Vec<f32> = (0..1_000_000).map(|_| rng.random_range(-126.0f32..127.0)).collect();
    xs.sort_by(f32::total_cmp);
    for p in polys() {
        let ys: Vec<f32> = xs.iter().map(|&x| exp2_emulated(x, &p)).collect();
        assert!(ys.windows(2).all(|w| w[0] <= w[1]), "degree {}", p.degree());
    }
}

#[test]
fn magic_floor_matches_floor() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1_000_000 {
        let x: f32 = rng.random_range(-127.0f32..=127.0);
        assert_eq!(magic_floor(x), x.floor(), "{x}");
    }
    for k in -127..=127 {
        let x = k as f32;
        for y in [x, f32::from_bits(x.to_bits() + 1), f32::from_bits(x.to_bits().wrapping_sub(1))] {
            if y.is_finite() && y.abs() <= 127.0 {
                assert_eq!(magic_floor(y), y.floor(), "{y}");
            }
        }
    }
}

#[test]
fn higher_degree_is_more_accurate() {
    let errs: Vec<f64> = (3..=5)
        .map(|d| {
            accuracy_sweep(Exp2Method::from_degree(d).unwrap(), 200_000, 1)
                .unwrap()
                .fp32_max_rel
                .unwrap()
        })
        .collect();
    assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
}

#[test]
fn bf16_rounding_dominates() {
    let n = 500_000;
    let hw = accuracy_sweep(Exp2Method::HardwareLike, n, 3).unwrap().bf16_max_rel;
    for d in 3..=5 {
        let r = accuracy_sweep(Exp2Method::from_degree(d).unwrap(), n, 3).unwrap();
        assert!((r.bf16_max_rel - hw).abs() <= 2e-4, "degree {d}: {} vs {hw}", r.bf16_max_rel);
    }
}

#[test]
fn certified_error_bounds_sampled_error() {
    for p in polys() {
        let r = accuracy_sweep_with(Exp2Method::from_degree(p.degree()).unwrap(), Some(&p), 100_000, 9).unwrap();
        assert!(r.fp32_max_rel.unwrap() <= p.certified_max_rel_err() * 1.01);
    }
}

#[test]
fn coefficients_json_round_trip() {
    for p in polys() {
        let back = Poly2x::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back, p);
    }
}

proptest! {
    #[test]
    fn relative_error_within_certificate(x in -100.0f32..100.0) {
        let p = degree3();
        let exact = (x as f64).exp2();
        let got = exp2_emulated(x, p) as f64;
        prop_assert!(((got - exact) / exact).abs() <= p.certified_max_rel_err() + 2.0 * f32::EPSILON as f64);
    }

    #[test]
    fn bf16_round_trip_is_identity(bits in any::<u16>()) {
        let v = Bf16Value::from_bits(bits);
        prop_assume!(v.to_f32().is_finite());
        prop_assert_eq!(round_to_bf16(v.to_f32()), v);
    }
}
