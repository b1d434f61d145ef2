mod common;

use attnlab_core::scheduler::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn library_optimum_matches_plain_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let n = rng.random_range(1..=8);
        let m = rng.random_range(1..=3);
        let costs: Vec<f64> = (0..n).map(|_| rng.random_range(1..=20) as f64).collect();
        assert_eq!(brute_force_optimal_makespan(&costs, m).unwrap(), common::enumerate_optimal_makespan(&costs, m));
    }
}

#[test]
fn graham_bound_holds() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..500 {
        let n = rng.random_range(1..=12);
        let m = rng.random_range(1..=4);
        let costs: Vec<f64> = (0..n).map(|_| rng.random_range(1..=50) as f64).collect();
        let opt = brute_force_optimal_makespan(&costs, m).unwrap();
        assert!(common::lpt_makespan(&costs, m) <= common::graham_ratio(m) * opt + 1e-9);
    }
}

#[test]
fn graham_bound_is_tight() {
    // Classic worst case for m = 2: LPT 7, optimum 6.
    let costs = [3.0, 3.0, 2.0, 2.0, 2.0];
    let lpt = common::lpt_makespan(&costs, 2);
    let opt = brute_force_optimal_makespan(&costs, 2).unwrap();
    assert_eq!((lpt, opt), (7.0, 6.0));
    assert!((lpt / opt - common::graham_ratio(2)).abs() < 1e-12);
}

#[test]
fn reverse_mblocks_versus_ascending_enumerated() {
    // Both orders of an 8-mblock causal grid on 4 processors.
    let g = WorktileGrid::uniform(8, 1, 1, true).unwrap();
    let costs: Vec<f64> = (0..8).map(|m| g.kv_iterations(0, m) as f64).collect();
    let ascending = list_schedule(&costs, 4).unwrap().makespan;
    let reversed: Vec<f64> = costs.iter().rev().copied().collect();
    let descending = list_schedule(&reversed, 4).unwrap().makespan;
    assert_eq!((ascending, descending), (12.0, 9.0));
}

#[test]
fn spt_zero_first_stalls_when_all_ctas_resident() {
    for (mb, heads, batches) in [(4, 1, 1), (8, 2, 1), (16, 3, 2), (32, 1, 1)] {
        let g = WorktileGrid::uniform(mb, heads, batches, true).unwrap();
        let resident = (mb * heads * batches) as usize;
        let r = simulate_dq_locks(&g, Policy::Spt, resident).unwrap();
        assert_eq!(r.first_write_stalls, 0, "{mb}x{heads}x{batches}");
        assert!(simulate_dq_locks(&g, Policy::Naive, resident).unwrap().first_write_stalls > 0);
    }
}

#[test]
fn fence_cost_lengthens_makespan() {
    let g = WorktileGrid::uniform(6, 1, 1, true).unwrap();
    let base = simulate_dq_locks(&g, Policy::Spt, 6).unwrap();
    let cfg = LockConfig {
        fence_cycles: 5,
        ..LockConfig::default()
    };
    let fenced = simulate_dq_locks_with(&g, Policy::Spt, 6, &cfg).unwrap();
    assert!(fenced.makespan > base.makespan);
}

#[test]
fn sorted_varlen_is_identity() {
    let g = WorktileGrid::varlen(vec![900, 600, 300, 300, 10], vec![900, 600, 300, 300, 10], 2, true).unwrap();
    assert_eq!(order_lpt_varlen(&g, 1.0).batch_map.unwrap(), [0, 1, 2, 3, 4]);
}

#[test]
fn schedules_serialize() {
    let g = WorktileGrid::uniform(3, 2, 2, true).unwrap();
    let s = order_lpt_causal(&g, 4, 1, 3.0).unwrap();
    let back: Schedule = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
    assert_eq!(back, s);
    let r = simulate_dq_locks(&g, Policy::Spt, 3).unwrap();
    let back: LockSimResult = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(back, r);
}

fn grid_strategy() -> impl Strategy<Value = WorktileGrid> {
    (1u32..10, 1u32..6, 1u32..4, any::<bool>(), prop::collection::vec(1u32..2000, 1..5)).prop_map(
        |(mb, heads, batches, causal, lens)| {
            if lens.len() > 1 {
                WorktileGrid::varlen(lens.clone(), lens, heads, causal).unwrap()
            } else {
                WorktileGrid::uniform(mb, heads, batches, causal).unwrap()
            }
        },
    )
}

proptest! {
    #[test]
    fn every_policy_is_a_permutation(g in grid_strategy(), l2 in 1u64..10, kv in 1u64..4) {
        let opts = ScheduleOptions { per_iter_cycles: 1.0, l2_bytes: l2, kv_bytes_per_head: kv };
        for p in [Policy::Naive, Policy::LptCausal, Policy::LptVarlen] {
            let s = build_schedule(&g, p, &opts).unwrap();
            prop_assert!(s.is_permutation_of(&g));
            prop_assert_eq!(s.costs.len(), s.order.len());
        }
    }

    #[test]
    fn batches_stay_outermost(g in grid_strategy(), l2 in 1u64..10) {
        let s = order_lpt_causal(&g, l2, 1, 1.0).unwrap();
        prop_assert!(s.order.windows(2).all(|w| w[0].batch <= w[1].batch));
    }

    #[test]
    fn varlen_map_inverts(lens in prop::collection::vec(1u32..5000, 1..8)) {
        let g = WorktileGrid::varlen(lens.clone(), lens, 1, true).unwrap();
        let map = order_lpt_varlen(&g, 1.0).batch_map.unwrap();
        let inv = invert_batch_map(&map).unwrap();
        for (v, &a) in map.iter().enumerate() {
            prop_assert_eq!(inv[a as usize], v as i32);
        }
    }

    #[test]
    fn lock_sim_never_deadlocks(mb in 1u32..8, heads in 1u32..3, procs in 1usize..6, p in 0usize..4) {
        let g = WorktileGrid::uniform(mb, heads, 1, true).unwrap();
        let r = simulate_dq_locks(&g, Policy::ALL[p], procs).unwrap();
        let expected: u32 = (0..mb).map(|q| q + 1).sum::<u32>() * heads;
        prop_assert_eq!(r.reduction_order.len() as u32, expected);
    }
}
