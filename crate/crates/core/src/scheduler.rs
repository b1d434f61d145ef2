//! Worktile orderings, list-scheduling makespan and a dQ lock simulator.
//!
//! A worktile is one `(batch, head, mblock)` cell of the launch grid. Its
//! cost is the number of KV tiles it visits times a per-iteration cycle
//! count. Processors are identical; a free processor always takes the next
//! worktile in schedule order.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TILE: u32 = 128;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorktileGrid {
    pub n_heads: u32,
    /// Query heads sharing one KV head; 1 for multi-head attention.
    pub heads_per_kv_head: u32,
    pub causal: bool,
    pub tile_m: u32,
    pub tile_n: u32,
    pub seqlen_q: Vec<u32>,
    pub seqlen_kv: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Coord {
    pub batch: u32,
    pub head: u32,
    pub mblock: u32,
}

impl WorktileGrid {
    /// Every batch has `n_mblocks` full query tiles and as many KV tiles.
    pub fn uniform(n_mblocks: u32, n_heads: u32, n_batches: u32, causal: bool) -> Result<Self> {
        let len = n_mblocks * DEFAULT_TILE;
        let g = Self {
            n_heads,
            heads_per_kv_head: 1,
            causal,
            tile_m: DEFAULT_TILE,
            tile_n: DEFAULT_TILE,
            seqlen_q: vec![len; n_batches as usize],
            seqlen_kv: vec![len; n_batches as usize],
        };
        g.validate()?;
        Ok(g)
    }

    pub fn varlen(seqlen_q: Vec<u32>, seqlen_kv: Vec<u32>, n_heads: u32, causal: bool) -> Result<Self> {
        let g = Self {
            n_heads,
            heads_per_kv_head: 1,
            causal,
            tile_m: DEFAULT_TILE,
            tile_n: DEFAULT_TILE,
            seqlen_q,
            seqlen_kv,
        };
        g.validate()?;
        Ok(g)
    }

    /// Builds a varlen grid from cumulative sequence offsets (length
    /// `n_batches + 1`, starting at 0).
    pub fn from_cu_seqlens(cu_q: &[i32], cu_kv: &[i32], n_heads: u32, causal: bool) -> Result<Self> {
        Self::varlen(lengths_from_cu(cu_q)?, lengths_from_cu(cu_kv)?, n_heads, causal)
    }

    pub fn with_gqa(mut self, heads_per_kv_head: u32) -> Result<Self> {
        self.heads_per_kv_head = heads_per_kv_head;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.tile_m == 0 || self.tile_n == 0 || self.seqlen_q.is_empty() {
            return Err(Error::InvalidArgument("grid dimensions must be positive".into()));
        }
        if self.seqlen_q.len() != self.seqlen_kv.len() {
            return Err(Error::Shape(format!(
                "{} query lengths vs {} key lengths",
                self.seqlen_q.len(),
                self.seqlen_kv.len()
            )));
        }
        if self.seqlen_q.iter().chain(&self.seqlen_kv).any(|&s| s == 0) {
            return Err(Error::InvalidArgument("sequence lengths must be positive".into()));
        }
        if self.heads_per_kv_head == 0 || !self.n_heads.is_multiple_of(self.heads_per_kv_head) {
            return Err(Error::InvalidArgument(format!(
                "{} heads not divisible into groups of {}",
                self.n_heads, self.heads_per_kv_head
            )));
        }
        Ok(())
    }

    pub fn n_batches(&self) -> u32 {
        self.seqlen_q.len() as u32
    }

    pub fn n_kv_heads(&self) -> u32 {
        self.n_heads / self.heads_per_kv_head
    }

    pub fn n_mblocks_of(&self, batch: u32) -> u32 {
        self.seqlen_q[batch as usize].div_ceil(self.tile_m)
    }

    pub fn n_kv_tiles_of(&self, batch: u32) -> u32 {
        self.seqlen_kv[batch as usize].div_ceil(self.tile_n)
    }

    /// Largest mblock count over batches.
    pub fn n_mblocks(&self) -> u32 {
        (0..self.n_batches()).map(|b| self.n_mblocks_of(b)).max().unwrap_or(0)
    }

    pub fn n_tiles(&self) -> usize {
        (0..self.n_batches()).map(|b| self.n_mblocks_of(b) as usize).sum::<usize>() * self.n_heads as usize
    }

    pub fn contains(&self, c: Coord) -> bool {
        c.batch < self.n_batches() && c.head < self.n_heads && c.mblock < self.n_mblocks_of(c.batch)
    }

    /// KV tiles visited by query tile `mblock` of `batch`. Causal masks are
    /// aligned to the bottom-right corner.
    pub fn kv_iterations(&self, batch: u32, mblock: u32) -> u32 {
        let total = self.n_kv_tiles_of(batch);
        if !self.causal {
            return total;
        }
        let offset = self.seqlen_kv[batch as usize] as i64 - self.seqlen_q[batch as usize] as i64;
        let end = (mblock as i64 + 1) * self.tile_m as i64 + offset;
        let iters = end.div_euclid(self.tile_n as i64) + (end.rem_euclid(self.tile_n as i64) != 0) as i64;
        iters.clamp(1, total as i64) as u32
    }

    fn all_coords(&self) -> Vec<Coord> {
        let mut v = Vec::with_capacity(self.n_tiles());
        for batch in 0..self.n_batches() {
            for head in 0..self.n_heads {
                for mblock in 0..self.n_mblocks_of(batch) {
                    v.push(Coord { batch, head, mblock });
                }
            }
        }
        v
    }
}

fn lengths_from_cu(cu: &[i32]) -> Result<Vec<u32>> {
    if cu.len() < 2 || cu[0] != 0 {
        return Err(Error::InvalidArgument("cu_seqlens must start at 0 and have at least two entries".into()));
    }
    cu.windows(2)
        .map(|w| {
            let len = w[1] - w[0];
            u32::try_from(len)
                .ok()
                .filter(|&l| l > 0)
                .ok_or_else(|| Error::InvalidArgument(format!("cu_seqlens not increasing at {w:?}")))
        })
        .collect()
}

/// Cumulative offsets for per-batch lengths.
pub fn cu_seqlens(lengths: &[u32]) -> Result<Vec<i32>> {
    let mut out = Vec::with_capacity(lengths.len() + 1);
    let mut acc: i32 = 0;
    out.push(0);
    for &l in lengths {
        acc = i32::try_from(l)
            .ok()
            .and_then(|l| acc.checked_add(l))
            .ok_or_else(|| Error::OutOfRange("cumulative length exceeds i32".into()))?;
        out.push(acc);
    }
    Ok(out)
}

pub fn tile_cost(coord: Coord, grid: &WorktileGrid, per_iter_cycles: f64) -> Result<f64> {
    if !grid.contains(coord) {
        return Err(Error::OutOfRange(format!("{coord:?} outside grid")));
    }
    Ok(grid.kv_iterations(coord.batch, coord.mblock) as f64 * per_iter_cycles)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Policy {
    Naive,
    LptCausal,
    LptVarlen,
    Spt,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::Naive, Policy::LptCausal, Policy::LptVarlen, Policy::Spt];
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::Naive => "naive",
            Policy::LptCausal => "lpt-causal",
            Policy::LptVarlen => "lpt-varlen",
            Policy::Spt => "spt",
        })
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.to_string() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown policy {s:?} (naive, lpt-causal, lpt-varlen, spt)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub policy: Policy,
    pub order: Vec<Coord>,
    /// Cost of each entry of `order`.
    pub costs: Vec<f64>,
    /// Virtual to actual batch index, for varlen LPT.
    pub batch_map: Option<Vec<i32>>,
}

impl Schedule {
    fn from_order(policy: Policy, grid: &WorktileGrid, order: Vec<Coord>, per_iter_cycles: f64) -> Self {
        let costs = order.iter().map(|&c| grid.kv_iterations(c.batch, c.mblock) as f64 * per_iter_cycles).collect();
        Self {
            policy,
            order,
            costs,
            batch_map: None,
        }
    }

    /// True when `order` visits every grid cell exactly once.
    pub fn is_permutation_of(&self, grid: &WorktileGrid) -> bool {
        let mut a = self.order.clone();
        let mut b = grid.all_coords();
        a.sort_unstable();
        b.sort_unstable();
        a == b
    }
}

/// mblocks fastest, then heads, then batches.
pub fn order_naive(grid: &WorktileGrid, per_iter_cycles: f64) -> Schedule {
    Schedule::from_order(Policy::Naive, grid, grid.all_coords(), per_iter_cycles)
}

/// Query heads per L2 section: whole KV heads whose K and V fit in L2,
/// at least one.
pub fn section_heads(grid: &WorktileGrid, l2_bytes: u64, kv_bytes_per_head: u64) -> Result<u32> {
    if kv_bytes_per_head == 0 {
        return Err(Error::InvalidArgument("kv_bytes_per_head must be positive".into()));
    }
    let kv_heads = (l2_bytes / kv_bytes_per_head).max(1).min(grid.n_kv_heads() as u64) as u32;
    Ok(kv_heads * grid.heads_per_kv_head)
}

/// Batches outermost, then head sections, then mblocks in reverse, with the
/// heads of a section innermost.
pub fn order_lpt_causal(grid: &WorktileGrid, l2_bytes: u64, kv_bytes_per_head: u64, per_iter_cycles: f64) -> Result<Schedule> {
    let section = section_heads(grid, l2_bytes, kv_bytes_per_head)?;
    let mut order = Vec::with_capacity(grid.n_tiles());
    for batch in 0..grid.n_batches() {
        push_batch_lpt(grid, batch, batch, section, &mut order);
    }
    Ok(Schedule::from_order(Policy::LptCausal, grid, order, per_iter_cycles))
}

fn push_batch_lpt(grid: &WorktileGrid, actual: u32, label: u32, section: u32, order: &mut Vec<Coord>) {
    let mut start = 0;
    while start < grid.n_heads {
        let end = (start + section).min(grid.n_heads);
        for mblock in (0..grid.n_mblocks_of(actual)).rev() {
            for head in start..end {
                order.push(Coord { batch: label, head, mblock });
            }
        }
        start = end;
    }
}

/// Batches sorted by their longest worktile, descending, ties by index.
/// Within a batch tiles follow the causal LPT traversal with one section.
/// The returned schedule's coordinates use actual batch indices; the
/// virtual-to-actual map is in `batch_map`.
pub fn order_lpt_varlen(grid: &WorktileGrid, per_iter_cycles: f64) -> Schedule {
    let max_cost = |b: u32| (0..grid.n_mblocks_of(b)).map(|m| grid.kv_iterations(b, m)).max().unwrap_or(0);
    let mut batches: Vec<u32> = (0..grid.n_batches()).collect();
    batches.sort_by_key(|&b| Reverse(max_cost(b)));
    let mut order = Vec::with_capacity(grid.n_tiles());
    for &b in &batches {
        push_batch_lpt(grid, b, b, grid.n_heads, &mut order);
    }
    let mut s = Schedule::from_order(Policy::LptVarlen, grid, order, per_iter_cycles);
    s.batch_map = Some(batches.into_iter().map(|b| b as i32).collect());
    s
}

/// Inverse of a virtual-to-actual batch map.
pub fn invert_batch_map(map: &[i32]) -> Result<Vec<i32>> {
    let mut inv = vec![-1; map.len()];
    for (v, &a) in map.iter().enumerate() {
        let slot = usize::try_from(a)
            .ok()
            .and_then(|a| inv.get_mut(a))
            .filter(|s| **s < 0)
            .ok_or_else(|| Error::InvalidArgument(format!("batch map is not a permutation at {v}")))?;
        *slot = v as i32;
    }
    Ok(inv)
}

/// KV blocks in descending order, heads innermost within a batch. Costs
/// are the number of query tiles that read each KV block.
pub fn order_spt(grid: &WorktileGrid, per_iter_cycles: f64) -> Schedule {
    let mut order = Vec::with_capacity(grid.n_tiles());
    let mut costs = Vec::with_capacity(grid.n_tiles());
    for batch in 0..grid.n_batches() {
        let kv_tiles = grid.n_kv_tiles_of(batch);
        for kv in (0..kv_tiles).rev() {
            let readers = q_tiles_reading(grid, batch, kv).len() as f64;
            for head in 0..grid.n_heads {
                order.push(Coord { batch, head, mblock: kv });
                costs.push(readers * per_iter_cycles);
            }
        }
    }
    Schedule {
        policy: Policy::Spt,
        order,
        costs,
        batch_map: None,
    }
}

fn q_tiles_reading(grid: &WorktileGrid, batch: u32, kv: u32) -> Vec<u32> {
    (0..grid.n_mblocks_of(batch)).filter(|&q| kv < grid.kv_iterations(batch, q)).collect()
}

/// Common knobs for building any policy's schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleOptions {
    pub per_iter_cycles: f64,
    pub l2_bytes: u64,
    pub kv_bytes_per_head: u64,
}

pub fn build_schedule(grid: &WorktileGrid, policy: Policy, opts: &ScheduleOptions) -> Result<Schedule> {
    grid.validate()?;
    match policy {
        Policy::Naive => Ok(order_naive(grid, opts.per_iter_cycles)),
        Policy::LptCausal => order_lpt_causal(grid, opts.l2_bytes, opts.kv_bytes_per_head, opts.per_iter_cycles),
        Policy::LptVarlen => Ok(order_lpt_varlen(grid, opts.per_iter_cycles)),
        Policy::Spt => Ok(order_spt(grid, opts.per_iter_cycles)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MakespanResult {
    pub makespan: f64,
    pub per_processor_load: Vec<f64>,
    /// Processor that ran each schedule entry.
    pub assignment: Vec<usize>,
}

pub fn simulate_makespan(schedule: &Schedule, n_processors: usize) -> Result<MakespanResult> {
    list_schedule(&schedule.costs, n_processors)
}

/// Greedy list scheduling of `costs` in the given order. Ties between
/// free processors go to the lowest index.
pub fn list_schedule(costs: &[f64], n_processors: usize) -> Result<MakespanResult> {
    if n_processors == 0 {
        return Err(Error::InvalidArgument("need at least one processor".into()));
    }
    let mut load = vec![0.0f64; n_processors];
    let mut assignment = Vec::with_capacity(costs.len());
    for &c in costs {
        let p = (0..n_processors)
            .min_by(|&a, &b| load[a].total_cmp(&load[b]).then(a.cmp(&b)))
            .expect("n_processors > 0");
        load[p] += c;
        assignment.push(p);
    }
    Ok(MakespanResult {
        makespan: load.iter().copied().fold(0.0, f64::max),
        per_processor_load: load,
        assignment,
    })
}

/// Costs sorted longest first.
pub fn lpt_order(costs: &[f64]) -> Vec<f64> {
    let mut v = costs.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

pub const BRUTE_FORCE_MAX_TILES: usize = 12;
pub const BRUTE_FORCE_MAX_PROCESSORS: usize = 4;

/// Exact optimal makespan by exhaustive assignment.
pub fn brute_force_optimal_makespan(costs: &[f64], n_processors: usize) -> Result<f64> {
    if costs.len() > BRUTE_FORCE_MAX_TILES || n_processors > BRUTE_FORCE_MAX_PROCESSORS {
        return Err(Error::InstanceTooLarge {
            tiles: costs.len(),
            processors: n_processors,
        });
    }
    if n_processors == 0 {
        return Err(Error::InvalidArgument("need at least one processor".into()));
    }
    let sorted = lpt_order(costs);
    let mut best = list_schedule(&sorted, n_processors)?.makespan;
    let mut load = vec![0.0; n_processors];
    search(&sorted, 0, &mut load, &mut best);
    Ok(best)
}

fn search(costs: &[f64], i: usize, load: &mut [f64], best: &mut f64) {
    if i == costs.len() {
        *best = best.min(load.iter().copied().fold(0.0, f64::max));
        return;
    }
    for p in 0..load.len() {
        // Processors with equal load are interchangeable.
        if load[..p].contains(&load[p]) {
            continue;
        }
        if load[p] + costs[i] >= *best {
            continue;
        }
        load[p] += costs[i];
        search(costs, i + 1, load, best);
        load[p] -= costs[i];
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LockConfig {
    /// Cycles to compute one (KV tile, Q tile) step before its dQ reduction.
    pub iter_cycles: u64,
    /// Cycles holding the dQ tile lock for one reduction.
    pub reduce_cycles: u64,
    /// Extra cycles per acquire/release pair.
    pub fence_cycles: u64,
}

impl Default for LockConfig {
    fn default() -> Self {
        Self {
            iter_cycles: 100,
            reduce_cycles: 10,
            fence_cycles: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CtaStall {
    pub batch: u32,
    pub head: u32,
    pub kv_block: u32,
    pub stall_cycles: u64,
    pub first_write_stalled: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReductionEvent {
    pub batch: u32,
    pub head: u32,
    pub q_block: u32,
    pub kv_block: u32,
    pub start: u64,
    pub end: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LockSimResult {
    pub makespan: u64,
    /// One entry per CTA, in launch order.
    pub per_cta_stall: Vec<CtaStall>,
    pub first_write_stalls: u32,
    /// Completed reductions in time order.
    pub reduction_order: Vec<ReductionEvent>,
}

pub fn simulate_dq_locks(grid: &WorktileGrid, policy: Policy, n_processors: usize) -> Result<LockSimResult> {
    simulate_dq_locks_with(grid, policy, n_processors, &LockConfig::default())
}

struct Cta {
    batch: u32,
    head: u32,
    kv: u32,
    /// `(q block, position in that block's reduction order)`.
    steps: Vec<(u32, u32)>,
    pos: usize,
    stall: u64,
    first_stalled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    // Releases sort before arrivals at the same instant.
    ReduceDone,
    Finished,
    ComputeDone,
}

/// Min-heap of `(time, kind, insertion order, cta)`.
#[derive(Default)]
struct EventQueue {
    heap: BinaryHeap<Reverse<(u64, EventKind, u64, usize)>>,
    counter: u64,
}

impl EventQueue {
    fn push(&mut self, t: u64, kind: EventKind, cta: usize) {
        self.heap.push(Reverse((t, kind, self.counter, cta)));
        self.counter += 1;
    }

    fn pop(&mut self) -> Option<(u64, EventKind, usize)> {
        self.heap.pop().map(|Reverse((t, k, _, c))| (t, k, c))
    }
}

/// Discrete-event model of deterministic dQ accumulation. Each backward CTA
/// owns one KV block of one head and walks the query blocks that read it;
/// after each step it adds into the shared dQ tile, but only once every
/// CTA ahead of it in that tile's fixed reduction order has finished.
///
/// `Spt` launches KV blocks in descending order, starts each CTA at its
/// diagonal and reduces in descending KV order, so every CTA is first in
/// line for its first tile. The other policies launch and reduce in
/// ascending KV order; `LptCausal` and `LptVarlen` put heads innermost.
pub fn simulate_dq_locks_with(
    grid: &WorktileGrid,
    policy: Policy,
    n_processors: usize,
    cfg: &LockConfig,
) -> Result<LockSimResult> {
    grid.validate()?;
    if n_processors == 0 {
        return Err(Error::InvalidArgument("need at least one processor".into()));
    }
    if policy == Policy::Spt && !grid.causal {
        return Err(Error::InvalidArgument("spt lock order needs a causal grid".into()));
    }
    let descending = policy == Policy::Spt;

    // Reduction position of each KV block within each dQ tile.
    let mut seq: BTreeMap<(u32, u32, u32), u32> = BTreeMap::new();
    let mut ctas = Vec::new();
    for batch in 0..grid.n_batches() {
        let n_kv = grid.n_kv_tiles_of(batch);
        for q in 0..grid.n_mblocks_of(batch) {
            let iters = grid.kv_iterations(batch, q);
            let contributors: Vec<u32> = if descending {
                (0..iters).rev().collect()
            } else {
                (0..iters).collect()
            };
            for (pos, kv) in contributors.into_iter().enumerate() {
                seq.insert((batch, q, kv), pos as u32);
            }
        }
        let kv_order: Vec<u32> = if descending { (0..n_kv).rev().collect() } else { (0..n_kv).collect() };
        let steps_of = |kv: u32| -> Vec<(u32, u32)> {
            q_tiles_reading(grid, batch, kv).into_iter().map(|q| (q, seq[&(batch, q, kv)])).collect()
        };
        let mut push = |head, kv| {
            ctas.push(Cta {
                batch,
                head,
                kv,
                steps: steps_of(kv),
                pos: 0,
                stall: 0,
                first_stalled: false,
            })
        };
        match policy {
            Policy::LptCausal | Policy::LptVarlen => {
                for &kv in &kv_order {
                    for head in 0..grid.n_heads {
                        push(head, kv);
                    }
                }
            }
            Policy::Naive | Policy::Spt => {
                for head in 0..grid.n_heads {
                    for &kv in &kv_order {
                        push(head, kv);
                    }
                }
            }
        }
    }

    let hold = cfg.reduce_cycles + cfg.fence_cycles;
    // Per dQ tile: next reduction position and a parked CTA per position.
    let mut next: BTreeMap<(u32, u32, u32), u32> = BTreeMap::new();
    let mut parked: BTreeMap<(u32, u32, u32, u32), (usize, u64)> = BTreeMap::new();
    let mut events = EventQueue::default();
    let mut launched = 0;
    let mut finished = 0;
    let mut makespan = 0;
    let mut reduction_order = Vec::new();

    let launch = |events: &mut EventQueue, id: usize, t: u64, ctas: &[Cta]| {
        if ctas[id].steps.is_empty() {
            events.push(t, EventKind::Finished, id);
        } else {
            events.push(t + cfg.iter_cycles, EventKind::ComputeDone, id);
        }
    };
    while launched < ctas.len().min(n_processors) {
        launch(&mut events, launched, 0, &ctas);
        launched += 1;
    }

    while let Some((t, kind, id)) = events.pop() {
        match kind {
            EventKind::ComputeDone => {
                let c = &ctas[id];
                let (q, pos) = c.steps[c.pos];
                if next.get(&(c.batch, c.head, q)).copied().unwrap_or(0) == pos {
                    events.push(t + hold, EventKind::ReduceDone, id);
                } else {
                    parked.insert((c.batch, c.head, q, pos), (id, t));
                }
            }
            EventKind::ReduceDone => {
                let c = &mut ctas[id];
                let (q, _) = c.steps[c.pos];
                reduction_order.push(ReductionEvent {
                    batch: c.batch,
                    head: c.head,
                    q_block: q,
                    kv_block: c.kv,
                    start: t - hold,
                    end: t,
                });
                let n = next.entry((c.batch, c.head, q)).or_insert(0);
                *n += 1;
                let waiter = parked.remove(&(c.batch, c.head, q, *n));
                c.pos += 1;
                if c.pos < c.steps.len() {
                    events.push(t + cfg.iter_cycles, EventKind::ComputeDone, id);
                } else {
                    events.push(t, EventKind::Finished, id);
                }
                if let Some((w, arrived)) = waiter {
                    let w_cta = &mut ctas[w];
                    w_cta.stall += t - arrived;
                    if w_cta.pos == 0 && t > arrived {
                        w_cta.first_stalled = true;
                    }
                    events.push(t + hold, EventKind::ReduceDone, w);
                }
            }
            EventKind::Finished => {
                finished += 1;
                makespan = makespan.max(t);
                if launched < ctas.len() {
                    launch(&mut events, launched, t, &ctas);
                    launched += 1;
                }
            }
        }
    }
    if finished < ctas.len() {
        return Err(Error::Deadlock {
            pending: ctas.len() - finished,
        });
    }
    Ok(LockSimResult {
        makespan,
        first_write_stalls: ctas.iter().filter(|c| c.first_stalled).count() as u32,
        per_cta_stall: ctas
            .iter()
            .map(|c| CtaStall {
                batch: c.batch,
                head: c.head,
                kv_block: c.kv,
                stall_cycles: c.stall,
                first_write_stalled: c.first_stalled,
            })
            .collect(),
        reduction_order,
    })
}
