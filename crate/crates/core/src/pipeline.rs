//! Steady-state model of the warp-specialized attention pipelines.
//!
//! A pipeline is a dependency graph of tasks, each bound to one hardware
//! resource. Edges carry an iteration lag: `(u, k)` on task `v` means `v` in
//! iteration `i` waits for `u` in iteration `i - k`. The steady-state period
//! is the larger of the busiest port's load and the maximum cycle ratio
//! (total duration over total lag) of the recurrence graph.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roofline::{bwd_operand_split, fwd_smem_split, HardwareProfile, TileConfig, BWD_MMAS};
use crate::CtaMode;

pub type TaskId = usize;

/// TMEM capacity in 32-bit columns (128 lanes each).
pub const TMEM_COLUMNS: u32 = 512;
/// TMEM allocation granularity in columns.
pub const TMEM_GRANULE: u32 = 32;
/// Per-thread register cap.
pub const REG_CAP: u32 = 256;

/// FMA-class ops spent on one emulated `2^x`: three Horner FMAs plus
/// floor, splice and clamp.
pub const DEFAULT_EMULATED_EXP_COST: f64 = 7.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Resource {
    TensorCore,
    SmemPort,
    Mufu,
    Fma,
    Dsmem,
    TmaLoad,
}

impl Resource {
    /// Execution port the resource is charged to. DSMEM traffic goes
    /// through the shared-memory port.
    pub fn port(self) -> Resource {
        match self {
            Resource::Dsmem => Resource::SmemPort,
            r => r,
        }
    }
}

impl fmt::Display for Resource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Resource::TensorCore => "tensor-core",
            Resource::SmemPort => "smem",
            Resource::Mufu => "mufu",
            Resource::Fma => "fma",
            Resource::Dsmem => "dsmem",
            Resource::TmaLoad => "tma",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dep {
    pub task: TaskId,
    pub lag: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTask {
    pub id: TaskId,
    pub name: String,
    pub resource: Resource,
    pub duration_cycles: f64,
    pub deps: Vec<Dep>,
}

/// Task graph for one loop iteration.
///
/// `work_units` is how many tiles one iteration advances: the forward
/// ping-pong handles two Q tiles per iteration, so per-tile cycles are the
/// period divided by two.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub tasks: Vec<PipelineTask>,
    pub work_units: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: TaskId,
    pub name: String,
    pub resource: Resource,
    pub duration_cycles: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub from: TaskId,
    pub to: TaskId,
    pub lag: u32,
}

/// Node/edge form for external graph viewers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphExport {
    pub work_units: u32,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

impl Pipeline {
    pub fn new(work_units: u32) -> Self {
        Self {
            tasks: Vec::new(),
            work_units,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, resource: Resource, duration_cycles: f64, deps: &[(TaskId, u32)]) -> TaskId {
        let id = self.tasks.len();
        self.tasks.push(PipelineTask {
            id,
            name: name.into(),
            resource,
            duration_cycles,
            deps: deps.iter().map(|&(task, lag)| Dep { task, lag }).collect(),
        });
        id
    }

    /// Adds a dependency after both tasks exist.
    pub fn depend(&mut self, task: TaskId, on: TaskId, lag: u32) {
        self.tasks[task].deps.push(Dep { task: on, lag });
    }

    pub fn find(&self, name: &str) -> Option<&PipelineTask> {
        self.tasks.iter().find(|t| t.name == name)
    }

    /// Summed durations of tasks on `resource` (not port), per iteration.
    pub fn total_on(&self, resource: Resource) -> f64 {
        self.tasks.iter().filter(|t| t.resource == resource).map(|t| t.duration_cycles).sum()
    }

    pub fn to_graph(&self) -> GraphExport {
        GraphExport {
            work_units: self.work_units,
            nodes: self
                .tasks
                .iter()
                .map(|t| GraphNode {
                    id: t.id,
                    name: t.name.clone(),
                    resource: t.resource,
                    duration_cycles: t.duration_cycles,
                })
                .collect(),
            edges: self
                .tasks
                .iter()
                .flat_map(|t| {
                    t.deps.iter().map(move |d| GraphEdge {
                        from: d.task,
                        to: t.id,
                        lag: d.lag,
                    })
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.work_units == 0 {
            return Err(Error::InvalidArgument("work_units must be at least 1".into()));
        }
        for t in &self.tasks {
            if !(t.duration_cycles >= 0.0) || !t.duration_cycles.is_finite() {
                return Err(Error::InvalidArgument(format!("task {} has duration {}", t.name, t.duration_cycles)));
            }
            if let Some(d) = t.deps.iter().find(|d| d.task >= self.tasks.len()) {
                return Err(Error::InvalidArgument(format!("task {} depends on unknown id {}", t.name, d.task)));
            }
        }
        self.check_zero_lag_acyclic()
    }

    fn check_zero_lag_acyclic(&self) -> Result<()> {
        let n = self.tasks.len();
        let mut indeg = vec![0usize; n];
        let mut succ = vec![Vec::new(); n];
        for t in &self.tasks {
            for d in t.deps.iter().filter(|d| d.lag == 0) {
                indeg[t.id] += 1;
                succ[d.task].push(t.id);
            }
        }
        let mut stack: Vec<_> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut seen = 0;
        while let Some(u) = stack.pop() {
            seen += 1;
            for &v in &succ[u] {
                indeg[v] -= 1;
                if indeg[v] == 0 {
                    stack.push(v);
                }
            }
        }
        if seen == n {
            return Ok(());
        }
        let stuck: Vec<_> = (0..n).filter(|&i| indeg[i] > 0).map(|i| self.tasks[i].name.as_str()).collect();
        Err(Error::ZeroLagCycle(stuck.join(", ")))
    }
}

/// Which constraint sets the period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bound {
    Resource(Resource),
    Recurrence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyState {
    /// Period per work unit.
    pub cycles_per_iter: f64,
    pub work_units: u32,
    /// Busy cycles per work unit on each port.
    pub busy: BTreeMap<Resource, f64>,
    pub utilization: BTreeMap<Resource, f64>,
    pub bound: Bound,
    /// Busiest port; ties go to the earlier [`Resource`] variant.
    pub bottleneck: Resource,
    /// Tasks of the maximum-ratio dependency cycle, in order.
    pub critical_cycle: Vec<String>,
    /// That cycle's duration over lag, per work unit.
    pub critical_cycle_cycles: f64,
}

impl SteadyState {
    /// `(period - busy(r)) / busy(r)` in percent.
    pub fn excess_over_pct(&self, r: Resource) -> f64 {
        let b = self.busy.get(&r).copied().unwrap_or(0.0);
        (self.cycles_per_iter - b) / b * 100.0
    }
}

pub fn steady_state(p: &Pipeline) -> Result<SteadyState> {
    p.validate()?;
    let units = p.work_units as f64;
    let mut busy: BTreeMap<Resource, f64> = BTreeMap::new();
    for t in &p.tasks {
        *busy.entry(t.resource.port()).or_default() += t.duration_cycles;
    }
    let (ratio, cycle) = max_cycle_ratio(p);
    let (bottleneck, max_busy) = busy
        .iter()
        .fold((Resource::TensorCore, f64::NEG_INFINITY), |(br, bb), (&r, &b)| {
            if b > bb {
                (r, b)
            } else {
                (br, bb)
            }
        });
    let max_busy = max_busy.max(0.0);
    let period = max_busy.max(ratio);
    let bound = if ratio > max_busy { Bound::Recurrence } else { Bound::Resource(bottleneck) };
    let utilization = busy
        .iter()
        .map(|(&r, &b)| (r, if period > 0.0 { b / period } else { 0.0 }))
        .collect();
    Ok(SteadyState {
        cycles_per_iter: period / units,
        work_units: p.work_units,
        busy: busy.into_iter().map(|(r, b)| (r, b / units)).collect(),
        utilization,
        bound,
        bottleneck,
        critical_cycle: cycle.into_iter().map(|i| p.tasks[i].name.clone()).collect(),
        critical_cycle_cycles: ratio / units,
    })
}

struct Edge {
    from: usize,
    to: usize,
    dur: f64,
    lag: f64,
}

/// Maximum over dependency cycles of `sum(duration) / sum(lag)`, by
/// parametric search with Bellman-Ford positive-cycle detection. Assumes
/// no zero-lag cycle.
fn max_cycle_ratio(p: &Pipeline) -> (f64, Vec<TaskId>) {
    let edges: Vec<Edge> = p
        .tasks
        .iter()
        .flat_map(|t| {
            t.deps.iter().map(move |d| Edge {
                from: d.task,
                to: t.id,
                dur: p.tasks[d.task].duration_cycles,
                lag: d.lag as f64,
            })
        })
        .collect();
    let ratio_of = |cycle: &[usize]| {
        let (mut dur, mut lag) = (0.0, 0.0);
        for &e in cycle {
            dur += edges[e].dur;
            lag += edges[e].lag;
        }
        dur / lag
    };
    let Some(first) = positive_cycle(p.tasks.len(), &edges, 0.0) else {
        return (0.0, Vec::new());
    };
    let mut best = first;
    let mut lo = ratio_of(&best);
    let mut hi: f64 = edges.iter().map(|e| e.dur).sum::<f64>() + 1.0;
    while hi - lo > 1e-9 * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        match positive_cycle(p.tasks.len(), &edges, mid) {
            Some(c) => {
                let r = ratio_of(&c);
                if r > lo {
                    lo = r;
                    best = c;
                } else {
                    break;
                }
            }
            None => hi = mid,
        }
    }
    let tasks = best.iter().map(|&e| edges[e].to).collect();
    (lo, tasks)
}

/// Edge indices of a cycle with positive total weight `dur - lambda * lag`.
fn positive_cycle(n: usize, edges: &[Edge], lambda: f64) -> Option<Vec<usize>> {
    if n == 0 {
        return None;
    }
    let mut dist = vec![0.0f64; n];
    let mut pred: Vec<Option<usize>> = vec![None; n];
    let mut last = None;
    for _ in 0..n {
        last = None;
        for (i, e) in edges.iter().enumerate() {
            let cand = dist[e.from] + e.dur - lambda * e.lag;
            if cand > dist[e.to] + 1e-9 * (1.0 + cand.abs()) {
                dist[e.to] = cand;
                pred[e.to] = Some(i);
                last = Some(e.to);
            }
        }
        last?;
    }
    let mut v = last?;
    for _ in 0..n {
        v = edges[pred[v]?].from;
    }
    let start = v;
    let mut cycle = Vec::new();
    loop {
        let e = pred[v]?;
        cycle.push(e);
        v = edges[e].from;
        if v == start {
            break;
        }
    }
    cycle.reverse();
    Some(cycle)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FwdOptions {
    /// Fraction of exponentials computed by polynomial emulation on FMA units.
    pub exp_fraction: f64,
    pub emulated_exp_cost: f64,
    /// Fraction of iterations that rescale the output accumulator.
    pub rescale_fraction: f64,
    /// Charge the correction rescale to the FMA units. When false the
    /// correction task is kept in the graph with zero duration.
    pub correction_on_fma: bool,
}

impl Default for FwdOptions {
    fn default() -> Self {
        Self {
            exp_fraction: 0.0,
            emulated_exp_cost: DEFAULT_EMULATED_EXP_COST,
            rescale_fraction: 1.0,
            correction_on_fma: true,
        }
    }
}

impl FwdOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.exp_fraction) {
            return Err(Error::OutOfRange(format!("exp_fraction {} not in [0, 1]", self.exp_fraction)));
        }
        if !(0.0..=1.0).contains(&self.rescale_fraction) {
            return Err(Error::OutOfRange(format!("rescale_fraction {} not in [0, 1]", self.rescale_fraction)));
        }
        if !(self.emulated_exp_cost >= 1.0) {
            return Err(Error::OutOfRange(format!("emulated_exp_cost {} < 1", self.emulated_exp_cost)));
        }
        Ok(())
    }
}

pub fn build_fwd_pipeline(tile: &TileConfig, hw: &HardwareProfile, exp_fraction: f64) -> Result<Pipeline> {
    build_fwd_pipeline_with(
        tile,
        hw,
        &FwdOptions {
            exp_fraction,
            ..FwdOptions::default()
        },
    )
}

/// Ping-pong forward pipeline: two Q tiles (H, L) share each K/V tile.
pub fn build_fwd_pipeline_with(tile: &TileConfig, hw: &HardwareProfile, opts: &FwdOptions) -> Result<Pipeline> {
    opts.validate()?;
    let (qk_smem, pv_smem) = fwd_smem_split(tile, hw)?;
    let (m, n, d) = (tile.m as f64, tile.n as f64, tile.d as f64);
    let half_mma = 2.0 * m * n * d / hw.mma_flops_per_clk;
    let f = opts.exp_fraction;
    let mufu = (1.0 - f) * m * n / hw.mufu_exp_per_clk;
    let fma = f * m * n * opts.emulated_exp_cost / hw.fma_per_clk;
    let correction = if opts.correction_on_fma {
        opts.rescale_fraction * m * d / hw.fma_per_clk
    } else {
        0.0
    };
    // P is written to TMEM in two stages so PV can start on the first.
    let (a, b) = (0.75, 0.25);

    let mut p = Pipeline::new(2);
    let load_k = p.add("load_K", Resource::TmaLoad, 0.0, &[]);
    let load_v = p.add("load_V", Resource::TmaLoad, 0.0, &[]);
    let mut exp_a = [[0; 2]; 2];
    let mut exp_b = [[0; 2]; 2];
    let mut qk = [[0; 2]; 2];
    let mut pv_b = [[0; 2]; 2];
    for (t, tag) in ["H", "L"].into_iter().enumerate() {
        let q = [
            p.add(format!("QK_{tag}"), Resource::TensorCore, half_mma, &[(load_k, 0)]),
            p.add(format!("QK_{tag}_smem"), Resource::SmemPort, qk_smem, &[(load_k, 0)]),
        ];
        qk[t] = q;
        let after_qk = [(q[0], 0), (q[1], 0)];
        let ea = [
            p.add(format!("expA_{tag}_mufu"), Resource::Mufu, a * mufu, &after_qk),
            p.add(format!("expA_{tag}_fma"), Resource::Fma, a * fma, &after_qk),
        ];
        let after_ea = [(ea[0], 0), (ea[1], 0)];
        let eb = [
            p.add(format!("expB_{tag}_mufu"), Resource::Mufu, b * mufu, &after_ea),
            p.add(format!("expB_{tag}_fma"), Resource::Fma, b * fma, &after_ea),
        ];
        let corr = p.add(format!("correction_{tag}"), Resource::Fma, correction, &after_ea);
        let pa = [
            p.add(format!("PV_{tag}_a"), Resource::TensorCore, a * half_mma, &[(ea[0], 0), (ea[1], 0), (corr, 0), (load_v, 0)]),
            p.add(format!("PV_{tag}_a_smem"), Resource::SmemPort, a * pv_smem, &[(ea[0], 0), (ea[1], 0), (corr, 0), (load_v, 0)]),
        ];
        let after_b = [(eb[0], 0), (eb[1], 0), (pa[0], 0), (pa[1], 0)];
        let pb = [
            p.add(format!("PV_{tag}_b"), Resource::TensorCore, b * half_mma, &after_b),
            p.add(format!("PV_{tag}_b_smem"), Resource::SmemPort, b * pv_smem, &after_b),
        ];
        // The output accumulator is rescaled only after the previous PV lands.
        p.depend(corr, pb[0], 1);
        exp_a[t] = ea;
        exp_b[t] = eb;
        pv_b[t] = pb;
    }
    for t in 0..2 {
        // S and P share TMEM: the next QK^T overwrites P once PV consumed it.
        for &x in &qk[t] {
            for &y in &pv_b[t] {
                p.depend(x, y, 1);
            }
        }
    }
    // The two softmax warpgroups take turns on the exponential unit.
    for (first, second, lag) in [(0, 1, 0), (1, 0, 1)] {
        for &x in &exp_a[second] {
            for &y in &exp_b[first] {
                p.depend(x, y, lag);
            }
        }
    }
    Ok(p)
}

/// Backward main loop for one KV tile, one Q tile per iteration. dK and dQ
/// of the previous Q tile overlap the softmax of the current one. Under
/// `TwoCta`, dP of the current tile is issued before dQ of the previous one
/// and half of dS is exchanged over DSMEM.
pub fn build_bwd_pipeline(tile: &TileConfig, hw: &HardwareProfile, cta_mode: CtaMode) -> Result<Pipeline> {
    let tile = TileConfig { cta_mode, ..*tile };
    let ops = bwd_operand_split(&tile, hw)?;
    let m = match cta_mode {
        CtaMode::OneCta => tile.m as f64,
        CtaMode::TwoCta => tile.m as f64 / 2.0,
    };
    let (n, d) = (tile.n as f64, tile.d as f64);
    let bytes = tile.dtype_bytes as f64;
    let bw = hw.smem_bytes_per_clk;
    let mma = 2.0 * m * n * d / hw.mma_flops_per_clk;
    let softmax = m * n / hw.mufu_exp_per_clk;
    // dS = P * (dP - D): two FMA-class ops per element.
    let ds_elem = 2.0 * m * n / hw.fma_per_clk;
    let ds_write = m * n * bytes / bw;
    let dq_accum = match cta_mode {
        CtaMode::OneCta => 8.0 * m * d / bw,
        CtaMode::TwoCta => 4.0 * m * d / bw,
    };

    let mut p = Pipeline::new(1);
    let load_q = p.add("load_Q", Resource::TmaLoad, 0.0, &[]);
    let load_do = p.add("load_dO", Resource::TmaLoad, 0.0, &[]);
    let mma_pair = |p: &mut Pipeline, idx: usize, label: &str, deps: &[(TaskId, u32)]| {
        [
            p.add(label, Resource::TensorCore, mma, deps),
            p.add(format!("{label}_smem"), Resource::SmemPort, ops[idx], deps),
        ]
    };
    let s = mma_pair(&mut p, 0, BWD_MMAS[0], &[(load_q, 0)]);
    let dp = mma_pair(&mut p, 1, BWD_MMAS[1], &[(load_do, 0)]);
    let sm = p.add("softmax", Resource::Mufu, softmax, &[(s[0], 0), (s[1], 0)]);
    let dv = mma_pair(&mut p, 2, BWD_MMAS[2], &[(sm, 0), (load_do, 0)]);
    let ds = p.add("dS", Resource::Fma, ds_elem, &[(sm, 0), (dp[0], 0), (dp[1], 0)]);
    let ds_w = p.add("dS_write", Resource::SmemPort, ds_write, &[(ds, 0)]);
    let mut prev_deps = vec![(ds_w, 1)];
    if cta_mode == CtaMode::TwoCta {
        let x = p.add(
            "dS_dsmem",
            Resource::Dsmem,
            hw.dsmem_exchange_factor * m * n * bytes / bw,
            &[(ds, 0)],
        );
        prev_deps.push((x, 1));
    }
    let _dk = mma_pair(&mut p, 3, "dK_prev", &prev_deps);
    let dq = mma_pair(&mut p, 4, "dQ_prev", &prev_deps);
    p.add("dQ_accum", Resource::SmemPort, dq_accum, &[(dq[0], 0)]);
    // S and P share TMEM: the next S waits until dV has read P.
    for &x in &s {
        p.depend(x, dv[0], 1);
    }
    for &x in &dp {
        for &y in &dq {
            match cta_mode {
                // dP, dS and dQ share TMEM: dQ of the previous tile drains first.
                CtaMode::OneCta => p.depend(x, y, 0),
                CtaMode::TwoCta => p.depend(y, x, 0),
            }
        }
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionPoint {
    pub exp_fraction: f64,
    pub cycles_per_iter: f64,
    pub mufu_busy: f64,
    pub fma_busy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionSearch {
    pub best: f64,
    pub curve: Vec<FractionPoint>,
}

/// Grid search over `f = 0, 0.01, ..., 1`. Minimizes the period first, then
/// the busier of the MUFU and FMA ports, then `f`.
pub fn exp_fraction_sweep(tile: &TileConfig, hw: &HardwareProfile, base: &FwdOptions) -> Result<FractionSearch> {
    let mut curve = Vec::with_capacity(101);
    for k in 0..=100 {
        let f = k as f64 / 100.0;
        let opts = FwdOptions { exp_fraction: f, ..*base };
        let ss = steady_state(&build_fwd_pipeline_with(tile, hw, &opts)?)?;
        curve.push(FractionPoint {
            exp_fraction: f,
            cycles_per_iter: ss.cycles_per_iter,
            mufu_busy: ss.busy.get(&Resource::Mufu).copied().unwrap_or(0.0),
            fma_busy: ss.busy.get(&Resource::Fma).copied().unwrap_or(0.0),
        });
    }
    let key = |p: &FractionPoint| (p.cycles_per_iter, p.mufu_busy.max(p.fma_busy), p.exp_fraction);
    let best = curve
        .iter()
        .min_by(|x, y| {
            let (a, b) = (key(x), key(y));
            a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.total_cmp(&b.2))
        })
        .expect("non-empty grid")
        .exp_fraction;
    Ok(FractionSearch { best, curve })
}

pub fn optimal_exp_fraction(tile: &TileConfig, hw: &HardwareProfile, emulated_exp_cost: f64) -> Result<f64> {
    let base = FwdOptions {
        emulated_exp_cost,
        ..FwdOptions::default()
    };
    Ok(exp_fraction_sweep(tile, hw, &base)?.best)
}

/// Columns needed by a 128-lane TMEM tile of `n_cols` elements of
/// `elem_bytes` each, rounded up to the allocation granule.
pub fn tmem_columns(n_cols: u32, elem_bytes: u32) -> u32 {
    (n_cols * elem_bytes).div_ceil(4).div_ceil(TMEM_GRANULE) * TMEM_GRANULE
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TmemAllocation {
    pub name: String,
    pub columns: u32,
    /// Inclusive `[first_use, last_use]` in schedule steps.
    pub lifetime: (u32, u32),
    /// Region this allocation reuses.
    pub aliases_with: Option<String>,
}

impl TmemAllocation {
    pub fn new(name: &str, columns: u32, first: u32, last: u32) -> Self {
        Self {
            name: name.into(),
            columns,
            lifetime: (first, last),
            aliases_with: None,
        }
    }

    pub fn aliasing(mut self, target: &str) -> Self {
        self.aliases_with = Some(target.into());
        self
    }

    fn overlaps(&self, o: &TmemAllocation) -> bool {
        self.lifetime.0 <= o.lifetime.1 && o.lifetime.0 <= self.lifetime.1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TmemPlan {
    pub allocations: Vec<TmemAllocation>,
    pub capacity_columns: u32,
}

impl TmemPlan {
    pub fn new(allocations: Vec<TmemAllocation>) -> Self {
        Self {
            allocations,
            capacity_columns: TMEM_COLUMNS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TmemConflict {
    Granularity { name: String, columns: u32 },
    BadLifetime { name: String, lifetime: (u32, u32) },
    UnknownAlias { name: String, target: String },
    NestedAlias { name: String, target: String },
    /// Alias larger than its target, or concurrently live aliases of one
    /// target that together exceed it.
    AliasOverflow { target: String, names: Vec<String>, at: u32, columns: u32 },
    /// An alias live at the same time as its target.
    AliasOverlap { name: String, target: String, interval: (u32, u32) },
    Capacity { at: u32, live: Vec<String>, columns: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TmemUsage {
    pub peak_columns: u32,
    pub peak_at: u32,
}

/// Checks granularity, aliasing and capacity. Each non-aliased allocation
/// reserves its columns from the first to the last use of itself or any
/// of its aliases.
pub fn validate_tmem_plan(plan: &TmemPlan) -> std::result::Result<TmemUsage, Vec<TmemConflict>> {
    let allocs = &plan.allocations;
    let by_name: BTreeMap<&str, &TmemAllocation> = allocs.iter().map(|a| (a.name.as_str(), a)).collect();
    let mut conflicts = Vec::new();
    for a in allocs {
        if a.columns == 0 || a.columns % TMEM_GRANULE != 0 {
            conflicts.push(TmemConflict::Granularity {
                name: a.name.clone(),
                columns: a.columns,
            });
        }
        if a.lifetime.0 > a.lifetime.1 {
            conflicts.push(TmemConflict::BadLifetime {
                name: a.name.clone(),
                lifetime: a.lifetime,
            });
        }
        let Some(target) = &a.aliases_with else { continue };
        let Some(t) = by_name.get(target.as_str()) else {
            conflicts.push(TmemConflict::UnknownAlias {
                name: a.name.clone(),
                target: target.clone(),
            });
            continue;
        };
        if t.aliases_with.is_some() {
            conflicts.push(TmemConflict::NestedAlias {
                name: a.name.clone(),
                target: target.clone(),
            });
            continue;
        }
        if a.columns > t.columns {
            conflicts.push(TmemConflict::AliasOverflow {
                target: target.clone(),
                names: vec![a.name.clone()],
                at: a.lifetime.0,
                columns: a.columns,
            });
        }
        if a.overlaps(t) {
            conflicts.push(TmemConflict::AliasOverlap {
                name: a.name.clone(),
                target: target.clone(),
                interval: (a.lifetime.0.max(t.lifetime.0), a.lifetime.1.min(t.lifetime.1)),
            });
        }
    }
    if !conflicts.is_empty() {
        return Err(conflicts);
    }

    let roots: Vec<&TmemAllocation> = allocs.iter().filter(|a| a.aliases_with.is_none()).collect();
    let mut footprint = Vec::with_capacity(roots.len());
    for r in &roots {
        let group: Vec<&TmemAllocation> = allocs
            .iter()
            .filter(|a| a.aliases_with.as_deref() == Some(r.name.as_str()))
            .collect();
        for t in group.iter().map(|a| a.lifetime.0) {
            let live: Vec<_> = group.iter().filter(|a| a.lifetime.0 <= t && t <= a.lifetime.1).collect();
            let cols: u32 = live.iter().map(|a| a.columns).sum();
            if cols > r.columns {
                conflicts.push(TmemConflict::AliasOverflow {
                    target: r.name.clone(),
                    names: live.iter().map(|a| a.name.clone()).collect(),
                    at: t,
                    columns: cols,
                });
                break;
            }
        }
        let first = group.iter().map(|a| a.lifetime.0).fold(r.lifetime.0, u32::min);
        let last = group.iter().map(|a| a.lifetime.1).fold(r.lifetime.1, u32::max);
        footprint.push((r, first, last));
    }

    let mut usage = TmemUsage { peak_columns: 0, peak_at: 0 };
    let mut starts: Vec<u32> = footprint.iter().map(|f| f.1).collect();
    starts.sort_unstable();
    starts.dedup();
    for t in starts {
        let live: Vec<_> = footprint.iter().filter(|f| f.1 <= t && t <= f.2).collect();
        let cols: u32 = live.iter().map(|f| f.0.columns).sum();
        if cols > usage.peak_columns {
            usage = TmemUsage { peak_columns: cols, peak_at: t };
        }
        if cols > plan.capacity_columns {
            conflicts.push(TmemConflict::Capacity {
                at: t,
                live: live.iter().map(|f| f.0.name.clone()).collect(),
                columns: cols,
            });
            break;
        }
    }
    if conflicts.is_empty() {
        Ok(usage)
    } else {
        Err(conflicts)
    }
}

/// Forward TMEM layout for a 128-row tile pair: two fp32 O accumulators and
/// two fp32 S tiles, each S reused for bf16 P and the row statistics.
pub fn fwd_tmem_plan(tile: &TileConfig) -> TmemPlan {
    let o = tmem_columns(tile.d, 4);
    let s = tmem_columns(tile.n, 4);
    let p = tmem_columns(tile.n, tile.dtype_bytes);
    let mut allocs = Vec::new();
    for (k, tag) in ["H", "L"].into_iter().enumerate() {
        let base = 3 * k as u32;
        allocs.push(TmemAllocation::new(&format!("O_{tag}"), o, 0, 100));
        allocs.push(TmemAllocation::new(&format!("S_{tag}"), s, base, base + 2));
        allocs.push(TmemAllocation::new(&format!("P_{tag}"), p, base + 3, base + 6).aliasing(&format!("S_{tag}")));
        allocs.push(
            TmemAllocation::new(&format!("stats_{tag}"), TMEM_GRANULE, base + 3, base + 6).aliasing(&format!("S_{tag}")),
        );
    }
    TmemPlan::new(allocs)
}

/// Backward TMEM layout: S shared with P, dP shared with dS and then dQ,
/// dV and dK live across the whole loop.
pub fn bwd_tmem_plan(tile: &TileConfig) -> TmemPlan {
    let m = tmem_columns(tile.n, 4);
    let half = tmem_columns(tile.n, tile.dtype_bytes);
    let acc = tmem_columns(tile.d, 4);
    TmemPlan::new(vec![
        TmemAllocation::new("S", m, 0, 1),
        TmemAllocation::new("P", half, 2, 5).aliasing("S"),
        TmemAllocation::new("dP", m, 1, 2),
        TmemAllocation::new("dS", half, 3, 5).aliasing("dP"),
        TmemAllocation::new("dQ", acc, 6, 7).aliasing("dP"),
        TmemAllocation::new("dV", acc, 0, 100),
        TmemAllocation::new("dK", acc, 0, 100),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WarpgroupRole {
    Softmax,
    Correction,
    MmaTma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegBudget {
    pub warpgroup_role: WarpgroupRole,
    pub regs_input: u32,
    pub regs_output: u32,
    pub regs_misc: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegCheck {
    Ok { total: u32 },
    Overflow { amount: u32 },
}

pub fn validate_reg_budget(b: &RegBudget) -> RegCheck {
    let total = b.regs_input + b.regs_output + b.regs_misc;
    if total <= REG_CAP {
        RegCheck::Ok { total }
    } else {
        RegCheck::Overflow { amount: total - REG_CAP }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hw() -> HardwareProfile {
        HardwareProfile::default()
    }

    fn t128() -> TileConfig {
        TileConfig::new(128, 128, 128)
    }

    #[test]
    fn single_task() {
        let mut p = Pipeline::new(1);
        p.add("only", Resource::Fma, 100.0, &[]);
        let ss = steady_state(&p).unwrap();
        assert_eq!(ss.cycles_per_iter, 100.0);
        assert_eq!(ss.bottleneck, Resource::Fma);
    }

    #[test]
    fn zero_lag_cycle_rejected() {
        let mut p = Pipeline::new(1);
        let a = p.add("a", Resource::Fma, 1.0, &[]);
        let b = p.add("b", Resource::Mufu, 1.0, &[(a, 0)]);
        p.depend(a, b, 0);
        assert!(matches!(steady_state(&p), Err(Error::ZeroLagCycle(_))));
    }

    #[test]
    fn recurrence_bound() {
        // a -> b -> a(next) with lag 1 on different ports: period 30.
        let mut p = Pipeline::new(1);
        let a = p.add("a", Resource::Fma, 10.0, &[]);
        let b = p.add("b", Resource::Mufu, 20.0, &[(a, 0)]);
        p.depend(a, b, 1);
        let ss = steady_state(&p).unwrap();
        assert_eq!(ss.cycles_per_iter, 30.0);
        assert_eq!(ss.bound, Bound::Recurrence);
        // Lag 2 halves the recurrence; ports bind.
        p.tasks[a].deps[0].lag = 2;
        let ss = steady_state(&p).unwrap();
        assert_eq!(ss.cycles_per_iter, 20.0);
        assert_eq!(ss.bound, Bound::Resource(Resource::Mufu));
    }

    #[test]
    fn fwd_balanced() {
        let p = build_fwd_pipeline(&t128(), &hw(), 0.0).unwrap();
        let ss = steady_state(&p).unwrap();
        assert_eq!(ss.cycles_per_iter, 1024.0);
        assert_eq!(ss.utilization[&Resource::TensorCore], 1.0);
        assert_eq!(ss.utilization[&Resource::Mufu], 1.0);
        assert_eq!(p.find("expA_H_mufu").unwrap().duration_cycles + p.find("expB_H_mufu").unwrap().duration_cycles, 1024.0);
        assert!(p.tasks.iter().filter(|t| t.name.contains("_fma")).all(|t| t.duration_cycles == 0.0));
    }

    #[test]
    fn fwd_all_emulated() {
        let p = build_fwd_pipeline(&t128(), &hw(), 1.0).unwrap();
        assert_eq!(p.total_on(Resource::Mufu), 0.0);
        assert!(p.tasks.iter().filter(|t| t.name.contains("exp") && t.name.ends_with("_fma")).all(|t| t.duration_cycles > 0.0));
        assert!(build_fwd_pipeline(&t128(), &hw(), 1.5).is_err());
    }

    #[test]
    fn bwd_one_cta() {
        let p = build_bwd_pipeline(&t128(), &hw(), CtaMode::OneCta).unwrap();
        assert_eq!(p.total_on(Resource::TensorCore), 2560.0);
        let ss = steady_state(&p).unwrap();
        assert_eq!(ss.cycles_per_iter, 3328.0);
        assert_eq!(ss.bound, Bound::Resource(Resource::SmemPort));
        assert_eq!(ss.excess_over_pct(Resource::TensorCore), 30.0);
    }

    #[test]
    fn bwd_two_cta() {
        let p = build_bwd_pipeline(&TileConfig::new(256, 128, 128), &hw(), CtaMode::TwoCta).unwrap();
        assert_eq!(p.find("dS_dsmem").unwrap().duration_cycles, 384.0);
        let ss = steady_state(&p).unwrap();
        assert_eq!(ss.cycles_per_iter, 2688.0);
        assert_eq!(ss.excess_over_pct(Resource::TensorCore), 5.0);
    }

    #[test]
    fn dq_waits_for_ds() {
        let p = build_bwd_pipeline(&t128(), &hw(), CtaMode::OneCta).unwrap();
        let dq = p.find("dQ_prev").unwrap();
        let ds_w = p.find("dS_write").unwrap().id;
        assert!(dq.deps.iter().any(|d| d.task == ds_w));
    }

    #[test]
    fn balance_point_when_fma_idle() {
        let base = FwdOptions {
            correction_on_fma: false,
            ..FwdOptions::default()
        };
        let h = hw();
        let r_f = h.fma_per_clk / 7.0;
        let closed = r_f / (h.mufu_exp_per_clk + r_f);
        let f = exp_fraction_sweep(&t128(), &h, &base).unwrap().best;
        assert!((f - closed).abs() <= 0.01, "{f} vs {closed}");
    }

    #[test]
    fn faster_mufu_offloads_less() {
        let b200 = optimal_exp_fraction(&t128(), &hw(), 7.0).unwrap();
        let b300 = optimal_exp_fraction(&t128(), &HardwareProfile::preset("b300-class").unwrap(), 7.0).unwrap();
        assert!(b300 < b200);
        assert_eq!(optimal_exp_fraction(&t128(), &hw(), 1e9).unwrap(), 0.0);
        assert!(optimal_exp_fraction(&t128(), &hw(), 0.5).is_err());
    }

    #[test]
    fn tmem_plans() {
        assert_eq!(tmem_columns(128, 4), 128);
        let all_live: Vec<_> = ["a", "b", "c", "d", "e"].iter().map(|n| TmemAllocation::new(n, 128, 0, 5)).collect();
        let err = validate_tmem_plan(&TmemPlan::new(all_live)).unwrap_err();
        assert!(matches!(&err[0], TmemConflict::Capacity { columns: 640, .. }));
        assert_eq!(validate_tmem_plan(&fwd_tmem_plan(&t128())).unwrap().peak_columns, 512);
        assert_eq!(validate_tmem_plan(&bwd_tmem_plan(&t128())).unwrap().peak_columns, 512);
        assert!(validate_tmem_plan(&TmemPlan::new(vec![])).is_ok());
    }

    #[test]
    fn tmem_alias_rules() {
        let plan = |allocs| validate_tmem_plan(&TmemPlan::new(allocs)).unwrap_err();
        let e = plan(vec![TmemAllocation::new("x", 48, 0, 1)]);
        assert!(matches!(e[0], TmemConflict::Granularity { .. }));
        let e = plan(vec![TmemAllocation::new("p", 64, 0, 1).aliasing("nope")]);
        assert!(matches!(e[0], TmemConflict::UnknownAlias { .. }));
        let e = plan(vec![
            TmemAllocation::new("s", 128, 0, 2),
            TmemAllocation::new("p", 64, 2, 3).aliasing("s"),
        ]);
        assert!(matches!(e[0], TmemConflict::AliasOverlap { interval: (2, 2), .. }));
        let e = plan(vec![
            TmemAllocation::new("s", 128, 0, 1),
            TmemAllocation::new("p", 96, 2, 3).aliasing("s"),
            TmemAllocation::new("q", 64, 3, 4).aliasing("s"),
        ]);
        assert!(matches!(&e[0], TmemConflict::AliasOverflow { columns: 160, .. }));
    }

    #[test]
    fn reg_budgets() {
        let b = |i, o, m| RegBudget {
            warpgroup_role: WarpgroupRole::Softmax,
            regs_input: i,
            regs_output: o,
            regs_misc: m,
        };
        assert_eq!(validate_reg_budget(&b(128, 64, 32)), RegCheck::Ok { total: 224 });
        assert_eq!(validate_reg_budget(&b(200, 64, 32)), RegCheck::Overflow { amount: 40 });
        assert_eq!(validate_reg_budget(&b(0, 0, 0)), RegCheck::Ok { total: 0 });
    }

    #[test]
    fn graph_export_round_trip() {
        let p = build_bwd_pipeline(&t128(), &hw(), CtaMode::OneCta).unwrap();
        let g = p.to_graph();
        assert_eq!(g.nodes.len(), p.tasks.len());
        let json = serde_json::to_string(&g).unwrap();
        let back: GraphExport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, g);
    }
}
