use attnlab_core::roofline::HardwareProfile;
use attnlab_core::scheduler::{
    build_schedule, simulate_dq_locks_with, simulate_makespan, LockConfig, Policy, ScheduleOptions, WorktileGrid,
};
use clap::{ArgAction, Args};
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult, Outcome};

fn parse_policy(s: &str) -> Result<Policy, String> {
    s.parse().map_err(|e: attnlab_core::Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    /// Comma-separated policies: naive, lpt-causal, lpt-varlen, spt.
    #[arg(long, value_delimiter = ',', default_value = "lpt-causal", value_parser = parse_policy)]
    pub policy: Vec<Policy>,

    /// Query tiles per sequence (uniform grids).
    #[arg(long, default_value_t = 16, conflicts_with = "seqlens")]
    pub mblocks: u32,

    #[arg(long, default_value_t = 4, conflicts_with = "seqlens")]
    pub batches: u32,

    /// Per-batch sequence lengths for a varlen grid (queries and keys alike).
    #[arg(long, value_delimiter = ',')]
    pub seqlens: Option<Vec<u32>>,

    #[arg(long, default_value_t = 16)]
    pub heads: u32,

    /// Query heads per KV head.
    #[arg(long, default_value_t = 1)]
    pub gqa: u32,

    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub causal: bool,

    /// Processors; defaults to the profile's SM count.
    #[arg(long)]
    pub sms: Option<usize>,

    /// Head dimension, for the per-head K/V footprint used in L2 sectioning.
    #[arg(long, default_value_t = 128)]
    pub head_dim: u32,

    /// Cycles per KV iteration of one tile.
    #[arg(long, default_value_t = 1.0)]
    pub per_iter_cycles: f64,

    /// Also run the dQ lock simulation.
    #[arg(long)]
    pub lock_sim: bool,

    #[arg(long, default_value_t = LockConfig::default().iter_cycles)]
    pub iter_cycles: u64,

    #[arg(long, default_value_t = LockConfig::default().reduce_cycles)]
    pub reduce_cycles: u64,

    #[arg(long, default_value_t = LockConfig::default().fence_cycles)]
    pub fence_cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LockSummary {
    pub makespan: u64,
    pub first_write_stalls: u32,
    pub total_stall_cycles: u64,
    pub max_stall_cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRow {
    pub policy: Policy,
    pub n_tiles: usize,
    pub n_processors: usize,
    pub total_work: f64,
    /// `max(total / processors, largest tile)`.
    pub lower_bound: f64,
    pub makespan: f64,
    pub efficiency: f64,
    pub batch_map: Option<Vec<i32>>,
    pub lock: Option<LockSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub grid: WorktileGrid,
    pub n_processors: usize,
    pub rows: Vec<PolicyRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub policy: String,
    pub n_tiles: usize,
    pub n_processors: usize,
    pub total_work: f64,
    pub lower_bound: f64,
    pub makespan: f64,
    pub efficiency: f64,
    /// Semicolon-separated; empty when the policy has no map.
    pub batch_map: String,
    pub lock_makespan: Option<u64>,
    pub first_write_stalls: Option<u32>,
    pub total_stall_cycles: Option<u64>,
    pub max_stall_cycles: Option<u64>,
}

impl From<&PolicyRow> for CsvRow {
    fn from(r: &PolicyRow) -> Self {
        let map = r.batch_map.as_ref().map_or(String::new(), |m| {
            m.iter().map(i32::to_string).collect::<Vec<_>>().join(";")
        });
        Self {
            policy: r.policy.to_string(),
            n_tiles: r.n_tiles,
            n_processors: r.n_processors,
            total_work: r.total_work,
            lower_bound: r.lower_bound,
            makespan: r.makespan,
            efficiency: r.efficiency,
            batch_map: map,
            lock_makespan: r.lock.as_ref().map(|l| l.makespan),
            first_write_stalls: r.lock.as_ref().map(|l| l.first_write_stalls),
            total_stall_cycles: r.lock.as_ref().map(|l| l.total_stall_cycles),
            max_stall_cycles: r.lock.as_ref().map(|l| l.max_stall_cycles),
        }
    }
}

pub fn grid(args: &ScheduleArgs) -> CliResult<WorktileGrid> {
    let g = match &args.seqlens {
        Some(lens) => WorktileGrid::varlen(lens.clone(), lens.clone(), args.heads, args.causal)?,
        None => WorktileGrid::uniform(args.mblocks, args.heads, args.batches, args.causal)?,
    };
    Ok(g.with_gqa(args.gqa)?)
}

pub fn report(args: &ScheduleArgs, hw: &HardwareProfile) -> CliResult<(ScheduleReport, Vec<String>)> {
    let grid = grid(args)?;
    let n = args.sms.unwrap_or(hw.n_sms as usize);
    if n == 0 {
        return Err(CliError::Usage("--sms must be positive".into()));
    }
    let max_len = grid.seqlen_kv.iter().copied().max().unwrap_or(0) as u64;
    let opts = ScheduleOptions {
        per_iter_cycles: args.per_iter_cycles,
        l2_bytes: hw.l2_bytes,
        kv_bytes_per_head: 2 * max_len * args.head_dim as u64 * 2,
    };
    let lock_cfg = LockConfig {
        iter_cycles: args.iter_cycles,
        reduce_cycles: args.reduce_cycles,
        fence_cycles: args.fence_cycles,
    };

    let mut failures = Vec::new();
    let mut rows = Vec::new();
    for &policy in &args.policy {
        let s = build_schedule(&grid, policy, &opts)?;
        if policy != Policy::Spt && !s.is_permutation_of(&grid) {
            failures.push(format!("{policy}: schedule is not a permutation of the grid"));
        }
        let m = simulate_makespan(&s, n)?;
        let total: f64 = s.costs.iter().sum();
        let largest = s.costs.iter().copied().fold(0.0, f64::max);
        let lower = (total / n as f64).max(largest);
        let graham = total / n as f64 + largest * (1.0 - 1.0 / n as f64);
        if m.makespan < lower * (1.0 - 1e-12) || m.makespan > graham * (1.0 + 1e-12) {
            failures.push(format!("{policy}: makespan {} outside list-scheduling bounds [{lower}, {graham}]", m.makespan));
        }
        let lock = if args.lock_sim {
            let r = simulate_dq_locks_with(&grid, policy, n, &lock_cfg)?;
            if policy == Policy::Spt && r.first_write_stalls != 0 {
                failures.push(format!("spt: {} first-write stalls", r.first_write_stalls));
            }
            Some(LockSummary {
                makespan: r.makespan,
                first_write_stalls: r.first_write_stalls,
                total_stall_cycles: r.per_cta_stall.iter().map(|c| c.stall_cycles).sum(),
                max_stall_cycles: r.per_cta_stall.iter().map(|c| c.stall_cycles).max().unwrap_or(0),
            })
        } else {
            None
        };
        rows.push(PolicyRow {
            policy,
            n_tiles: s.order.len(),
            n_processors: n,
            total_work: total,
            lower_bound: lower,
            makespan: m.makespan,
            efficiency: if m.makespan > 0.0 { lower / m.makespan } else { 1.0 },
            batch_map: s.batch_map,
            lock,
        });
    }
    Ok((
        ScheduleReport {
            grid,
            n_processors: n,
            rows,
        },
        failures,
    ))
}

pub fn run(args: &ScheduleArgs, hw: &HardwareProfile) -> CliResult<Outcome> {
    let (report, failures) = report(args, hw)?;
    let flat: Vec<CsvRow> = report.rows.iter().map(CsvRow::from).collect();
    Outcome::new(&report, &flat, failures)
}
