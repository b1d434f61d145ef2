//! Throughput-only cycle model for one attention tile iteration.
//!
//! Each resource (tensor cores, shared memory, exponential unit) gets a cycle
//! count for one main-loop iteration; the largest one bounds the iteration.
//! L2, global memory and register bandwidth are not modeled.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::CtaMode;

const PRESETS: &str = include_str!("../profiles.toml");

/// Bytes per fp32 dQ element (written to smem, then read back for the
/// global reduction).
const DQ_ACCUM_BYTES: f64 = 4.0;

/// Per-SM, per-clock throughputs and capacities of a modeled GPU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    pub mma_flops_per_clk: f64,
    pub smem_bytes_per_clk: f64,
    pub mufu_exp_per_clk: f64,
    pub fma_per_clk: f64,
    pub tmem_bytes: u64,
    pub regs_per_thread: u32,
    pub clock_mhz: f64,
    pub n_sms: u32,
    pub l2_bytes: u64,
    /// Edge of one MMA instruction tile.
    pub mma_tile: u32,
    /// DSMEM bytes exchanged per 2-CTA backward iteration, as a multiple
    /// of `(M/2) * N * dtype_bytes`. Calibrated, not derived.
    pub dsmem_exchange_factor: f64,
}

impl Default for HardwareProfile {
    fn default() -> Self {
        Self::preset(DEFAULT_PROFILE).expect("bundled default profile")
    }
}

pub const DEFAULT_PROFILE: &str = "b200-class";

#[derive(Debug, Deserialize)]
struct ProfileFile {
    version: u32,
    profiles: BTreeMap<String, HardwareProfile>,
}

impl HardwareProfile {
    /// Looks up a bundled preset by name.
    pub fn preset(name: &str) -> Result<Self> {
        let all = bundled_profiles()?;
        all.get(name).cloned().ok_or_else(|| Error::UnknownProfile {
            name: name.to_string(),
            known: all.keys().cloned().collect::<Vec<_>>().join(", "),
        })
    }

    /// Hardware generation with `mufu_exp_per_clk` scaled by `factor`.
    pub fn with_mufu_scaled(mut self, factor: f64) -> Self {
        self.mufu_exp_per_clk *= factor;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.mma_flops_per_clk,
            self.smem_bytes_per_clk,
            self.mufu_exp_per_clk,
            self.fma_per_clk,
            self.clock_mhz,
            self.dsmem_exchange_factor,
        ];
        if positive.iter().any(|&x| !(x > 0.0))
            || self.tmem_bytes == 0
            || self.regs_per_thread == 0
            || self.n_sms == 0
            || self.l2_bytes == 0
            || self.mma_tile == 0
        {
            return Err(Error::InvalidArgument("hardware profile fields must be positive".into()));
        }
        Ok(())
    }

    /// Peak dense MMA throughput implied by the profile, in TFLOP/s.
    pub fn peak_tflops(&self) -> f64 {
        self.mma_flops_per_clk * self.clock_mhz * 1e6 * self.n_sms as f64 / 1e12
    }
}

/// All bundled presets keyed by name.
pub fn bundled_profiles() -> Result<BTreeMap<String, HardwareProfile>> {
    parse_profiles(PRESETS)
}

/// Parses a versioned profile file (`version = 1`, `[profiles.<name>]`).
pub fn parse_profiles(text: &str) -> Result<BTreeMap<String, HardwareProfile>> {
    let file: ProfileFile = toml::from_str(text)?;
    if file.version != 1 {
        return Err(Error::InvalidArgument(format!("unsupported profile file version {}", file.version)));
    }
    for p in file.profiles.values() {
        p.validate()?;
    }
    Ok(file.profiles)
}

pub fn load_profiles_file(path: &Path) -> Result<BTreeMap<String, HardwareProfile>> {
    parse_profiles(&std::fs::read_to_string(path)?)
}

/// Tile shape along the sequence dimensions plus head dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileConfig {
    pub m: u32,
    pub n: u32,
    pub d: u32,
    pub dtype_bytes: u32,
    pub cta_mode: CtaMode,
}

impl TileConfig {
    pub fn new(m: u32, n: u32, d: u32) -> Self {
        Self {
            m,
            n,
            d,
            dtype_bytes: 2,
            cta_mode: CtaMode::OneCta,
        }
    }

    pub fn two_cta(m: u32, n: u32, d: u32) -> Self {
        Self {
            cta_mode: CtaMode::TwoCta,
            ..Self::new(m, n, d)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 || self.d == 0 || self.dtype_bytes == 0 {
            return Err(Error::InvalidArgument(format!("tile {self} has a zero dimension")));
        }
        Ok(())
    }
}

impl fmt::Display for TileConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.m, self.n, self.d)?;
        if self.cta_mode == CtaMode::TwoCta {
            f.write_str(" (2-CTA)")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RooflineResource {
    Mma,
    Smem,
    Exp,
}

impl fmt::Display for RooflineResource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RooflineResource::Mma => "mma",
            RooflineResource::Smem => "smem",
            RooflineResource::Exp => "exp",
        })
    }
}

/// Cycle counts per resource for one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleBreakdown {
    pub t_mma: f64,
    pub t_smem_mma_operands: f64,
    pub t_smem_ds_write: f64,
    pub t_smem_ds_dsmem: f64,
    pub t_smem_dq: f64,
    pub t_smem_total: f64,
    pub t_exp: f64,
    pub bottleneck: RooflineResource,
}

impl CycleBreakdown {
    fn new(t_mma: f64, operands: f64, ds_write: f64, ds_dsmem: f64, dq: f64, t_exp: f64) -> Self {
        let total = operands + ds_write + ds_dsmem + dq;
        let mut b = Self {
            t_mma,
            t_smem_mma_operands: operands,
            t_smem_ds_write: ds_write,
            t_smem_ds_dsmem: ds_dsmem,
            t_smem_dq: dq,
            t_smem_total: total,
            t_exp,
            bottleneck: RooflineResource::Mma,
        };
        b.bottleneck = b.ranked()[0].0;
        b
    }

    fn time(&self, r: RooflineResource) -> f64 {
        match r {
            RooflineResource::Mma => self.t_mma,
            RooflineResource::Smem => self.t_smem_total,
            RooflineResource::Exp => self.t_exp,
        }
    }

    /// Resources by descending cycles; ties keep the order MMA, smem, exp.
    fn ranked(&self) -> Vec<(RooflineResource, f64)> {
        let mut v: Vec<_> = [RooflineResource::Mma, RooflineResource::Smem, RooflineResource::Exp]
            .into_iter()
            .map(|r| (r, self.time(r)))
            .collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1));
        v
    }

    /// Cycles of the bounding resource.
    pub fn bound(&self) -> f64 {
        self.time(self.bottleneck)
    }

    /// Resources whose time equals the bottleneck's.
    pub fn tied_bottlenecks(&self) -> Vec<RooflineResource> {
        let bound = self.bound();
        self.ranked().into_iter().filter(|&(_, t)| t == bound).map(|(r, _)| r).collect()
    }

    /// `(bound - t_mma) / t_mma` in percent.
    pub fn excess_over_mma_pct(&self) -> f64 {
        (self.bound() - self.t_mma) / self.t_mma * 100.0
    }
}

fn ceil_div(a: u32, b: u32) -> f64 {
    a.div_ceil(b) as f64
}

/// Shared-memory cycles of the two forward MMAs, `(QK^T, PV)`. Operands
/// are re-read once per MMA instruction tile.
pub fn fwd_smem_split(tile: &TileConfig, hw: &HardwareProfile) -> Result<(f64, f64)> {
    tile.validate()?;
    let t = hw.mma_tile;
    let tf = t as f64;
    let (n, d) = (tile.n as f64, tile.d as f64);
    let bytes = tile.dtype_bytes as f64;
    // QK^T reads Q and K from smem; PV reads only V (P lives in TMEM).
    let qk_elems = ceil_div(tile.m, t) * ceil_div(tile.n, t) * 2.0 * tf * d;
    let pv_elems = ceil_div(tile.m, t) * ceil_div(tile.d, t) * tf * n;
    let bw = hw.smem_bytes_per_clk;
    Ok((bytes * qk_elems / bw, bytes * pv_elems / bw))
}

/// Forward-pass cycles: QK^T (both operands from smem) and PV (P from
/// TMEM, V from smem).
pub fn fwd_roofline(tile: &TileConfig, hw: &HardwareProfile) -> Result<CycleBreakdown> {
    let (qk, pv) = fwd_smem_split(tile, hw)?;
    let (m, n, d) = (tile.m as f64, tile.n as f64, tile.d as f64);
    let t_mma = 4.0 * m * n * d / hw.mma_flops_per_clk;
    let t_exp = m * n / hw.mufu_exp_per_clk;
    Ok(CycleBreakdown::new(t_mma, qk + pv, 0.0, 0.0, 0.0, t_exp))
}

/// The five backward MMAs in issue order.
pub const BWD_MMAS: [&str; 5] = ["S", "dP", "dV", "dK", "dQ"];

/// Rows of the tile owned by one CTA.
fn bwd_rows_per_cta(tile: &TileConfig) -> Result<f64> {
    tile.validate()?;
    match tile.cta_mode {
        CtaMode::OneCta => Ok(tile.m as f64),
        CtaMode::TwoCta if tile.m.is_multiple_of(2) => Ok(tile.m as f64 / 2.0),
        CtaMode::TwoCta => Err(Error::InvalidArgument(format!("2-CTA tile needs even M, got {}", tile.m))),
    }
}

/// Shared-memory operand cycles of each backward MMA, ordered as
/// [`BWD_MMAS`].
///
/// S = QK^T and dP = dO V^T read both operands; dV = P^T dO and dK = dS^T Q
/// read one (the other is in TMEM); dQ = dS K reads dS and K. Under
/// `TwoCta` the M-sized operand of the four M-split MMAs is halved.
pub fn bwd_operand_split(tile: &TileConfig, hw: &HardwareProfile) -> Result<[f64; 5]> {
    let m = bwd_rows_per_cta(tile)?;
    let (n, d) = (tile.n as f64, tile.d as f64);
    let scale = tile.dtype_bytes as f64 / hw.smem_bytes_per_clk;
    let md = match tile.cta_mode {
        CtaMode::OneCta => m * d,
        CtaMode::TwoCta => m * d / 2.0,
    };
    Ok([
        (md + n * d) * scale,
        (md + n * d) * scale,
        md * scale,
        md * scale,
        (m * n + n * d) * scale,
    ])
}

/// Backward-pass cycles for the five MMAs, dS staging and the dQ reduction.
///
/// `TwoCta` takes the tile as the pair's `M` and reports one CTA's share:
/// operand B of the four M-split MMAs is halved, each CTA writes half of
/// dQ, and half of dS travels over DSMEM.
pub fn bwd_roofline(tile: &TileConfig, hw: &HardwareProfile) -> Result<CycleBreakdown> {
    let m = bwd_rows_per_cta(tile)?;
    let operands: f64 = bwd_operand_split(tile, hw)?.iter().sum();
    let (n, d) = (tile.n as f64, tile.d as f64);
    let bytes = tile.dtype_bytes as f64;
    let bw = hw.smem_bytes_per_clk;
    let t_mma = 10.0 * m * n * d / hw.mma_flops_per_clk;
    let ds_write = m * n * bytes / bw;
    let t_exp = m * n / hw.mufu_exp_per_clk;
    let (ds_dsmem, dq) = match tile.cta_mode {
        // dQ accumulator written to smem then read back.
        CtaMode::OneCta => (0.0, 2.0 * DQ_ACCUM_BYTES * m * d / bw),
        CtaMode::TwoCta => (
            hw.dsmem_exchange_factor * m * n * bytes / bw,
            DQ_ACCUM_BYTES * m * d / bw,
        ),
    };
    Ok(CycleBreakdown::new(t_mma, operands, ds_write, ds_dsmem, dq, t_exp))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pass {
    Forward,
    Backward,
}

impl fmt::Display for Pass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pass::Forward => "fwd",
            Pass::Backward => "bwd",
        })
    }
}

pub fn roofline(pass: Pass, tile: &TileConfig, hw: &HardwareProfile) -> Result<CycleBreakdown> {
    match pass {
        Pass::Forward => fwd_roofline(tile, hw),
        Pass::Backward => bwd_roofline(tile, hw),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BottleneckRow {
    pub pass: Pass,
    pub tile: TileConfig,
    pub cycles: CycleBreakdown,
    pub bottleneck: RooflineResource,
    pub tied_with: Vec<RooflineResource>,
    pub excess_over_mma_pct: f64,
}

pub fn bottleneck_report(pass: Pass, tiles: &[TileConfig], hw: &HardwareProfile) -> Result<Vec<BottleneckRow>> {
    if tiles.is_empty() {
        return Err(Error::InvalidArgument("no tiles given".into()));
    }
    tiles
        .iter()
        .map(|tile| {
            let cycles = roofline(pass, tile, hw)?;
            Ok(BottleneckRow {
                pass,
                tile: *tile,
                cycles,
                bottleneck: cycles.bottleneck,
                tied_with: cycles.tied_bottlenecks().into_iter().skip(1).collect(),
                excess_over_mma_pct: cycles.excess_over_mma_pct(),
            })
        })
        .collect()
}

/// Flat CSV row mirroring the roofline tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RooflineCsvRow {
    pub pass: String,
    pub m: u32,
    pub n: u32,
    pub d: u32,
    pub cta: u32,
    pub mma: f64,
    pub smem_mma_operands: f64,
    pub smem_ds_write: f64,
    pub smem_ds_dsmem: f64,
    pub smem_dq: f64,
    pub smem_total: f64,
    pub exp: f64,
    pub bottleneck: String,
    pub excess_over_mma_pct: f64,
}

impl From<&BottleneckRow> for RooflineCsvRow {
    fn from(r: &BottleneckRow) -> Self {
        let c = &r.cycles;
        Self {
            pass: r.pass.to_string(),
            m: r.tile.m,
            n: r.tile.n,
            d: r.tile.d,
            cta: match r.tile.cta_mode {
                CtaMode::OneCta => 1,
                CtaMode::TwoCta => 2,
            },
            mma: c.t_mma,
            smem_mma_operands: c.t_smem_mma_operands,
            smem_ds_write: c.t_smem_ds_write,
            smem_ds_dsmem: c.t_smem_ds_dsmem,
            smem_dq: c.t_smem_dq,
            smem_total: c.t_smem_total,
            exp: c.t_exp,
            bottleneck: std::iter::once(r.bottleneck)
                .chain(r.tied_with.iter().copied())
                .map(|b| b.to_string())
                .collect::<Vec<_>>()
                .join("+"),
            excess_over_mma_pct: r.excess_over_mma_pct,
        }
    }
}

pub fn write_report_csv<W: std::io::Write>(rows: &[BottleneckRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(RooflineCsvRow::from(r))?;
    }
    w.flush()?;
    Ok(())
}
