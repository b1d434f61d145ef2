use attnlab_core::roofline::{bottleneck_report, BottleneckRow, HardwareProfile, Pass, RooflineCsvRow, TileConfig};
use clap::{Args, ValueEnum};

use crate::{parse_dims, CliError, CliResult, Outcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PassArg {
    Fwd,
    Bwd,
}

impl From<PassArg> for Pass {
    fn from(p: PassArg) -> Self {
        match p {
            PassArg::Fwd => Pass::Forward,
            PassArg::Bwd => Pass::Backward,
        }
    }
}

#[derive(Debug, Args)]
pub struct RooflineArgs {
    #[arg(long, value_enum, default_value_t = PassArg::Fwd)]
    pub pass: PassArg,

    /// Tile shape MxNxd; repeatable. With `--cta 2`, M spans the CTA pair.
    #[arg(long = "tile", value_parser = parse_dims)]
    pub tiles: Vec<(u32, u32, u32)>,

    /// CTAs cooperating on one tile (backward only).
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub cta: u8,
}

/// Tile configs for a pass, defaulting to 128x128x128 per CTA.
pub fn tiles_for(pass: PassArg, cta: u8, dims: &[(u32, u32, u32)]) -> CliResult<Vec<TileConfig>> {
    if cta == 2 && pass == PassArg::Fwd {
        return Err(CliError::Usage("--cta 2 applies to the backward pass only".into()));
    }
    let default = [(128 * cta as u32, 128, 128)];
    let dims = if dims.is_empty() { &default[..] } else { dims };
    Ok(dims
        .iter()
        .map(|&(m, n, d)| if cta == 2 { TileConfig::two_cta(m, n, d) } else { TileConfig::new(m, n, d) })
        .collect())
}

pub fn rows(args: &RooflineArgs, hw: &HardwareProfile) -> CliResult<Vec<BottleneckRow>> {
    let tiles = tiles_for(args.pass, args.cta, &args.tiles)?;
    Ok(bottleneck_report(args.pass.into(), &tiles, hw)?)
}

pub fn run(args: &RooflineArgs, hw: &HardwareProfile) -> CliResult<Outcome> {
    let rows = rows(args, hw)?;
    let flat: Vec<RooflineCsvRow> = rows.iter().map(RooflineCsvRow::from).collect();
    Outcome::new(&rows, &flat, Vec::new())
}
