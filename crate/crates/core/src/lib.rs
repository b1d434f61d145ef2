//! Desk-scale models of a tiled attention kernel for tensor-memory GPUs.
//!
//! * [`fastmath`]: polynomial `2^x` emulation and bf16 rounding.
//! * [`online_softmax`]: streaming softmax with conditional rescaling.
//! * [`attention`]: tiled forward/backward attention with dense oracles.
//! * [`roofline`]: per-resource cycle model for forward and backward tiles.
//! * [`pipeline`]: steady-state pipeline simulator and TMEM/register checks.
//! * [`scheduler`]: worktile orderings, makespan and dQ lock simulation.

pub mod attention;
pub mod error;
pub mod fastmath;
pub mod matrix;
pub mod online_softmax;
pub mod pipeline;
pub mod roofline;
pub mod scheduler;

pub use error::{Error, Result};

use serde::{Deserialize, Serialize};

/// Whether an MMA tile is owned by one CTA or split across a CTA pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CtaMode {
    OneCta,
    TwoCta,
}
