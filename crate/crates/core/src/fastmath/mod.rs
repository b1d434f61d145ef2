//! Software `2^x`: minimax polynomials, IEEE-754 exponent splicing, bf16
//! rounding and an accuracy harness.

mod accuracy;
mod bf16;
mod exp2;
mod poly;

pub use accuracy::{
    accuracy_sweep, accuracy_sweep_with, read_reports_csv, write_reports_csv, AccuracyReport,
    Exp2Method, CSV_HEADER,
};
pub use bf16::{quantize_bf16, round_f64_to_bf16, round_to_bf16, Bf16Value};
pub use exp2::{exp2_emulated, exp2_reference, magic_floor, EXP2_MIN_ARG, ROUNDING_MAGIC};
pub use poly::{fit_minimax, Poly2x};
