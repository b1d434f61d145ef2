//! Bit-level `2^x` emulation and the correctly rounded reference path.

use super::Poly2x;

/// `2^23 + 2^22`: adding it pushes every fractional bit of `|x| < 2^22`
/// out of the mantissa.
pub const ROUNDING_MAGIC: f32 = 12_582_912.0;

/// Lower clamp applied before range reduction.
pub const EXP2_MIN_ARG: f32 = -127.0;

const MANTISSA_BITS: u32 = 23;

/// `floor(x)` via the magic-constant trick.
///
/// The add/subtract pair rounds to nearest; a one-unit correction emulates
/// the round-down mode the trick relies on. Valid for `|x| < 2^22`.
#[inline]
pub fn magic_floor(x: f32) -> f32 {
    let rounded = (x + ROUNDING_MAGIC) - ROUNDING_MAGIC;
    if rounded > x {
        rounded - 1.0
    } else {
        rounded
    }
}

/// Software `2^x`: clamp, split into integer and fractional parts, evaluate
/// the polynomial on the fraction and add the integer part to the exponent
/// field.
///
/// Arguments below `-127` behave as `-127` and land in the subnormal range.
/// Arguments at or above `128` saturate to `+inf`.
#[inline]
pub fn exp2_emulated(x: f32, poly: &Poly2x) -> f32 {
    let x = x.max(EXP2_MIN_ARG);
    let whole = magic_floor(x);
    if whole >= 128.0 {
        return f32::INFINITY;
    }
    let frac = x - whole;
    let mant = poly.eval(frac);
    let bits = mant.to_bits() as i32 + ((whole as i32) << MANTISSA_BITS);
    f32::from_bits(bits as u32)
}

/// Correctly rounded single-precision `2^x`, standing in for the hardware
/// special-function unit.
#[inline]
pub fn exp2_reference(x: f32) -> f32 {
    (x as f64).exp2() as f32
}
