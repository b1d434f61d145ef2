use half::bf16;
use serde::{Deserialize, Serialize};

/// A bfloat16 value: the upper 16 bits of an IEEE single.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Bf16Value(u16);

impl Bf16Value {
    pub fn from_bits(bits: u16) -> Self {
        Self(bits)
    }

    pub fn bits(self) -> u16 {
        self.0
    }

    pub fn to_f32(self) -> f32 {
        bf16::from_bits(self.0).to_f32()
    }

    pub fn to_f64(self) -> f64 {
        self.to_f32() as f64
    }

    /// Distance in units in the last place, for finite values of equal sign.
    pub fn ulp_distance(self, other: Self) -> u32 {
        (self.0 as i32 - other.0 as i32).unsigned_abs()
    }
}

/// Round-to-nearest-even conversion from single precision.
pub fn round_to_bf16(x: f32) -> Bf16Value {
    Bf16Value(bf16::from_f32(x).to_bits())
}

/// Round-to-nearest-even conversion straight from double precision.
pub fn round_f64_to_bf16(x: f64) -> Bf16Value {
    Bf16Value(bf16::from_f64(x).to_bits())
}

/// Quantise through bf16 and back.
#[inline]
pub fn quantize_bf16(x: f32) -> f32 {
    round_to_bf16(x).to_f32()
}
