//! Scalar abstraction so the numeric core works at either f32 or f64.

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Largest finite binary16 magnitude; conversions saturate here instead of
/// overflowing to infinity.
pub const F16_MAX: f64 = 65504.0;

/// Floating-point scalar the tensor engine computes with.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Default
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from f64 (plain `as`-style cast).
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every supported scalar")
    }

    /// Widening conversion to f64.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("every supported scalar widens to f64")
    }

    /// Round to the nearest binary16 value (ties to even), saturating at
    /// +/-65504 instead of overflowing to infinity. NaN stays NaN.
    fn quantize_binary16(self) -> Self;
}

fn saturate16(q: half::f16, original_finite: bool) -> half::f16 {
    if original_finite && q.is_infinite() {
        half::f16::from_f64_const(F16_MAX).copysign(q)
    } else {
        q
    }
}

impl Scalar for f32 {
    fn quantize_binary16(self) -> Self {
        saturate16(half::f16::from_f32(self), self.is_finite()).to_f32()
    }
}

impl Scalar for f64 {
    fn quantize_binary16(self) -> Self {
        saturate16(half::f16::from_f64(self), self.is_finite()).to_f64()
    }
}
