//! Scalar abstraction over the two supported float widths.
//!
//! Everything numeric in this crate is generic over [`Scalar`]; `f64` is the
//! default precision and `f32` the reduced-precision mode. Tolerances that
//! depend on the width live here so tests can scale with the instantiation.

use num_traits::{Float, FromPrimitive, NumAssign};

pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssign
    + std::iter::Sum
    + Default
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Bit width of the representation, recorded in run manifests.
    const BITS: u32;

    /// Absolute tolerance for a softmax row to sum to one.
    const ROW_SUM_TOL: Self;

    fn cast(v: f64) -> Self;

    fn to_f64(self) -> f64;

    /// Uniform draw in [0, 1) from 64 random bits.
    ///
    /// The mapping is fixed per width (top 53 bits for `f64`, top 24 for
    /// `f32`) so a given bit stream always produces the same floats.
    fn unit_from_bits(bits: u64) -> Self;
}

impl Scalar for f64 {
    const BITS: u32 = 64;
    const ROW_SUM_TOL: f64 = 1e-12;

    #[inline]
    fn cast(v: f64) -> f64 {
        v
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }

    #[inline]
    fn unit_from_bits(bits: u64) -> f64 {
        (bits >> 11) as f64 / 9007199254740992.0
    }
}

impl Scalar for f32 {
    const BITS: u32 = 32;
    const ROW_SUM_TOL: f32 = 1e-6;

    #[inline]
    fn cast(v: f64) -> f32 {
        v as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn unit_from_bits(bits: u64) -> f32 {
        (bits >> 40) as f32 / 16777216.0
    }
}
