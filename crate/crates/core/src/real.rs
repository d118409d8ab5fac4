//! Run-time selectable scalar precision.
//!
//! Training runs use `f32`; verification suites and oracles use `f64`. All
//! numeric modules are generic over [`Real`] so both precisions share one
//! code path.

use std::fmt::{Debug, Display};
use std::iter::Sum;

pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + Send
    + Sync
    + 'static
{
    /// Byte width recorded in the checkpoint header precision flag.
    const PRECISION_FLAG: u32;

    fn from_f64c(v: f64) -> Self;
    fn to_f64c(self) -> f64;

    /// Denominator guard for backward formulas of sqrt-like ops, so that a
    /// zero-norm input yields a zero (not NaN) gradient.
    fn grad_guard() -> Self;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const PRECISION_FLAG: u32 = 4;

    #[inline]
    fn from_f64c(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64c(self) -> f64 {
        self as f64
    }
    #[inline]
    fn grad_guard() -> Self {
        1e-12
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Real for f64 {
    const PRECISION_FLAG: u32 = 8;

    #[inline]
    fn from_f64c(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64c(self) -> f64 {
        self
    }
    #[inline]
    fn grad_guard() -> Self {
        1e-30
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}
