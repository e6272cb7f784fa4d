//! Dense buffers and a tape-based reverse-mode differentiation engine.
//!
//! Only the operations the detection networks need are provided. Every
//! spatial op works on `(time, frequency, channel)` maps, optionally with a
//! leading batch axis.

mod buffer;
mod gemm;
mod gradcheck;
mod kernels;
mod tape;

pub use buffer::NdBuffer;
pub use gradcheck::{finite_diff_check, GradCheck, Objective};
pub use kernels::{BatchStats, GruWeights, RunningStats};
pub use tape::{Gradients, Tape, Var};

use core::fmt::{Debug, Display};
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use num_traits::{Float, FromPrimitive};

/// Scalar type of a buffer. Implemented for `f64` (high precision, used by
/// every oracle test) and `f32` (fast mode for training runs).
pub trait Real:
    Float
    + FromPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum<Self>
    + 'static
{
    const PRECISION: Precision;

    #[inline]
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).unwrap()
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap()
    }

    #[doc(hidden)]
    fn gemm(a: gemm::Mat<'_, Self>, b: gemm::Mat<'_, Self>, c: &mut [Self], accumulate: bool);
}

impl Real for f32 {
    const PRECISION: Precision = Precision::Fast;

    fn gemm(a: gemm::Mat<'_, Self>, b: gemm::Mat<'_, Self>, c: &mut [Self], accumulate: bool) {
        gemm::sgemm(a, b, c, accumulate)
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::High;

    fn gemm(a: gemm::Mat<'_, Self>, b: gemm::Mat<'_, Self>, c: &mut [Self], accumulate: bool) {
        gemm::dgemm(a, b, c, accumulate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    /// 64-bit floats.
    High,
    /// 32-bit floats.
    Fast,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::High => "high",
            Precision::Fast => "fast",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "high" => Some(Precision::High),
            "fast" => Some(Precision::Fast),
            _ => None,
        }
    }
}

/// Splits a rank-3 `(T, F, C)` or rank-4 `(B, T, F, C)` shape into
/// `(B, T, F, C)`.
pub(crate) fn btfc(op: &'static str, shape: &[usize]) -> crate::Result<[usize; 4]> {
    match *shape {
        [t, f, c] => Ok([1, t, f, c]),
        [b, t, f, c] => Ok([b, t, f, c]),
        _ => Err(crate::Error::shape(
            op,
            alloc::format!("expected (T, F, C) or (B, T, F, C), got {shape:?}"),
        )),
    }
}
