//! Scalar abstraction for the numeric core.
//!
//! Everything numeric (graph, optimizer, attention blocks, gradient checks)
//! is written against [`Scalar`] so the same code runs in f32 and f64. The
//! crate-level aliases pin f64 as the default lane; f32 exists for callers
//! that want to trade precision for speed and as a compile-time proof that
//! the kernels are scalar-agnostic.

use num_traits::Float;

/// Floating-point scalar usable by the autodiff graph.
///
/// `num_traits::Float` supplies arithmetic, comparisons, exp/ln/sqrt and
/// min/max; the extra items here are the conversions the graph needs to move
/// between the scalar lane and the f64 world of corpus data and serialized
/// artifacts.
pub trait Scalar:
    Float
    + num_traits::NumAssignOps
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}
