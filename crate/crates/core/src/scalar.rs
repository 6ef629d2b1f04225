//! Scalar abstraction for the tensor math.
//!
//! The numeric kernels are generic over [`Scalar`] (f32 or f64). Everything
//! above the tensor layer — backbone, prompts, training engine, file formats —
//! is pinned to f64 through the crate-root aliases: the gradient checks and
//! the deterministic artifacts require double precision.

use num_traits::{Float, NumAssignOps};
use std::fmt::{Debug, Display};

pub trait Scalar: Float + NumAssignOps + Debug + Display + Default + 'static {
    /// Error function, needed by the exact GELU.
    fn erf(self) -> Self;

    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("f64 conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("f64 conversion")
    }
}

impl Scalar for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

impl Scalar for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }
}
