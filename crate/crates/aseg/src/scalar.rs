//! Scalar element types for tensors.
//!
//! Every kernel in the crate is generic over [`Scalar`], which is implemented
//! for `f32` (the fast training mode) and `f64` (the verification mode used
//! by gradient checking and the determinism tests). A tensor uses exactly one
//! mode; the two never mix inside a graph.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type of a [`crate::Tensor`]: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Type name used in diagnostics and the CLI (`"f32"` / `"f64"`).
    const NAME: &'static str;

    /// Lossy conversion from `f64`, for constants and RNG draws.
    #[inline]
    fn from_f64c(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant not representable")
    }

    /// Widening conversion to `f64`, for reporting and oracles.
    #[inline]
    fn to_f64c(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
