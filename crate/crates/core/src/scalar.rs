//! Scalar abstraction shared by the numeric modules.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real floating-point scalar the linear algebra and adapters are generic over.
///
/// Implemented for `f32` and `f64`. File formats and the experiment drivers
/// are fixed to `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Relative orthogonality threshold a column pair must meet before the
    /// Jacobi sweep stops rotating it.
    const JACOBI_TOL: Self;

    /// Converts an `f64` literal. Never fails for the implemented types.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f64 {
    const JACOBI_TOL: Self = 1e-14;
}

impl Scalar for f32 {
    const JACOBI_TOL: Self = 5e-6;
}
