//! Scalar abstraction shared by the geometry and loss code.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive {
    /// Converts an `f64` literal into this scalar type.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }

    /// A tolerance of at least `base`, widened for low-precision scalars.
    #[inline]
    fn tol(base: f64) -> Self {
        let widened = Self::default_epsilon() * Self::lit(1e3);
        let base = Self::lit(base);
        if widened > base {
            widened
        } else {
            base
        }
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}
