//! Scalar abstraction shared by every numerical routine in the crate.

use std::fmt::{Debug, Display};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real floating point type the library computes in: `f32` or `f64`.
///
/// Dense factorizations come from nalgebra, so the bound is `RealField`;
/// conversions to and from `f64` go through num-traits.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Send + Sync + Display + Debug + 'static
{
    /// Machine epsilon of the type, widened to `f64`.
    const MACHINE_EPSILON: f64;
    /// Width in bytes, used by the binary serialization header.
    const BYTES: u8;

    /// Converts an `f64` constant into this type.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

impl Real for f32 {
    const MACHINE_EPSILON: f64 = f32::EPSILON as f64;
    const BYTES: u8 = 4;
}

impl Real for f64 {
    const MACHINE_EPSILON: f64 = f64::EPSILON;
    const BYTES: u8 = 8;
}
