//! Floating point scalar abstraction.
//!
//! Every numerical routine in the crate is written against [`Real`], which is
//! implemented for `f32` and `f64`. Transcendental functions come from
//! nalgebra's `RealField`; conversions from literals go through num-traits.

use std::fmt::{Debug, Display, LowerExp};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point: f32 or f64.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Debug + Display + LowerExp + Send + Sync + 'static
{
    /// Machine epsilon of the underlying type.
    fn eps() -> Self;
    fn infinity() -> Self;
    fn neg_infinity() -> Self;
    fn is_finite_value(self) -> bool;
}

macro_rules! impl_real {
    ($f:ty) => {
        impl Real for $f {
            #[inline]
            fn eps() -> Self {
                <$f>::EPSILON
            }
            #[inline]
            fn infinity() -> Self {
                <$f>::INFINITY
            }
            #[inline]
            fn neg_infinity() -> Self {
                <$f>::NEG_INFINITY
            }
            #[inline]
            fn is_finite_value(self) -> bool {
                self.is_finite()
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

/// Converts an `f64` literal into the working scalar.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal representable in scalar type")
}

/// Converts a working scalar back into `f64` (for reporting and serialization).
#[inline]
pub fn to_f64<T: Real>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

#[inline]
pub fn from_usize<T: Real>(n: usize) -> T {
    T::from_usize(n).expect("usize representable in scalar type")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literals_round_trip() {
        assert_eq!(lit::<f64>(0.25), 0.25);
        assert_eq!(lit::<f32>(0.25), 0.25f32);
        assert_eq!(to_f64(1.5f32), 1.5);
        assert!(f64::neg_infinity() < -1e308);
        assert!(!f32::infinity().is_finite_value());
    }
}
