use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

/// Arguments of every exponential are clamped to this magnitude.
pub const EXP_CLAMP: f64 = 30.0;

/// Scalar type the engine and the model are generic over.
///
/// `f64` is the verification precision and `f32` the training/benchmark
/// precision. Activations are trait methods so that instrumented scalar
/// types can evaluate them without touching their arithmetic counters.
pub trait Real:
    Copy
    + Debug
    + Display
    + Default
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }

    fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    fn min(self, other: Self) -> Self {
        if other < self {
            other
        } else {
            self
        }
    }

    fn clamp_exp_arg(self) -> Self {
        let c = Self::from_f64(EXP_CLAMP);
        self.max(-c).min(c)
    }

    /// True when `x` lies strictly inside the exponent clamp (gradient passes).
    fn inside_exp_clamp(self) -> bool {
        let c = Self::from_f64(EXP_CLAMP);
        self > -c && self < c
    }

    fn exp_clamped(self) -> Self {
        self.clamp_exp_arg().exp()
    }

    fn sigmoid(self) -> Self {
        let x = self.clamp_exp_arg();
        Self::ONE / (Self::ONE + (-x).exp())
    }

    fn silu(self) -> Self {
        self * self.sigmoid()
    }

    fn softplus(self) -> Self {
        let x = self.clamp_exp_arg();
        (Self::ONE + x.exp()).ln()
    }
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert_eq!(0.0f64.silu(), 0.0);
        assert!((0.0f64.softplus() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(0.0f64.sigmoid(), 0.5);
        assert_eq!(0.0f64.exp_clamped(), 1.0);
    }

    #[test]
    fn extreme_inputs_stay_finite() {
        for x in [-1e6f64, -100.0, 100.0, 1e6] {
            assert!(x.sigmoid().is_finite());
            assert!(x.softplus().is_finite());
            assert!(x.exp_clamped().is_finite());
            assert!(x.silu().is_finite());
        }
        assert!(1e4f32.exp_clamped().is_finite());
    }
}
