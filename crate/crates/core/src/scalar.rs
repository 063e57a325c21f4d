//! Floating-point abstraction shared by the numerical modules.
//!
//! The KDE, the NB2 fitter, the sandwich estimator, the linear algebra
//! helpers and the scoring metrics are written against [`Scalar`] so they run
//! in `f32` or `f64`. Pipeline code uses the `f64` aliases exported from the
//! crate root.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Send + Sync + 'static
{
    /// Complementary error function.
    fn erfc(self) -> Self;

    /// Converts an `f64` literal. Every finite literal used in this crate is
    /// representable (possibly rounded) in both `f32` and `f64`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize fits in float")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }

    /// Two-sided p-value of a standard-normal Wald statistic.
    fn two_sided_p(z: Self) -> Self {
        let p = (z.abs() / Self::lit(std::f64::consts::SQRT_2)).erfc();
        p.max(Self::zero()).min(Self::one())
    }
}

impl Scalar for f32 {
    fn erfc(self) -> Self {
        libm::erfcf(self)
    }
}

impl Scalar for f64 {
    fn erfc(self) -> Self {
        libm::erfc(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p_value_reference_points() {
        assert!((f64::two_sided_p(1.959963984540054) - 0.05).abs() < 1e-12);
        assert!((f64::two_sided_p(0.0) - 1.0).abs() < 1e-15);
        assert!((f32::two_sided_p(1.959964) - 0.05).abs() < 1e-6);
    }
}
