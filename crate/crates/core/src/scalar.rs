//! Scalar abstraction shared by the lattice, engine and radial oracle.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating-point scalar usable for every field and oracle in the crate.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + LowerExp
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Every literal used in this crate fits in `f32`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Error-free transformation `a + b = s + e` (Knuth's TwoSum).
#[inline]
pub fn two_sum<T: Real>(a: T, b: T) -> (T, T) {
    let s = a + b;
    let bb = s - a;
    let e = (a - (s - bb)) + (b - bb);
    (s, e)
}

/// `(1 + t)^alpha - 1 - alpha t`, accurate for small `|t|`.
pub fn binomial_remainder<T: Real>(alpha: T, t: T) -> T {
    if t.abs() < T::lit(1e-3) {
        // Series: sum_{k>=2} C(alpha, k) t^k.
        let mut coeff = alpha;
        let mut power = t;
        let mut acc = T::zero();
        for k in 2..40 {
            let kk = T::from_count(k);
            coeff = coeff * (alpha - (kk - T::one())) / kk;
            power = power * t;
            let term = coeff * power;
            acc += term;
            if term.abs() <= T::epsilon() * acc.abs() {
                break;
            }
        }
        acc
    } else {
        (alpha * t.ln_1p()).exp_m1() - alpha * t
    }
}

/// `(1 + z) ln(1 + z) - z`, accurate for small `|z|`.
pub fn log_remainder<T: Real>(z: T) -> T {
    if z.abs() < T::lit(1e-2) {
        // Series: sum_{k>=2} (-1)^k z^k / (k (k - 1)).
        let mut power = z;
        let mut acc = T::zero();
        for k in 2..60 {
            power = -power * z;
            let term = -power / T::from_count(k * (k - 1));
            acc += term;
            if term.abs() <= T::epsilon() * acc.abs() {
                break;
            }
        }
        acc
    } else {
        (T::one() + z) * z.ln_1p() - z
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_remainder_both_branches() {
        for &z in &[0.5_f64, 3.0, 0.02, -0.4] {
            let direct = (1.0 + z) * (1.0 + z).ln() - z;
            assert!((log_remainder(z) - direct).abs() < 1e-15);
        }
        // Truncated series at ±1e-3.
        let z = 1e-3_f64;
        let series = |z: f64| z * z / 2.0 - z.powi(3) / 6.0 + z.powi(4) / 12.0 - z.powi(5) / 20.0;
        for t in [z, -z] {
            assert!(((log_remainder(t) - series(t)) / series(t)).abs() < 1e-12);
        }
    }

    #[test]
    fn two_sum_is_exact() {
        let (s, e) = two_sum(1.0e16_f64, 1.0);
        assert_eq!(s, 1.0e16);
        assert_eq!(e, 1.0);
    }

    #[test]
    fn binomial_remainder_matches_direct_form_away_from_zero() {
        for &t in &[0.5_f64, 2.0, 0.01, -0.3] {
            let direct = (1.0 + t).powf(2.0 / 3.0) - 1.0 - 2.0 / 3.0 * t;
            assert!((binomial_remainder(2.0 / 3.0, t) - direct).abs() < 1e-15);
        }
    }

    #[test]
    fn binomial_remainder_small_argument_is_second_order() {
        let t = 1e-9_f64;
        let alpha = 0.5;
        let expected = alpha * (alpha - 1.0) / 2.0 * t * t;
        let got = binomial_remainder(alpha, t);
        assert!(((got - expected) / expected).abs() < 1e-8);
    }
}
