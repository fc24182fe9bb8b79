//! Bracketed scalar root finding: bisection down to a narrow bracket, then
//! safeguarded Newton steps that never leave the bracket.

use crate::error::{Result, SandpileError};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug)]
pub struct RootOptions<T> {
    /// Bisection stops once the bracket is narrower than this.
    pub bisect_width: T,
    /// Newton stops once `|f| <= residual_tol` or the step is below `step_tol`.
    pub residual_tol: T,
    pub step_tol: T,
    pub max_bisect: usize,
    pub max_newton: usize,
}

impl<T: Real> Default for RootOptions<T> {
    fn default() -> Self {
        RootOptions {
            bisect_width: T::lit(1e-8),
            residual_tol: T::lit(1e-14),
            step_tol: T::epsilon() * T::lit(4.0),
            max_bisect: 200,
            max_newton: 60,
        }
    }
}

/// Finds the root of `f` in `[lo, hi]` given its derivative `df`.
///
/// `f(lo)` and `f(hi)` must have opposite signs.
pub fn bracketed_root<T, F, D>(f: F, df: D, lo: T, hi: T, opts: &RootOptions<T>) -> Result<T>
where
    T: Real,
    F: Fn(T) -> T,
    D: Fn(T) -> T,
{
    let (mut a, mut b) = (lo, hi);
    let (fa, fb) = (f(a), f(b));
    if fa.is_nan() || fb.is_nan() || fa.signum() == fb.signum() {
        return Err(SandpileError::Bracket {
            lo: lo.as_f64(),
            hi: hi.as_f64(),
            f_lo: fa.as_f64(),
            f_hi: fb.as_f64(),
        });
    }
    if fa == T::zero() {
        return Ok(a);
    }
    if fb == T::zero() {
        return Ok(b);
    }
    let rising = fa < T::zero();
    let two = T::lit(2.0);

    let mut steps = 0;
    while b - a > opts.bisect_width * T::one().max(a.abs()) && steps < opts.max_bisect {
        let mid = a + (b - a) / two;
        let fm = f(mid);
        if fm == T::zero() {
            return Ok(mid);
        }
        if (fm < T::zero()) == rising {
            a = mid;
        } else {
            b = mid;
        }
        steps += 1;
    }

    let mut x = a + (b - a) / two;
    for _ in 0..opts.max_newton {
        let fx = f(x);
        if fx.abs() <= opts.residual_tol {
            return Ok(x);
        }
        if (fx < T::zero()) == rising {
            a = x;
        } else {
            b = x;
        }
        let slope = df(x);
        let mut next = x - fx / slope;
        if !next.is_finite() || next <= a || next >= b {
            next = a + (b - a) / two;
        }
        if (next - x).abs() <= opts.step_tol * x.abs().max(T::one()) {
            return Ok(next);
        }
        x = next;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sqrt_two() {
        let r = bracketed_root(|x: f64| x * x - 2.0, |x| 2.0 * x, 0.0, 2.0, &RootOptions::default())
            .unwrap();
        assert!((r - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn decreasing_function() {
        let r = bracketed_root(|x: f64| 1.0 - x.powi(3), |x| -3.0 * x * x, 0.1, 5.0, &RootOptions::default())
            .unwrap();
        assert!((r - 1.0).abs() < 1e-14);
    }

    #[test]
    fn missing_sign_change_is_reported() {
        let err = bracketed_root(|x: f64| x * x + 1.0, |x| 2.0 * x, -1.0, 1.0, &RootOptions::default())
            .unwrap_err();
        assert!(matches!(err, SandpileError::Bracket { .. }));
    }

    #[test]
    fn bad_derivative_falls_back_to_bisection() {
        let r = bracketed_root(|x: f64| x - 0.3, |_| 1e-30, 0.0, 1.0, &RootOptions::default()).unwrap();
        assert!((r - 0.3).abs() < 1e-12);
    }
}
