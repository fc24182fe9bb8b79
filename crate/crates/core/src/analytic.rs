//! Radially symmetric solutions of `Δu = λ 𝕀{0<u<k} − A δ₀` with bounded
//! support, the inner-radius equations they reduce to, and the limit of the
//! inner radius as the threshold grows.
//!
//! A solution is
//!
//! ```text
//! u(r) = a1 + Ω G(r)                     0 < r <= r1
//!      = a2 + a3 G(r) + λ r² / (2d)      r1 < r <= r2
//!      = 0                               r > r2
//! ```
//!
//! with `G(r) = r^{2-d}` for `d >= 3`, `G(r) = log r` for `d = 2`, and
//! `Ω = A ω_d` where `ω_d` normalises the Green's kernel (`Δ(ω_d G) = −δ₀`).
//! The five unknowns satisfy `u(r2) = 0`, `u'(r2) = 0`, `u(r1) = k` and
//! continuity of `u`, `u'` at `r1`.
//!
//! The sandpile scaling limit uses `λ = 2dm`, `A = 2d`, `k = 1/m`
//! ([`RadialProblem::scaled`]); the unit-amplitude problem uses `λ = m`,
//! `A = 1` ([`RadialProblem::unscaled`]).

use serde::Serialize;

use crate::error::{Result, SandpileError};
use crate::roots::{bracketed_root, RootOptions};
use crate::scalar::{binomial_remainder, log_remainder, Real};

/// Default search bracket for inner radii.
pub const RADIUS_BRACKET: (f64, f64) = (1e-6, 1e3);

/// Threshold at which [`limit_radius`] samples the inner radius for `d >= 3`.
pub const LIMIT_SAMPLE_THRESHOLD: f64 = 1e8;

/// Volume of the unit ball in `R^d`.
pub fn unit_ball_volume<T: Real>(d: usize) -> T {
    // V_0 = 1, V_1 = 2, V_d = V_{d-2} 2π / d.
    let two_pi = T::lit(2.0) * T::PI();
    let mut v = if d % 2 == 0 { T::one() } else { T::lit(2.0) };
    let mut k = if d % 2 == 0 { 2 } else { 3 };
    while k <= d {
        v = v * two_pi / T::from_count(k);
        k += 2;
    }
    v
}

/// Normalising constant of the Green's kernel: `(d(d−2)|B₁|)⁻¹` for `d >= 3`,
/// `−1/(2π)` for `d = 2`.
pub fn omega<T: Real>(d: usize) -> Result<T> {
    match d {
        0 | 1 => Err(SandpileError::InvalidConfig(format!("dimension must be at least 2, got {d}"))),
        2 => Ok(-T::one() / (T::lit(2.0) * T::PI())),
        _ => {
            let dd = T::from_count(d);
            Ok(T::one() / (dd * (dd - T::lit(2.0)) * unit_ball_volume::<T>(d)))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RadialProblem<T> {
    pub d: usize,
    /// Bulk density coefficient.
    pub lambda: T,
    /// Point-source amplitude.
    pub amplitude: T,
    /// Plateau threshold.
    pub k: T,
}

impl<T: Real> RadialProblem<T> {
    pub fn new(d: usize, lambda: T, amplitude: T, k: T) -> Result<Self> {
        if d < 2 {
            return Err(SandpileError::InvalidConfig(format!("dimension must be at least 2, got {d}")));
        }
        for (name, v) in [("lambda", lambda), ("amplitude", amplitude), ("k", k)] {
            if !(v > T::zero() && v.is_finite()) {
                return Err(SandpileError::InvalidConfig(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(RadialProblem { d, lambda, amplitude, k })
    }

    /// `Δu = m 𝕀{0<u<k} − δ₀`.
    pub fn unscaled(d: usize, m: T, k: T) -> Result<Self> {
        Self::new(d, m, T::one(), k)
    }

    /// Continuum limit of the sandpile at threshold `m`:
    /// `Δu = 2dm 𝕀{0<u<1/m} − 2d δ₀`.
    pub fn scaled(d: usize, m: T) -> Result<Self> {
        let two_d = T::from_count(2 * d);
        Self::new(d, two_d * m, two_d, T::one() / m)
    }

    fn dim(&self) -> T {
        T::from_count(self.d)
    }

    /// `Ω = A ω_d`.
    pub fn green_constant(&self) -> T {
        self.amplitude * omega::<T>(self.d).expect("validated dimension")
    }

    /// `r2` as a function of `r1` (from `u'(r2) = 0` and gradient continuity).
    pub fn support_radius(&self, r1: T) -> T {
        let big_omega = self.green_constant();
        let d = self.dim();
        if self.d == 2 {
            (r1 * r1 - T::lit(2.0) * big_omega / self.lambda).sqrt()
        } else {
            let c = big_omega * d * (d - T::lit(2.0)) / self.lambda;
            r1 * (T::one() + c / r1.powi(self.d as i32)).powf(T::one() / d)
        }
    }

    /// Residual whose unique positive zero is `r1`; increasing, `−∞` at `0+`
    /// and `k` at infinity.
    pub fn inner_residual(&self, x: T) -> T {
        let big_omega = self.green_constant();
        let d = self.dim();
        let two = T::lit(2.0);
        if self.d == 2 {
            // k − Ω/2 − (λ/4)(x² + s) log(1 + s/x²) with s = −2Ω/λ; the
            // linear part of the logarithm cancels −Ω/2 exactly.
            let s = -two * big_omega / self.lambda;
            self.k - self.lambda / T::lit(4.0) * x * x * log_remainder(s / (x * x))
        } else {
            // k − Ω x^{2−d} − λ x²/(2(d−2)) + λ/(2(d−2)) (x^d + c)^{2/d}; the
            // first-order part of the bracket cancels Ω x^{2−d} exactly.
            let c = big_omega * d * (d - two) / self.lambda;
            let t = c / x.powi(self.d as i32);
            self.k + self.lambda / (two * (d - two)) * x * x * binomial_remainder(two / d, t)
        }
    }

    fn inner_residual_derivative(&self, x: T) -> T {
        let big_omega = self.green_constant();
        let d = self.dim();
        let two = T::lit(2.0);
        if self.d == 2 {
            let s = -two * big_omega / self.lambda;
            let q = s / (x * x);
            -self.lambda * x / two * (q.ln_1p() - q)
        } else {
            let c = big_omega * d * (d - two) / self.lambda;
            let t = c / x.powi(self.d as i32);
            let bracket = (((two - d) / d) * t.ln_1p()).exp_m1();
            (d - two) * big_omega * x.powi(1 - self.d as i32) + self.lambda / (d - two) * x * bracket
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RadialSolution<T> {
    pub problem: RadialProblem<T>,
    pub a1: T,
    pub a2: T,
    pub a3: T,
    /// Boundary of the plateau `{u > k}`.
    pub r1: T,
    /// Support radius.
    pub r2: T,
    /// `A ω_d`.
    pub omega: T,
}

impl<T: Real> RadialSolution<T> {
    fn green(&self, r: T) -> T {
        if self.problem.d == 2 {
            r.ln()
        } else {
            r.powi(2 - self.problem.d as i32)
        }
    }

    /// Residuals of the five defining equations, in the order
    /// `u(r2)=0`, `u'(r2)=0`, `u(r1)=k`, continuity of `u` at `r1`,
    /// continuity of `u'` at `r1`.
    pub fn residuals(&self) -> [T; 5] {
        let p = &self.problem;
        let (r1, r2) = (self.r1, self.r2);
        let d = T::from_count(p.d);
        let two = T::lit(2.0);
        let half_rate = p.lambda / (two * d);
        if p.d == 2 {
            [
                self.a2 + self.a3 * r2.ln() + half_rate * r2 * r2,
                self.a3 / (r2 * r2) + p.lambda / two,
                self.a1 + self.omega * r1.ln() - p.k,
                self.a2 + self.a3 * r1.ln() + half_rate * r1 * r1 - p.k,
                self.omega / (r1 * r1) - self.a3 / (r1 * r1) - p.lambda / two,
            ]
        } else {
            let e = 2 - p.d as i32;
            let minus_d = -(p.d as i32);
            [
                self.a2 + self.a3 * r2.powi(e) + half_rate * r2 * r2,
                self.a3 * (two - d) * r2.powi(minus_d) + p.lambda / d,
                self.a1 + self.omega * r1.powi(e) - p.k,
                self.a2 + self.a3 * r1.powi(e) + half_rate * r1 * r1 - p.k,
                self.omega * (two - d) * r1.powi(minus_d) - self.a3 * (two - d) * r1.powi(minus_d) - p.lambda / d,
            ]
        }
    }

    pub fn max_residual(&self) -> T {
        self.residuals().iter().fold(T::zero(), |acc, r| acc.max(r.abs()))
    }

    /// `u(r)` for `r > 0`.
    pub fn eval(&self, r: T) -> Result<T> {
        if !(r > T::zero()) {
            return Err(SandpileError::Domain(format!("radial solution is singular at r = {r}")));
        }
        Ok(if r <= self.r1 {
            self.a1 + self.omega * self.green(r)
        } else if r <= self.r2 {
            self.a2 + self.a3 * self.green(r) + self.problem.lambda / T::from_count(2 * self.problem.d) * r * r
        } else {
            T::zero()
        })
    }

    /// Volume of the annulus `r1 < |x| < r2`.
    pub fn annulus_volume(&self) -> T {
        let d = self.problem.d as i32;
        unit_ball_volume::<T>(self.problem.d) * (self.r2.powi(d) - self.r1.powi(d))
    }
}

fn default_root_options<T: Real>() -> RootOptions<T> {
    RootOptions { residual_tol: T::zero(), ..RootOptions::default() }
}

/// Solves the radial free-boundary problem `p`; fails unless every defining
/// equation holds to `tol` relative to the largest term involved (at least 1).
pub fn solve_radial<T: Real>(p: &RadialProblem<T>, tol: T) -> Result<RadialSolution<T>> {
    if !(tol > T::zero()) {
        return Err(SandpileError::InvalidConfig(format!("tolerance must be positive, got {tol}")));
    }
    let (lo, hi) = (T::lit(RADIUS_BRACKET.0), T::lit(RADIUS_BRACKET.1));
    let r1 = bracketed_root(
        |x| p.inner_residual(x),
        |x| p.inner_residual_derivative(x),
        lo,
        hi,
        &default_root_options(),
    )?;
    let r2 = p.support_radius(r1);
    let big_omega = p.green_constant();
    let d = T::from_count(p.d);
    let two = T::lit(2.0);
    let (a3, g1, g2) = if p.d == 2 {
        (-p.lambda * r2 * r2 / two, r1.ln(), r2.ln())
    } else {
        let e = 2 - p.d as i32;
        (p.lambda * r2.powi(p.d as i32) / (d * (d - two)), r1.powi(e), r2.powi(e))
    };
    let a2 = -a3 * g2 - p.lambda / (two * d) * r2 * r2;
    let a1 = p.k - big_omega * g1;
    let sol = RadialSolution { problem: *p, a1, a2, a3, r1, r2, omega: big_omega };
    // Residuals are differences of terms of this size.
    let scale = [a1, a2, a3 * g1, p.lambda * r2 * r2, p.lambda, p.k]
        .iter()
        .fold(T::one(), |acc, v| acc.max(v.abs()));
    let worst = sol.max_residual();
    if !(worst <= tol * scale) {
        return Err(SandpileError::Numerical(format!(
            "radial solution residual {worst:e} exceeds tolerance {tol:e} (r1 = {r1}, r2 = {r2})"
        )));
    }
    Ok(sol)
}

/// Residual whose unique positive zero is the inner radius `x_m` of the
/// scaled problem at threshold `m`, written directly in `m`:
///
/// * `d >= 3`: `1 − 2dm ω/x^{d−2} − m² d/(d−2) x² + m² d/(d−2) (x^d + ω d(d−2)/m)^{2/d}`
/// * `d = 2`: `1/m² + 1/(πm) − (x² + 1/(πm)) log(1 + 1/(πm x²))`
///
/// Both are increasing in `x`.
pub fn xm_residual<T: Real>(d: usize, m: T, x: T) -> T {
    let two = T::lit(2.0);
    if d == 2 {
        let q = T::one() / (T::PI() * m);
        T::one() / (m * m) - x * x * log_remainder(q / (x * x))
    } else {
        let w = omega::<T>(d).expect("dimension at least 3");
        let dd = T::from_count(d);
        let t = w * dd * (dd - two) / (m * x.powi(d as i32));
        // The linear term of the binomial expansion cancels 2dm ω / x^{d−2}.
        T::one() + m * m * dd / (dd - two) * x * x * binomial_remainder(two / dd, t)
    }
}

fn xm_residual_derivative<T: Real>(d: usize, m: T, x: T) -> T {
    let two = T::lit(2.0);
    if d == 2 {
        let q = T::one() / (T::PI() * m);
        let z = q / (x * x);
        -two * x * (z.ln_1p() - z)
    } else {
        let w = omega::<T>(d).expect("dimension at least 3");
        let dd = T::from_count(d);
        let t = w * dd * (dd - two) / (m * x.powi(d as i32));
        let bracket = (((two - dd) / dd) * t.ln_1p()).exp_m1();
        two * dd * m * (dd - two) * w * x.powi(1 - d as i32) + two * m * m * dd / (dd - two) * x * bracket
    }
}

/// Inner radius `x_m` of the scaled problem, from [`xm_residual`].
pub fn inner_radius_xm<T: Real>(d: usize, m: T, tol: T) -> Result<T> {
    if d < 2 {
        return Err(SandpileError::InvalidConfig(format!("dimension must be at least 2, got {d}")));
    }
    if !(m > T::zero() && m.is_finite()) {
        return Err(SandpileError::InvalidConfig(format!("threshold must be positive, got {m}")));
    }
    if !(tol > T::zero()) {
        return Err(SandpileError::InvalidConfig(format!("tolerance must be positive, got {tol}")));
    }
    let opts = RootOptions { bisect_width: tol.max(T::epsilon()).min(T::lit(1e-8)), ..default_root_options() };
    bracketed_root(
        |x| xm_residual(d, m, x),
        |x| xm_residual_derivative(d, m, x),
        T::lit(RADIUS_BRACKET.0),
        T::lit(RADIUS_BRACKET.1),
        &opts,
    )
}

/// `lim_{m→∞} x_m`: `1/(√2 π)` for `d = 2`; for `d >= 3` the inner radius at
/// `m =` [`LIMIT_SAMPLE_THRESHOLD`], whose distance to the limit is `O(1/m)`.
pub fn limit_radius<T: Real>(d: usize) -> Result<T> {
    match d {
        0 | 1 => Err(SandpileError::InvalidConfig(format!("dimension must be at least 2, got {d}"))),
        2 => Ok(T::one() / (T::SQRT_2() * T::PI())),
        _ => inner_radius_xm(d, T::lit(LIMIT_SAMPLE_THRESHOLD), T::lit(1e-14)),
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre<T: Real>(n: usize) -> Vec<(T, T)> {
    let mut out = Vec::with_capacity(n);
    let nn = T::from_count(n);
    for i in 0..n {
        let mut x = (T::PI() * (T::from_count(i) + T::lit(0.75)) / (nn + T::lit(0.5))).cos();
        let mut dp = T::one();
        for _ in 0..100 {
            let (mut p0, mut p1) = (T::one(), x);
            for k in 2..=n {
                let kk = T::from_count(k);
                let p2 = ((T::lit(2.0) * kk - T::one()) * x * p1 - (kk - T::one()) * p0) / kk;
                p0 = p1;
                p1 = p2;
            }
            dp = nn * (x * p1 - p0) / (x * x - T::one());
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() <= T::epsilon() * T::lit(4.0) {
                break;
            }
        }
        out.push((x, T::lit(2.0) / ((T::one() - x * x) * dp * dp)));
    }
    out
}

/// Average of `h` over the sphere of radius `radius` centred at the origin.
pub fn sphere_average<T: Real>(d: usize, radius: T, h: &dyn Fn(&[T]) -> T) -> T {
    let mut point = vec![T::zero(); d];
    sphere_average_rec(d, 0, radius, &mut point, h)
}

fn sphere_average_rec<T: Real>(d: usize, axis: usize, radius: T, point: &mut Vec<T>, h: &dyn Fn(&[T]) -> T) -> T {
    let remaining = d - axis;
    if remaining == 2 {
        let n = 64;
        let mut acc = T::zero();
        for j in 0..n {
            let phi = T::lit(2.0) * T::PI() * T::from_count(j) / T::from_count(n);
            point[axis] = radius * phi.cos();
            point[axis + 1] = radius * phi.sin();
            acc += h(point);
        }
        return acc / T::from_count(n);
    }
    // Polar angle from axis `axis`; density ∝ sin^{remaining−2} θ.
    let nodes = gauss_legendre::<T>(24);
    let half_pi = T::PI() / T::lit(2.0);
    let (mut acc, mut mass) = (T::zero(), T::zero());
    for &(x, w) in &nodes {
        let theta = half_pi * (x + T::one());
        let weight = w * theta.sin().powi(remaining as i32 - 2);
        point[axis] = radius * theta.cos();
        acc += weight * sphere_average_rec(d, axis + 1, radius * theta.sin(), point, h);
        mass += weight;
    }
    acc / mass
}

/// Balayage check against a harmonic test function `h`.
///
/// For each solution, the annulus measure `(λ/A) 𝕀{r1<|x|<r2}` has unit mass
/// and must reproduce `h(0)`; so must the uniform probability measure on the
/// limit sphere of radius [`limit_radius`]. Returns the largest discrepancy.
pub fn quadrature_identity_check<T: Real>(
    d: usize,
    solutions: &[RadialSolution<T>],
    h: &dyn Fn(&[T]) -> T,
) -> Result<T> {
    let origin = vec![T::zero(); d];
    let h0 = h(&origin);
    let limit = limit_radius::<T>(d)?;
    let mut worst = (h0 - sphere_average(d, limit, h)).abs();
    let surface = T::from_count(d) * unit_ball_volume::<T>(d);
    let nodes = gauss_legendre::<T>(24);
    for sol in solutions {
        if sol.problem.d != d {
            return Err(SandpileError::InvalidConfig(format!(
                "solution dimension {} does not match {d}",
                sol.problem.d
            )));
        }
        let half = (sol.r2 - sol.r1) / T::lit(2.0);
        let mid = (sol.r2 + sol.r1) / T::lit(2.0);
        let mut integral = T::zero();
        for &(x, w) in &nodes {
            let r = mid + half * x;
            integral += w * half * surface * r.powi(d as i32 - 1) * sphere_average(d, r, h);
        }
        let density = sol.problem.lambda / sol.problem.amplitude;
        worst = worst.max((h0 - density * integral).abs());
    }
    Ok(worst)
}
