//! Executable checks on stabilized states: symmetry, directional
//! monotonicity, region sizes and regularity, super-solution minimality,
//! convergence to the radial profile and the `n(m)` calibration search.
//!
//! Field-level checkers take a plain odometer field so they can be exercised
//! on synthetic inputs; the state-level wrappers enforce the single-source
//! precondition and read the odometer with its compensation term.

use serde::Serialize;

use crate::analytic::{solve_radial, RadialProblem, RadialSolution};
use crate::engine::{stabilize, SandpileState, Schedule, StabilizeOptions};
use crate::error::{Result, SandpileError};
use crate::lattice::{LatticeField, Site};
use crate::scalar::Real;

/// Relative tolerance used by the symmetry, monotonicity and minimality
/// checks, as a fraction of `max u`.
pub const RELATIVE_TOLERANCE: f64 = 1e-9;

/// Default inner cutoff for the regularity measurements, as a fraction of
/// `n^{1/d}`.
pub const DEFAULT_R0_FRAC: f64 = 0.05;

/// Tolerance of the radial oracle used as the comparison target.
const ORACLE_TOL: f64 = 1e-13;

/// Slack allowed when asserting that the scaling error does not increase.
const SCALING_SLACK: f64 = 1.1;

/// Reflection of `Z^d` across one of the `d²` mirror hyperplanes of the cube
/// centred at the origin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Reflection {
    /// `x_i ↦ -x_i`.
    Negate(usize),
    /// `x_i ↔ x_j`.
    Swap(usize, usize),
    /// `(x_i, x_j) ↦ (-x_j, -x_i)`.
    AntiSwap(usize, usize),
}

impl Reflection {
    pub fn apply(self, x: &mut [i64]) {
        match self {
            Reflection::Negate(i) => x[i] = -x[i],
            Reflection::Swap(i, j) => x.swap(i, j),
            Reflection::AntiSwap(i, j) => {
                let (a, b) = (x[i], x[j]);
                x[i] = -b;
                x[j] = -a;
            }
        }
    }

    /// All `d²` reflections.
    pub fn cube_symmetries(d: usize) -> Vec<Reflection> {
        let mut out: Vec<Reflection> = (0..d).map(Reflection::Negate).collect();
        for i in 0..d {
            for j in i + 1..d {
                out.push(Reflection::Swap(i, j));
                out.push(Reflection::AntiSwap(i, j));
            }
        }
        out
    }
}

/// Lattice vectors normal to the mirror hyperplanes: `±e_i` and `±e_i ± e_j`.
pub fn normal_directions(d: usize) -> Vec<Vec<i64>> {
    let mut out = Vec::new();
    for i in 0..d {
        for s in [1, -1] {
            let mut v = vec![0; d];
            v[i] = s;
            out.push(v);
        }
        for j in i + 1..d {
            for (a, b) in [(1, 1), (1, -1), (-1, 1), (-1, -1)] {
                let mut v = vec![0; d];
                v[i] = a;
                v[j] = b;
                out.push(v);
            }
        }
    }
    out
}

fn norm_sq(x: &[i64]) -> i64 {
    x.iter().map(|c| c * c).sum()
}

fn norm(x: &[i64]) -> f64 {
    (norm_sq(x) as f64).sqrt()
}

fn require_single_origin<T: Real>(s: &SandpileState<T>, what: &str) -> Result<()> {
    match s.sources() {
        [(x, _)] if x.is_origin() => Ok(()),
        _ => Err(SandpileError::NotApplicable(format!("{what} requires a single source at the origin"))),
    }
}

fn tolerance<T: Real>(u: &LatticeField<T>) -> T {
    T::lit(RELATIVE_TOLERANCE) * u.max_value()
}

/// Visits every site of `[-r, r]^d` in index order.
fn for_each_site(d: usize, r: i64, mut f: impl FnMut(&[i64])) {
    let mut x = vec![-r; d];
    loop {
        f(&x);
        let mut axis = 0;
        loop {
            if axis == d {
                return;
            }
            if x[axis] < r {
                x[axis] += 1;
                break;
            }
            x[axis] = -r;
            axis += 1;
        }
    }
}

/// `max_x |u(x) - u(Rx)|` over the given reflections.
pub fn reflection_error<T: Real>(u: &LatticeField<T>, reflections: &[Reflection]) -> T {
    let mut worst = T::zero();
    let mut y = vec![0; u.dim()];
    for_each_site(u.dim(), u.radius(), |x| {
        let ux = u.get_coords(x);
        for r in reflections {
            y.copy_from_slice(x);
            r.apply(&mut y);
            worst = worst.max((ux - u.get_coords(&y)).abs());
        }
    });
    worst
}

/// Reflections that map the source configuration of `s` onto itself.
pub fn source_symmetries<T: Real>(s: &SandpileState<T>) -> Vec<Reflection> {
    Reflection::cube_symmetries(s.dim())
        .into_iter()
        .filter(|r| {
            s.sources().iter().all(|(x, mass)| {
                let mut y = x.coords().to_vec();
                r.apply(&mut y);
                s.sources().iter().any(|(z, w)| z.coords() == y.as_slice() && w == mass)
            })
        })
        .collect()
}

/// Largest deviation from mirror symmetry over all `d²` reflections.
pub fn check_symmetry<T: Real>(s: &SandpileState<T>) -> Result<T> {
    require_single_origin(s, "symmetry check")?;
    Ok(reflection_error(&s.odometer_field(), &Reflection::cube_symmetries(s.dim())))
}

/// Symmetry error over the reflections that preserve the sources, together
/// with those reflections. Applies to any source configuration.
pub fn check_source_symmetry<T: Real>(s: &SandpileState<T>) -> (T, Vec<Reflection>) {
    let refl = source_symmetries(s);
    (reflection_error(&s.odometer_field(), &refl), refl)
}

/// Number of ordered pairs `(x, x + v)` with `v` a mirror normal,
/// `|x + v| >= |x|` and `u(x + v) > u(x) + tol`.
pub fn monotonicity_violations<T: Real>(u: &LatticeField<T>, tol: T) -> usize {
    let dirs = normal_directions(u.dim());
    let mut count = 0;
    let mut y = vec![0; u.dim()];
    // Pairs whose outer point lies just outside the box still count.
    for_each_site(u.dim(), u.radius() + 1, |x| {
        let ux = u.get_coords(x);
        let nx = norm_sq(x);
        for v in &dirs {
            for k in 0..y.len() {
                y[k] = x[k] + v[k];
            }
            if norm_sq(&y) >= nx && u.get_coords(&y) > ux + tol {
                count += 1;
            }
        }
    });
    count
}

/// Monotonicity violations at tolerance `1e-9 max u`.
pub fn check_monotonicity<T: Real>(s: &SandpileState<T>) -> Result<usize> {
    require_single_origin(s, "monotonicity check")?;
    let u = s.odometer_field();
    Ok(monotonicity_violations(&u, tolerance(&u)))
}

/// True if, in each of the `2d` cones `±x_a >= |x_i|`, every line parallel
/// to `e_a` meets the outer boundary of `{u > 0}` at most once, after a run
/// of sites of `{u > 0}` and before the exterior.
pub fn boundary_is_graph<T: Real>(u: &LatticeField<T>) -> bool {
    let d = u.dim();
    let reach = u.radius() + 1;
    let positive = |c: &[i64]| u.get_coords(c) > T::zero();
    let mut scratch = vec![0; d];
    let mut on_boundary = |c: &[i64]| {
        if positive(c) {
            return false;
        }
        scratch.copy_from_slice(c);
        for k in 0..d {
            for s in [-1, 1] {
                scratch[k] += s;
                let hit = positive(&scratch);
                scratch[k] -= s;
                if hit {
                    return true;
                }
            }
        }
        false
    };
    #[derive(PartialEq)]
    enum Phase {
        Inside,
        Crossed,
        Outside,
    }
    let mut x = vec![0; d];
    for axis in 0..d {
        for sign in [1i64, -1] {
            let mut ok = true;
            for_each_site(d - 1, reach, |base| {
                if !ok {
                    return;
                }
                let mut k = 0;
                for (i, c) in x.iter_mut().enumerate() {
                    if i != axis {
                        *c = base[k];
                        k += 1;
                    }
                }
                let start = base.iter().map(|c| c.abs()).max().unwrap_or(0);
                let mut phase = None;
                for t in start..=reach + 1 {
                    x[axis] = sign * t;
                    let here = if positive(&x) {
                        Phase::Inside
                    } else if on_boundary(&x) {
                        Phase::Crossed
                    } else {
                        Phase::Outside
                    };
                    let legal = match (&phase, &here) {
                        (None, _) => true,
                        (Some(Phase::Inside), Phase::Inside | Phase::Crossed) => true,
                        (Some(Phase::Crossed | Phase::Outside), Phase::Outside) => true,
                        _ => false,
                    };
                    if !legal {
                        ok = false;
                        return;
                    }
                    phase = Some(here);
                }
            });
            if !ok {
                return false;
            }
        }
    }
    true
}

pub fn check_boundary_graph<T: Real>(s: &SandpileState<T>) -> Result<bool> {
    require_single_origin(s, "boundary graph check")?;
    Ok(boundary_is_graph(&s.odometer_field()))
}

/// Whether `f`, subharmonic on the finite set `region`, attains its maximum
/// over `region ∪ ∂region` on the outer boundary `∂region`. Returns `None`
/// when `Δ¹f >= -tol` fails somewhere in `region`.
pub fn maximum_principle<T: Real>(f: &LatticeField<T>, region: &[Site], tol: T) -> Option<bool> {
    use std::collections::HashSet;
    let inside: HashSet<&Site> = region.iter().collect();
    let mut max_in = T::neg_infinity();
    let mut max_bd = T::neg_infinity();
    for x in region {
        if f.laplacian(x) < -tol {
            return None;
        }
        max_in = max_in.max(f.get(x));
        for y in crate::lattice::neighbors(x) {
            if !inside.contains(&y) {
                max_bd = max_bd.max(f.get(&y));
            }
        }
    }
    Some(max_in <= max_bd + tol)
}

/// Maximum principle for the odometer on `{u > 0}` minus the sources, where
/// `Δ¹u = μ >= 0`.
pub fn check_maximum_principle<T: Real>(s: &SandpileState<T>) -> Option<bool> {
    let u = s.odometer_field();
    let region: Vec<Site> = s
        .visited_sites()
        .into_iter()
        .filter(|(x, w, _)| *w > T::zero() && s.mu0().get(x) == T::zero())
        .map(|(x, _, _)| x)
        .collect();
    maximum_principle(&u, &region, tolerance(&u))
}

/// Measured shape and regularity quantities of a single-source run.
#[derive(Clone, Debug, Serialize)]
pub struct ShapeReport {
    /// Smallest `|x|` over sites outside `V0`.
    pub inradius_v0: f64,
    /// Largest `|x|` over `V0`.
    pub outradius_v0: f64,
    /// Thickness of `V1` along the rays through `{-1, 0, 1}^d`.
    pub annulus_min: f64,
    pub annulus_max: f64,
    /// Largest `|x|` over `V`.
    pub support_radius: f64,
    /// Extent of `V` along the same rays.
    pub ray_radius_min: f64,
    pub ray_radius_max: f64,
    pub boundary_count: usize,
    pub boundary_bound: f64,
    pub symmetry_max_err: f64,
    pub monotonicity_violations: usize,
    /// Regularity cutoff radius in lattice units.
    pub r0: f64,
    /// Largest `|u(x + e) - u(x)|` with `|x| >= r0`.
    pub lipschitz_max: f64,
    /// Largest `|u(x + e + e') - u(x + e) - u(x + e') + u(x)|` with `|x| >= r0`.
    pub c11_max: f64,
}

/// Directions `{-1, 0, 1}^d \ {0}`.
fn ray_directions(d: usize) -> Vec<Vec<i64>> {
    let mut out = Vec::new();
    for_each_site(d, 1, |v| {
        if v.iter().any(|&c| c != 0) {
            out.push(v.to_vec());
        }
    });
    out
}

pub fn measure_regions<T: Real>(s: &SandpileState<T>, r0_frac: f64) -> Result<ShapeReport> {
    require_single_origin(s, "region measurement")?;
    let d = s.dim();
    let u = s.odometer_field();
    let kappa = s.kappa();
    let visited = s.visited();
    let is_visited = |c: &[i64]| visited.index_of(c).is_some_and(|i| visited.values()[i]);

    let mut inradius = f64::INFINITY;
    let mut outradius: f64 = 0.0;
    let mut support: f64 = 0.0;
    for_each_site(d, u.radius() + 1, |x| {
        let r = norm(x);
        if u.get_coords(x) > kappa {
            outradius = outradius.max(r);
        } else {
            inradius = inradius.min(r);
        }
        if is_visited(x) {
            support = support.max(r);
        }
    });

    let (mut annulus_min, mut annulus_max) = (f64::INFINITY, 0.0f64);
    let (mut ray_min, mut ray_max) = (f64::INFINITY, 0.0f64);
    for v in ray_directions(d) {
        let step = norm(&v);
        let (mut last_v0, mut last_v) = (None, 0i64);
        let mut x = vec![0; d];
        for t in 0..=u.radius() {
            for k in 0..d {
                x[k] = t * v[k];
            }
            if u.get_coords(&x) > kappa {
                last_v0 = Some(t);
            }
            if is_visited(&x) {
                last_v = t;
            }
        }
        let thickness = (last_v - last_v0.unwrap_or(0)) as f64 * step;
        annulus_min = annulus_min.min(thickness);
        annulus_max = annulus_max.max(thickness);
        ray_min = ray_min.min(last_v as f64 * step);
        ray_max = ray_max.max(last_v as f64 * step);
    }

    let r0 = r0_frac * s.n().as_f64().powf(1.0 / d as f64);
    let (mut lipschitz, mut c11) = (0.0f64, 0.0f64);
    let mut y = vec![0; d];
    let mut z = vec![0; d];
    let mut w = vec![0; d];
    for_each_site(d, u.radius(), |x| {
        if norm(x) < r0 {
            return;
        }
        let ux = u.get_coords(x);
        for a in 0..d {
            y.copy_from_slice(x);
            y[a] += 1;
            let uy = u.get_coords(&y);
            lipschitz = lipschitz.max((uy - ux).abs().as_f64());
            for b in a..d {
                z.copy_from_slice(x);
                z[b] += 1;
                w.copy_from_slice(&y);
                w[b] += 1;
                let second = u.get_coords(&w) - uy - u.get_coords(&z) + ux;
                c11 = c11.max(second.abs().as_f64());
            }
        }
    });

    let (boundary_count, bound) = s.boundary_count_bound();
    Ok(ShapeReport {
        inradius_v0: if outradius > 0.0 || u.get_coords(&vec![0; d]) > kappa { inradius } else { 0.0 },
        outradius_v0: outradius,
        annulus_min,
        annulus_max,
        support_radius: support,
        ray_radius_min: ray_min,
        ray_radius_max: ray_max,
        boundary_count,
        boundary_bound: bound.as_f64(),
        symmetry_max_err: check_symmetry(s)?.as_f64(),
        monotonicity_violations: check_monotonicity(s)?,
        r0,
        lipschitz_max: lipschitz,
        c11_max: c11,
    })
}

/// Outcome of testing a candidate field against the super-solution
/// inequalities of the run's initial data.
#[derive(Clone, Debug, Serialize)]
pub struct SupersolutionReport {
    /// No violation of either inequality and `w >= 0`.
    pub accepted: bool,
    /// Sites with `Δ¹w + μ₀ > m + tol`.
    pub violations_i: usize,
    /// Sites of `{w > 0}` with `Δ¹w + μ₀ > m 𝕀{w <= κ} + tol`.
    pub violations_ii: usize,
    pub negative_sites: usize,
    /// Largest amount by which either inequality fails.
    pub worst_violation: f64,
    /// `max (u - w)` over the union of both supports.
    pub minimality_gap: f64,
    pub max_u: f64,
}

impl SupersolutionReport {
    /// An accepted field must dominate the odometer up to `rel_tol max u`.
    pub fn respects_minimality(&self, rel_tol: f64) -> bool {
        !self.accepted || self.minimality_gap <= rel_tol * self.max_u
    }
}

/// Default inequality tolerance for a state stabilized with the default
/// stopping threshold `1e-12 n`.
pub fn supersolution_tolerance<T: Real>(s: &SandpileState<T>) -> T {
    T::lit(RELATIVE_TOLERANCE) * s.m() + T::lit(2e-12) * s.n()
}

/// Evaluates both super-solution inequalities for `w` against the initial
/// data of `s`, and compares `w` with the odometer of `s`.
pub fn check_supersolution<T: Real>(w: &LatticeField<T>, s: &SandpileState<T>, tol: T) -> Result<SupersolutionReport> {
    if w.dim() != s.dim() {
        return Err(SandpileError::InvalidConfig(format!(
            "candidate field has dimension {}, state has {}",
            w.dim(),
            s.dim()
        )));
    }
    let d = s.dim();
    let (m, kappa) = (s.m(), s.kappa());
    let two_d = T::from_count(2 * d);
    let mut report = SupersolutionReport {
        accepted: false,
        violations_i: 0,
        violations_ii: 0,
        negative_sites: 0,
        worst_violation: 0.0,
        minimality_gap: 0.0,
        max_u: 0.0,
    };
    let mut y = vec![0; d];
    let record = |excess: T, counter: &mut usize, worst: &mut f64| {
        if excess > tol {
            *counter += 1;
            *worst = worst.max(excess.as_f64());
        }
    };
    for_each_site(d, w.radius() + 1, |x| {
        let wx = w.get_coords(x);
        if wx < T::zero() {
            report.negative_sites += 1;
        }
        let mut acc = T::zero();
        y.copy_from_slice(x);
        for k in 0..d {
            for step in [-1, 1] {
                y[k] += step;
                acc += w.get_coords(&y) - wx;
                y[k] -= step;
            }
        }
        let lhs = acc / two_d + s.mu0().get_coords(x);
        record(lhs - m, &mut report.violations_i, &mut report.worst_violation);
        if wx > T::zero() {
            let cap = if wx <= kappa { m } else { T::zero() };
            record(lhs - cap, &mut report.violations_ii, &mut report.worst_violation);
        }
    });
    // Sources beyond the candidate's box see Δ¹w = 0 there.
    for (x, mass) in s.sources() {
        if x.coords().iter().any(|c| c.abs() > w.radius() + 1) {
            record(*mass - m, &mut report.violations_i, &mut report.worst_violation);
        }
    }
    report.accepted = report.violations_i == 0 && report.violations_ii == 0 && report.negative_sites == 0;

    let u = s.odometer_field();
    report.max_u = u.max_value().as_f64();
    let mut gap = T::neg_infinity();
    for_each_site(d, u.radius().max(w.radius()), |x| {
        gap = gap.max(u.get_coords(x) - w.get_coords(x));
    });
    report.minimality_gap = gap.as_f64();
    Ok(report)
}

/// Distance between one rescaled run and the radial profile.
#[derive(Clone, Debug, Serialize)]
pub struct ScalingSample {
    pub n: f64,
    /// `sup_{|hx| >= rho} |h² u(x) - u₀(hx)|` with `h = n^{-1/d}`.
    pub sup_err: f64,
    /// Largest `h|x|` over `V`.
    pub support_radius: f64,
    /// Largest `h|x|` over `V0`.
    pub core_radius: f64,
}

pub fn scaling_sample<T: Real>(s: &SandpileState<T>, profile: &RadialSolution<f64>, rho: f64) -> Result<ScalingSample> {
    let d = s.dim();
    let n = s.n().as_f64();
    let h = n.powf(-1.0 / d as f64);
    let u = s.odometer_field();
    let kappa = s.kappa();
    let visited = s.visited();
    let mut sample = ScalingSample { n, sup_err: 0.0, support_radius: 0.0, core_radius: 0.0 };
    let mut failure = None;
    for_each_site(d, u.radius(), |x| {
        let r = h * norm(x);
        let ux = u.get_coords(x);
        if visited.get_coords(x) {
            sample.support_radius = sample.support_radius.max(r);
        }
        if ux > kappa {
            sample.core_radius = sample.core_radius.max(r);
        }
        if r >= rho {
            match profile.eval(r) {
                Ok(v) => sample.sup_err = sample.sup_err.max((h * h * ux.as_f64() - v).abs()),
                Err(e) => failure = Some(e),
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(sample),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingReport {
    pub d: usize,
    pub m: f64,
    pub rho: f64,
    pub n_values: Vec<f64>,
    pub sup_err: Vec<f64>,
    pub support_radius: Vec<f64>,
    pub core_radius: Vec<f64>,
    /// Radii of the radial profile used as the target.
    pub oracle_r1: f64,
    pub oracle_r2: f64,
    /// Each error is at most 10% above its predecessor.
    pub non_increasing: bool,
}

impl ScalingReport {
    pub fn from_samples(d: usize, m: f64, rho: f64, profile: &RadialSolution<f64>, samples: &[ScalingSample]) -> Self {
        let sup_err: Vec<f64> = samples.iter().map(|s| s.sup_err).collect();
        ScalingReport {
            d,
            m,
            rho,
            n_values: samples.iter().map(|s| s.n).collect(),
            non_increasing: sup_err.windows(2).all(|w| w[1] <= SCALING_SLACK * w[0]),
            sup_err,
            support_radius: samples.iter().map(|s| s.support_radius).collect(),
            core_radius: samples.iter().map(|s| s.core_radius).collect(),
            oracle_r1: profile.r1,
            oracle_r2: profile.r2,
        }
    }
}

/// The scaled radial profile for threshold `m`.
pub fn scaled_profile(d: usize, m: f64) -> Result<RadialSolution<f64>> {
    solve_radial(&RadialProblem::scaled(d, m)?, ORACLE_TOL)
}

fn stabilized_single<T: Real>(d: usize, n: T, m: T, opts: &StabilizeOptions<T>) -> Result<SandpileState<T>> {
    let mut s = SandpileState::new(d, &[(Site::origin(d), n)], m)?;
    stabilize(&mut s, Schedule::sweep(), opts)?;
    Ok(s)
}

/// Stabilizes a single source of each mass in `n_list` and compares the
/// rescaled odometers with the radial profile outside `B(0, rho)`.
pub fn scaling_convergence<T: Real>(
    d: usize,
    m: T,
    n_list: &[T],
    rho: f64,
    opts: &StabilizeOptions<T>,
) -> Result<ScalingReport> {
    if !(rho > 0.0) {
        return Err(SandpileError::InvalidConfig(format!("rho must be positive, got {rho}")));
    }
    if n_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(SandpileError::InvalidConfig("n values must be increasing".into()));
    }
    let profile = scaled_profile(d, m.as_f64())?;
    let samples = n_list
        .iter()
        .map(|&n| scaling_sample(&stabilized_single(d, n, m, opts)?, &profile, rho))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScalingReport::from_samples(d, m.as_f64(), rho, &profile, &samples))
}

/// Limits of the doubling search in [`calibrate_f`].
#[derive(Clone, Debug)]
pub struct CalibrationBudget {
    pub n_start: f64,
    /// Largest mass tried before the search is declared truncated.
    pub n_max: f64,
}

impl Default for CalibrationBudget {
    fn default() -> Self {
        CalibrationBudget { n_start: 64.0, n_max: 1e6 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CalibrationEntry {
    pub m: f64,
    /// First mass of the doubling search meeting the tolerance.
    pub raw_n: f64,
    /// Running maximum of `raw_n`, so `n(m)` is non-decreasing.
    pub n: f64,
    pub sup_err: f64,
    pub rho: f64,
    pub tol: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Calibration {
    pub d: usize,
    pub entries: Vec<CalibrationEntry>,
    /// Set when the search for some `m` exceeded the budget; entries stop
    /// before that `m`.
    pub truncated: bool,
    pub truncated_at: Option<f64>,
}

impl Calibration {
    /// `F(n)`: the largest calibrated `m` with `n(m) <= n`.
    pub fn f_of_n(&self, n: f64) -> Option<f64> {
        self.entries.iter().filter(|e| e.n <= n).map(|e| e.m).last()
    }
}

/// For each `m`, doubles `n` from the budget's start until the rescaled
/// odometer is within `tol_of_m(m)` of the radial profile outside
/// `B(0, rho_of_m(m))`.
pub fn calibrate_f(
    d: usize,
    m_list: &[f64],
    rho_of_m: impl Fn(f64) -> f64,
    tol_of_m: impl Fn(f64) -> f64,
    budget: &CalibrationBudget,
    opts: &StabilizeOptions<f64>,
) -> Result<Calibration> {
    if m_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(SandpileError::InvalidConfig("threshold values must be increasing".into()));
    }
    if !(budget.n_start > 0.0 && budget.n_max >= budget.n_start) {
        return Err(SandpileError::InvalidConfig("calibration budget must satisfy 0 < n_start <= n_max".into()));
    }
    let mut out = Calibration { d, entries: Vec::new(), truncated: false, truncated_at: None };
    let mut floor: f64 = 0.0;
    for &m in m_list {
        let (rho, tol) = (rho_of_m(m), tol_of_m(m));
        let profile = scaled_profile(d, m)?;
        let mut n = budget.n_start;
        let mut found = None;
        while n <= budget.n_max {
            let sample = scaling_sample(&stabilized_single(d, n, m, opts)?, &profile, rho)?;
            if sample.sup_err <= tol {
                found = Some(sample.sup_err);
                break;
            }
            n *= 2.0;
        }
        match found {
            Some(sup_err) => {
                floor = floor.max(n);
                out.entries.push(CalibrationEntry { m, raw_n: n, n: floor, sup_err, rho, tol });
            }
            None => {
                out.truncated = true;
                out.truncated_at = Some(m);
                break;
            }
        }
    }
    Ok(out)
}

/// One pass/fail line of a [`VerifyReport`].
#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub pass: bool,
    pub value: f64,
    pub limit: f64,
}

impl CheckResult {
    fn at_most(name: &'static str, value: f64, limit: f64) -> Self {
        CheckResult { name, pass: value <= limit, value, limit }
    }

    fn holds(name: &'static str, ok: bool) -> Self {
        CheckResult { name, pass: ok, value: if ok { 1.0 } else { 0.0 }, limit: 1.0 }
    }
}

/// Every check that applies to a stabilized state.
#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub schema: u32,
    pub d: usize,
    pub n: f64,
    pub m: f64,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
    /// Present for a single source at the origin.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shape: Option<ShapeReport>,
}

/// Runs the invariant, symmetry, monotonicity, boundary, super-solution and
/// maximum-principle checks. Single-source-only checks are skipped for other
/// configurations; symmetry is then checked over the reflections that fix
/// the sources.
pub fn verify_state<T: Real>(s: &SandpileState<T>, eps_stop: T) -> Result<VerifyReport> {
    let (n, m) = (s.n().as_f64(), s.m().as_f64());
    let u = s.odometer_field();
    let scale = u.max_value().as_f64();
    let rel = RELATIVE_TOLERANCE;
    let mut checks = vec![
        CheckResult::at_most("mass_conservation", s.mass_error().as_f64(), rel * n),
        CheckResult::at_most("laplace_identity", s.laplace_identity_error().as_f64(), rel * m),
        CheckResult::at_most("stability", s.max_excess().as_f64(), eps_stop.as_f64()),
    ];
    let (count, bound) = s.boundary_count_bound();
    checks.push(CheckResult::at_most("boundary_count", count as f64, bound.as_f64()));

    let single = require_single_origin(s, "").is_ok();
    let shape = if single {
        let shape = measure_regions(s, DEFAULT_R0_FRAC)?;
        checks.push(CheckResult::at_most("symmetry", shape.symmetry_max_err, rel * scale));
        checks.push(CheckResult::at_most("monotonicity", shape.monotonicity_violations as f64, 0.0));
        checks.push(CheckResult::holds("boundary_graph", boundary_is_graph(&u)));
        Some(shape)
    } else {
        let (err, _) = check_source_symmetry(s);
        checks.push(CheckResult::at_most("source_symmetry", err.as_f64(), rel * scale));
        None
    };

    let tol = supersolution_tolerance(s);
    let sup = check_supersolution(&u, s, tol)?;
    checks.push(CheckResult { name: "odometer_supersolution", pass: sup.accepted, value: sup.worst_violation, limit: tol.as_f64() });
    checks.push(CheckResult::holds("maximum_principle", check_maximum_principle(s) == Some(true)));

    Ok(VerifyReport {
        schema: crate::checkpoint::SCHEMA_VERSION,
        d: s.dim(),
        n,
        m,
        passed: checks.iter().all(|c| c.pass),
        checks,
        shape,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::StabilizeOptions;

    fn run(n: f64, m: f64) -> SandpileState<f64> {
        stabilized_single(2, n, m, &StabilizeOptions::default()).unwrap()
    }

    fn paraboloid(radius: i64) -> LatticeField<f64> {
        LatticeField::from_fn(2, radius, |x| 1000.0 - x.norm_sq() as f64).unwrap()
    }

    fn ball(d: usize, radius: i64, r: i64) -> LatticeField<f64> {
        LatticeField::from_fn(d, radius, |x| if x.norm_sq() <= r * r { 1.0 } else { 0.0 }).unwrap()
    }

    #[test]
    fn reflections_are_involutions() {
        for d in 2..=4 {
            let refl = Reflection::cube_symmetries(d);
            assert_eq!(refl.len(), d * d);
            let x: Vec<i64> = (1..=d as i64).map(|k| 3 * k - 7).collect();
            for r in refl {
                let mut y = x.clone();
                r.apply(&mut y);
                assert_eq!(norm_sq(&y), norm_sq(&x));
                r.apply(&mut y);
                assert_eq!(y, x);
            }
        }
        assert_eq!(normal_directions(3).len(), 6 + 12);
    }

    #[test]
    fn symmetry_of_a_run_and_of_a_corrupted_copy() {
        let mut s = run(1e4, 10.0);
        let scale = s.u().max_value();
        assert!(check_symmetry(&s).unwrap() <= 1e-9 * scale);
        let x = Site::from([7, 3]);
        let v = s.odometer_mut().get(&x);
        s.odometer_mut().set(&x, v + 1.0);
        assert!(check_symmetry(&s).unwrap() >= 0.5);
    }

    #[test]
    fn zero_odometer_is_symmetric() {
        let s = SandpileState::new(2, &[(Site::origin(2), 3.0)], 10.0).unwrap();
        assert_eq!(check_symmetry(&s).unwrap(), 0.0);
        assert_eq!(check_monotonicity(&s).unwrap(), 0);
    }

    #[test]
    fn multi_source_checks_are_not_applicable() {
        let s = SandpileState::new(2, &[(Site::from([-3, 0]), 50.0), (Site::from([3, 0]), 50.0)], 1.0).unwrap();
        assert!(matches!(check_symmetry(&s), Err(SandpileError::NotApplicable(_))));
        assert!(matches!(check_monotonicity(&s), Err(SandpileError::NotApplicable(_))));
        assert!(matches!(check_boundary_graph(&s), Err(SandpileError::NotApplicable(_))));
        let (_, refl) = check_source_symmetry(&s);
        assert_eq!(refl, vec![Reflection::Negate(0), Reflection::Negate(1)]);
    }

    #[test]
    fn monotonicity_on_synthetic_fields() {
        let f = paraboloid(10);
        assert_eq!(monotonicity_violations(&f, 0.0), 0);
        // (4,1) lifted between its inner partners (4,0) and (3,2).
        let mut g = f.clone();
        g.set(&Site::from([4, 1]), 984.5);
        assert_eq!(monotonicity_violations(&g, 0.0), 1);
    }

    #[test]
    fn monotonicity_of_a_run() {
        let s = run(1e4, 10.0);
        assert_eq!(check_monotonicity(&s).unwrap(), 0);
    }

    #[test]
    fn boundary_graph_on_synthetic_fields() {
        for r in [1, 5, 8, 13] {
            assert!(boundary_is_graph(&ball(2, 16, r)), "disc {r}");
        }
        assert!(boundary_is_graph(&ball(3, 9, 6)));
        let mut dimple = ball(2, 16, 8);
        dimple.set(&Site::from([0, 3]), 0.0);
        assert!(!boundary_is_graph(&dimple));
        let mut bump = ball(2, 16, 8);
        bump.set(&Site::from([1, 11]), 1.0);
        assert!(!boundary_is_graph(&bump));
    }

    #[test]
    fn boundary_graph_of_a_run() {
        assert!(check_boundary_graph(&run(1e4, 10.0)).unwrap());
    }

    #[test]
    fn maximum_principle_predicate() {
        let s = run(2000.0, 4.0);
        assert_eq!(check_maximum_principle(&s), Some(true));
        // A strictly superharmonic field fails the hypothesis.
        let f = paraboloid(6);
        let region: Vec<Site> = (0..f.len()).map(|i| f.site_of(i)).filter(|x| x.norm_sq() < 9).collect();
        assert_eq!(maximum_principle(&f, &region, 0.0), None);
        let g = f.clone();
        let neg = LatticeField::from_fn(2, 6, |x| -g.get(x)).unwrap();
        assert_eq!(maximum_principle(&neg, &region, 0.0), Some(true));
    }

    #[test]
    fn region_report_is_consistent() {
        let s = run(1e4, 10.0);
        let r = measure_regions(&s, DEFAULT_R0_FRAC).unwrap();
        assert!(r.inradius_v0 <= r.outradius_v0);
        assert!(r.annulus_min <= r.annulus_max);
        assert!(r.outradius_v0 < r.support_radius);
        assert!(r.ray_radius_min <= r.ray_radius_max && r.ray_radius_max <= r.support_radius);
        assert!((r.boundary_count as f64) <= r.boundary_bound);
        assert_eq!(r.monotonicity_violations, 0);
        assert!(r.lipschitz_max > 0.0 && r.c11_max > 0.0);
    }

    #[test]
    fn odometer_is_an_accepted_minimal_supersolution() {
        let s = run(1e4, 10.0);
        let tol = supersolution_tolerance(&s);
        let rep = check_supersolution(&s.odometer_field(), &s, tol).unwrap();
        assert!(rep.accepted, "{rep:?}");
        assert!(rep.minimality_gap.abs() <= 1e-12 * rep.max_u);

        let zero = LatticeField::new(2, 4).unwrap();
        let rep = check_supersolution(&zero, &s, tol).unwrap();
        assert!(!rep.accepted && rep.violations_i >= 1);
        assert!(rep.respects_minimality(RELATIVE_TOLERANCE));

        // Shrinking the odometer near the edge breaks inequality (i).
        let mut lowered = s.odometer_field();
        for v in lowered.values_mut() {
            *v *= 0.9;
        }
        let rep = check_supersolution(&lowered, &s, tol).unwrap();
        assert!(!rep.accepted);
        assert!(rep.minimality_gap > 0.0);
    }

    #[test]
    fn negative_candidates_are_rejected() {
        let s = run(100.0, 10.0);
        let mut w = s.odometer_field();
        w.values_mut()[0] = -1.0;
        let rep = check_supersolution(&w, &s, 1e-9).unwrap();
        assert_eq!(rep.negative_sites, 1);
        assert!(!rep.accepted);
    }

    #[test]
    fn full_report_passes_and_flags_corruption() {
        let mut s = run(3000.0, 4.0);
        let eps = StabilizeOptions::<f64>::default().resolved_eps(s.n());
        let rep = verify_state(&s, eps).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert!(rep.shape.is_some());
        let x = Site::from([3, 2]);
        let v = s.odometer_mut().get(&x);
        s.odometer_mut().set(&x, v * 1.01);
        let rep = verify_state(&s, eps).unwrap();
        assert!(!rep.passed);
        let failed: Vec<_> = rep.checks.iter().filter(|c| !c.pass).map(|c| c.name).collect();
        assert!(failed.contains(&"laplace_identity") && failed.contains(&"symmetry"), "{failed:?}");
    }

    #[test]
    fn multi_source_report_uses_source_symmetry() {
        let mut s = SandpileState::new(2, &[(Site::from([-6, 0]), 300.0), (Site::from([6, 0]), 300.0)], 2.0).unwrap();
        stabilize(&mut s, Schedule::sweep(), &StabilizeOptions::default()).unwrap();
        let rep = verify_state(&s, 1e-12 * 600.0).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert!(rep.shape.is_none());
        assert!(rep.checks.iter().any(|c| c.name == "source_symmetry"));
    }

    #[test]
    fn scaling_report_flags_growth() {
        let p = scaled_profile(2, 10.0).unwrap();
        let mk = |n: f64, e: f64| ScalingSample { n, sup_err: e, support_radius: 0.0, core_radius: 0.0 };
        let ok = ScalingReport::from_samples(2, 10.0, 0.1, &p, &[mk(1.0, 1.0), mk(2.0, 1.05), mk(3.0, 0.5)]);
        assert!(ok.non_increasing);
        let bad = ScalingReport::from_samples(2, 10.0, 0.1, &p, &[mk(1.0, 1.0), mk(2.0, 1.2)]);
        assert!(!bad.non_increasing);
    }

    #[test]
    fn small_scaling_run() {
        let rep = scaling_convergence(2, 10.0, &[1e3, 4e3], 0.1, &StabilizeOptions::default()).unwrap();
        assert_eq!(rep.sup_err.len(), 2);
        assert!(rep.sup_err.iter().all(|e| e.is_finite() && *e >= 0.0));
        assert!(matches!(
            scaling_convergence(2, 10.0, &[4e3, 1e3], 0.1, &StabilizeOptions::default()),
            Err(SandpileError::InvalidConfig(_))
        ));
    }

    #[test]
    fn calibration_is_monotone_and_truncates() {
        let opts = StabilizeOptions::default();
        let budget = CalibrationBudget { n_start: 32.0, n_max: 1e5 };
        let cal = calibrate_f(2, &[2.0, 4.0], |m| 1.0 / m, |m| 1.0 / m, &budget, &opts).unwrap();
        assert!(!cal.truncated);
        assert!(cal.entries.windows(2).all(|w| w[0].n <= w[1].n));
        assert_eq!(cal.f_of_n(cal.entries[1].n), Some(4.0));
        let tight = CalibrationBudget { n_start: 32.0, n_max: 64.0 };
        let cut = calibrate_f(2, &[2.0, 4.0], |_| 0.1, |_| 1e-9, &tight, &opts).unwrap();
        assert!(cut.truncated && cut.entries.is_empty() && cut.truncated_at == Some(2.0));
    }
}
