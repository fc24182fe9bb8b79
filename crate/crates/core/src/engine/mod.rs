//! The divisible sandpile with threshold `m` and odometer cutoff
//! `κ = n^{2/d}/m`.
//!
//! A site `x` is unstable when `μ(x) > m` (it topples `μ(x) − m`) or when
//! `0 < μ(x) <= m` and `u(x) > κ` (it topples all of `μ(x)`). Toppling sends
//! `1/(2d)` of the excess to each neighbour and adds the excess to `u(x)`.
//! Every state satisfies `Δ¹u = μ − μ₀` and conserves total mass.
//!
//! The odometer is stored as an unevaluated sum `u + u_lo` so that the
//! Laplacian identity survives millions of increments to values of order
//! `n^{2/d}`.

mod multigrid;
mod stabilize;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SandpileError};
use crate::lattice::{Direction, LatticeField, Site};
use crate::scalar::{two_sum, Real};

pub use stabilize::{stabilize, StabilizeOptions, StabilizeOutcome, DEFAULT_BLOCK_INTERVAL, DEFAULT_MAX_TOPPLINGS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Synchronous sweeps: all excesses from one snapshot, then applied.
    Sweep,
    /// Sequential passes over the visited box in a fresh seeded random order.
    RandomInfinitive,
    /// Always topple the site with the largest excess.
    PriorityExcess,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Sweep => "sweep",
            ScheduleKind::RandomInfinitive => "random",
            ScheduleKind::PriorityExcess => "priority",
        }
    }
}

impl std::str::FromStr for ScheduleKind {
    type Err = SandpileError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sweep" => Ok(ScheduleKind::Sweep),
            "random" | "random_infinitive" => Ok(ScheduleKind::RandomInfinitive),
            "priority" | "priority_excess" => Ok(ScheduleKind::PriorityExcess),
            other => Err(SandpileError::Parse(format!("unknown schedule {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    /// Seed for [`ScheduleKind::RandomInfinitive`]; ignored otherwise.
    pub seed: u64,
}

impl Schedule {
    pub fn sweep() -> Self {
        Schedule { kind: ScheduleKind::Sweep, seed: 0 }
    }

    pub fn random(seed: u64) -> Self {
        Schedule { kind: ScheduleKind::RandomInfinitive, seed }
    }

    pub fn priority() -> Self {
        Schedule { kind: ScheduleKind::PriorityExcess, seed: 0 }
    }
}

/// Coupled mass, odometer and visited set.
#[derive(Clone, Debug)]
pub struct SandpileState<T> {
    mu0: LatticeField<T>,
    mu: LatticeField<T>,
    u: LatticeField<T>,
    u_lo: LatticeField<T>,
    visited: LatticeField<bool>,
    n: T,
    m: T,
    kappa: T,
    sources: Vec<(Site, T)>,
    /// Bounding box of the visited set.
    lo: Vec<i64>,
    hi: Vec<i64>,
}

/// The visited set and its split at the odometer cutoff.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Regions {
    pub v: Vec<Site>,
    /// `{u > κ}`, free of mass once stable.
    pub v0: Vec<Site>,
    /// `V \ V0`, where all the mass sits.
    pub v1: Vec<Site>,
}

fn validate_sources<T: Real>(d: usize, sources: &[(Site, T)], m: T) -> Result<Vec<(Site, T)>> {
    if d < 2 {
        return Err(SandpileError::InvalidConfig(format!("dimension must be at least 2, got {d}")));
    }
    if sources.is_empty() {
        return Err(SandpileError::InvalidConfig("at least one source is required".into()));
    }
    if !(m > T::zero() && m.is_finite()) {
        return Err(SandpileError::InvalidConfig(format!("threshold must be positive and finite, got {m}")));
    }
    let mut merged: Vec<(Site, T)> = Vec::new();
    for (x, mass) in sources {
        if x.dim() != d {
            return Err(SandpileError::InvalidConfig(format!("source {x} does not have {d} coordinates")));
        }
        if !(*mass > T::zero() && mass.is_finite()) {
            return Err(SandpileError::InvalidConfig(format!("source mass at {x} must be positive, got {mass}")));
        }
        match merged.iter_mut().find(|(y, _)| y == x) {
            Some((_, acc)) => *acc += *mass,
            None => merged.push((x.clone(), *mass)),
        }
    }
    Ok(merged)
}

/// Box radius that fits the final shape of a single source without growth.
fn initial_radius<T: Real>(d: usize, n: T, sources: &[(Site, T)]) -> i64 {
    let spread = sources.iter().flat_map(|(x, _)| x.coords().iter().map(|c| c.abs())).max().unwrap_or(0);
    let scale = (T::lit(0.5) * n.powf(T::one() / T::from_count(d))).ceil().as_f64() as i64;
    scale + spread + 2
}

/// `κ = n^{2/d}/m`.
pub fn odometer_cutoff<T: Real>(d: usize, n: T, m: T) -> T {
    n.powf(T::lit(2.0) / T::from_count(d)) / m
}

/// Mass a site emits when toppled by the drivers. Where rule (a) lifts the
/// odometer past `κ`, the rule (b) topple that must follow is merged into
/// it; otherwise rounding can leave `μ = m + δ` with `u > κ`, which the
/// literal rule (a) reports as a negligible excess although the site still
/// has to empty.
#[inline]
fn driver_excess<T: Real>(mu: T, u: T, m: T, kappa: T) -> T {
    if mu > m {
        if u + (mu - m) > kappa {
            mu
        } else {
            mu - m
        }
    } else if mu > T::zero() && u > kappa {
        mu
    } else {
        T::zero()
    }
}

#[inline]
fn rule_excess<T: Real>(mu: T, u: T, m: T, kappa: T) -> T {
    if mu > m {
        mu - m
    } else if mu > T::zero() && u > kappa {
        mu
    } else {
        T::zero()
    }
}

impl<T: Real> SandpileState<T> {
    /// Places the given point masses; nothing has toppled yet.
    pub fn new(d: usize, sources: &[(Site, T)], m: T) -> Result<Self> {
        let sources = validate_sources(d, sources, m)?;
        let n: T = sources.iter().map(|(_, w)| *w).sum();
        let radius = initial_radius(d, n, &sources);
        let mut mu0 = LatticeField::new(d, radius)?;
        let mut visited = LatticeField::new(d, radius)?;
        for (x, w) in &sources {
            mu0.set(x, *w);
            visited.set(x, true);
        }
        let mut lo = vec![i64::MAX; d];
        let mut hi = vec![i64::MIN; d];
        for (x, _) in &sources {
            for (i, &c) in x.coords().iter().enumerate() {
                lo[i] = lo[i].min(c);
                hi[i] = hi[i].max(c);
            }
        }
        Ok(SandpileState {
            mu: mu0.clone(),
            u: LatticeField::new(d, radius)?,
            u_lo: LatticeField::new(d, radius)?,
            mu0,
            visited,
            n,
            m,
            kappa: odometer_cutoff(d, n, m),
            sources,
            lo,
            hi,
        })
    }

    /// Rebuilds a state from stored odometer and mass values, e.g. a
    /// checkpoint. Sites not listed have `u = 0`, `μ = 0` and are unvisited;
    /// listed sites are visited.
    pub fn from_sites(d: usize, sources: &[(Site, T)], m: T, sites: &[(Site, T, T)]) -> Result<Self> {
        let mut state = SandpileState::new(d, sources, m)?;
        state.mu.values_mut().iter_mut().for_each(|v| *v = T::zero());
        for (x, _, _) in sites {
            if x.dim() != d {
                return Err(SandpileError::InvalidConfig(format!("site {x} does not have {d} coordinates")));
            }
            state.include(x.coords())?;
        }
        for (x, u, mu) in sites {
            state.u.set(x, *u);
            state.mu.set(x, *mu);
            state.visited.set(x, true);
        }
        Ok(state)
    }

    pub fn dim(&self) -> usize {
        self.mu.dim()
    }

    /// Total mass `n`.
    pub fn n(&self) -> T {
        self.n
    }

    /// Threshold `m`.
    pub fn m(&self) -> T {
        self.m
    }

    /// Odometer cutoff `κ`.
    pub fn kappa(&self) -> T {
        self.kappa
    }

    pub fn sources(&self) -> &[(Site, T)] {
        &self.sources
    }

    pub fn mu0(&self) -> &LatticeField<T> {
        &self.mu0
    }

    pub fn mu(&self) -> &LatticeField<T> {
        &self.mu
    }

    /// Leading part of the odometer; [`Self::u_lo`] holds the rounding tail.
    pub fn u(&self) -> &LatticeField<T> {
        &self.u
    }

    pub fn u_lo(&self) -> &LatticeField<T> {
        &self.u_lo
    }

    pub fn visited(&self) -> &LatticeField<bool> {
        &self.visited
    }

    /// Inclusive bounding box of the visited set.
    pub fn bounding_box(&self) -> (&[i64], &[i64]) {
        (&self.lo, &self.hi)
    }

    pub fn odometer(&self, x: &Site) -> T {
        self.u.get(x) + self.u_lo.get(x)
    }

    pub fn is_visited(&self, x: &Site) -> bool {
        self.visited.get(x)
    }

    /// Mutable access to the odometer, bypassing every invariant. Meant for
    /// building synthetic fields and fault injection.
    pub fn odometer_mut(&mut self) -> &mut LatticeField<T> {
        &mut self.u
    }

    /// Excess of `x` under the toppling rules; zero for stable sites.
    pub fn excess(&self, x: &Site) -> T {
        rule_excess(self.mu.get(x), self.u.get(x), self.m, self.kappa)
    }

    /// What a driver topple at `x` emits: the rule excess, extended by the
    /// immediately following rule (b) topple when rule (a) crosses `κ`.
    pub fn toppling_excess(&self, x: &Site) -> T {
        driver_excess(self.mu.get(x), self.u.get(x), self.m, self.kappa)
    }

    #[inline]
    fn excess_at(&self, idx: usize) -> T {
        driver_excess(self.mu.values()[idx], self.u.values()[idx], self.m, self.kappa)
    }

    /// Topples `x` once under the literal rules and returns the excess it
    /// emitted.
    pub fn topple(&mut self, x: &Site) -> Result<T> {
        if x.dim() != self.dim() {
            return Err(SandpileError::InvalidConfig(format!("site {x} does not have {} coordinates", self.dim())));
        }
        let e = self.excess(x);
        if e == T::zero() {
            return Ok(e);
        }
        self.include(x.coords())?;
        let idx = self.mu.index_of(x.coords()).expect("site inside box after growth");
        self.emit(idx, e);
        Ok(e)
    }

    /// Driver topple at `idx`, which must be at least two sites inside the
    /// hull.
    fn topple_at(&mut self, idx: usize) -> T {
        let e = self.excess_at(idx);
        self.emit(idx, e);
        e
    }

    fn emit(&mut self, idx: usize, e: T) {
        if e == T::zero() {
            return;
        }
        let share = e / T::from_count(2 * self.dim());
        self.mu.values_mut()[idx] -= e;
        self.add_odometer(idx, e);
        let strides = self.mu.strides().to_vec();
        let mut coords = vec![0; self.dim()];
        self.mu.coords_into(idx, &mut coords);
        for (axis, &s) in strides.iter().enumerate() {
            for (j, step) in [(idx - s, -1), (idx + s, 1)] {
                self.mu.values_mut()[j] += share;
                self.visited.values_mut()[j] = true;
                let c = coords[axis] + step;
                self.lo[axis] = self.lo[axis].min(c);
                self.hi[axis] = self.hi[axis].max(c);
            }
        }
    }

    #[inline]
    fn add_odometer(&mut self, idx: usize, e: T) {
        let (s, err) = two_sum(self.u.values()[idx], e);
        let (hi, lo) = two_sum(s, self.u_lo.values()[idx] + err);
        self.u.values_mut()[idx] = hi;
        self.u_lo.values_mut()[idx] = lo;
    }

    /// Grows the box so that `coords` and the current bounding box, both
    /// padded by two sites, fit inside.
    fn include(&mut self, coords: &[i64]) -> Result<()> {
        for (i, &c) in coords.iter().enumerate() {
            self.lo[i] = self.lo[i].min(c);
            self.hi[i] = self.hi[i].max(c);
        }
        self.ensure_capacity()
    }

    fn ensure_capacity(&mut self) -> Result<()> {
        self.reserve(0)
    }

    /// Grows the box so the bounding box padded by `extra + 2` fits.
    fn reserve(&mut self, extra: usize) -> Result<()> {
        let need = self.lo.iter().chain(&self.hi).map(|c| c.abs()).max().unwrap_or(0) + 2 + extra as i64;
        let r = self.mu.radius();
        if need <= r {
            return Ok(());
        }
        let new_r = need.max(2 * r);
        self.mu0 = self.mu0.grow(new_r)?;
        self.mu = self.mu.grow(new_r)?;
        self.u = self.u.grow(new_r)?;
        self.u_lo = self.u_lo.grow(new_r)?;
        self.visited = self.visited.grow(new_r)?;
        Ok(())
    }

    /// Largest driver excess over the state.
    pub fn max_excess(&self) -> T {
        let mut worst = T::zero();
        self.for_each_in_box(0, |idx| worst = worst.max(self.excess_at(idx)));
        worst
    }

    /// `|Σμ − n|`.
    pub fn mass_error(&self) -> T {
        (self.mu.sum() - self.n).abs()
    }

    /// `Δ¹u(x)` including the rounding tail of `u`.
    pub fn odometer_laplacian(&self, x: &Site) -> T {
        let (uh, ul) = (self.u.get(x), self.u_lo.get(x));
        let mut acc_hi = T::zero();
        let mut acc_lo = T::zero();
        for e in Direction::all(self.dim()) {
            let y = x.step(e);
            acc_hi += self.u.get(&y) - uh;
            acc_lo += self.u_lo.get(&y) - ul;
        }
        (acc_hi + acc_lo) / T::from_count(2 * self.dim())
    }

    #[inline]
    fn laplacian_at(&self, idx: usize) -> T {
        let (u, ul) = (self.u.values(), self.u_lo.values());
        let mut acc_hi = T::zero();
        let mut acc_lo = T::zero();
        for j in self.u.interior_neighbors(idx) {
            acc_hi += u[j] - u[idx];
            acc_lo += ul[j] - ul[idx];
        }
        (acc_hi + acc_lo) / T::from_count(2 * self.dim())
    }

    /// `max_x |Δ¹u(x) − (μ(x) − μ₀(x))|`.
    pub fn laplace_identity_error(&self) -> T {
        let mut worst = T::zero();
        self.for_each_in_box(1, |idx| {
            let lhs = self.laplacian_at(idx);
            let rhs = self.mu.values()[idx] - self.mu0.values()[idx];
            worst = worst.max((lhs - rhs).abs());
        });
        worst
    }

    /// Calls `f(index)` for every site of the bounding box padded by `pad`.
    fn for_each_in_box(&self, pad: i64, f: impl FnMut(usize)) {
        let lo: Vec<i64> = self.lo.iter().map(|c| c - pad).collect();
        let hi: Vec<i64> = self.hi.iter().map(|c| c + pad).collect();
        self.for_each_in_range(&lo, &hi, f);
    }

    /// Calls `f(index)` for every site of the inclusive box `[lo, hi]`,
    /// axis 0 fastest.
    fn for_each_in_range(&self, lo: &[i64], hi: &[i64], mut f: impl FnMut(usize)) {
        let d = self.dim();
        let mut cur = lo.to_vec();
        loop {
            let start = self.mu.index_of(&cur).expect("range inside lattice");
            for k in 0..=(hi[0] - lo[0]) as usize {
                f(start + k);
            }
            let mut axis = 1;
            loop {
                if axis == d {
                    return;
                }
                cur[axis] += 1;
                if cur[axis] <= hi[axis] {
                    break;
                }
                cur[axis] = lo[axis];
                axis += 1;
            }
        }
    }

    /// One synchronous sweep. Returns the largest excess found before the
    /// sweep and the number of sites that toppled; nothing moves when that
    /// excess is at most `eps`.
    fn jacobi_sweep(&mut self, eps: T, buffer: &mut Vec<T>) -> Result<(T, u64)> {
        self.ensure_capacity()?;
        if buffer.len() != self.mu.len() {
            *buffer = vec![T::zero(); self.mu.len()];
        }
        let side = self.mu.side();
        let r = self.mu.radius();
        let d = self.dim();
        let (m, kappa) = (self.m, self.kappa);
        let row_in = |row: usize, lo: &[i64], hi: &[i64], pad: i64| -> bool {
            let mut rest = row;
            for axis in 1..d {
                let c = (rest % side) as i64 - r;
                if c < lo[axis] - pad || c > hi[axis] + pad {
                    return false;
                }
                rest /= side;
            }
            true
        };
        let (lo, hi) = (self.lo.clone(), self.hi.clone());
        let (x0, x1) = ((lo[0] + r) as usize, (hi[0] + r) as usize);
        let mu = self.mu.values();
        let u = self.u.values();

        // Excess snapshot. Per-row reductions: (max excess, toppled count,
        // bounding box of toppled sites).
        let stats: Vec<(T, u64, Vec<i64>, Vec<i64>)> = buffer
            .par_chunks_mut(side)
            .enumerate()
            .filter(|(row, _)| row_in(*row, &lo, &hi, 0))
            .map(|(row, out)| {
                let base = row * side;
                let (mut worst, mut count) = (T::zero(), 0u64);
                let (mut first, mut last) = (usize::MAX, 0usize);
                for k in x0..=x1 {
                    let e = driver_excess(mu[base + k], u[base + k], m, kappa);
                    out[k] = e;
                    if e > T::zero() {
                        worst = worst.max(e);
                        count += 1;
                        first = first.min(k);
                        last = k;
                    }
                }
                let (mut blo, mut bhi) = (vec![i64::MAX; d], vec![i64::MIN; d]);
                if count > 0 {
                    blo[0] = first as i64 - r;
                    bhi[0] = last as i64 - r;
                    let mut rest = row;
                    for axis in 1..d {
                        let c = (rest % side) as i64 - r;
                        blo[axis] = c;
                        bhi[axis] = c;
                        rest /= side;
                    }
                }
                (worst, count, blo, bhi)
            })
            .collect();
        let mut worst = T::zero();
        let mut count = 0u64;
        let (mut tlo, mut thi) = (vec![i64::MAX; d], vec![i64::MIN; d]);
        for (w, c, blo, bhi) in stats {
            worst = worst.max(w);
            count += c;
            for a in 0..d {
                tlo[a] = tlo[a].min(blo[a]);
                thi[a] = thi[a].max(bhi[a]);
            }
        }
        if worst <= eps {
            return Ok((worst, 0));
        }

        // Gather: each site reads its own and its neighbours' excess in the
        // fixed neighbour order.
        let strides = self.mu.strides().to_vec();
        let two_d = T::from_count(2 * d);
        let e = &buffer[..];
        let (y0, y1) = (x0 - 1, x1 + 1);
        self.mu
            .values_mut()
            .par_chunks_mut(side)
            .zip(self.u.values_mut().par_chunks_mut(side))
            .zip(self.u_lo.values_mut().par_chunks_mut(side))
            .zip(self.visited.values_mut().par_chunks_mut(side))
            .enumerate()
            .filter(|(row, _)| row_in(*row, &lo, &hi, 1))
            .for_each(|(row, (((mu_row, u_row), lo_row), vis_row))| {
                let base = row * side;
                for k in y0..=y1 {
                    let idx = base + k;
                    let mut inflow = T::zero();
                    for &s in &strides {
                        inflow += e[idx - s];
                        inflow += e[idx + s];
                    }
                    let own = e[idx];
                    if own == T::zero() && inflow == T::zero() {
                        continue;
                    }
                    mu_row[k] = mu_row[k] - own + inflow / two_d;
                    if own > T::zero() {
                        let (s, err) = two_sum(u_row[k], own);
                        let (h, l) = two_sum(s, lo_row[k] + err);
                        u_row[k] = h;
                        lo_row[k] = l;
                    }
                    if inflow > T::zero() {
                        vis_row[k] = true;
                    }
                }
            });
        // The snapshot buffer stays zero outside the bounding box because the
        // box only grows; newly visited sites are neighbours of toppled ones.
        for a in 0..d {
            self.lo[a] = self.lo[a].min(tlo[a] - 1);
            self.hi[a] = self.hi[a].max(thi[a] + 1);
        }
        self.ensure_capacity()?;
        Ok((worst, count))
    }

    /// The visited set `V`, `V0 = {u > κ}` and `V1 = V \ V0`.
    pub fn regions(&self) -> Regions {
        let mut out = Regions::default();
        self.for_each_in_box(0, |idx| {
            if self.visited.values()[idx] {
                let x = self.mu.site_of(idx);
                if self.u.values()[idx] > self.kappa {
                    out.v0.push(x.clone());
                } else {
                    out.v1.push(x.clone());
                }
                out.v.push(x);
            }
        });
        out
    }

    /// Number of visited sites with zero odometer that carry no initial
    /// mass, and the bound `(2d)² n / m` it must respect.
    pub fn boundary_count_bound(&self) -> (usize, T) {
        let mut count = 0;
        self.for_each_in_box(0, |idx| {
            if self.visited.values()[idx]
                && self.u.values()[idx] == T::zero()
                && self.mu0.values()[idx] == T::zero()
            {
                count += 1;
            }
        });
        let two_d = T::from_count(2 * self.dim());
        (count, two_d * two_d * self.n / self.m)
    }

    /// The odometer `u` as one field, with the compensation term folded in.
    pub fn odometer_field(&self) -> LatticeField<T> {
        let mut out = self.u.clone();
        for (v, lo) in out.values_mut().iter_mut().zip(self.u_lo.values()) {
            *v += *lo;
        }
        out
    }

    /// Sites of the visited set with their odometer and mass, in index
    /// order (axis 0 fastest).
    pub fn visited_sites(&self) -> Vec<(Site, T, T)> {
        let mut out = Vec::new();
        self.for_each_in_box(0, |idx| {
            if self.visited.values()[idx] {
                out.push((
                    self.mu.site_of(idx),
                    self.u.values()[idx] + self.u_lo.values()[idx],
                    self.mu.values()[idx],
                ));
            }
        });
        out
    }
}
