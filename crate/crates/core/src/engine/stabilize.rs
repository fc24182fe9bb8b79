//! Stabilization drivers for the three schedules, plus block relaxation.
//!
//! Block relaxation solves the linear problem obtained by freezing the
//! current classification of sites that have toppled or must topple: those
//! with `u > κ` must end empty, the others must end at `m`. The solution, clipped
//! at zero, never exceeds what the exact process still has to emit: the
//! final mass is at most the target on that set, so the remaining odometer
//! is a supersolution of the masked system and the masked operator has a
//! nonnegative inverse. Every increment therefore stays below the final
//! odometer, and since stabilization ends in a state whose odometer is a
//! super-solution, the limit is the same as for plain toppling.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::multigrid::MaskedPoisson;
use super::{SandpileState, Schedule, ScheduleKind};
use crate::error::{Result, SandpileError};
use crate::scalar::Real;

pub const DEFAULT_MAX_TOPPLINGS: u64 = 1_000_000_000;

/// Sweeps (or passes) between block relaxations.
pub const DEFAULT_BLOCK_INTERVAL: usize = 16;

const SOLVER_MAX_ITERATIONS: usize = 400;

/// Solves per block relaxation while sites keep crossing `κ`.
const MAX_BLOCK_PASSES: usize = 8;

/// Layers added around the toppled set in one solve.
const MAX_DILATION: usize = 64;

#[derive(Clone, Copy, Debug)]
pub struct StabilizeOptions<T> {
    /// Stop once no site has excess above this; `None` means `1e-12 n`.
    pub eps_stop: Option<T>,
    /// Cap on site-topplings before giving up.
    pub max_topplings: u64,
    /// Block relaxation every this many sweeps; `None` disables it.
    pub block_interval: Option<usize>,
    /// Worker threads for sweeps; `None` uses the ambient rayon pool.
    pub threads: Option<usize>,
}

impl<T: Real> Default for StabilizeOptions<T> {
    fn default() -> Self {
        StabilizeOptions {
            eps_stop: None,
            max_topplings: DEFAULT_MAX_TOPPLINGS,
            block_interval: Some(DEFAULT_BLOCK_INTERVAL),
            threads: None,
        }
    }
}

impl<T: Real> StabilizeOptions<T> {
    /// Plain toppling, no block relaxation.
    pub fn pure() -> Self {
        StabilizeOptions { block_interval: None, ..Self::default() }
    }

    pub fn resolved_eps(&self, n: T) -> T {
        self.eps_stop.unwrap_or(T::lit(1e-12) * n)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StabilizeOutcome<T> {
    /// Sweeps for `sweep`, passes for `random`, heap rebuilds for `priority`.
    pub sweeps: u64,
    /// Site-topplings, counting each site moved by a block relaxation once.
    pub topplings: u64,
    pub block_solves: u64,
    pub total_toppled_mass: T,
    pub residual_excess: T,
    pub elapsed: Duration,
}

struct Counters {
    sweeps: u64,
    topplings: u64,
    block_solves: u64,
    cap: u64,
    eps: f64,
}

impl Counters {
    fn check<T: Real>(&self, state: &SandpileState<T>) -> Result<()> {
        if self.topplings > self.cap {
            return Err(SandpileError::NonConvergence {
                topplings: self.topplings,
                sweeps: self.sweeps,
                residual_excess: state.max_excess().as_f64(),
                eps_stop: self.eps,
            });
        }
        Ok(())
    }
}

/// Topples until every excess is at most the stopping tolerance.
pub fn stabilize<T: Real>(
    state: &mut SandpileState<T>,
    schedule: Schedule,
    opts: &StabilizeOptions<T>,
) -> Result<StabilizeOutcome<T>> {
    let eps = opts.resolved_eps(state.n());
    if !(eps > T::zero()) {
        return Err(SandpileError::InvalidConfig(format!("eps_stop must be positive, got {eps}")));
    }
    if opts.block_interval == Some(0) {
        return Err(SandpileError::InvalidConfig("block interval must be positive".into()));
    }
    match opts.threads {
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| SandpileError::Resource(format!("cannot start {t} worker threads: {e}")))?;
            pool.install(|| run(state, schedule, opts, eps))
        }
        None => run(state, schedule, opts, eps),
    }
}

fn run<T: Real>(
    state: &mut SandpileState<T>,
    schedule: Schedule,
    opts: &StabilizeOptions<T>,
    eps: T,
) -> Result<StabilizeOutcome<T>> {
    let start = Instant::now();
    let before = state.total_odometer();
    let mut c = Counters { sweeps: 0, topplings: 0, block_solves: 0, cap: opts.max_topplings, eps: eps.as_f64() };
    match schedule.kind {
        ScheduleKind::Sweep => run_sweeps(state, opts, eps, &mut c)?,
        ScheduleKind::RandomInfinitive => run_random(state, schedule.seed, opts, eps, &mut c)?,
        ScheduleKind::PriorityExcess => run_priority(state, opts, eps, &mut c)?,
    }
    state.ensure_capacity()?;
    Ok(StabilizeOutcome {
        sweeps: c.sweeps,
        topplings: c.topplings,
        block_solves: c.block_solves,
        total_toppled_mass: state.total_odometer() - before,
        residual_excess: state.max_excess(),
        elapsed: start.elapsed(),
    })
}

fn solver_tolerance<T: Real>() -> T {
    T::lit(1e-13).max(T::epsilon() * T::lit(100.0))
}

fn maybe_block<T: Real>(state: &mut SandpileState<T>, c: &mut Counters) -> Result<()> {
    if let Some(moved) = state.block_relax(solver_tolerance())? {
        c.block_solves += 1;
        c.topplings += moved;
    }
    c.check(state)
}

fn run_sweeps<T: Real>(state: &mut SandpileState<T>, opts: &StabilizeOptions<T>, eps: T, c: &mut Counters) -> Result<()> {
    let mut buffer = Vec::new();
    loop {
        let (_, count) = state.jacobi_sweep(eps, &mut buffer)?;
        if count == 0 {
            return Ok(());
        }
        c.sweeps += 1;
        c.topplings += count;
        c.check(state)?;
        if let Some(k) = opts.block_interval {
            if c.sweeps % k as u64 == 0 {
                maybe_block(state, c)?;
            }
        }
    }
}

fn run_random<T: Real>(
    state: &mut SandpileState<T>,
    seed: u64,
    opts: &StabilizeOptions<T>,
    eps: T,
    c: &mut Counters,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = Vec::new();
    loop {
        state.ensure_capacity()?;
        order.clear();
        let mut worst = T::zero();
        state.for_each_in_box(0, |idx| {
            if state.visited.values()[idx] {
                order.push(idx);
                worst = worst.max(state.excess_at(idx));
            }
        });
        if worst <= eps {
            return Ok(());
        }
        order.shuffle(&mut rng);
        for &idx in &order {
            if state.topple_at(idx) > T::zero() {
                c.topplings += 1;
            }
        }
        c.sweeps += 1;
        c.check(state)?;
        if let Some(k) = opts.block_interval {
            if c.sweeps % k as u64 == 0 {
                maybe_block(state, c)?;
            }
        }
    }
}

struct Entry<T> {
    excess: T,
    idx: usize,
}

impl<T: Real> PartialEq for Entry<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<T: Real> Eq for Entry<T> {}

impl<T: Real> PartialOrd for Entry<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T: Real> Ord for Entry<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        // Largest excess first; ties go to the smaller index.
        self.excess
            .partial_cmp(&other.excess)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.idx.cmp(&self.idx))
    }
}

/// Max-heap of unstable sites. `keys[idx]` is the excess of the live entry
/// for `idx` (zero if none); popped entries with a different key are stale.
struct ExcessQueue<T> {
    heap: BinaryHeap<Entry<T>>,
    keys: Vec<T>,
}

impl<T: Real> ExcessQueue<T> {
    fn build(state: &SandpileState<T>, eps: T) -> Self {
        let mut q = ExcessQueue { heap: BinaryHeap::new(), keys: vec![T::zero(); state.mu.len()] };
        state.for_each_in_box(0, |idx| {
            let e = state.excess_at(idx);
            if e > eps {
                q.heap.push(Entry { excess: e, idx });
                q.keys[idx] = e;
            }
        });
        q
    }

    fn update(&mut self, idx: usize, excess: T, eps: T) {
        if excess > eps {
            if excess != self.keys[idx] {
                self.keys[idx] = excess;
                self.heap.push(Entry { excess, idx });
            }
        } else {
            self.keys[idx] = T::zero();
        }
    }

    fn pop(&mut self) -> Option<usize> {
        while let Some(Entry { excess, idx }) = self.heap.pop() {
            if excess == self.keys[idx] {
                self.keys[idx] = T::zero();
                return Some(idx);
            }
        }
        None
    }
}

fn run_priority<T: Real>(state: &mut SandpileState<T>, opts: &StabilizeOptions<T>, eps: T, c: &mut Counters) -> Result<()> {
    state.ensure_capacity()?;
    let mut queue = ExcessQueue::build(state, eps);
    c.sweeps = 1;
    let mut since_block = 0u64;
    while let Some(idx) = queue.pop() {
        if !state.capacity_ok() {
            state.ensure_capacity()?;
            queue = ExcessQueue::build(state, eps);
            c.sweeps += 1;
            continue;
        }
        state.topple_at(idx);
        c.topplings += 1;
        since_block += 1;
        queue.update(idx, state.excess_at(idx), eps);
        for axis in 0..state.dim() {
            let s = state.mu.strides()[axis];
            for j in [idx - s, idx + s] {
                queue.update(j, state.excess_at(j), eps);
            }
        }
        c.check(state)?;
        if let Some(k) = opts.block_interval {
            if since_block >= k as u64 * (state.visited_count() as u64).max(1) {
                since_block = 0;
                maybe_block(state, c)?;
                state.ensure_capacity()?;
                queue = ExcessQueue::build(state, eps);
                c.sweeps += 1;
            }
        }
    }
    Ok(())
}

impl<T: Real> SandpileState<T> {
    fn capacity_ok(&self) -> bool {
        let need = self.lo.iter().chain(&self.hi).map(|c| c.abs()).max().unwrap_or(0) + 2;
        need <= self.mu.radius()
    }

    fn visited_count(&self) -> usize {
        let mut count = 0;
        self.for_each_in_box(0, |idx| {
            if self.visited.values()[idx] {
                count += 1;
            }
        });
        count
    }

    fn total_odometer(&self) -> T {
        let mut acc = T::zero();
        self.for_each_in_box(0, |idx| acc += self.u.values()[idx] + self.u_lo.values()[idx]);
        acc
    }

    /// Block relaxation: repeated solves while sites cross `κ`. Returns the
    /// number of site updates, or `None` when nothing was applied.
    pub(super) fn block_relax(&mut self, rel_tol: T) -> Result<Option<u64>> {
        let mut total = None;
        for _ in 0..MAX_BLOCK_PASSES {
            match self.block_pass(rel_tol)? {
                None => break,
                Some((moved, crossed)) => {
                    *total.get_or_insert(0) += moved;
                    if crossed == 0 || moved == 0 {
                        break;
                    }
                }
            }
        }
        Ok(total)
    }

    /// One solve. The domain is every site that has toppled or must topple,
    /// plus whole layers around it that the outstanding mass is certain to
    /// fill. Returns the number of sites moved and how many of them crossed
    /// `κ`.
    fn block_pass(&mut self, rel_tol: T) -> Result<Option<(u64, u64)>> {
        self.reserve(MAX_DILATION + 1)?;
        let (m, kappa) = (self.m, self.kappa);
        let two_d = T::from_count(2 * self.dim());
        let mut mask = vec![false; self.mu.len()];
        let mut layer = Vec::new();
        let mut outstanding = T::zero();
        self.for_each_in_box(0, |idx| {
            let (u, mu) = (self.u.values()[idx], self.mu.values()[idx]);
            if u > T::zero() || mu > m {
                mask[idx] = true;
                layer.push(idx);
                outstanding += mu - if u > kappa { T::zero() } else { m };
            } else {
                outstanding += mu;
            }
        });
        if layer.is_empty() {
            return Ok(None);
        }
        // Fill layer by layer, keeping a safety factor of two on the mass
        // estimate. Layers are taken whole so symmetric states stay symmetric.
        let mut filled = T::zero();
        let mut layers = 0;
        while layers < MAX_DILATION {
            let mut next = Vec::new();
            for &idx in &layer {
                for j in self.mu.interior_neighbors(idx) {
                    if !mask[j] {
                        mask[j] = true;
                        next.push(j);
                    }
                }
            }
            let cost = m * T::from_count(next.len());
            if next.is_empty() || T::lit(2.0) * (filled + cost) > outstanding {
                for &j in &next {
                    mask[j] = false;
                }
                break;
            }
            filled += cost;
            layers += 1;
            layer = next;
        }
        let lo: Vec<i64> = self.lo.iter().map(|c| c - layers as i64).collect();
        let hi: Vec<i64> = self.hi.iter().map(|c| c + layers as i64).collect();
        let field = &self.mu;
        let mut mg = MaskedPoisson::<T>::new(&lo, &hi, |x| field.index_of(x).is_some_and(|j| mask[j]));
        let mut b = vec![T::zero(); mg.len()];
        let mut pairs = Vec::with_capacity(mg.active_count());
        let mut any_positive = false;
        mg.for_each_active(|x, i| {
            let j = self.mu.index_of(x).expect("domain inside lattice");
            let empty = self.u.values()[j] > kappa;
            b[i] = two_d * (self.mu.values()[j] - if empty { T::zero() } else { m });
            any_positive |= b[i] > T::zero();
            pairs.push((i, j, empty));
        });
        if !any_positive {
            return Ok(None);
        }
        let mut w = vec![T::zero(); mg.len()];
        if !mg.solve(&b, &mut w, rel_tol, SOLVER_MAX_ITERATIONS).converged {
            return Ok(None);
        }
        let strides = self.mu.strides().to_vec();
        let mut coords = vec![0; self.dim()];
        let (mut moved, mut crossed) = (0, 0);
        for (i, j, empty) in pairs {
            if w[i] > T::zero() {
                self.add_odometer(j, w[i]);
                moved += 1;
                if !empty && self.u.values()[j] > kappa {
                    crossed += 1;
                }
                self.visited.values_mut()[j] = true;
                self.mu.coords_into(j, &mut coords);
                for (axis, &s) in strides.iter().enumerate() {
                    self.visited.values_mut()[j - s] = true;
                    self.visited.values_mut()[j + s] = true;
                    self.lo[axis] = self.lo[axis].min(coords[axis] - 1);
                    self.hi[axis] = self.hi[axis].max(coords[axis] + 1);
                }
            }
        }
        // Mass follows from the odometer: μ = μ₀ + Δ¹u on the domain box and
        // its rim, the only sites whose Laplacian changed.
        let mut updates = Vec::new();
        let pad_lo: Vec<i64> = lo.iter().map(|c| c - 1).collect();
        let pad_hi: Vec<i64> = hi.iter().map(|c| c + 1).collect();
        self.for_each_in_range(&pad_lo, &pad_hi, |idx| {
            updates.push((idx, self.mu0.values()[idx] + self.laplacian_at(idx)));
        });
        for (idx, v) in updates {
            self.mu.values_mut()[idx] = v;
        }
        self.ensure_capacity()?;
        Ok(Some((moved, crossed)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Site;

    fn run_single(d: usize, n: f64, m: f64, schedule: Schedule, opts: StabilizeOptions<f64>) -> SandpileState<f64> {
        let mut s = SandpileState::new(d, &[(Site::origin(d), n)], m).unwrap();
        stabilize(&mut s, schedule, &opts).unwrap();
        s
    }

    fn sup_diff(a: &SandpileState<f64>, b: &SandpileState<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        for (x, _, _) in a.visited_sites().iter().chain(b.visited_sites().iter()) {
            worst = worst.max((a.odometer(x) - b.odometer(x)).abs());
        }
        worst
    }

    #[test]
    fn stable_start_is_idle() {
        let s = run_single(2, 5.0, 10.0, Schedule::sweep(), StabilizeOptions::default());
        assert_eq!(s.u().max_value(), 0.0);
        assert_eq!(s.mu().get(&Site::origin(2)), 5.0);
    }

    #[test]
    fn final_state_is_stable() {
        let opts = StabilizeOptions::default();
        let s = run_single(2, 2000.0, 4.0, Schedule::sweep(), opts);
        let eps = opts.resolved_eps(2000.0);
        assert!(s.max_excess() <= eps);
        assert!(s.mass_error() <= 1e-9 * 2000.0);
        assert!(s.laplace_identity_error() <= 1e-9 * 4.0);
        for (x, u, mu) in s.visited_sites() {
            assert!(mu <= 4.0 + eps, "{x}: {mu}");
            if u > s.kappa() {
                assert!(mu <= 4.0 * eps, "{x}: {mu}");
            }
        }
    }

    #[test]
    fn schedules_agree() {
        let (n, m) = (3000.0, 5.0);
        let reference = run_single(2, n, m, Schedule::sweep(), StabilizeOptions::pure());
        let scale = reference.u().max_value();
        let others = [
            run_single(2, n, m, Schedule::sweep(), StabilizeOptions::default()),
            run_single(2, n, m, Schedule::random(7), StabilizeOptions::pure()),
            run_single(2, n, m, Schedule::random(7), StabilizeOptions::default()),
            run_single(2, n, m, Schedule::priority(), StabilizeOptions::pure()),
            run_single(2, n, m, Schedule::priority(), StabilizeOptions { block_interval: Some(2), ..Default::default() }),
        ];
        for (k, s) in others.iter().enumerate() {
            let diff = sup_diff(&reference, s);
            assert!(diff <= 1e-7 * scale, "variant {k}: {diff}");
        }
    }

    #[test]
    fn three_dimensions() {
        let s = run_single(3, 500.0, 2.0, Schedule::sweep(), StabilizeOptions::default());
        let t = run_single(3, 500.0, 2.0, Schedule::random(1), StabilizeOptions::pure());
        assert!(sup_diff(&s, &t) <= 1e-7 * s.u().max_value());
        assert!(s.laplace_identity_error() <= 1e-9 * 2.0);
    }

    #[test]
    fn multiple_sources_grow_the_box() {
        let mut s = SandpileState::new(2, &[(Site::from([-12, 0]), 400.0), (Site::from([12, 3]), 400.0)], 0.5).unwrap();
        let r0 = s.mu().radius();
        stabilize(&mut s, Schedule::sweep(), &StabilizeOptions::default()).unwrap();
        assert!(s.mu().radius() > r0);
        assert!(s.mass_error() <= 1e-9 * 800.0);
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let mut s = SandpileState::new(2, &[(Site::origin(2), 1e4)], 10.0).unwrap();
        let opts = StabilizeOptions { max_topplings: 10, ..Default::default() };
        let err = stabilize(&mut s, Schedule::sweep(), &opts).unwrap_err();
        assert!(matches!(err, SandpileError::NonConvergence { .. }));
    }

    #[test]
    fn rejects_zero_tolerance() {
        let mut s = SandpileState::new(2, &[(Site::origin(2), 100.0)], 10.0).unwrap();
        let opts = StabilizeOptions { eps_stop: Some(0.0), ..Default::default() };
        assert!(matches!(stabilize(&mut s, Schedule::sweep(), &opts), Err(SandpileError::InvalidConfig(_))));
    }

    #[test]
    fn thread_count_does_not_change_result() {
        let run = |t| {
            let opts = StabilizeOptions { threads: Some(t), ..Default::default() };
            run_single(2, 5000.0, 3.0, Schedule::sweep(), opts)
        };
        let (a, b) = (run(1), run(3));
        assert_eq!(a.u().values(), b.u().values());
        assert_eq!(a.mu().values(), b.mu().values());
    }
}
