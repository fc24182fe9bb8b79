//! Conjugate gradients with a geometric multigrid preconditioner for the
//! masked lattice operator `(A w)(x) = 2d w(x) − Σ_{y∼x, y∈D} w(y)` on a
//! finite set `D`, with `w = 0` off `D`.
//!
//! Levels are vertex-centred: coarse point `c` sits on fine point `2c`, and a
//! coarse point is active iff its fine point is. The coarse operator is the
//! same stencil scaled by `4^{-l}`. Smoothing is red-black Gauss–Seidel (red
//! then black before the coarse correction, black then red after), so the
//! V-cycle is a symmetric preconditioner.

use crate::scalar::Real;

const COARSEST_SWEEPS: usize = 30;
const MAX_LEVELS: usize = 12;

struct Level<T> {
    dims: Vec<usize>,
    strides: Vec<usize>,
    /// Global coordinate (in this level's units) of array index 0.
    corner: Vec<i64>,
    scale: T,
    mask: Vec<bool>,
    red: Vec<usize>,
    black: Vec<usize>,
    x: Vec<T>,
    b: Vec<T>,
    r: Vec<T>,
}

impl<T: Real> Level<T> {
    fn new(dims: Vec<usize>, corner: Vec<i64>, scale: T, mask: Vec<bool>) -> Self {
        let mut strides = Vec::with_capacity(dims.len());
        let mut s = 1;
        for &n in &dims {
            strides.push(s);
            s *= n;
        }
        let len = s;
        let (mut red, mut black) = (Vec::new(), Vec::new());
        let mut coords = vec![0usize; dims.len()];
        for (idx, &active) in mask.iter().enumerate() {
            if !active {
                continue;
            }
            unflatten(idx, &dims, &mut coords);
            let parity: i64 = coords.iter().zip(&corner).map(|(&j, &c)| j as i64 + c).sum();
            if parity.rem_euclid(2) == 0 {
                red.push(idx);
            } else {
                black.push(idx);
            }
        }
        Level {
            dims,
            strides,
            corner,
            scale,
            mask,
            red,
            black,
            x: vec![T::zero(); len],
            b: vec![T::zero(); len],
            r: vec![T::zero(); len],
        }
    }

    fn active_count(&self) -> usize {
        self.red.len() + self.black.len()
    }

    #[inline]
    fn neighbour_sum(&self, v: &[T], idx: usize) -> T {
        let mut acc = T::zero();
        for &s in &self.strides {
            acc += v[idx - s];
            acc += v[idx + s];
        }
        acc
    }

    fn sweep_colour(&mut self, red: bool) {
        let two_d = T::from_count(2 * self.dims.len());
        let list = if red { std::mem::take(&mut self.red) } else { std::mem::take(&mut self.black) };
        for &idx in &list {
            let nb = self.neighbour_sum(&self.x, idx);
            self.x[idx] = (self.b[idx] / self.scale + nb) / two_d;
        }
        if red {
            self.red = list;
        } else {
            self.black = list;
        }
    }

    fn residual(&mut self) {
        let two_d = T::from_count(2 * self.dims.len());
        for list in [&self.red, &self.black] {
            for &idx in list {
                let ax = self.scale * (two_d * self.x[idx] - self.neighbour_sum(&self.x, idx));
                self.r[idx] = self.b[idx] - ax;
            }
        }
    }
}

fn unflatten(mut idx: usize, dims: &[usize], out: &mut [usize]) {
    for (o, &n) in out.iter_mut().zip(dims) {
        *o = idx % n;
        idx /= n;
    }
}

/// Offsets `{−1,0,1}^d` as (fine stride offset, weight) pairs, weight
/// `Π 2^{-|o_i|}`.
fn stencil_offsets<T: Real>(strides: &[usize]) -> Vec<(isize, T)> {
    let d = strides.len();
    let mut out = Vec::with_capacity(3usize.pow(d as u32));
    for code in 0..3usize.pow(d as u32) {
        let (mut off, mut w, mut c) = (0isize, T::one(), code);
        for &s in strides {
            match c % 3 {
                0 => {}
                1 => {
                    off -= s as isize;
                    w = w / T::lit(2.0);
                }
                _ => {
                    off += s as isize;
                    w = w / T::lit(2.0);
                }
            }
            c /= 3;
        }
        out.push((off, w));
    }
    out
}

/// Solver for one fixed domain `D`.
pub(crate) struct MaskedPoisson<T> {
    levels: Vec<Level<T>>,
    /// Fine index of each coarse active point, per coarse level.
    injection: Vec<Vec<(usize, usize)>>,
    offsets: Vec<Vec<(isize, T)>>,
}

/// Result of a solve.
pub(crate) struct SolveReport {
    #[cfg_attr(not(test), allow(dead_code))]
    pub iterations: usize,
    pub converged: bool,
}

impl<T: Real> MaskedPoisson<T> {
    /// Builds the hierarchy for the active set `{x : lo <= x <= hi, active(x)}`.
    pub fn new(lo: &[i64], hi: &[i64], active: impl Fn(&[i64]) -> bool) -> Self {
        let d = lo.len();
        let extent = lo.iter().zip(hi).map(|(&a, &b)| (b - a + 3) as usize).max().unwrap_or(1);
        let mut levels_n = 1;
        while levels_n < MAX_LEVELS && (extent >> levels_n) >= 4 {
            levels_n += 1;
        }
        let block = 1i64 << (levels_n - 1);
        let corner: Vec<i64> = lo.iter().map(|&a| (a - 1).div_euclid(block) * block).collect();
        let dims: Vec<usize> = (0..d)
            .map(|i| {
                let need = hi[i] + 1 - corner[i];
                ((need + block - 1) / block * block + 1) as usize
            })
            .collect();
        let len: usize = dims.iter().product();
        let mut mask = vec![false; len];
        let mut coords = vec![0usize; d];
        let mut global = vec![0i64; d];
        for (idx, m) in mask.iter_mut().enumerate() {
            unflatten(idx, &dims, &mut coords);
            for i in 0..d {
                global[i] = corner[i] + coords[i] as i64;
            }
            let inside = (0..d).all(|i| global[i] >= lo[i] && global[i] <= hi[i]);
            *m = inside && active(&global);
        }
        let mut levels = vec![Level::new(dims, corner, T::one(), mask)];
        let mut injection = Vec::new();
        let mut offsets = Vec::new();
        while levels.len() < levels_n {
            let fine = levels.last().expect("at least one level");
            let cdims: Vec<usize> = fine.dims.iter().map(|&n| (n - 1) / 2 + 1).collect();
            let ccorner: Vec<i64> = fine.corner.iter().map(|&c| c / 2).collect();
            let clen: usize = cdims.iter().product();
            let mut cmask = vec![false; clen];
            let mut inj = Vec::new();
            let mut cc = vec![0usize; d];
            for (cidx, m) in cmask.iter_mut().enumerate() {
                unflatten(cidx, &cdims, &mut cc);
                let fidx: usize = cc.iter().zip(&fine.strides).map(|(&c, &s)| 2 * c * s).sum();
                if fine.mask[fidx] {
                    *m = true;
                    inj.push((cidx, fidx));
                }
            }
            if inj.is_empty() {
                break;
            }
            offsets.push(stencil_offsets(&fine.strides));
            let scale = fine.scale / T::lit(4.0);
            injection.push(inj);
            levels.push(Level::new(cdims, ccorner, scale, cmask));
        }
        MaskedPoisson { levels, injection, offsets }
    }

    pub fn active_count(&self) -> usize {
        self.levels[0].active_count()
    }

    /// Calls `f(global_coords, index)` for every active fine point.
    pub fn for_each_active(&self, mut f: impl FnMut(&[i64], usize)) {
        let l = &self.levels[0];
        let d = l.dims.len();
        let mut coords = vec![0usize; d];
        let mut global = vec![0i64; d];
        let mut all: Vec<usize> = l.red.iter().chain(&l.black).copied().collect();
        all.sort_unstable();
        for idx in all {
            unflatten(idx, &l.dims, &mut coords);
            for i in 0..d {
                global[i] = l.corner[i] + coords[i] as i64;
            }
            f(&global, idx);
        }
    }

    pub fn len(&self) -> usize {
        self.levels[0].mask.len()
    }

    fn active_indices(&self) -> Vec<usize> {
        let l = &self.levels[0];
        let mut all: Vec<usize> = l.red.iter().chain(&l.black).copied().collect();
        all.sort_unstable();
        all
    }

    fn apply(&self, v: &[T], out: &mut [T], active: &[usize]) {
        let l = &self.levels[0];
        let two_d = T::from_count(2 * l.dims.len());
        for &idx in active {
            out[idx] = two_d * v[idx] - l.neighbour_sum(v, idx);
        }
    }

    fn vcycle(&mut self, level: usize) {
        let coarsest = level + 1 == self.levels.len();
        {
            let l = &mut self.levels[level];
            l.x.iter_mut().for_each(|v| *v = T::zero());
            let sweeps = if coarsest { COARSEST_SWEEPS } else { 1 };
            for _ in 0..sweeps {
                l.sweep_colour(true);
                l.sweep_colour(false);
            }
            if coarsest {
                for _ in 0..sweeps {
                    l.sweep_colour(false);
                    l.sweep_colour(true);
                }
                return;
            }
            l.residual();
        }
        let scale_down = T::one() / T::from_count(1 << self.levels[0].dims.len());
        {
            let (fine_part, coarse_part) = self.levels.split_at_mut(level + 1);
            let (fine, coarse) = (&fine_part[level], &mut coarse_part[0]);
            for &(cidx, fidx) in &self.injection[level] {
                let mut acc = T::zero();
                for &(off, w) in &self.offsets[level] {
                    let j = (fidx as isize + off) as usize;
                    if fine.mask[j] {
                        acc += w * fine.r[j];
                    }
                }
                coarse.b[cidx] = acc * scale_down;
            }
        }
        self.vcycle(level + 1);
        {
            let (fine_part, coarse_part) = self.levels.split_at_mut(level + 1);
            let (fine, coarse) = (&mut fine_part[level], &coarse_part[0]);
            for &(cidx, fidx) in &self.injection[level] {
                let e = coarse.x[cidx];
                for &(off, w) in &self.offsets[level] {
                    let j = (fidx as isize + off) as usize;
                    if fine.mask[j] {
                        fine.x[j] += w * e;
                    }
                }
            }
            fine.sweep_colour(false);
            fine.sweep_colour(true);
        }
    }

    fn precondition(&mut self, r: &[T], z: &mut [T], active: &[usize]) {
        if self.levels.len() == 1 && self.levels[0].active_count() == 0 {
            return;
        }
        {
            let l = &mut self.levels[0];
            for &i in active {
                l.b[i] = r[i];
            }
        }
        self.vcycle(0);
        let l = &self.levels[0];
        for &i in active {
            z[i] = l.x[i];
        }
    }

    /// Solves `A w = b` by preconditioned CG from `w = 0`.
    ///
    /// `b` and `w` are indexed like the fine level; entries off the active
    /// set are ignored and left zero. Stops when `‖r‖₂ <= rel_tol ‖b‖₂`.
    pub fn solve(&mut self, b: &[T], w: &mut [T], rel_tol: T, max_iter: usize) -> SolveReport {
        let active = self.active_indices();
        let len = self.len();
        let dot = |a: &[T], c: &[T]| -> T { active.iter().map(|&i| a[i] * c[i]).fold(T::zero(), |s, v| s + v) };
        w.iter_mut().for_each(|v| *v = T::zero());
        let mut r = vec![T::zero(); len];
        for &i in &active {
            r[i] = b[i];
        }
        let b_norm = dot(&r, &r).sqrt();
        if b_norm == T::zero() {
            return SolveReport { iterations: 0, converged: true };
        }
        let mut z = vec![T::zero(); len];
        let mut q = vec![T::zero(); len];
        self.precondition(&r, &mut z, &active);
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        for it in 1..=max_iter {
            self.apply(&p, &mut q, &active);
            let pq = dot(&p, &q);
            if !(pq > T::zero()) {
                return SolveReport { iterations: it, converged: false };
            }
            let alpha = rz / pq;
            for &i in &active {
                w[i] += alpha * p[i];
                r[i] -= alpha * q[i];
            }
            if dot(&r, &r).sqrt() <= rel_tol * b_norm {
                return SolveReport { iterations: it, converged: true };
            }
            self.precondition(&r, &mut z, &active);
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for &i in &active {
                p[i] = z[i] + beta * p[i];
            }
        }
        SolveReport { iterations: max_iter, converged: false }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disc(r: i64) -> impl Fn(&[i64]) -> bool {
        move |x: &[i64]| x.iter().map(|c| c * c).sum::<i64>() <= r * r
    }

    fn residual_norm(mg: &MaskedPoisson<f64>, w: &[f64], b: &[f64]) -> f64 {
        let active = mg.active_indices();
        let mut q = vec![0.0; w.len()];
        mg.apply(w, &mut q, &active);
        active.iter().map(|&i| (q[i] - b[i]).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn solves_point_source_on_disc() {
        let mut mg = MaskedPoisson::<f64>::new(&[-40, -40], &[40, 40], disc(37));
        let mut b = vec![0.0; mg.len()];
        mg.for_each_active(|x, i| {
            if x.iter().all(|&c| c == 0) {
                b[i] = 1.0;
            }
        });
        let mut w = vec![0.0; mg.len()];
        let rep = mg.solve(&b, &mut w, 1e-12, 100);
        assert!(rep.converged);
        assert!(rep.iterations < 40, "{} iterations", rep.iterations);
        assert!(residual_norm(&mg, &w, &b) <= 1e-11);
        // Inverse of an M-matrix is positive.
        mg.for_each_active(|_, i| assert!(w[i] > 0.0));
    }

    #[test]
    fn irregular_domain_three_dimensions() {
        let mut mg = MaskedPoisson::<f64>::new(&[-9, -7, -8], &[10, 7, 8], |x: &[i64]| {
            disc(8)(x) || (x[0] > 0 && x[1].abs() < 3 && x[2].abs() < 3)
        });
        let mut b = vec![0.0; mg.len()];
        mg.for_each_active(|x, i| b[i] = 1.0 + x[0] as f64 * 0.1);
        let mut w = vec![0.0; mg.len()];
        let rep = mg.solve(&b, &mut w, 1e-12, 200);
        assert!(rep.converged);
        let b_norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(residual_norm(&mg, &w, &b) <= 1e-11 * b_norm);
    }

    #[test]
    fn single_site_domain() {
        let mut mg = MaskedPoisson::<f64>::new(&[0, 0], &[0, 0], |_| true);
        let mut b = vec![0.0; mg.len()];
        mg.for_each_active(|_, i| b[i] = 8.0);
        let mut w = vec![0.0; mg.len()];
        assert!(mg.solve(&b, &mut w, 1e-12, 10).converged);
        mg.for_each_active(|_, i| assert!((w[i] - 2.0).abs() < 1e-14));
    }

    #[test]
    fn symmetric_problem_gives_symmetric_solution() {
        let mut mg = MaskedPoisson::<f64>::new(&[-21, -21], &[21, 21], disc(20));
        let mut b = vec![0.0; mg.len()];
        let mut pos = std::collections::HashMap::new();
        mg.for_each_active(|x, i| {
            b[i] = if x == [0, 0] { 100.0 } else { -0.1 };
            pos.insert((x[0], x[1]), i);
        });
        let mut w = vec![0.0; mg.len()];
        assert!(mg.solve(&b, &mut w, 1e-13, 100).converged);
        for (&(a, c), &i) in &pos {
            let j = pos[&(-c, a)];
            assert!((w[i] - w[j]).abs() <= 1e-10 * w[i].abs().max(1.0));
        }
    }
}
