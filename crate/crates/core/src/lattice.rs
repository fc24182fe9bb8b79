//! Dense storage for functions on a centered box `[-R, R]^d` of the integer
//! lattice, together with the normalised discrete Laplacian and one-step
//! discrete derivatives.
//!
//! Values are kept in a single flat array. Axis 0 has stride 1 and the
//! index of a site `x` is `sum_i (x_i + R) * (2R + 1)^i`. Reads outside the
//! box return the zero value of the element type: every field handled here
//! is compactly supported and the engine grows the box before it would write
//! past the hull.

use std::fmt;

use crate::error::{Result, SandpileError};
use crate::scalar::Real;

/// A point of `Z^d`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Site(Vec<i64>);

impl Site {
    pub fn new(coords: Vec<i64>) -> Self {
        Site(coords)
    }

    pub fn origin(dim: usize) -> Self {
        Site(vec![0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[i64] {
        &self.0
    }

    pub fn is_origin(&self) -> bool {
        self.0.iter().all(|&c| c == 0)
    }

    pub fn l1_distance(&self, other: &Site) -> i64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).sum()
    }

    pub fn norm_sq(&self) -> i64 {
        self.0.iter().map(|c| c * c).sum()
    }

    pub fn step(&self, e: Direction) -> Site {
        let mut c = self.0.clone();
        c[e.axis] += i64::from(e.sign);
        Site(c)
    }
}

impl From<Vec<i64>> for Site {
    fn from(v: Vec<i64>) -> Self {
        Site(v)
    }
}

impl<const N: usize> From<[i64; N]> for Site {
    fn from(v: [i64; N]) -> Self {
        Site(v.to_vec())
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

/// A signed unit lattice vector `sign * e_axis`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Direction {
    pub axis: usize,
    pub sign: i8,
}

impl Direction {
    pub fn new(axis: usize, sign: i8) -> Self {
        assert!(sign == 1 || sign == -1, "direction sign must be +1 or -1");
        Direction { axis, sign }
    }

    /// The `2d` directions, axis ascending, minus before plus.
    pub fn all(dim: usize) -> impl Iterator<Item = Direction> {
        (0..dim).flat_map(|axis| [Direction::new(axis, -1), Direction::new(axis, 1)])
    }

    pub fn reversed(self) -> Direction {
        Direction { axis: self.axis, sign: -self.sign }
    }
}

/// The `2d` lattice neighbours of `x`, axis ascending, minus before plus.
pub fn neighbors(x: &Site) -> Vec<Site> {
    Direction::all(x.dim()).map(|e| x.step(e)).collect()
}

/// A function on `[-R, R]^d ∩ Z^d`, zero outside.
#[derive(Clone, Debug, PartialEq)]
pub struct LatticeField<T> {
    dim: usize,
    radius: i64,
    side: usize,
    strides: Vec<usize>,
    values: Vec<T>,
}

fn box_len(dim: usize, radius: i64) -> Result<usize> {
    let side = usize::try_from(2 * radius + 1)
        .map_err(|_| SandpileError::InvalidConfig(format!("negative radius {radius}")))?;
    let mut len = 1usize;
    for _ in 0..dim {
        len = len.checked_mul(side).ok_or_else(|| {
            SandpileError::Resource(format!("box [-{radius},{radius}]^{dim} overflows usize"))
        })?;
    }
    Ok(len)
}

impl<T: Copy + Default> LatticeField<T> {
    /// A zero field on `[-radius, radius]^dim`.
    pub fn new(dim: usize, radius: i64) -> Result<Self> {
        if dim < 2 {
            return Err(SandpileError::InvalidConfig(format!(
                "lattice dimension must be at least 2, got {dim}"
            )));
        }
        if radius < 0 {
            return Err(SandpileError::InvalidConfig(format!("negative radius {radius}")));
        }
        let len = box_len(dim, radius)?;
        let mut values = Vec::new();
        values.try_reserve_exact(len).map_err(|e| {
            SandpileError::Resource(format!("cannot allocate {len} lattice values: {e}"))
        })?;
        values.resize(len, T::default());
        let side = (2 * radius + 1) as usize;
        let strides = (0..dim).map(|i| side.pow(i as u32)).collect();
        Ok(LatticeField { dim, radius, side, strides, values })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn radius(&self) -> i64 {
        self.radius
    }

    /// Number of sites along each axis, `2R + 1`.
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn contains(&self, coords: &[i64]) -> bool {
        coords.len() == self.dim && coords.iter().all(|c| c.abs() <= self.radius)
    }

    pub fn index_of(&self, coords: &[i64]) -> Option<usize> {
        if !self.contains(coords) {
            return None;
        }
        Some(
            coords
                .iter()
                .zip(&self.strides)
                .map(|(&c, &s)| (c + self.radius) as usize * s)
                .sum(),
        )
    }

    /// Writes the coordinates of flat index `idx` into `out`.
    pub fn coords_into(&self, mut idx: usize, out: &mut [i64]) {
        for c in out.iter_mut().take(self.dim) {
            *c = (idx % self.side) as i64 - self.radius;
            idx /= self.side;
        }
    }

    pub fn site_of(&self, idx: usize) -> Site {
        let mut c = vec![0; self.dim];
        self.coords_into(idx, &mut c);
        Site(c)
    }

    /// True if the site at `idx` has a coordinate on `±(R - margin)` or beyond.
    pub fn near_hull(&self, idx: usize, margin: i64) -> bool {
        let mut rest = idx;
        for _ in 0..self.dim {
            let c = (rest % self.side) as i64 - self.radius;
            if c.abs() >= self.radius - margin {
                return true;
            }
            rest /= self.side;
        }
        false
    }

    pub fn get(&self, x: &Site) -> T {
        self.get_coords(x.coords())
    }

    pub fn get_coords(&self, coords: &[i64]) -> T {
        self.index_of(coords).map_or_else(T::default, |i| self.values[i])
    }

    /// Sets the value at `x`.
    ///
    /// Panics if `x` is outside the box; callers grow first.
    pub fn set(&mut self, x: &Site, v: T) {
        let i = self
            .index_of(x.coords())
            .unwrap_or_else(|| panic!("write at {x} outside box of radius {}", self.radius));
        self.values[i] = v;
    }

    /// Re-embeds the field in a larger box, padding with zeros.
    pub fn grow(&self, new_radius: i64) -> Result<Self> {
        if new_radius <= self.radius {
            return Err(SandpileError::InvalidConfig(format!(
                "grow requires new radius {new_radius} > current radius {}",
                self.radius
            )));
        }
        let mut out = LatticeField::new(self.dim, new_radius)?;
        let offset = (new_radius - self.radius) as usize;
        let mut coords = vec![0usize; self.dim];
        // Copy axis-0 runs.
        let rows = self.values.len() / self.side;
        for row in 0..rows {
            let mut r = row;
            for c in coords.iter_mut().skip(1) {
                *c = r % self.side;
                r /= self.side;
            }
            let dst: usize = offset
                + coords
                    .iter()
                    .zip(&out.strides)
                    .skip(1)
                    .map(|(&c, &s)| (c + offset) * s)
                    .sum::<usize>();
            let src = row * self.side;
            out.values[dst..dst + self.side].copy_from_slice(&self.values[src..src + self.side]);
        }
        Ok(out)
    }

    /// Flat indices of the `2d` neighbours of an index that is not on the hull,
    /// in [`Direction::all`] order.
    #[inline]
    pub fn interior_neighbors(&self, idx: usize) -> impl Iterator<Item = usize> + '_ {
        self.strides.iter().flat_map(move |&s| [idx - s, idx + s])
    }
}

impl<T: Real> LatticeField<T> {
    /// `Δ¹f(x) = (1/2d) Σ_{y∼x} [f(y) − f(x)]`.
    pub fn laplacian(&self, x: &Site) -> T {
        let fx = self.get(x);
        let mut acc = T::zero();
        for e in Direction::all(self.dim) {
            acc += self.get(&x.step(e)) - fx;
        }
        acc / T::from_count(2 * self.dim)
    }

    /// `∇ₑ¹f(x) = f(x + e) − f(x)`.
    pub fn derivative(&self, x: &Site, e: Direction) -> T {
        self.get(&x.step(e)) - self.get(x)
    }

    pub fn sum(&self) -> T {
        self.values.iter().copied().sum()
    }

    pub fn max_value(&self) -> T {
        self.values.iter().copied().fold(T::zero(), T::max)
    }

    pub fn from_fn(dim: usize, radius: i64, f: impl Fn(&Site) -> T) -> Result<Self> {
        let mut out = LatticeField::new(dim, radius)?;
        for i in 0..out.len() {
            let x = out.site_of(i);
            out.values[i] = f(&x);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(dim: usize, r: i64, f: impl Fn(&Site) -> f64) -> LatticeField<f64> {
        LatticeField::from_fn(dim, r, f).unwrap()
    }

    #[test]
    fn neighbors_fixed_order_2d() {
        let got = neighbors(&Site::from([0, 0]));
        let want: Vec<Site> =
            vec![[-1, 0].into(), [1, 0].into(), [0, -1].into(), [0, 1].into()];
        assert_eq!(got, want);
    }

    #[test]
    fn neighbors_3d_are_unit_distance() {
        let x = Site::from([1, 2, 3]);
        let ns = neighbors(&x);
        assert_eq!(ns.len(), 6);
        assert!(ns.iter().all(|y| y.l1_distance(&x) == 1));
        let mut dedup = ns.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 6);
    }

    #[test]
    fn laplacian_of_constant_vanishes_inside() {
        let f = field(2, 3, |_| 7.5);
        for i in 0..f.len() {
            let x = f.site_of(i);
            if !f.near_hull(i, 0) {
                assert_eq!(f.laplacian(&x), 0.0);
            }
        }
    }

    #[test]
    fn laplacian_of_point_mass() {
        let f = field(2, 2, |x| if x.is_origin() { 1.0 } else { 0.0 });
        assert_eq!(f.laplacian(&Site::from([0, 0])), -1.0);
        assert_eq!(f.laplacian(&Site::from([1, 0])), 0.25);
    }

    #[test]
    fn laplacian_of_norm_squared_is_one() {
        for dim in 2..=4 {
            let f = field(dim, 3, |x| x.norm_sq() as f64);
            for i in 0..f.len() {
                if !f.near_hull(i, 0) {
                    assert_eq!(f.laplacian(&f.site_of(i)), 1.0, "dim {dim}");
                }
            }
        }
    }

    #[test]
    fn derivatives() {
        let c = field(2, 2, |_| 3.0);
        assert_eq!(c.derivative(&Site::from([0, 0]), Direction::new(0, 1)), 0.0);
        let delta = field(2, 2, |x| if x.is_origin() { 1.0 } else { 0.0 });
        assert_eq!(delta.derivative(&Site::from([0, 0]), Direction::new(0, 1)), -1.0);
        let lin = field(2, 2, |x| x.coords()[0] as f64);
        assert_eq!(lin.derivative(&Site::from([0, 1]), Direction::new(0, 1)), 1.0);
        assert_eq!(lin.derivative(&Site::from([0, 1]), Direction::new(0, -1)), -1.0);
    }

    #[test]
    fn reads_outside_box_are_zero() {
        let f = field(2, 1, |_| 1.0);
        assert_eq!(f.get(&Site::from([2, 0])), 0.0);
        assert_eq!(f.get_coords(&[0, -5]), 0.0);
    }

    #[test]
    fn grow_preserves_values_and_pads_zeros() {
        let f = field(2, 1, |x| (x.coords()[0] * 10 + x.coords()[1]) as f64 + 100.0);
        let g = f.grow(2).unwrap();
        assert_eq!(g.len(), 25);
        let mut old = 0;
        let mut zeros = 0;
        for i in 0..g.len() {
            let x = g.site_of(i);
            if f.contains(x.coords()) {
                assert_eq!(g.values()[i], f.get(&x));
                old += 1;
            } else {
                assert_eq!(g.values()[i], 0.0);
                zeros += 1;
            }
        }
        assert_eq!((old, zeros), (9, 16));
        assert_eq!(g.sum(), f.sum());
    }

    #[test]
    fn grow_twice_equals_grow_once() {
        let f = field(3, 1, |x| x.norm_sq() as f64 + 0.5);
        assert_eq!(f.grow(2).unwrap().grow(4).unwrap(), f.grow(4).unwrap());
    }

    #[test]
    fn grow_rejects_non_increasing_radius() {
        let f: LatticeField<f64> = LatticeField::new(2, 2).unwrap();
        assert!(f.grow(2).is_err());
    }

    #[test]
    fn dimension_one_rejected() {
        assert!(LatticeField::<f64>::new(1, 3).is_err());
    }

    #[test]
    fn works_in_single_precision() {
        let f: LatticeField<f32> =
            LatticeField::from_fn(2, 2, |x| x.norm_sq() as f32).unwrap();
        assert_eq!(f.laplacian(&Site::from([1, -1])), 1.0_f32);
    }

    #[test]
    fn index_round_trip() {
        let f: LatticeField<f64> = LatticeField::new(3, 2).unwrap();
        for i in 0..f.len() {
            assert_eq!(f.index_of(f.site_of(i).coords()), Some(i));
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn laplacian_telescopes_into_derivatives(
                vals in proptest::collection::vec(-1e3f64..1e3, 49),
                xi in -2i64..=2, yi in -2i64..=2,
            ) {
                let mut f: LatticeField<f64> = LatticeField::new(2, 3).unwrap();
                f.values_mut().copy_from_slice(&vals);
                let x = Site::from([xi, yi]);
                let total: f64 = Direction::all(2).map(|e| f.derivative(&x, e)).sum();
                let lap = 4.0 * f.laplacian(&x);
                prop_assert!((total - lap).abs() <= 1e-9 * (1.0 + total.abs()));
            }

            #[test]
            fn discrete_maximum_principle_on_subharmonic_fields(
                vals in proptest::collection::vec(0.0f64..1.0, 25),
            ) {
                // |x|^2 has Δ¹ = 1; raising boundary values only raises Δ¹ inside.
                let mut f: LatticeField<f64> =
                    LatticeField::from_fn(2, 2, |x| x.norm_sq() as f64).unwrap();
                for i in 0..f.len() {
                    if f.near_hull(i, 0) {
                        f.values_mut()[i] += vals[i];
                    }
                }
                let mut interior_max = f64::MIN;
                let mut boundary_max = f64::MIN;
                for i in 0..f.len() {
                    let v = f.values()[i];
                    if f.near_hull(i, 0) {
                        boundary_max = boundary_max.max(v);
                    } else {
                        prop_assert!(f.laplacian(&f.site_of(i)) >= 0.0);
                        interior_max = interior_max.max(v);
                    }
                }
                prop_assert!(boundary_max >= interior_max);
            }
        }
    }
}
