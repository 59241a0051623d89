//! Uniform 1-D grid on [-L, L], finite differences, quadrature and shifts.
//!
//! A `Profile` stores `n_components` rows of `N` values, component-major.
//! Difference operators treat the stored values as the deviation
//! X = U - Phi_ref, so ghost values outside the grid are zero in
//! `DirichletOnX` mode. Fields with non-zero limits go through the
//! `*_with_ghosts` helpers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    DirichletOnX,
    Periodic,
}

/// Central difference stencil used by every operator on a grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stencil {
    /// 3-point, second order.
    Second,
    /// 5-point, fourth order.
    Fourth,
}

impl Stencil {
    pub fn radius(self) -> usize {
        match self {
            Stencil::Second => 1,
            Stencil::Fourth => 2,
        }
    }

    /// First-derivative weights at offsets -r..=r, to be divided by dx.
    pub fn d1(self) -> &'static [f64] {
        match self {
            Stencil::Second => &[-0.5, 0.0, 0.5],
            Stencil::Fourth => &[1.0 / 12.0, -2.0 / 3.0, 0.0, 2.0 / 3.0, -1.0 / 12.0],
        }
    }

    /// Second-derivative weights at offsets -r..=r, to be divided by dx^2.
    pub fn d2(self) -> &'static [f64] {
        match self {
            Stencil::Second => &[1.0, -2.0, 1.0],
            Stencil::Fourth => &[-1.0 / 12.0, 4.0 / 3.0, -2.5, 4.0 / 3.0, -1.0 / 12.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    half_length: f64,
    n_points: usize,
    dx: f64,
    boundary: BoundaryMode,
    stencil: Stencil,
}

impl Grid {
    pub fn new(half_length: f64, n_points: usize, boundary: BoundaryMode, stencil: Stencil) -> Result<Self> {
        if !(half_length.is_finite() && half_length > 0.0) {
            return Err(Error::InvalidParameter(format!("half_length {half_length}")));
        }
        if n_points < 16 {
            return Err(Error::InvalidParameter(format!("n_points {n_points} < 16")));
        }
        Ok(Self {
            half_length,
            n_points,
            dx: match boundary {
                // x = L is identified with x = -L and not stored.
                BoundaryMode::Periodic => 2.0 * half_length / n_points as f64,
                BoundaryMode::DirichletOnX => 2.0 * half_length / (n_points - 1) as f64,
            },
            boundary,
            stencil,
        })
    }

    /// Dirichlet-on-X grid with the fourth-order stencil.
    pub fn dirichlet(half_length: f64, n_points: usize) -> Result<Self> {
        Self::new(half_length, n_points, BoundaryMode::DirichletOnX, Stencil::Fourth)
    }

    pub fn with_stencil(mut self, stencil: Stencil) -> Self {
        self.stencil = stencil;
        self
    }

    pub fn half_length(&self) -> f64 {
        self.half_length
    }
    pub fn len(&self) -> usize {
        self.n_points
    }
    pub fn is_empty(&self) -> bool {
        self.n_points == 0
    }
    pub fn dx(&self) -> f64 {
        self.dx
    }
    pub fn boundary(&self) -> BoundaryMode {
        self.boundary
    }
    pub fn stencil(&self) -> Stencil {
        self.stencil
    }

    pub fn x(&self, i: usize) -> f64 {
        if self.boundary == BoundaryMode::Periodic {
            return -self.half_length + i as f64 * self.dx;
        }
        // Symmetric evaluation keeps x(N-1) == L exactly.
        let n1 = (self.n_points - 1) as f64;
        let t = i as f64;
        self.half_length * (2.0 * t - n1) / n1
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.n_points).map(|i| self.x(i)).collect()
    }

    /// Quadrature weights of the inner product.
    pub fn weight(&self, i: usize) -> f64 {
        match self.boundary {
            BoundaryMode::DirichletOnX if i == 0 || i + 1 == self.n_points => 0.5 * self.dx,
            _ => self.dx,
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..self.n_points).map(|i| self.weight(i)).collect()
    }

    /// Weighted dot product of two single-component arrays.
    pub fn dot(&self, a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), self.n_points);
        let n = self.n_points;
        let interior: f64 = a[1..n - 1].iter().zip(&b[1..n - 1]).map(|(x, y)| x * y).sum();
        let ends = a[0] * b[0] + a[n - 1] * b[n - 1];
        match self.boundary {
            BoundaryMode::DirichletOnX => self.dx * (interior + 0.5 * ends),
            BoundaryMode::Periodic => self.dx * (interior + ends),
        }
    }

    fn apply(&self, coeffs: &[f64], scale: f64, v: &[f64], left: f64, right: f64, out: &mut [f64]) {
        let n = self.n_points as isize;
        let r = self.stencil.radius() as isize;
        let periodic = self.boundary == BoundaryMode::Periodic;
        for i in 0..n {
            let mut s = 0.0;
            if i >= r && i < n - r {
                for (k, c) in coeffs.iter().enumerate() {
                    s += c * v[(i + k as isize - r) as usize];
                }
            } else {
                for (k, c) in coeffs.iter().enumerate() {
                    let j = i + k as isize - r;
                    let val = if j < 0 {
                        if periodic {
                            v[(j + n) as usize]
                        } else {
                            left
                        }
                    } else if j >= n {
                        if periodic {
                            v[(j - n) as usize]
                        } else {
                            right
                        }
                    } else {
                        v[j as usize]
                    };
                    s += c * val;
                }
            }
            out[i as usize] = s * scale;
        }
    }

    /// d/dx of one component with explicit ghost values beyond each end.
    pub fn d1_with_ghosts(&self, v: &[f64], left: f64, right: f64, out: &mut [f64]) {
        self.apply(self.stencil.d1(), 1.0 / self.dx, v, left, right, out);
    }

    /// d^2/dx^2 of one component with explicit ghost values beyond each end.
    pub fn d2_with_ghosts(&self, v: &[f64], left: f64, right: f64, out: &mut [f64]) {
        self.apply(self.stencil.d2(), 1.0 / (self.dx * self.dx), v, left, right, out);
    }

    /// Values of `v(x - gamma)` by 4-point Lagrange interpolation with
    /// constant extension (`left`, `right`) outside the grid.
    pub fn shift_with_ghosts(&self, v: &[f64], gamma: f64, left: f64, right: f64, out: &mut [f64]) -> Result<()> {
        if !gamma.is_finite() || gamma.abs() >= 0.5 * self.half_length {
            return Err(Error::ShiftOutOfDomain {
                gamma,
                limit: 0.5 * self.half_length,
            });
        }
        let n = self.n_points as isize;
        if gamma == 0.0 {
            out.copy_from_slice(v);
            return Ok(());
        }
        let periodic = self.boundary == BoundaryMode::Periodic;
        let fetch = |j: isize| -> f64 {
            if periodic {
                v[j.rem_euclid(n) as usize]
            } else if j < 0 {
                left
            } else if j >= n {
                right
            } else {
                v[j as usize]
            }
        };
        let s = gamma / self.dx;
        let base = s.floor();
        // target index i - s = i - base - frac
        let frac = s - base;
        let b = base as isize;
        if frac == 0.0 {
            for i in 0..n {
                out[i as usize] = fetch(i - b);
            }
            return Ok(());
        }
        // Interpolate at position j0 + t with t = 1 - frac in [0, 1).
        let t = 1.0 - frac;
        let w0 = -t * (t - 1.0) * (t - 2.0) / 6.0;
        let w1 = (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0;
        let w2 = -(t + 1.0) * t * (t - 2.0) / 2.0;
        let w3 = (t + 1.0) * t * (t - 1.0) / 6.0;
        for i in 0..n {
            let j0 = i - b - 1;
            out[i as usize] = w0 * fetch(j0 - 1) + w1 * fetch(j0) + w2 * fetch(j0 + 1) + w3 * fetch(j0 + 2);
        }
        Ok(())
    }
}

/// An n-component real function on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Profile {
    grid: Grid,
    ncomp: usize,
    values: Vec<f64>,
}

impl Profile {
    pub fn zeros(grid: Grid, ncomp: usize) -> Self {
        Self {
            grid,
            ncomp,
            values: vec![0.0; ncomp * grid.len()],
        }
    }

    pub fn from_values(grid: Grid, ncomp: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != ncomp * grid.len() {
            return Err(Error::InvalidParameter(format!(
                "profile has {} values, expected {}",
                values.len(),
                ncomp * grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("profile"));
        }
        Ok(Self { grid, ncomp, values })
    }

    /// Builds component `c` at node `x` from `f(c, x)`.
    pub fn from_fn(grid: Grid, ncomp: usize, f: impl Fn(usize, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(ncomp * grid.len());
        for c in 0..ncomp {
            for i in 0..grid.len() {
                values.push(f(c, grid.x(i)));
            }
        }
        Self { grid, ncomp, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }
    pub fn ncomp(&self) -> usize {
        self.ncomp
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
    pub fn component(&self, c: usize) -> &[f64] {
        let n = self.grid.len();
        &self.values[c * n..(c + 1) * n]
    }
    pub fn component_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.grid.len();
        &mut self.values[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check_same(&self, other: &Profile) -> Result<()> {
        if self.grid != other.grid || self.ncomp != other.ncomp {
            return Err(Error::GridMismatch);
        }
        Ok(())
    }

    pub fn inner_product(&self, other: &Profile) -> Result<f64> {
        self.check_same(other)?;
        Ok((0..self.ncomp)
            .map(|c| self.grid.dot(self.component(c), other.component(c)))
            .sum())
    }

    /// Inner product without the compatibility check; panics on mismatch in debug builds.
    pub fn dot(&self, other: &Profile) -> f64 {
        debug_assert!(self.grid == other.grid && self.ncomp == other.ncomp);
        (0..self.ncomp)
            .map(|c| self.grid.dot(self.component(c), other.component(c)))
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// ||v||^2 + ||v'||^2.
    pub fn h1_norm_sq(&self) -> f64 {
        let d = self.first_difference_unchecked();
        self.norm_sq() + d.norm_sq()
    }

    fn first_difference_unchecked(&self) -> Profile {
        let mut out = Profile::zeros(self.grid, self.ncomp);
        for c in 0..self.ncomp {
            let n = self.grid.len();
            let (src, dst) = (&self.values[c * n..(c + 1) * n], &mut out.values[c * n..(c + 1) * n]);
            self.grid.d1_with_ghosts(src, 0.0, 0.0, dst);
        }
        out
    }

    pub fn first_difference(&self) -> Result<Profile> {
        if !self.is_finite() {
            return Err(Error::NonFinite("first_difference input"));
        }
        Ok(self.first_difference_unchecked())
    }

    pub fn second_difference(&self) -> Result<Profile> {
        if !self.is_finite() {
            return Err(Error::NonFinite("second_difference input"));
        }
        let mut out = Profile::zeros(self.grid, self.ncomp);
        let n = self.grid.len();
        for c in 0..self.ncomp {
            let (src, dst) = (&self.values[c * n..(c + 1) * n], &mut out.values[c * n..(c + 1) * n]);
            self.grid.d2_with_ghosts(src, 0.0, 0.0, dst);
        }
        Ok(out)
    }

    /// `p(x - gamma)`, constant extension by the end values of each component.
    pub fn shift(&self, gamma: f64) -> Result<Profile> {
        let mut out = Profile::zeros(self.grid, self.ncomp);
        let n = self.grid.len();
        for c in 0..self.ncomp {
            let src = &self.values[c * n..(c + 1) * n];
            let (l, r) = (src[0], src[n - 1]);
            self.grid
                .shift_with_ghosts(src, gamma, l, r, &mut out.values[c * n..(c + 1) * n])?;
        }
        Ok(out)
    }

    pub fn scale(&mut self, a: f64) {
        self.values.iter_mut().for_each(|v| *v *= a);
    }

    pub fn scaled(&self, a: f64) -> Profile {
        let mut p = self.clone();
        p.scale(a);
        p
    }

    /// self += a * other
    pub fn axpy(&mut self, a: f64, other: &Profile) {
        debug_assert_eq!(self.values.len(), other.values.len());
        self.values.iter_mut().zip(&other.values).for_each(|(s, o)| *s += a * o);
    }

    pub fn sub(&self, other: &Profile) -> Profile {
        let mut p = self.clone();
        p.axpy(-1.0, other);
        p
    }

    pub fn add(&self, other: &Profile) -> Profile {
        let mut p = self.clone();
        p.axpy(1.0, other);
        p
    }
}
