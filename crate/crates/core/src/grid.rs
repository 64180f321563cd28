//! Periodic lattices and the scalar fields sampled on them.
//!
//! A [`Grid`] is the torus `[0, L)^d` with `n` points per axis. Point `j` on an
//! axis sits at `x = j h`, so the domain midpoint `L/2` is itself a grid point
//! (index `n/2`) and reflection about it maps the lattice onto itself.
//! Values are stored row-major: the last axis is contiguous.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest supported spatial dimension.
pub const MAX_DIM: usize = 3;

/// Relative tolerance for the nonnegativity check on density fields.
pub const DENSITY_NEG_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("dimension {0} unsupported (expected 1, 2 or 3)")]
    BadDimension(usize),
    #[error("n = {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("n = {0} is below the minimum of 8 points per axis")]
    TooFewPoints(usize),
    #[error("side length {0} must be positive and finite")]
    BadLength(f64),
    #[error("fields live on different grids")]
    Mismatch,
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("density has min {min:e} below -{DENSITY_NEG_TOL:e} * max ({max:e})")]
    Negative { min: f64, max: f64 },
    #[error("Lebesgue exponent p = {0} must be at least 1")]
    BadExponent(f64),
}

/// Uniform periodic lattice in dimension 1, 2 or 3.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    dim: usize,
    n: usize,
    len: f64,
    h: f64,
}

impl Grid {
    pub fn new(dim: usize, n: usize, len: f64) -> Result<Self, GridError> {
        if !(1..=MAX_DIM).contains(&dim) {
            return Err(GridError::BadDimension(dim));
        }
        if !n.is_power_of_two() {
            return Err(GridError::NotPowerOfTwo(n));
        }
        if n < 8 {
            return Err(GridError::TooFewPoints(n));
        }
        if !(len > 0.0 && len.is_finite()) {
            return Err(GridError::BadLength(len));
        }
        Ok(Self {
            dim,
            n,
            len,
            h: len / n as f64,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> f64 {
        self.len
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// Total number of points, `n^d`.
    pub fn size(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    /// Quadrature weight `h^d`.
    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.dim as i32)
    }

    /// Domain volume `L^d`.
    pub fn volume(&self) -> f64 {
        self.len.powi(self.dim as i32)
    }

    /// Coordinate of the domain midpoint along every axis.
    pub fn center(&self) -> f64 {
        0.5 * self.len
    }

    /// Linear stride of `axis` in the row-major layout.
    pub fn stride(&self, axis: usize) -> usize {
        self.n.pow((self.dim - 1 - axis) as u32)
    }

    /// Per-axis indices of a linear index. Unused trailing slots are zero.
    pub fn multi_index(&self, mut idx: usize) -> [usize; MAX_DIM] {
        let mut out = [0; MAX_DIM];
        for a in (0..self.dim).rev() {
            out[a] = idx % self.n;
            idx /= self.n;
        }
        out
    }

    pub fn linear_index(&self, m: &[usize]) -> usize {
        m[..self.dim].iter().fold(0, |acc, &i| acc * self.n + i)
    }

    /// Periodic neighbour of `idx` one step along `axis` in direction `forward`.
    #[inline]
    pub fn neighbor(&self, idx: usize, axis: usize, forward: bool) -> usize {
        let s = self.stride(axis);
        let i = (idx / s) % self.n;
        if forward {
            if i + 1 == self.n {
                idx + s - self.n * s
            } else {
                idx + s
            }
        } else if i == 0 {
            idx + (self.n - 1) * s
        } else {
            idx - s
        }
    }

    /// Index of the point reflected through the domain midpoint.
    pub fn reflect(&self, idx: usize) -> usize {
        let m = self.multi_index(idx);
        let mut r = [0; MAX_DIM];
        for a in 0..self.dim {
            r[a] = (self.n - m[a]) % self.n;
        }
        self.linear_index(&r)
    }

    /// Minimal-image displacement of point `idx` from the domain midpoint.
    /// Components lie in `[-L/2, L/2)`.
    pub fn displacement(&self, idx: usize) -> [f64; MAX_DIM] {
        let m = self.multi_index(idx);
        let mut x = [0.0; MAX_DIM];
        for a in 0..self.dim {
            x[a] = m[a] as f64 * self.h - self.center();
        }
        x
    }

    /// Minimal-image displacement of point `idx` from the origin point (index 0).
    /// Used for kernels centred at the origin cell.
    pub fn origin_offset(&self, idx: usize) -> [f64; MAX_DIM] {
        let m = self.multi_index(idx);
        let mut x = [0.0; MAX_DIM];
        for a in 0..self.dim {
            let j = m[a] as i64;
            let j = if j < (self.n / 2) as i64 {
                j
            } else {
                j - self.n as i64
            };
            x[a] = j as f64 * self.h;
        }
        x
    }

    /// Angular wavenumber `(2 pi / L) k` for FFT bin `m`, `k` in `[-n/2, n/2)`.
    pub fn wavenumber(&self, m: usize) -> f64 {
        let k = if m < self.n / 2 {
            m as i64
        } else {
            m as i64 - self.n as i64
        };
        2.0 * std::f64::consts::PI / self.len * k as f64
    }

    pub fn check_same(&self, other: &Grid) -> Result<(), GridError> {
        if self == other {
            Ok(())
        } else {
            Err(GridError::Mismatch)
        }
    }
}

/// Euclidean norm of the first `dim` components.
#[inline]
pub fn norm(x: &[f64; MAX_DIM], dim: usize) -> f64 {
    x[..dim].iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldRole {
    Density,
    Potential,
    Component,
}

/// Real scalar samples on a [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: Grid,
    values: Vec<f64>,
    role: FieldRole,
}

/// A `d`-tuple of fields, one per axis.
pub type VectorField = Vec<Field>;

impl Field {
    pub fn zeros(grid: Grid, role: FieldRole) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.size()],
            role,
        }
    }

    pub fn constant(grid: Grid, role: FieldRole, c: f64) -> Self {
        Self {
            grid,
            values: vec![c; grid.size()],
            role,
        }
    }

    pub fn from_values(grid: Grid, role: FieldRole, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.size(), "value count does not match grid");
        Self { grid, values, role }
    }

    /// Sample `f` at the displacement of every point from the domain midpoint.
    pub fn from_displacement_fn(
        grid: Grid,
        role: FieldRole,
        f: impl Fn(&[f64; MAX_DIM]) -> f64,
    ) -> Self {
        let values = (0..grid.size()).map(|i| f(&grid.displacement(i))).collect();
        Self { grid, values, role }
    }

    /// Sample `f` at the absolute coordinates `x = j h` of every point.
    pub fn from_coord_fn(grid: Grid, role: FieldRole, f: impl Fn(&[f64; MAX_DIM]) -> f64) -> Self {
        let values = (0..grid.size())
            .map(|i| {
                let m = grid.multi_index(i);
                let mut x = [0.0; MAX_DIM];
                for a in 0..grid.dim() {
                    x[a] = m[a] as f64 * grid.h();
                }
                f(&x)
            })
            .collect();
        Self { grid, values, role }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn role(&self) -> FieldRole {
        self.role
    }

    pub fn with_role(mut self, role: FieldRole) -> Self {
        self.role = role;
        self
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

    /// Discrete integral `sum u h^d`.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Discrete inner product `sum u v h^d`.
    pub fn dot(&self, other: &Field) -> Result<f64, GridError> {
        self.grid.check_same(&other.grid)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            * self.grid.cell_volume())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
            role: self.role,
        }
    }

    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Result<Field, GridError> {
        self.grid.check_same(&other.grid)?;
        Ok(Field {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            role: self.role,
        })
    }

    /// Cyclic shift by `shift[a]` points along each axis.
    pub fn shifted(&self, shift: &[isize]) -> Field {
        let g = self.grid;
        let n = g.n() as isize;
        let mut out = vec![0.0; g.size()];
        for (i, &v) in self.values.iter().enumerate() {
            let m = g.multi_index(i);
            let mut t = [0usize; MAX_DIM];
            for a in 0..g.dim() {
                t[a] = (m[a] as isize + shift[a]).rem_euclid(n) as usize;
            }
            out[g.linear_index(&t)] = v;
        }
        Field::from_values(g, self.role, out)
    }

    pub fn check_finite(&self) -> Result<(), GridError> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(GridError::NonFinite {
                index,
                value: self.values[index],
            }),
            None => Ok(()),
        }
    }

    /// Finite entries and, for densities, `min >= -1e-12 max`.
    pub fn validate(&self) -> Result<(), GridError> {
        self.check_finite()?;
        if self.role == FieldRole::Density {
            let (min, max) = (self.min(), self.max());
            if min < -DENSITY_NEG_TOL * max.max(0.0) {
                return Err(GridError::Negative { min, max });
            }
        }
        Ok(())
    }

    /// `||self - other||_{L^1}`.
    pub fn l1_distance(&self, other: &Field) -> Result<f64, GridError> {
        self.grid.check_same(&other.grid)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * self.grid.cell_volume())
    }
}

/// Discrete `L^p` norm with quadrature weight `h^d`; `p = inf` gives the max norm.
pub fn lp_norm(u: &Field, p: f64) -> Result<f64, GridError> {
    lp_sum(u.values(), p, u.grid().cell_volume())
}

/// Discrete `L^p(0,T)` norm of a uniformly spaced series of spatial norms.
pub fn lp_time_norm(series: &[f64], p: f64, dt: f64) -> Result<f64, GridError> {
    lp_sum(series, p, dt)
}

fn lp_sum(values: &[f64], p: f64, weight: f64) -> Result<f64, GridError> {
    if p.is_nan() || p < 1.0 {
        return Err(GridError::BadExponent(p));
    }
    if p.is_infinite() {
        return Ok(values.iter().fold(0.0, |m, v| m.max(v.abs())));
    }
    if p == 1.0 {
        return Ok(values.iter().map(|v| v.abs()).sum::<f64>() * weight);
    }
    let s: f64 = values.iter().map(|v| v.abs().powf(p)).sum::<f64>() * weight;
    Ok(s.powf(1.0 / p))
}
