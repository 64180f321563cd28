//! Discrete Fourier transforms on a [`Grid`] and the operators built on them.
//!
//! Normalization: the forward transform sums `u h^d e^{-ikx}` so the zero mode
//! is the discrete integral; the inverse divides by `L^d`. Periodic
//! convolution is then a pointwise product of forward transforms.
//!
//! Odd-order derivatives drop the Nyquist bin (its derivative vanishes on the
//! lattice), so `divergence(gradient(u)) == laplacian(u)` holds for fields
//! without Nyquist content.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::grid::{Field, FieldRole, Grid, GridError, VectorField, MAX_DIM};

/// Complex coefficients of the forward transform of a field.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    grid: Grid,
    coeffs: Vec<Complex64>,
}

impl SpectralField {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    /// Coefficient at wavenumber zero: the discrete integral of the field.
    pub fn zero_mode(&self) -> Complex64 {
        self.coeffs[0]
    }
}

/// FFT plans and wavenumber tables for one grid.
#[derive(Clone)]
pub struct Spectral {
    grid: Grid,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    k: Vec<f64>,
}

impl std::fmt::Debug for Spectral {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Spectral").field("grid", &self.grid).finish()
    }
}

impl Spectral {
    pub fn new(grid: Grid) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(grid.n());
        let inv = planner.plan_fft_inverse(grid.n());
        let k = (0..grid.n()).map(|m| grid.wavenumber(m)).collect();
        Self { grid, fwd, inv, k }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Per-axis angular wavenumbers indexed by FFT bin.
    pub fn wavenumbers(&self) -> &[f64] {
        &self.k
    }

    /// Wave vector of linear mode index `idx`.
    pub fn wave_vector(&self, idx: usize) -> [f64; MAX_DIM] {
        let m = self.grid.multi_index(idx);
        let mut out = [0.0; MAX_DIM];
        for a in 0..self.grid.dim() {
            out[a] = self.k[m[a]];
        }
        out
    }

    /// True when any component of mode `idx` sits on the Nyquist bin.
    pub fn is_nyquist(&self, idx: usize) -> bool {
        let m = self.grid.multi_index(idx);
        (0..self.grid.dim()).any(|a| m[a] == self.grid.n() / 2)
    }

    /// `|k|^2` for every mode.
    pub fn k_squared(&self) -> Vec<f64> {
        (0..self.grid.size())
            .map(|i| {
                let k = self.wave_vector(i);
                k[..self.grid.dim()].iter().map(|v| v * v).sum()
            })
            .collect()
    }

    pub fn forward(&self, u: &Field) -> Result<SpectralField, GridError> {
        self.grid.check_same(u.grid())?;
        Ok(SpectralField {
            grid: self.grid,
            coeffs: self.forward_values(u.values()),
        })
    }

    pub fn forward_values(&self, values: &[f64]) -> Vec<Complex64> {
        debug_assert_eq!(values.len(), self.grid.size());
        let w = self.grid.cell_volume();
        let mut data: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v * w, 0.0)).collect();
        self.transform(&mut data, &self.fwd);
        data
    }

    pub fn inverse(&self, s: &SpectralField, role: FieldRole) -> Result<Field, GridError> {
        self.grid.check_same(s.grid())?;
        Ok(Field::from_values(
            self.grid,
            role,
            self.inverse_values(s.coeffs.clone()),
        ))
    }

    /// Inverse transform, keeping the real part.
    pub fn inverse_values(&self, mut coeffs: Vec<Complex64>) -> Vec<f64> {
        self.transform(&mut coeffs, &self.inv);
        let s = 1.0 / self.grid.volume();
        coeffs.into_iter().map(|c| c.re * s).collect()
    }

    /// Multiply the transform of `values` by `symbol(mode)` and transform back.
    pub fn apply_real_multiplier(&self, values: &[f64], symbol: &[f64]) -> Vec<f64> {
        let mut c = self.forward_values(values);
        for (c, &m) in c.iter_mut().zip(symbol) {
            *c *= m;
        }
        self.inverse_values(c)
    }

    fn transform(&self, data: &mut [Complex64], plan: &Arc<dyn Fft<f64>>) {
        let n = self.grid.n();
        let mut scratch = vec![Complex64::default(); plan.get_inplace_scratch_len()];
        let d = self.grid.dim();
        // Last axis: rows are contiguous.
        plan.process_with_scratch(data, &mut scratch);
        // Remaining axes: transpose each block so the lines become contiguous.
        let mut buf = Vec::new();
        for axis in (0..d - 1).rev() {
            let s = self.grid.stride(axis);
            let block = n * s;
            buf.resize(block, Complex64::default());
            for chunk in data.chunks_mut(block) {
                for k in 0..n {
                    for inner in 0..s {
                        buf[inner * n + k] = chunk[k * s + inner];
                    }
                }
                plan.process_with_scratch(&mut buf, &mut scratch);
                for k in 0..n {
                    for inner in 0..s {
                        chunk[k * s + inner] = buf[inner * n + k];
                    }
                }
            }
        }
    }

    /// Periodic convolution `sum_y u(y) k(x - y) h^d` of `u` with samples `k`
    /// centred at the origin point.
    pub fn convolve(&self, u: &Field, k: &Field) -> Result<Field, GridError> {
        self.grid.check_same(u.grid())?;
        self.grid.check_same(k.grid())?;
        let mut cu = self.forward_values(u.values());
        let ck = self.forward_values(k.values());
        for (a, b) in cu.iter_mut().zip(&ck) {
            *a *= b;
        }
        Ok(Field::from_values(self.grid, u.role(), self.inverse_values(cu)))
    }

    pub fn gradient(&self, u: &Field) -> Result<VectorField, GridError> {
        let c = self.forward(u)?.coeffs;
        Ok((0..self.grid.dim())
            .map(|a| self.derivative_component(&c, a, |_| 1.0))
            .collect())
    }

    pub fn divergence(&self, v: &[Field]) -> Result<Field, GridError> {
        assert_eq!(v.len(), self.grid.dim(), "vector field has wrong arity");
        let mut acc = vec![Complex64::default(); self.grid.size()];
        for (a, comp) in v.iter().enumerate() {
            let c = self.forward(comp)?.coeffs;
            for (i, (acc, c)) in acc.iter_mut().zip(&c).enumerate() {
                if self.is_nyquist_axis(i, a) {
                    continue;
                }
                *acc += Complex64::new(0.0, self.wave_vector(i)[a]) * c;
            }
        }
        Ok(Field::from_values(
            self.grid,
            FieldRole::Potential,
            self.inverse_values(acc),
        ))
    }

    pub fn laplacian(&self, u: &Field) -> Result<Field, GridError> {
        let k2 = self.k_squared();
        let mut c = self.forward(u)?.coeffs;
        for (c, k2) in c.iter_mut().zip(&k2) {
            *c *= -k2;
        }
        Ok(Field::from_values(
            self.grid,
            FieldRole::Potential,
            self.inverse_values(c),
        ))
    }

    /// `grad (lap u)`, spectral symbol `-i k |k|^2`.
    pub fn grad_laplacian(&self, u: &Field) -> Result<VectorField, GridError> {
        let k2 = self.k_squared();
        let c = self.forward(u)?.coeffs;
        Ok((0..self.grid.dim())
            .map(|a| self.derivative_component(&c, a, |i| -k2[i]))
            .collect())
    }

    fn is_nyquist_axis(&self, idx: usize, axis: usize) -> bool {
        self.grid.multi_index(idx)[axis] == self.grid.n() / 2
    }

    fn derivative_component(
        &self,
        c: &[Complex64],
        axis: usize,
        extra: impl Fn(usize) -> f64,
    ) -> Field {
        let coeffs: Vec<Complex64> = c
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                if self.is_nyquist_axis(i, axis) {
                    Complex64::default()
                } else {
                    Complex64::new(0.0, self.wave_vector(i)[axis]) * c * extra(i)
                }
            })
            .collect();
        Field::from_values(self.grid, FieldRole::Component, self.inverse_values(coeffs))
    }

    /// Spectral form of `sum u v h^d`.
    pub fn plancherel_dot(&self, u: &Field, v: &Field) -> Result<f64, GridError> {
        let cu = self.forward(u)?.coeffs;
        let cv = self.forward(v)?.coeffs;
        let s: f64 = cu.iter().zip(&cv).map(|(a, b)| (a * b.conj()).re).sum();
        Ok(s / self.grid.volume())
    }
}
