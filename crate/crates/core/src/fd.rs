//! Staggered finite differences on cell faces.
//!
//! Face `(a, i)` sits between cell `i` and its forward neighbour along axis
//! `a`. Face arrays are indexed by the owning cell. With this layout
//! `face_divergence(face_gradient(u))` is the standard `2d+1` point Laplacian,
//! whose Fourier symbol is `-fd_laplacian_symbol`.

use serde::{Deserialize, Serialize};

use crate::grid::Grid;
use crate::spectral::Spectral;

/// One value per face, per axis.
pub type FaceField = Vec<Vec<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Reconstruction {
    /// Logarithmic mean of the two cells. Zero next to vacuum; makes
    /// `rho_f grad_f log rho = grad_f rho`, so the entropy balance is exact.
    #[default]
    LogMean,
    /// First-order donor cell.
    Upwind,
    /// Piecewise-linear with minmod slopes.
    Muscl,
}

/// `(a - b) / (ln a - ln b)`, continuous at `a = b`, zero if either is `<= 0`.
pub fn log_mean(a: f64, b: f64) -> f64 {
    if a <= 0.0 || b <= 0.0 {
        return 0.0;
    }
    let x = b / a - 1.0;
    if x.abs() < 1e-3 {
        // ln(1+x) / x inverted, to O(x^4).
        a * (1.0 + x / 2.0 - x * x / 12.0 + x * x * x / 24.0)
    } else {
        (a - b) / (a.ln() - b.ln())
    }
}

/// `sum_a (4/h^2) sin^2(k_a h / 2)` per mode; non-negative.
pub fn fd_laplacian_symbol(sp: &Spectral) -> Vec<f64> {
    let g = sp.grid();
    let h = g.h();
    let per_axis: Vec<f64> = sp
        .wavenumbers()
        .iter()
        .map(|k| {
            let s = (k * h / 2.0).sin();
            4.0 * s * s / (h * h)
        })
        .collect();
    (0..g.size())
        .map(|i| {
            let m = g.multi_index(i);
            (0..g.dim()).map(|a| per_axis[m[a]]).sum()
        })
        .collect()
}

pub fn face_gradient(grid: &Grid, u: &[f64]) -> FaceField {
    let inv_h = 1.0 / grid.h();
    (0..grid.dim())
        .map(|a| {
            (0..grid.size())
                .map(|i| (u[grid.neighbor(i, a, true)] - u[i]) * inv_h)
                .collect()
        })
        .collect()
}

/// Telescoping divergence; sums to zero exactly up to rounding.
pub fn face_divergence(grid: &Grid, flux: &[Vec<f64>]) -> Vec<f64> {
    let inv_h = 1.0 / grid.h();
    let mut out = vec![0.0; grid.size()];
    for (a, f) in flux.iter().enumerate() {
        for (i, o) in out.iter_mut().enumerate() {
            *o += (f[i] - f[grid.neighbor(i, a, false)]) * inv_h;
        }
    }
    out
}

fn minmod(a: f64, b: f64) -> f64 {
    if a * b <= 0.0 {
        0.0
    } else if a.abs() < b.abs() {
        a
    } else {
        b
    }
}

/// Density carried across each face by velocity `vel`. Upwind and MUSCL
/// values stay in `[0, 2 rho_i]` of the donor cell for non-negative `rho`.
pub fn face_density(
    grid: &Grid,
    rho: &[f64],
    vel: &[Vec<f64>],
    recon: Reconstruction,
) -> FaceField {
    (0..grid.dim())
        .map(|a| {
            (0..grid.size())
                .map(|i| {
                    let r = grid.neighbor(i, a, true);
                    match recon {
                        Reconstruction::LogMean => log_mean(rho[i], rho[r]),
                        Reconstruction::Upwind => {
                            if vel[a][i] >= 0.0 {
                                rho[i]
                            } else {
                                rho[r]
                            }
                        }
                        Reconstruction::Muscl => {
                            if vel[a][i] >= 0.0 {
                                let l = grid.neighbor(i, a, false);
                                rho[i] + 0.5 * minmod(rho[i] - rho[l], rho[r] - rho[i])
                            } else {
                                let rr = grid.neighbor(r, a, true);
                                rho[r] - 0.5 * minmod(rho[r] - rho[i], rho[rr] - rho[r])
                            }
                        }
                    }
                })
                .collect()
        })
        .collect()
}

/// Flux `rho_f v_f` on every face.
pub fn advective_flux(
    grid: &Grid,
    rho: &[f64],
    vel: &[Vec<f64>],
    recon: Reconstruction,
) -> FaceField {
    let mut f = face_density(grid, rho, vel, recon);
    for (fa, va) in f.iter_mut().zip(vel) {
        for (x, v) in fa.iter_mut().zip(va) {
            *x *= v;
        }
    }
    f
}

pub fn max_abs_face(v: &[Vec<f64>]) -> f64 {
    v.iter()
        .flat_map(|a| a.iter())
        .fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Coordinate of face `(a, i)` along axis `a`, relative to the grid centre.
pub fn face_coordinate(grid: &Grid, i: usize, a: usize) -> f64 {
    grid.displacement(i)[a] + 0.5 * grid.h()
}
