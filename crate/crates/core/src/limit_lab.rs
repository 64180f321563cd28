//! Measurements of the nonlocal-to-local limit.
//!
//! Frozen-field checks isolate the commutator mechanism from solver error:
//! for a fixed smooth `rho` and test function `phi`,
//!
//! ```text
//! (grad phi rho) * grad w_eps  ->  div(grad phi rho)
//! rho * (z_i d_j w_eps)        ->  -rho delta_ij
//! rho * (|z|^2 |grad w_eps|)   ->  0
//! ```
//!
//! The sweep runs the nonlocal equation for several `eps` against the local
//! equation on the same grid and reports `L^1` distances.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::{estimate_dashboard, Dashboard, Recorder};
use crate::grid::{norm, Field, FieldRole, Grid, GridError, MAX_DIM};
use crate::kernels::{sample_kernel_with_guard, KernelError, KernelFamily, KernelSamples, KernelSpec};
use crate::solver::{InitError, InitialDataSpec, RunError, SchemeParams, Solver};
use crate::spectral::Spectral;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("test function support (centre offset {offset}, radius {radius}) reaches the seam at L/2 = {half}")]
    Seam { offset: f64, radius: f64, half: f64 },
    #[error("this operation needs d = {want}, got d = {got}")]
    Dim { want: usize, got: usize },
    #[error("truncation level needs 0 < eps <= 1, got {0}")]
    TruncationRange(f64),
    #[error("kernel has no comparison function f; the domination check needs one")]
    MissingF,
    #[error("need at least two snapshots, got {0}")]
    Snapshots(usize),
    #[error("eps list must be non-empty and strictly decreasing: {0:?}")]
    EpsList(Vec<f64>),
    #[error("test function parameter: {0}")]
    TestFunction(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Init(#[from] InitError),
    #[error(transparent)]
    Run(#[from] RunError),
}

/// `phi(t, x) = chi(t) (1 - |x - c|^2 / R^2)_+^p`, with `chi(t) = (4 t (T - t) / T^2)^2`
/// when a time window `T` is set and `chi = 1` otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestFunction {
    /// Offset of the centre from the domain midpoint.
    #[serde(default)]
    pub center: Vec<f64>,
    pub radius: f64,
    #[serde(default = "default_power")]
    pub power: u32,
    #[serde(default)]
    pub window: Option<f64>,
    /// Overall amplitude; zero gives `phi = 0`.
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
}

fn default_power() -> u32 {
    4
}

fn default_amplitude() -> f64 {
    1.0
}

/// Spatial part of a test function and its derivatives on the grid.
#[derive(Debug, Clone)]
pub struct TestFields {
    pub value: Field,
    pub grad: Vec<Field>,
    pub lap: Field,
}

impl TestFunction {
    pub fn centered(radius: f64) -> Self {
        Self {
            center: Vec::new(),
            radius,
            power: default_power(),
            window: None,
            amplitude: 1.0,
        }
    }

    fn offset(&self, x: &[f64; MAX_DIM], dim: usize) -> [f64; MAX_DIM] {
        let mut y = [0.0; MAX_DIM];
        for a in 0..dim {
            y[a] = x[a] - self.center.get(a).copied().unwrap_or(0.0);
        }
        y
    }

    /// Support must stay clear of the seam.
    pub fn check(&self, grid: &Grid) -> Result<(), LabError> {
        if !(self.radius > 0.0) || self.power < 3 {
            return Err(LabError::TestFunction(format!(
                "need radius > 0 and power >= 3, got {} and {}",
                self.radius, self.power
            )));
        }
        if self.center.len() > grid.dim() {
            return Err(LabError::TestFunction(format!(
                "centre has {} components for d = {}",
                self.center.len(),
                grid.dim()
            )));
        }
        let offset = self.center.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        let half = grid.len() / 2.0;
        if offset + self.radius >= half - grid.h() {
            return Err(LabError::Seam {
                offset,
                radius: self.radius,
                half,
            });
        }
        Ok(())
    }

    /// `(psi, grad psi, hessian psi)` at displacement `x` from the grid centre.
    pub fn spatial(&self, x: &[f64; MAX_DIM], dim: usize) -> (f64, [f64; MAX_DIM], [[f64; MAX_DIM]; MAX_DIM]) {
        let y = self.offset(x, dim);
        let r2 = self.radius * self.radius;
        let s = norm(&y, dim).powi(2) / r2;
        let mut g = [0.0; MAX_DIM];
        let mut hess = [[0.0; MAX_DIM]; MAX_DIM];
        if s >= 1.0 {
            return (0.0, g, hess);
        }
        let p = self.power as i32;
        let a = self.amplitude;
        let u = 1.0 - s;
        let v = a * u.powi(p);
        let c1 = -2.0 * a * p as f64 * u.powi(p - 1) / r2;
        let c2 = 4.0 * a * (p * (p - 1)) as f64 * u.powi(p - 2) / (r2 * r2);
        for i in 0..dim {
            g[i] = c1 * y[i];
            for j in 0..dim {
                hess[i][j] = c2 * y[i] * y[j] + if i == j { c1 } else { 0.0 };
            }
        }
        (v, g, hess)
    }

    pub fn fields(&self, grid: &Grid) -> TestFields {
        let d = grid.dim();
        let mut value = vec![0.0; grid.size()];
        let mut grad = vec![vec![0.0; grid.size()]; d];
        let mut lap = vec![0.0; grid.size()];
        for i in 0..grid.size() {
            let (v, g, h) = self.spatial(&grid.displacement(i), d);
            value[i] = v;
            for a in 0..d {
                grad[a][i] = g[a];
                lap[i] += h[a][a];
            }
        }
        TestFields {
            value: Field::from_values(*grid, FieldRole::Potential, value),
            grad: grad
                .into_iter()
                .map(|g| Field::from_values(*grid, FieldRole::Component, g))
                .collect(),
            lap: Field::from_values(*grid, FieldRole::Potential, lap),
        }
    }

    /// `(chi(t), chi'(t))`.
    pub fn time_factor(&self, t: f64) -> (f64, f64) {
        match self.window {
            None => (1.0, 0.0),
            Some(tw) => {
                let b = 4.0 * t * (tw - t) / (tw * tw);
                let db = 4.0 * (tw - 2.0 * t) / (tw * tw);
                (b * b, 2.0 * b * db)
            }
        }
    }
}

fn l2(u: &[f64], grid: &Grid) -> f64 {
    (u.iter().map(|v| v * v).sum::<f64>() * grid.cell_volume()).sqrt()
}

fn l1(u: &[f64], grid: &Grid) -> f64 {
    u.iter().map(|v| v.abs()).sum::<f64>() * grid.cell_volume()
}

/// `|(grad phi rho) * grad w_eps - div(grad phi rho)|_{L^2}`, with the sampled
/// kernel gradient on the left and spectral derivatives on the right.
pub fn commutator_error(rho: &Field, phi: &TestFunction, kernel: &KernelSamples) -> Result<f64, LabError> {
    let g = *rho.grid();
    g.check_same(kernel.grid())?;
    phi.check(&g)?;
    let sp = Spectral::new(g);
    let tf = phi.fields(&g);
    let flux: Vec<Field> = tf.grad.iter().map(|gp| gp.zip_map(rho, |a, b| a * b)).collect::<Result<_, _>>()?;
    let mut left = vec![0.0; g.size()];
    for (fa, ka) in flux.iter().zip(&kernel.grad) {
        let c = sp.convolve(fa, ka)?;
        for (l, v) in left.iter_mut().zip(c.values()) {
            *l += v;
        }
    }
    let right = sp.divergence(&flux)?;
    let diff: Vec<f64> = left.iter().zip(right.values()).map(|(a, b)| a - b).collect();
    Ok(l2(&diff, &g))
}

/// Sampled `z_i d_j w_eps(z)`, centred at index 0.
fn moment_kernel(kernel: &KernelSamples, i: usize, j: usize) -> Field {
    let g = *kernel.grid();
    let dj = kernel.grad[j].values();
    let v = (0..g.size()).map(|k| g.origin_offset(k)[i] * dj[k]).collect();
    Field::from_values(g, FieldRole::Potential, v)
}

/// `J1_ij = int rho(y) (x_i - y_i) d_j w_eps(x - y) dy`.
pub fn j1_term(rho: &Field, kernel: &KernelSamples, i: usize, j: usize) -> Result<Field, LabError> {
    let g = *rho.grid();
    g.check_same(kernel.grid())?;
    let sp = Spectral::new(g);
    Ok(sp.convolve(rho, &moment_kernel(kernel, i, j))?.with_role(FieldRole::Potential))
}

/// `rho * w_eps * f_eps`, with `w_eps * f_eps` convolved discretely.
pub fn double_mollified(rho: &Field, kernel: &KernelSamples) -> Result<Field, LabError> {
    let f = kernel.f.as_ref().ok_or(LabError::MissingF)?;
    let sp = Spectral::new(*rho.grid());
    let wf = sp.convolve(&kernel.omega, f)?;
    Ok(sp.convolve(rho, &wf)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct J1Report {
    pub eps: f64,
    /// `max_i |J1_ii + rho|_{L^1}`.
    pub diag_l1_distance: f64,
    /// `max_{i != j} |J1_ij|_{L^1}`.
    pub offdiag_l1: f64,
    pub rho_l1: f64,
    /// `max over i, j, x of |J1_ij| - C rho*w*f`; non-positive when dominated.
    pub domination_gap: f64,
    pub domination_scale: f64,
    pub dominated: bool,
}

/// All `J1_ij` against their limit and the pointwise bound `C_best rho*w*f`.
pub fn j1_report(rho: &Field, kernel: &KernelSamples, c_best: f64) -> Result<J1Report, LabError> {
    let g = *rho.grid();
    let d = g.dim();
    let dom = double_mollified(rho, kernel)?;
    let scale = c_best * dom.max_abs();
    let (mut diag, mut off) = (0.0f64, 0.0f64);
    let mut gap = f64::NEG_INFINITY;
    for i in 0..d {
        for j in 0..d {
            let f = j1_term(rho, kernel, i, j)?;
            if i == j {
                let dist: Vec<f64> = f.values().iter().zip(rho.values()).map(|(a, r)| a + r).collect();
                diag = diag.max(l1(&dist, &g));
            } else {
                off = off.max(l1(f.values(), &g));
            }
            for (v, b) in f.values().iter().zip(dom.values()) {
                gap = gap.max(v.abs() - c_best * b);
            }
        }
    }
    Ok(J1Report {
        eps: kernel.eps,
        diag_l1_distance: diag,
        offdiag_l1: off,
        rho_l1: l1(rho.values(), &g),
        domination_gap: gap,
        domination_scale: scale,
        dominated: gap <= 1e-10 * scale,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct J2Report {
    pub eps: f64,
    pub lhs_norm: f64,
    pub rhs_norm: f64,
    /// `max_x lhs - eps C rho*w*f`.
    pub domination_gap: f64,
    pub domination_scale: f64,
    pub dominated: bool,
}

/// `int rho(y) |x - y|^2 |grad w_eps(x - y)| dy <= eps C rho*w_eps*f_eps`.
pub fn j2_bound_check(rho: &Field, kernel: &KernelSamples, c_best: f64) -> Result<J2Report, LabError> {
    let g = *rho.grid();
    g.check_same(kernel.grid())?;
    let d = g.dim();
    let sp = Spectral::new(g);
    let k2: Vec<f64> = (0..g.size())
        .map(|k| {
            let r = norm(&g.origin_offset(k), d);
            let gn = (0..d).map(|a| kernel.grad[a].values()[k].powi(2)).sum::<f64>().sqrt();
            r * r * gn
        })
        .collect();
    let lhs = sp.convolve(rho, &Field::from_values(g, FieldRole::Potential, k2))?;
    let dom = double_mollified(rho, kernel)?;
    let rhs: Vec<f64> = dom.values().iter().map(|v| kernel.eps * c_best * v).collect();
    let scale = rhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gap = lhs
        .values()
        .iter()
        .zip(&rhs)
        .map(|(a, b)| a - b)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(J2Report {
        eps: kernel.eps,
        lhs_norm: l2(lhs.values(), &g),
        rhs_norm: l2(&rhs, &g),
        domination_gap: gap,
        domination_scale: scale,
        dominated: gap <= 1e-10 * scale,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeakFormResidual {
    pub residual: f64,
    /// Sum of the absolute values of the three integrals.
    pub scale: f64,
    pub relative: f64,
}

/// Residual of the local weak form
/// `int int (-rho d_t phi + grad rho . grad phi - rho grad lap rho . grad phi) = 0`
/// on snapshots, trapezoid in time, spectral derivatives in space.
pub fn weak_form_residual(times: &[f64], rho: &[&Field], phi: &TestFunction) -> Result<WeakFormResidual, LabError> {
    if times.len() < 2 || times.len() != rho.len() {
        return Err(LabError::Snapshots(times.len().min(rho.len())));
    }
    let g = *rho[0].grid();
    phi.check(&g)?;
    let sp = Spectral::new(g);
    let tf = phi.fields(&g);
    let hd = g.cell_volume();
    let mut terms = Vec::with_capacity(times.len());
    for (&t, r) in times.iter().zip(rho) {
        g.check_same(r.grid())?;
        let (chi, dchi) = phi.time_factor(t);
        let grad = sp.gradient(r)?;
        let lap = sp.laplacian(r)?;
        let glap = sp.gradient(&lap)?;
        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
        for k in 0..g.size() {
            let psi = tf.value.values()[k];
            let rk = r.values()[k];
            a -= rk * dchi * psi;
            for ax in 0..g.dim() {
                let gp = tf.grad[ax].values()[k];
                b += chi * grad[ax].values()[k] * gp;
                c -= chi * rk * glap[ax].values()[k] * gp;
            }
        }
        terms.push([a * hd, b * hd, c * hd]);
    }
    let (mut res, mut scale) = (0.0, 0.0);
    for k in 1..times.len() {
        let w = 0.5 * (times[k] - times[k - 1]);
        for q in 0..3 {
            res += w * (terms[k][q] + terms[k - 1][q]);
            scale += w * (terms[k][q].abs() + terms[k - 1][q].abs());
        }
    }
    Ok(WeakFormResidual {
        residual: res,
        scale,
        relative: if scale > 0.0 { res.abs() / scale } else { 0.0 },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TruncationLevel {
    pub eps: f64,
    pub m: f64,
    /// `|eps^2 M sqrt(ln M) - 1|`.
    pub residual: f64,
}

/// Root `M > 1` of `eps^2 M sqrt(ln M) = 1` by bisection.
pub fn choose_truncation_level(eps: f64) -> Result<TruncationLevel, LabError> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(LabError::TruncationRange(eps));
    }
    let g = |m: f64| eps * eps * m * m.ln().sqrt() - 1.0;
    // At eps = 1 the root is ~1.53, above eps^{-4}; widen the bracket to 4.
    let (mut lo, mut hi) = (1.0 + 1e-6, eps.powi(-4).max(4.0));
    debug_assert!(g(lo) < 0.0 && g(hi) > 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 4.0 * f64::EPSILON * hi {
            break;
        }
    }
    let m = 0.5 * (lo + hi);
    Ok(TruncationLevel {
        eps,
        m,
        residual: g(m).abs(),
    })
}

/// Terms of `div(grad phi rho) * w = I1 + I2 + I3` with `T = min(rho, M)`:
///
/// ```text
/// I1 = (lap phi T) * w             I1B = lap phi (T * w)
/// I2 = (grad phi . grad T) * w     I2B = grad phi . ((grad T) * w)
/// I3 = div(grad phi (rho - T)) * w I3B = grad phi . grad((rho - T) * w)
/// ```
///
/// and `IkA = Ik - IkB`. Divergences of products use the product rule on the
/// analytic `phi` and spectral derivatives of the field, so the split is exact.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct D2Decomposition {
    pub eps: f64,
    pub m: f64,
    pub i1a: f64,
    pub i1b: f64,
    pub i2a: f64,
    pub i2b: f64,
    pub i3a: f64,
    pub i3b: f64,
    pub total_norm: f64,
    /// `|I1 + I2 + I3 - div(grad phi rho) * w|_{L^2}`.
    pub identity_gap: f64,
    /// `R = I1A + I2A + I3A`.
    pub remainder_norm: f64,
    /// `eps sqrt(M) + 1 / (eps sqrt(M) sqrt(ln M))`.
    pub bound_value: f64,
    pub i3_vanishes: bool,
}

pub fn d2_decomposition_test(rho: &Field, phi: &TestFunction, kernel: &KernelSamples) -> Result<D2Decomposition, LabError> {
    let g = *rho.grid();
    if g.dim() != 2 {
        return Err(LabError::Dim { want: 2, got: g.dim() });
    }
    g.check_same(kernel.grid())?;
    phi.check(&g)?;
    let eps = kernel.eps;
    let m = choose_truncation_level(eps.min(1.0))?.m;
    let sp = Spectral::new(g);
    let tf = phi.fields(&g);
    let w = &kernel.omega;
    let t = rho.map(|v| v.min(m));
    let excess = rho.zip_map(&t, |a, b| a - b)?;
    let conv = |u: &Field| sp.convolve(u, w);
    // div(grad phi u) by the product rule.
    let div_form = |u: &Field| -> Result<Field, GridError> {
        let gu = sp.gradient(u)?;
        let v = (0..g.size())
            .map(|k| {
                let mut s = tf.lap.values()[k] * u.values()[k];
                for a in 0..2 {
                    s += tf.grad[a].values()[k] * gu[a].values()[k];
                }
                s
            })
            .collect();
        Ok(Field::from_values(g, FieldRole::Potential, v))
    };
    let dot_grad = |u: &Field| -> Result<Field, GridError> {
        let gu = sp.gradient(u)?;
        let v = (0..g.size())
            .map(|k| (0..2).map(|a| tf.grad[a].values()[k] * gu[a].values()[k]).sum())
            .collect();
        Ok(Field::from_values(g, FieldRole::Potential, v))
    };
    let total = conv(&div_form(rho)?)?;
    let i1 = conv(&tf.lap.zip_map(&t, |a, b| a * b)?)?;
    let i1b = tf.lap.zip_map(&conv(&t)?, |a, b| a * b)?;
    let i2 = conv(&dot_grad(&t)?)?;
    // grad phi . ((grad T) * w) = grad phi . grad(T * w).
    let i2b = dot_grad(&conv(&t)?)?;
    let i3 = conv(&div_form(&excess)?)?;
    let i3b = dot_grad(&conv(&excess)?)?;
    let sub = |a: &Field, b: &Field| a.zip_map(b, |x, y| x - y);
    let i1a = sub(&i1, &i1b)?;
    let i2a = sub(&i2, &i2b)?;
    let i3a = sub(&i3, &i3b)?;
    let sum: Vec<f64> = (0..g.size())
        .map(|k| i1.values()[k] + i2.values()[k] + i3.values()[k] - total.values()[k])
        .collect();
    let rem: Vec<f64> = (0..g.size())
        .map(|k| i1a.values()[k] + i2a.values()[k] + i3a.values()[k])
        .collect();
    let es = eps * m.sqrt();
    Ok(D2Decomposition {
        eps,
        m,
        i1a: l2(i1a.values(), &g),
        i1b: l2(i1b.values(), &g),
        i2a: l2(i2a.values(), &g),
        i2b: l2(i2b.values(), &g),
        i3a: l2(i3a.values(), &g),
        i3b: l2(i3b.values(), &g),
        total_norm: l2(total.values(), &g),
        identity_gap: l2(&sum, &g),
        remainder_norm: l2(&rem, &g),
        bound_value: es + 1.0 / (es * m.ln().sqrt()),
        i3_vanishes: excess.values().iter().all(|&v| v == 0.0),
    })
}

/// `|rho 1_{rho > 1/eps}|_{L^2(t, x)}` over snapshots, trapezoid in time.
pub fn uniform_integrability_probe(times: &[f64], rho: &[&Field], eps: f64) -> Result<f64, LabError> {
    if times.len() < 2 || times.len() != rho.len() {
        return Err(LabError::Snapshots(times.len().min(rho.len())));
    }
    let cut = 1.0 / eps;
    let sq: Vec<f64> = rho
        .iter()
        .map(|r| {
            r.values().iter().filter(|&&v| v > cut).map(|v| v * v).sum::<f64>() * r.grid().cell_volume()
        })
        .collect();
    let s: f64 = (1..times.len())
        .map(|k| 0.5 * (times[k] - times[k - 1]) * (sq[k] + sq[k - 1]))
        .sum();
    Ok(s.sqrt())
}

/// Least-squares slope of `ln y` against `ln x`; `None` below two points.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len().min(y.len());
    if n < 2 {
        return None;
    }
    let lx: Vec<f64> = x[..n].iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y[..n].iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n as f64;
    let my = ly.iter().sum::<f64>() / n as f64;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub grid: Grid,
    pub family: KernelFamily,
    pub eps: Vec<f64>,
    pub initial: InitialDataSpec,
    pub t_end: f64,
    /// Distances are measured at these snapshot intervals.
    pub cadence: f64,
    /// Scheme for the nonlocal runs.
    pub params: SchemeParams,
    /// Scheme for the local reference, which usually needs the stabilizing shift.
    pub reference_params: SchemeParams,
    /// Dashboard records for the reference every this many steps.
    pub reference_stride: usize,
    pub min_eps_over_h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub eps: f64,
    pub sup_t_l1: f64,
    pub l1_t_l1: f64,
    pub l2_t_l1: f64,
    /// Slope over the rows up to and including this one.
    pub slope_so_far: Option<f64>,
    pub steps: usize,
    pub dashboard: Dashboard,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub slope: Option<f64>,
    pub strictly_decreasing: bool,
    pub reference_steps: usize,
    pub reference_dashboard: Dashboard,
    pub snapshot_times: Vec<f64>,
}

/// Wall-clock seconds per run, kept apart from the reproducible report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTimings {
    pub reference: f64,
    pub runs: Vec<f64>,
}

fn time_lp(t: &[f64], v: &[f64], p: f64) -> f64 {
    let s: f64 = (1..t.len())
        .map(|k| 0.5 * (t[k] - t[k - 1]) * (v[k].powf(p) + v[k - 1].powf(p)))
        .sum();
    s.powf(1.0 / p)
}

/// Local reference once, then one nonlocal run per `eps` (in parallel).
pub fn epsilon_sweep(cfg: &SweepConfig) -> Result<(SweepReport, SweepTimings), LabError> {
    let decreasing = cfg.eps.windows(2).all(|w| w[1] < w[0]);
    if cfg.eps.is_empty() || !decreasing {
        return Err(LabError::EpsList(cfg.eps.clone()));
    }
    let spec = KernelSpec::new(cfg.family.clone(), cfg.grid.dim())?;
    // Fail fast on the finest scale before any run starts.
    let kernels = cfg
        .eps
        .iter()
        .map(|&e| sample_kernel_with_guard(&spec, e, &cfg.grid, cfg.min_eps_over_h))
        .collect::<Result<Vec<_>, _>>()?;
    let clock = std::time::Instant::now();
    let local = Solver::local(cfg.grid, cfg.reference_params);
    let st = local.initial_state(&cfg.initial)?;
    let mut ref_rec = Recorder::every(cfg.reference_stride);
    let reference = local.run(st, cfg.t_end, Some(cfg.cadence), &mut [&mut ref_rec])?;
    let ref_time = clock.elapsed().as_secs_f64();
    let outcomes: Vec<Result<(SweepRow, f64), LabError>> = kernels
        .into_par_iter()
        .map(|k| {
            let clock = std::time::Instant::now();
            let eps = k.eps;
            let solver = Solver::nonlocal(k, cfg.params);
            let st = solver.initial_state(&cfg.initial)?;
            let mut rec = Recorder::default();
            let traj = solver.run(st, cfg.t_end, Some(cfg.cadence), &mut [&mut rec])?;
            let dist = traj
                .snapshots
                .iter()
                .zip(&reference.snapshots)
                .map(|(a, b)| a.rho.l1_distance(&b.rho))
                .collect::<Result<Vec<_>, _>>()?;
            let t = &traj.snapshot_times;
            let row = SweepRow {
                eps,
                sup_t_l1: dist.iter().cloned().fold(0.0, f64::max),
                l1_t_l1: time_lp(t, &dist, 1.0),
                l2_t_l1: time_lp(t, &dist, 2.0),
                slope_so_far: None,
                steps: traj.dts.len(),
                dashboard: estimate_dashboard(&rec.records),
            };
            Ok((row, clock.elapsed().as_secs_f64()))
        })
        .collect();
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for o in outcomes {
        let (r, secs) = o?;
        rows.push(r);
        runs.push(secs);
    }
    let eps: Vec<f64> = rows.iter().map(|r| r.eps).collect();
    let sup: Vec<f64> = rows.iter().map(|r| r.sup_t_l1).collect();
    for k in 0..rows.len() {
        rows[k].slope_so_far = log_log_slope(&eps[..=k], &sup[..=k]);
    }
    let report = SweepReport {
        slope: log_log_slope(&eps, &sup),
        strictly_decreasing: sup.windows(2).all(|w| w[1] < w[0]),
        reference_steps: reference.dts.len(),
        reference_dashboard: estimate_dashboard(&ref_rec.records),
        snapshot_times: reference.snapshot_times.clone(),
        rows,
    };
    Ok((
        report,
        SweepTimings {
            reference: ref_time,
            runs,
        },
    ))
}
