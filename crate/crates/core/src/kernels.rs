//! Radial mollifier families, their samples on a grid, and a numerical check
//! of the growth condition `(|x| + |x|^2) |grad w(x)| <= C (w * f)(x)`.
//!
//! Every kernel here is radial, `w(x) = p(|x|)`, so the growth ratio depends
//! on `|x|` alone and certification samples a single ray.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::grid::{norm, Field, FieldRole, Grid, GridError, VectorField, MAX_DIM};
use crate::spectral::Spectral;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("kernel under-resolved: eps = {eps} < 4h = {min}")]
    UnderResolved { eps: f64, min: f64 },
    #[error("kernel support {support} exceeds L/4 = {max}")]
    SupportTooLarge { support: f64, max: f64 },
    #[error("kernel has non-positive discrete mass {0}")]
    ZeroMass(f64),
    #[error("kernel profile is negative ({value}) at r = {r}")]
    Negative { r: f64, value: f64 },
    #[error("eps must be positive and finite, got {0}")]
    BadScale(f64),
    #[error("unknown kernel family '{0}'")]
    UnknownFamily(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

type RadialFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// User-supplied radial profile `p(r)` with derivative `p'(r)`.
#[derive(Clone)]
pub struct CustomProfile {
    pub name: String,
    pub value: RadialFn,
    pub deriv: RadialFn,
    /// `p(r) = 0` for `r >= support`.
    pub support: Option<f64>,
    /// Radius beyond which `p` is negligible, for quadrature.
    pub tail: f64,
}

impl fmt::Debug for CustomProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomProfile")
            .field("name", &self.name)
            .field("support", &self.support)
            .field("tail", &self.tail)
            .finish()
    }
}

/// Radial profile shapes, before normalization.
#[derive(Debug, Clone)]
pub enum KernelFamily {
    /// `e^{-r^2/2}`.
    Gaussian,
    /// `exp(-1/(1-r^2))` on the open unit ball.
    Bump,
    /// `e^{-sqrt(1+r^2)}`.
    CarrilloExponential,
    /// `e^{-sqrt(1+r^2/3)}`, the comparison function paired with the above.
    CarrilloCompanion,
    Custom(CustomProfile),
}

impl KernelFamily {
    pub fn parse(name: &str) -> Result<Self, KernelError> {
        match name {
            "gaussian" => Ok(Self::Gaussian),
            "bump" => Ok(Self::Bump),
            "carrillo" | "carrillo_exponential" | "carrillo-exponential" => {
                Ok(Self::CarrilloExponential)
            }
            "carrillo-companion" | "carrillo_companion" => Ok(Self::CarrilloCompanion),
            other => Err(KernelError::UnknownFamily(other.to_string())),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Self::Gaussian => "gaussian",
            Self::Bump => "bump",
            Self::CarrilloExponential => "carrillo",
            Self::CarrilloCompanion => "carrillo-companion",
            Self::Custom(c) => &c.name,
        }
    }

    pub fn raw(&self, r: f64) -> f64 {
        match self {
            Self::Gaussian => (-0.5 * r * r).exp(),
            Self::Bump => {
                if r < 1.0 {
                    (-1.0 / (1.0 - r * r)).exp()
                } else {
                    0.0
                }
            }
            Self::CarrilloExponential => (-(1.0 + r * r).sqrt()).exp(),
            Self::CarrilloCompanion => (-(1.0 + r * r / 3.0).sqrt()).exp(),
            Self::Custom(c) => (c.value)(r),
        }
    }

    pub fn raw_deriv(&self, r: f64) -> f64 {
        match self {
            Self::Gaussian => -r * (-0.5 * r * r).exp(),
            Self::Bump => {
                if r < 1.0 {
                    let q = 1.0 - r * r;
                    -2.0 * r / (q * q) * (-1.0 / q).exp()
                } else {
                    0.0
                }
            }
            Self::CarrilloExponential => {
                let s = (1.0 + r * r).sqrt();
                -r / s * (-s).exp()
            }
            Self::CarrilloCompanion => {
                let s = (1.0 + r * r / 3.0).sqrt();
                -r / (3.0 * s) * (-s).exp()
            }
            Self::Custom(c) => (c.deriv)(r),
        }
    }

    pub fn support(&self) -> Option<f64> {
        match self {
            Self::Bump => Some(1.0),
            Self::Custom(c) => c.support,
            _ => None,
        }
    }

    /// Radius past which the profile is below ~1e-40 of its peak.
    fn tail(&self) -> f64 {
        match self {
            Self::Gaussian => 14.0,
            Self::Bump => 1.0,
            Self::CarrilloExponential => 95.0,
            Self::CarrilloCompanion => 165.0,
            Self::Custom(c) => c.support.unwrap_or(c.tail),
        }
    }

    /// Quadrature panel width matched to the profile's length scale.
    fn panel_width(&self) -> f64 {
        match self {
            Self::Gaussian => 0.25,
            Self::Bump => 1.0 / 24.0,
            Self::CarrilloExponential | Self::CarrilloCompanion => 1.0,
            Self::Custom(_) => self.tail() / 96.0,
        }
    }

    /// The companion used when no comparison function is given.
    pub fn default_companion(&self) -> Option<KernelFamily> {
        match self {
            Self::CarrilloExponential => Some(Self::CarrilloCompanion),
            _ => None,
        }
    }
}

/// Surface area of the unit sphere in `R^d`.
fn sphere_area(d: usize) -> f64 {
    match d {
        1 => 2.0,
        2 => 2.0 * PI,
        3 => 4.0 * PI,
        _ => unreachable!("dimension checked by Grid"),
    }
}

const GL_X: [f64; 4] = [
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GL_W: [f64; 4] = [
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_3,
];

/// Composite 8-point Gauss-Legendre on `[a, b]` with `panels` panels.
pub fn gauss_legendre(a: f64, b: f64, panels: usize, f: impl Fn(f64) -> f64) -> f64 {
    let w = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let mid = a + (p as f64 + 0.5) * w;
        let half = 0.5 * w;
        let mut s = 0.0;
        for (x, wt) in GL_X.iter().zip(GL_W) {
            s += wt * (f(mid - half * x) + f(mid + half * x));
        }
        total += s * half;
    }
    total
}

fn radial_mass(fam: &KernelFamily, d: usize) -> f64 {
    let tail = fam.tail();
    let panels = (tail * 8.0).ceil().max(16.0) as usize;
    sphere_area(d) * gauss_legendre(0.0, tail, panels, |r| r.powi(d as i32 - 1) * fam.raw(r))
}

/// A normalized radial kernel `w` in `d` dimensions with optional comparison `f`.
#[derive(Debug, Clone)]
pub struct KernelSpec {
    dim: usize,
    omega: KernelFamily,
    omega_scale: f64,
    f: Option<(KernelFamily, f64)>,
}

impl KernelSpec {
    /// `w` scaled to unit mass; `f` defaults to the family companion, or to `w`.
    pub fn new(family: KernelFamily, dim: usize) -> Result<Self, KernelError> {
        if !(1..=MAX_DIM).contains(&dim) {
            return Err(GridError::BadDimension(dim).into());
        }
        let mass = radial_mass(&family, dim);
        if mass <= 0.0 || !mass.is_finite() {
            return Err(KernelError::ZeroMass(mass));
        }
        let omega_scale = match family {
            KernelFamily::Gaussian => (2.0 * PI).powf(-(dim as f64) / 2.0),
            _ => 1.0 / mass,
        };
        let f = match family.default_companion() {
            Some(c) => Some((c, 1.0)),
            None => Some((family.clone(), omega_scale)),
        };
        let spec = Self {
            dim,
            omega: family,
            omega_scale,
            f,
        };
        spec.check_nonnegative()?;
        Ok(spec)
    }

    /// Replace the comparison function. Built-in shapes keep their literal
    /// constants; a normalized `w`-family keeps the normalization of `w`.
    pub fn with_f(mut self, f: KernelFamily) -> Self {
        let scale = if f.name() == self.omega.name() {
            self.omega_scale
        } else if matches!(f, KernelFamily::Gaussian) {
            (2.0 * PI).powf(-(self.dim as f64) / 2.0)
        } else if matches!(f, KernelFamily::Bump) {
            1.0 / radial_mass(&f, self.dim)
        } else {
            1.0
        };
        self.f = Some((f, scale));
        self
    }

    pub fn without_f(mut self) -> Self {
        self.f = None;
        self
    }

    fn check_nonnegative(&self) -> Result<(), KernelError> {
        let tail = self.omega.tail();
        for i in 0..=2000 {
            let r = tail * i as f64 / 2000.0;
            let v = self.omega.raw(r);
            if v < 0.0 || !v.is_finite() {
                return Err(KernelError::Negative { r, value: v });
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn family(&self) -> &KernelFamily {
        &self.omega
    }

    pub fn f_family(&self) -> Option<&KernelFamily> {
        self.f.as_ref().map(|(f, _)| f)
    }

    pub fn support(&self) -> Option<f64> {
        self.omega.support()
    }

    pub fn omega_radial(&self, r: f64) -> f64 {
        self.omega_scale * self.omega.raw(r)
    }

    /// `p'(r)`, so that `grad w(x) = p'(|x|) x / |x|`.
    pub fn omega_radial_deriv(&self, r: f64) -> f64 {
        self.omega_scale * self.omega.raw_deriv(r)
    }

    pub fn f_radial(&self, r: f64) -> Option<f64> {
        self.f.as_ref().map(|(f, s)| s * f.raw(r))
    }

    pub fn omega(&self, x: &[f64]) -> f64 {
        self.omega_radial(norm3(x))
    }

    pub fn grad_omega(&self, x: &[f64]) -> [f64; MAX_DIM] {
        let r = norm3(x);
        let mut g = [0.0; MAX_DIM];
        if r > 0.0 {
            let p = self.omega_radial_deriv(r) / r;
            for (g, x) in g.iter_mut().zip(x) {
                *g = p * x;
            }
        }
        g
    }

    /// `(w * f)(x)` at `|x| = r` by quadrature in polar coordinates.
    pub fn omega_conv_f(&self, r: f64) -> Option<f64> {
        let (f, fs) = self.f.as_ref()?;
        let tail = self.omega.tail();
        let s_panels = (tail / self.omega.panel_width()).ceil().max(24.0) as usize;
        let d = self.dim;
        let fv = |q: f64| fs * f.raw(q);
        let inner = |s: f64| -> f64 {
            match d {
                1 => fv((r - s).abs()) + fv(r + s),
                2 => {
                    2.0 * gauss_legendre(0.0, PI, 12, |t| {
                        fv((r * r + s * s - 2.0 * r * s * t.cos()).max(0.0).sqrt())
                    })
                }
                _ => {
                    2.0 * PI
                        * gauss_legendre(-1.0, 1.0, 12, |mu| {
                            fv((r * r + s * s - 2.0 * r * s * mu).max(0.0).sqrt())
                        })
                }
            }
        };
        Some(gauss_legendre(0.0, tail, s_panels, |s| {
            let w = self.omega_radial(s);
            if w == 0.0 {
                0.0
            } else {
                s.powi(d as i32 - 1) * w * inner(s)
            }
        }))
    }
}

fn norm3(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Kernel samples `w_eps = eps^{-d} w(x/eps)` on a grid, centred at index 0.
#[derive(Debug, Clone)]
pub struct KernelSamples {
    pub eps: f64,
    /// Discrete mass is exactly one.
    pub omega: Field,
    /// Analytic gradient scaled by the same renormalization factor.
    pub grad: VectorField,
    /// `f_eps = eps^{-d} f(x/eps)` when a comparison function is set.
    pub f: Option<Field>,
    /// Factor applied to the raw samples to reach unit mass.
    pub renormalization: f64,
}

impl KernelSamples {
    pub fn grid(&self) -> &Grid {
        self.omega.grid()
    }
}

/// Default resolution guard: `eps >= MIN_EPS_OVER_H * h`.
pub const MIN_EPS_OVER_H: f64 = 4.0;

fn check_scale(spec: &KernelSpec, eps: f64, grid: &Grid, min_ratio: f64) -> Result<(), KernelError> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(KernelError::BadScale(eps));
    }
    let min = min_ratio * grid.h();
    if eps < min * (1.0 - 1e-12) {
        return Err(KernelError::UnderResolved { eps, min });
    }
    if let Some(s) = spec.support() {
        let max = grid.len() / 4.0;
        if s * eps > max * (1.0 + 1e-12) {
            return Err(KernelError::SupportTooLarge {
                support: s * eps,
                max,
            });
        }
    }
    if spec.dim() != grid.dim() {
        return Err(GridError::Mismatch.into());
    }
    Ok(())
}

pub fn sample_kernel(spec: &KernelSpec, eps: f64, grid: &Grid) -> Result<KernelSamples, KernelError> {
    sample_kernel_with_guard(spec, eps, grid, MIN_EPS_OVER_H)
}

/// As [`sample_kernel`] with the resolution guard `eps >= min_ratio * h`.
pub fn sample_kernel_with_guard(
    spec: &KernelSpec,
    eps: f64,
    grid: &Grid,
    min_ratio: f64,
) -> Result<KernelSamples, KernelError> {
    check_scale(spec, eps, grid, min_ratio)?;
    let d = grid.dim();
    let inv = eps.powi(-(d as i32));
    let n = grid.n();
    let mut omega = vec![0.0; grid.size()];
    let mut grad = vec![vec![0.0; grid.size()]; d];
    let mut f = spec.f.as_ref().map(|_| vec![0.0; grid.size()]);
    for i in 0..grid.size() {
        let x = grid.origin_offset(i);
        let r = norm(&x, d) / eps;
        omega[i] = inv * spec.omega_radial(r);
        if r > 0.0 {
            let p = inv * spec.omega_radial_deriv(r) / (eps * r * eps);
            let m = grid.multi_index(i);
            for a in 0..d {
                // The two images at the Nyquist offset cancel.
                if m[a] != n / 2 {
                    grad[a][i] = p * x[a];
                }
            }
        }
        if let Some(f) = f.as_mut() {
            f[i] = inv * spec.f_radial(r).unwrap_or(0.0);
        }
    }
    let mass: f64 = omega.iter().sum::<f64>() * grid.cell_volume();
    if !(mass > 0.0) {
        return Err(KernelError::ZeroMass(mass));
    }
    let c = 1.0 / mass;
    omega.iter_mut().for_each(|v| *v *= c);
    grad.iter_mut().flatten().for_each(|v| *v *= c);
    Ok(KernelSamples {
        eps,
        omega: Field::from_values(*grid, FieldRole::Potential, omega),
        grad: grad
            .into_iter()
            .map(|g| Field::from_values(*grid, FieldRole::Component, g))
            .collect(),
        f: f.map(|v| Field::from_values(*grid, FieldRole::Potential, v)),
        renormalization: c,
    })
}

/// Discrete `w_eps * w_eps` with gradient `(grad w_eps) * w_eps`.
pub fn self_convolution(
    spec: &KernelSpec,
    eps: f64,
    grid: &Grid,
) -> Result<KernelSamples, KernelError> {
    let s = sample_kernel(spec, eps, grid)?;
    let sp = Spectral::new(*grid);
    let omega = sp.convolve(&s.omega, &s.omega)?;
    let grad = s
        .grad
        .iter()
        .map(|g| sp.convolve(g, &s.omega))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(KernelSamples {
        eps,
        omega,
        grad,
        f: None,
        renormalization: s.renormalization,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CertificationReport {
    #[serde(rename = "C_best")]
    pub c_best: f64,
    pub worst_x: Vec<f64>,
    pub pass: bool,
    pub c_coarse: f64,
    pub c_fine: f64,
    pub failure: Option<String>,
}

/// Largest value of `(r + r^2)|p'(r)| / (w*f)(r)` on `[0, r_max]`.
///
/// The ray is sampled at `resolution` and `2 resolution` points; the best
/// fine sample is refined by golden-section search. `pass` requires a
/// positive denominator wherever the numerator is positive and the two
/// resolutions to agree within 5%.
pub fn certify_assumption(spec: &KernelSpec, r_max: f64, resolution: usize) -> CertificationReport {
    let d = spec.dim();
    let point = |r: f64| {
        let mut x = vec![0.0; d];
        x[0] = r;
        x
    };
    let ratio = |r: f64| -> Result<f64, f64> {
        let num = (r + r * r) * spec.omega_radial_deriv(r).abs();
        let den = spec.omega_conv_f(r).unwrap_or(0.0);
        if num == 0.0 {
            Ok(0.0)
        } else if den > f64::MIN_POSITIVE {
            Ok(num / den)
        } else {
            Err(r)
        }
    };
    let scan = |n: usize| -> Result<(f64, usize), f64> {
        let mut best = (0.0, 0);
        for i in 0..=n {
            let v = ratio(r_max * i as f64 / n as f64)?;
            if v > best.0 {
                best = (v, i);
            }
        }
        Ok(best)
    };
    let fail = |r: f64| CertificationReport {
        c_best: f64::INFINITY,
        worst_x: point(r),
        pass: false,
        c_coarse: f64::INFINITY,
        c_fine: f64::INFINITY,
        failure: Some(format!(
            "w*f vanishes at |x| = {r} where (|x|+|x|^2)|grad w| > 0"
        )),
    };
    let resolution = resolution.max(8);
    let (coarse, _) = match scan(resolution) {
        Ok(v) => v,
        Err(r) => return fail(r),
    };
    let n_fine = 2 * resolution;
    let (fine, i) = match scan(n_fine) {
        Ok(v) => v,
        Err(r) => return fail(r),
    };
    let step = r_max / n_fine as f64;
    let (mut a, mut b) = ((i as f64 - 1.0).max(0.0) * step, ((i + 1) as f64 * step).min(r_max));
    let g = |r: f64| ratio(r).unwrap_or(f64::INFINITY);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut c, mut e) = (b - phi * (b - a), a + phi * (b - a));
    let (mut gc, mut ge) = (g(c), g(e));
    for _ in 0..80 {
        if gc > ge {
            b = e;
            e = c;
            ge = gc;
            c = b - phi * (b - a);
            gc = g(c);
        } else {
            a = c;
            c = e;
            gc = ge;
            e = a + phi * (b - a);
            ge = g(e);
        }
    }
    let (mut best, mut at) = (fine, i as f64 * step);
    for (v, r) in [(gc, c), (ge, e)] {
        if v > best && v.is_finite() {
            best = v;
            at = r;
        }
    }
    let agree = (coarse - fine).abs() <= 0.05 * fine.max(coarse);
    CertificationReport {
        c_best: best,
        worst_x: point(at),
        pass: best.is_finite() && agree,
        c_coarse: coarse,
        c_fine: fine,
        failure: (!agree).then(|| {
            format!("resolutions disagree: C = {coarse} at {resolution} samples, {fine} at {n_fine}")
        }),
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DecayRow {
    pub radius: f64,
    pub value: f64,
}

/// `sup_{|x| = R} R^d w(x)` for each radius.
pub fn check_decay(spec: &KernelSpec, radii: &[f64]) -> Vec<DecayRow> {
    radii
        .iter()
        .map(|&r| DecayRow {
            radius: r,
            value: r.powi(spec.dim() as i32) * spec.omega_radial(r),
        })
        .collect()
}

/// True when the decay table is eventually non-increasing towards zero.
pub fn decay_passes(rows: &[DecayRow]) -> bool {
    match rows.len() {
        0 => true,
        1 => rows[0].value < 1e-3,
        n => rows[n - 1].value <= rows[n - 2].value && rows[n - 1].value < 1e-3,
    }
}

/// `sum_x x_i d_j w_eps(x) h^d`; scale invariant, tends to `-delta_ij`.
pub fn moment_identity_check(samples: &KernelSamples, i: usize, j: usize) -> f64 {
    let g = samples.grid();
    let dj = samples.grad[j].values();
    (0..g.size())
        .map(|k| g.origin_offset(k)[i] * dj[k])
        .sum::<f64>()
        * g.cell_volume()
}

/// Largest violation of `|x|^2 |grad w_eps| <= eps C (w_eps * f_eps) + tol` over
/// the grid, with the convolution taken discretely. Returns
/// `(max lhs - rhs, scale)` where `scale` is the largest right-hand side.
pub fn scaled_domination_gap(samples: &KernelSamples, c_best: f64) -> Option<(f64, f64)> {
    let g = samples.grid();
    let sp = Spectral::new(*g);
    let f = samples.f.as_ref()?;
    let conv = sp.convolve(&samples.omega, f).ok()?;
    let d = g.dim();
    let mut worst = f64::NEG_INFINITY;
    let mut scale = 0.0f64;
    for k in 0..g.size() {
        let x = g.origin_offset(k);
        let r = norm(&x, d);
        let gn = (0..d).map(|a| samples.grad[a].values()[k].powi(2)).sum::<f64>().sqrt();
        let rhs = samples.eps * c_best * conv.values()[k];
        scale = scale.max(rhs.abs());
        worst = worst.max(r * r * gn - rhs);
    }
    Some((worst, scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(f: KernelFamily, d: usize) -> KernelSpec {
        KernelSpec::new(f, d).unwrap()
    }

    #[test]
    fn gauss_legendre_is_exact_for_polynomials() {
        let v = gauss_legendre(0.0, 2.0, 1, |x| x.powi(15));
        assert!((v - 2f64.powi(16) / 16.0).abs() < 1e-9);
    }

    #[test]
    fn carrillo_mass_closed_form() {
        // 2 pi int_1^inf u e^{-u} du = 4 pi / e.
        let m = radial_mass(&KernelFamily::CarrilloExponential, 2);
        assert!((m - 4.0 * PI / 1f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn built_in_kernels_have_unit_mass() {
        for d in 1..=3 {
            for fam in [KernelFamily::Gaussian, KernelFamily::Bump, KernelFamily::CarrilloExponential] {
                let s = spec(fam.clone(), d);
                let m = radial_mass(&s.omega, d) * s.omega_scale;
                assert!((m - 1.0).abs() < 1e-10, "{} d={d}: {m}", fam.name());
            }
        }
    }

    #[test]
    fn gaussian_peak_sample() {
        let g = Grid::new(2, 64, 4.0).unwrap();
        let eps = 0.5;
        let s = sample_kernel(&spec(KernelFamily::Gaussian, 2), eps, &g).unwrap();
        let raw = s.omega.values()[0] / s.renormalization;
        assert!((raw - 1.0 / (2.0 * PI * eps * eps)).abs() < 1e-12);
        assert!((s.renormalization - 1.0).abs() < 1e-3);
    }

    #[test]
    fn bump_vanishes_outside_support() {
        let g = Grid::new(2, 64, 4.0).unwrap();
        let eps = 0.5;
        let s = sample_kernel(&spec(KernelFamily::Bump, 2), eps, &g).unwrap();
        for k in 0..g.size() {
            if norm(&g.origin_offset(k), 2) >= eps {
                assert_eq!(s.omega.values()[k], 0.0);
            }
        }
    }

    #[test]
    fn guards() {
        let g = Grid::new(1, 64, 4.0).unwrap();
        assert!(matches!(
            sample_kernel(&spec(KernelFamily::Gaussian, 1), 0.2, &g),
            Err(KernelError::UnderResolved { .. })
        ));
        assert!(matches!(
            sample_kernel(&spec(KernelFamily::Bump, 1), 1.5, &g),
            Err(KernelError::SupportTooLarge { .. })
        ));
        assert!(sample_kernel(&spec(KernelFamily::Bump, 1), 1.0, &g).is_ok());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = spec(KernelFamily::CarrilloExponential, 3);
        let x = [0.3, -0.7, 1.1];
        let g = s.grad_omega(&x);
        let h = 1e-6;
        for a in 0..3 {
            let mut p = x;
            let mut m = x;
            p[a] += h;
            m[a] -= h;
            let fd = (s.omega(&p) - s.omega(&m)) / (2.0 * h);
            assert!((fd - g[a]).abs() < 1e-8, "axis {a}");
        }
        let b = spec(KernelFamily::Bump, 2);
        let x = [0.5, 0.4];
        let gb = b.grad_omega(&x);
        for a in 0..2 {
            let mut p = x;
            let mut m = x;
            p[a] += h;
            m[a] -= h;
            let fd = (b.omega(&p) - b.omega(&m)) / (2.0 * h);
            assert!((fd - gb[a]).abs() < 1e-7);
        }
    }

    /// Gaussians convolve in closed form: `w*w = (4 pi)^{-d/2} e^{-|x|^2/4}`.
    #[test]
    fn gaussian_self_convolution_closed_form() {
        for d in 1..=2 {
            let n = if d == 1 { 256 } else { 128 };
            let g = Grid::new(d, n, 16.0).unwrap();
            let s = self_convolution(&spec(KernelFamily::Gaussian, d), 1.0, &g).unwrap();
            let c = (4.0 * PI).powf(-(d as f64) / 2.0);
            // Away from the boundary periodic images are below e^{-30}.
            for k in (0..g.size()).filter(|&k| norm(&g.origin_offset(k), d) <= 5.0) {
                let r = norm(&g.origin_offset(k), d);
                let want = c * (-r * r / 4.0).exp();
                assert!((s.omega.values()[k] - want).abs() < 1e-10);
            }
            assert!((s.omega.integral() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn analytic_convolution_matches_gaussian_closed_form() {
        for d in 1..=3 {
            let s = spec(KernelFamily::Gaussian, d);
            for r in [0.0, 0.7, 2.5, 6.0] {
                let want = (4.0 * PI).powf(-(d as f64) / 2.0) * (-r * r / 4.0f64).exp();
                let got = s.omega_conv_f(r).unwrap();
                assert!((got - want).abs() <= 1e-9 * want, "d={d} r={r}: {got} vs {want}");
            }
        }
    }

    /// At the origin `(w*f)(0) = 2 pi int s w(s) f(s) ds` in the plane.
    #[test]
    fn carrillo_convolution_at_origin() {
        let s = spec(KernelFamily::CarrilloExponential, 2);
        let n = 400_000;
        let ds = 100.0 / n as f64;
        let want: f64 = (0..n)
            .map(|i| {
                let r = (i as f64 + 0.5) * ds;
                2.0 * PI * r * s.omega_radial(r) * s.f_radial(r).unwrap() * ds
            })
            .sum();
        let got = s.omega_conv_f(0.0).unwrap();
        assert!((got - want).abs() < 1e-8 * want, "{got} vs {want}");
    }

    #[test]
    fn bump_self_convolution_positive_on_unit_ball() {
        let s = spec(KernelFamily::Bump, 2);
        let inf = (0..=100)
            .map(|i| s.omega_conv_f(i as f64 / 100.0).unwrap())
            .fold(f64::INFINITY, f64::min);
        assert!(inf > 0.0);
        let g = Grid::new(2, 128, 4.0).unwrap();
        let sc = self_convolution(&s, 1.0, &g).unwrap();
        let disc = (0..g.size())
            .filter(|&k| norm(&g.origin_offset(k), 2) <= 1.0)
            .map(|k| sc.omega.values()[k])
            .fold(f64::INFINITY, f64::min);
        assert!(disc > 0.0);
    }

    #[test]
    fn self_convolution_matches_explicit_convolution() {
        let g = Grid::new(2, 64, 4.0).unwrap();
        let s = spec(KernelFamily::Bump, 2);
        let a = self_convolution(&s, 0.6, &g).unwrap();
        let k = sample_kernel(&s, 0.6, &g).unwrap();
        let b = Spectral::new(g).convolve(&k.omega, &k.omega).unwrap();
        for (x, y) in a.omega.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn certification_of_built_in_families() {
        for (fam, rmax) in [
            (KernelFamily::Gaussian, 12.0),
            (KernelFamily::Bump, 1.0),
            (KernelFamily::CarrilloExponential, 12.0),
        ] {
            let rep = certify_assumption(&spec(fam.clone(), 2), rmax, 200);
            assert!(rep.pass, "{}: {rep:?}", fam.name());
            assert!(rep.c_best.is_finite() && rep.c_best > 0.0);
            assert!(rep.c_best >= rep.c_fine);
        }
    }

    /// With `f = w` Gaussian the ratio is `2^{d/2} (r^2 + r^3) e^{-r^2/4}`.
    #[test]
    fn gaussian_constant_matches_closed_form() {
        for d in 1..=2 {
            let want = (0..=200_000)
                .map(|i| {
                    let r = 12.0 * i as f64 / 200_000.0;
                    2f64.powf(d as f64 / 2.0) * (r * r + r * r * r) * (-r * r / 4.0).exp()
                })
                .fold(0.0, f64::max);
            let rep = certify_assumption(&spec(KernelFamily::Gaussian, d), 12.0, 200);
            assert!((rep.c_best - want).abs() < 1e-6 * want, "d={d}: {} vs {want}", rep.c_best);
        }
    }

    #[test]
    fn certification_detects_vanishing_denominator() {
        let zero = CustomProfile {
            name: "zero".into(),
            value: Arc::new(|_| 0.0),
            deriv: Arc::new(|_| 0.0),
            support: None,
            tail: 1.0,
        };
        let s = spec(KernelFamily::Gaussian, 1).with_f(KernelFamily::Custom(zero));
        let rep = certify_assumption(&s, 6.0, 100);
        assert!(!rep.pass);
        assert!(rep.failure.is_some());
    }

    #[test]
    fn decay_tables() {
        let b = check_decay(&spec(KernelFamily::Bump, 2), &[2.0]);
        assert_eq!(b[0].value, 0.0);
        let gtab = check_decay(&spec(KernelFamily::Gaussian, 2), &[10.0]);
        let want = 100.0 / (2.0 * PI) * (-50.0f64).exp();
        assert!((gtab[0].value - want).abs() < 1e-12 * want && gtab[0].value < 1e-20);
        let c = check_decay(&spec(KernelFamily::CarrilloExponential, 2), &[5.0, 10.0, 20.0]);
        // Independent evaluation of R^2 e^{-sqrt(1+R^2)} / (4 pi / e).
        for row in &c {
            let r: f64 = row.radius;
            let want = r * r * (-(1.0 + r * r).sqrt()).exp() / (4.0 * PI / 1f64.exp());
            assert!((row.value - want).abs() < 1e-12 * want);
        }
        assert!(c[0].value > c[1].value && c[1].value > c[2].value);
        assert!(decay_passes(&c));
    }

    #[test]
    fn moment_identity() {
        // The Gaussian tail must fit in the box as well as be resolved.
        let g = Grid::new(2, 256, 8.0).unwrap();
        for fam in [KernelFamily::Gaussian, KernelFamily::Bump] {
            let s = sample_kernel(&spec(fam, 2), 0.5, &g).unwrap();
            let m = moment_identity_check(&s, 0, 0);
            assert!((m + 1.0).abs() < 1e-3, "{m}");
            assert!((moment_identity_check(&s, 1, 1) + 1.0).abs() < 1e-3);
            assert!(moment_identity_check(&s, 0, 1).abs() < 1e-12);
        }
    }

    #[test]
    fn custom_profile() {
        let c = CustomProfile {
            name: "quartic".into(),
            value: Arc::new(|r: f64| if r < 1.0 { (1.0 - r * r).powi(4) } else { 0.0 }),
            deriv: Arc::new(|r: f64| if r < 1.0 { -8.0 * r * (1.0 - r * r).powi(3) } else { 0.0 }),
            support: Some(1.0),
            tail: 1.0,
        };
        let s = spec(KernelFamily::Custom(c), 1);
        // int_{-1}^{1} (1-x^2)^4 dx = 256/315.
        assert!((s.omega_radial(0.0) - 315.0 / 256.0).abs() < 1e-10);
        let neg = CustomProfile {
            name: "neg".into(),
            value: Arc::new(|r: f64| 1.0 - r / 1.5),
            deriv: Arc::new(|_| -1.0),
            support: Some(2.0),
            tail: 2.0,
        };
        assert!(matches!(
            KernelSpec::new(KernelFamily::Custom(neg), 1),
            Err(KernelError::Negative { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn samples_are_normalized_even_nonnegative(
            eps in 0.25f64..0.9,
            fam in 0usize..3,
            d in 1usize..3,
        ) {
            let fam = [KernelFamily::Gaussian, KernelFamily::Bump, KernelFamily::CarrilloExponential][fam].clone();
            let g = Grid::new(d, 64, 4.0).unwrap();
            let s = sample_kernel(&spec(fam, d), eps, &g).unwrap();
            prop_assert!((s.omega.integral() - 1.0).abs() < 1e-13);
            for k in 0..g.size() {
                let v = s.omega.values()[k];
                prop_assert!(v >= 0.0);
                prop_assert_eq!(v, s.omega.values()[g.reflect(k)]);
                for a in 0..d {
                    prop_assert_eq!(s.grad[a].values()[k], -s.grad[a].values()[g.reflect(k)]);
                }
            }
        }
    }
}
