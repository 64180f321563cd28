//! IMEX time stepping for `d_t rho - lap rho + div(rho grad lap(rho * w_eps * w_eps)) = 0`
//! and for its local limit `d_t rho - lap rho + div(rho grad lap rho) = 0`.
//!
//! One step:
//! 1. potential `psi = lap_s(rho * w * w)` by spectral multiplier;
//! 2. explicit transport `rho* = rho - dt div_h(rho_f grad_h psi)` on faces;
//! 3. implicit diffusion `(1 + dt lam_h) rho^{n+1} = rho*`, optionally with the
//!    stabilizing shift `dt kappa S (rho^{n+1} - rho^n)`.
//!
//! `grad_h` and `div_h` are adjoint face differences, so the transport part
//! dissipates `E = 1/2 |grad_s(rho * w)|^2` at exactly the rate
//! `sum_f rho_f |grad_h psi|^2`. The resolvent of `1 - dt lap_h` is an M-matrix
//! inverse and keeps densities nonnegative.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

use crate::fd::{advective_flux, face_divergence, face_gradient, fd_laplacian_symbol, max_abs_face, FaceField, Reconstruction};
use crate::grid::{norm, Field, FieldRole, Grid, GridError};
use crate::io::{read_snapshot, IoError};
use crate::kernels::KernelSamples;
use crate::spectral::Spectral;

/// Fraction of the initial mass that must lie within `L/4` of the centre.
pub const SEAM_MASS_FRACTION: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DtMode {
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchemeParams {
    pub cfl_safety: f64,
    pub dt: DtMode,
    /// Upper bound on automatically chosen steps.
    pub dt_cap: f64,
    /// Implicit shift `kappa S` with `kappa = max rho`; lifts the stiffness cap.
    pub stabilize: bool,
    pub reconstruction: Reconstruction,
    /// Scale back outgoing fluxes of any cell that would go negative.
    pub positivity_limiter: bool,
}

impl Default for SchemeParams {
    fn default() -> Self {
        Self {
            cfl_safety: 0.9,
            dt: DtMode::Auto,
            dt_cap: f64::INFINITY,
            stabilize: false,
            reconstruction: Reconstruction::LogMean,
            positivity_limiter: true,
        }
    }
}

#[derive(Debug, Error)]
pub enum StepError {
    #[error("time step {dt} exceeds the admissible step {admissible} (CFL {cfl}, stiffness {stiffness})")]
    Cfl {
        dt: f64,
        admissible: f64,
        cfl: f64,
        stiffness: f64,
    },
    #[error("no finite time step available: velocity and stiffness bounds are unbounded and no cap is set")]
    Unbounded,
    #[error("non-finite density at cell {index} after the step")]
    NonFinite { index: usize },
}

#[derive(Debug, Error)]
pub enum InitError {
    #[error("initial data is negative: min {min}, max {max}")]
    Negative { min: f64, max: f64 },
    #[error("seam guard: only {fraction} of the mass lies within L/4 of the centre (need {SEAM_MASS_FRACTION})")]
    Seam { fraction: f64 },
    #[error("domain too small: L = {len} but need L >= 16 * width ({width}) and L >= 8 eps ({eps})")]
    Domain { len: f64, width: f64, eps: f64 },
    #[error("invalid initial data parameter: {0}")]
    Param(String),
    #[error("initial data grid {found:?} does not match the solver grid {expected:?}")]
    GridMismatch { expected: Grid, found: Grid },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("step {step} (t = {t}): {source}")]
    Step {
        step: usize,
        t: f64,
        source: StepError,
        last: Box<SolverState>,
    },
    /// Multi-species step failure; the state is not carried.
    #[error("step {step} (t = {t}): {source}")]
    SystemStep { step: usize, t: f64, source: StepError },
    #[error("observer failed at step {step}: {msg}")]
    Observer { step: usize, msg: String },
    #[error("invalid run request: {0}")]
    Invalid(String),
}

fn default_mass() -> f64 {
    1.0
}

fn default_modes() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialDataSpec {
    GaussianBlob {
        sigma: f64,
        #[serde(default = "default_mass")]
        mass: f64,
        /// Offset from the domain centre.
        #[serde(default)]
        center: Vec<f64>,
    },
    /// Two Gaussian blobs at `+-separation/2` along the first axis.
    DoubleBump {
        sigma: f64,
        #[serde(default = "default_mass")]
        mass: f64,
        separation: f64,
    },
    /// `mean + amplitude xi(x)` with `xi` a random trigonometric polynomial, `|xi| <= 1`.
    PerturbedConstant {
        mean: f64,
        amplitude: f64,
        seed: u64,
        #[serde(default = "default_modes")]
        modes: usize,
    },
    FromFile { path: PathBuf },
}

impl InitialDataSpec {
    /// Localized data are subject to the seam guard.
    pub fn is_localized(&self) -> bool {
        !matches!(self, Self::PerturbedConstant { .. })
    }

    pub fn generate(&self, grid: &Grid) -> Result<Field, InitError> {
        let d = grid.dim();
        let field = match self {
            Self::GaussianBlob { sigma, mass, center } => {
                check_positive("sigma", *sigma)?;
                check_positive("mass", *mass)?;
                if !center.is_empty() && center.len() != d {
                    return Err(InitError::Param(format!(
                        "center has {} components, grid has {d}",
                        center.len()
                    )));
                }
                let c = center.clone();
                let f = Field::from_displacement_fn(*grid, FieldRole::Density, |x| {
                    let r2: f64 = (0..d)
                        .map(|a| (x[a] - c.get(a).copied().unwrap_or(0.0)).powi(2))
                        .sum();
                    (-r2 / (2.0 * sigma * sigma)).exp()
                });
                normalize(f, *mass)
            }
            Self::DoubleBump {
                sigma,
                mass,
                separation,
            } => {
                check_positive("sigma", *sigma)?;
                check_positive("mass", *mass)?;
                let s = separation / 2.0;
                let f = Field::from_displacement_fn(*grid, FieldRole::Density, |x| {
                    let rest: f64 = (1..d).map(|a| x[a] * x[a]).sum();
                    let g = |c: f64| (-((x[0] - c).powi(2) + rest) / (2.0 * sigma * sigma)).exp();
                    g(-s) + g(s)
                });
                normalize(f, *mass)
            }
            Self::PerturbedConstant {
                mean,
                amplitude,
                seed,
                modes,
            } => {
                check_positive("mean", *mean)?;
                if !(*amplitude >= 0.0 && amplitude < mean) {
                    return Err(InitError::Param(format!(
                        "amplitude {amplitude} must lie in [0, mean)"
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let terms: Vec<([f64; 3], f64, f64)> = (0..*modes)
                    .map(|_| {
                        let mut k = [0.0; 3];
                        while k[..d].iter().all(|&v| v == 0.0) {
                            for v in k[..d].iter_mut() {
                                *v = rng.random_range(-3i32..=3) as f64;
                            }
                        }
                        (k, rng.random_range(0.5..1.0), rng.random_range(0.0..std::f64::consts::TAU))
                    })
                    .collect();
                let total: f64 = terms.iter().map(|t| t.1).sum::<f64>().max(f64::MIN_POSITIVE);
                let w = std::f64::consts::TAU / grid.len();
                Field::from_coord_fn(*grid, FieldRole::Density, |x| {
                    let xi: f64 = terms
                        .iter()
                        .map(|(k, a, p)| {
                            let ph: f64 = (0..d).map(|i| k[i] * w * x[i]).sum();
                            a * (ph + p).cos()
                        })
                        .sum::<f64>()
                        / total;
                    mean + amplitude * xi
                })
            }
            Self::FromFile { path } => {
                let snap = read_snapshot(path)?;
                if snap.field.grid() != grid {
                    return Err(InitError::GridMismatch {
                        expected: *grid,
                        found: *snap.field.grid(),
                    });
                }
                snap.field
            }
        };
        Ok(field)
    }
}

fn check_positive(name: &str, v: f64) -> Result<(), InitError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(InitError::Param(format!("{name} must be positive, got {v}")))
    }
}

fn normalize(f: Field, mass: f64) -> Field {
    let s = mass / f.integral();
    f.map(|v| v * s)
}

/// Mass-weighted RMS distance from the centre per axis: `sqrt(M2 / (d M))`.
pub fn rms_width(rho: &Field) -> f64 {
    let g = rho.grid();
    let d = g.dim();
    let mut m2 = 0.0;
    for (i, v) in rho.values().iter().enumerate() {
        let x = g.displacement(i);
        m2 += v * norm(&x, d).powi(2);
    }
    (m2 / (d as f64 * rho.values().iter().sum::<f64>())).sqrt()
}

/// Fraction of the mass within `radius` of the centre (minimal image).
pub fn mass_fraction_within(rho: &Field, radius: f64) -> f64 {
    let g = rho.grid();
    let d = g.dim();
    let (mut inside, mut total) = (0.0, 0.0);
    for (i, v) in rho.values().iter().enumerate() {
        total += v;
        if norm(&g.displacement(i), d) <= radius {
            inside += v;
        }
    }
    inside / total
}

/// Checks shared by every solver: grid, finiteness, sign, and for localized
/// data the seam and domain-size guards.
pub fn check_initial_density(grid: &Grid, eps: f64, rho: Field, localized: bool) -> Result<Field, InitError> {
    let g = *grid;
    if rho.grid() != &g {
        return Err(InitError::GridMismatch {
            expected: g,
            found: *rho.grid(),
        });
    }
    let rho = rho.with_role(FieldRole::Density);
    rho.check_finite()?;
    if rho.validate().is_err() {
        return Err(InitError::Negative {
            min: rho.min(),
            max: rho.max(),
        });
    }
    if localized {
        let fraction = mass_fraction_within(&rho, g.len() / 4.0);
        if fraction < SEAM_MASS_FRACTION {
            return Err(InitError::Seam { fraction });
        }
        let width = rms_width(&rho);
        let tol = 1.0 + 1e-9;
        if g.len() * tol < 16.0 * width || g.len() * tol < 8.0 * eps {
            return Err(InitError::Domain {
                len: g.len(),
                width,
                eps,
            });
        }
    }
    Ok(rho)
}

/// Spectral and face operators shared by the single and multi-species solvers.
#[derive(Debug, Clone)]
pub struct Operators {
    grid: Grid,
    spectral: Spectral,
    /// Symbol of `-lap_h` (five-point in 2d).
    lam: Vec<f64>,
    /// `|k|^2`, symbol of `-lap_s`.
    k2: Vec<f64>,
    recon: Reconstruction,
}

/// Result of the explicit transport stage.
#[derive(Debug, Clone)]
pub struct Transport {
    pub rho_star: Vec<f64>,
    pub flux: FaceField,
    pub vmax: f64,
    pub limited_faces: usize,
}

impl Operators {
    pub fn new(grid: Grid, recon: Reconstruction) -> Self {
        let spectral = Spectral::new(grid);
        let lam = fd_laplacian_symbol(&spectral);
        let k2 = spectral.k_squared();
        Self {
            grid,
            spectral,
            lam,
            k2,
            recon,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn spectral(&self) -> &Spectral {
        &self.spectral
    }

    pub fn lam(&self) -> &[f64] {
        &self.lam
    }

    pub fn k2(&self) -> &[f64] {
        &self.k2
    }

    pub fn reconstruction(&self) -> Reconstruction {
        self.recon
    }

    /// Discrete transform of kernel samples. Even samples give a real transform.
    pub fn kernel_hat(&self, omega: &Field) -> Vec<f64> {
        self.spectral
            .forward_values(omega.values())
            .into_iter()
            .map(|c| c.re)
            .collect()
    }

    /// Potential multiplier `-|k|^2 c w_i w_j`; `None` stands for the identity.
    pub fn pair_symbol(&self, wi: Option<&[f64]>, wj: Option<&[f64]>, c: f64) -> Vec<f64> {
        (0..self.grid.size())
            .map(|m| {
                let mut s = -self.k2[m] * c;
                if let Some(w) = wi {
                    s *= w[m];
                }
                if let Some(w) = wj {
                    s *= w[m];
                }
                s
            })
            .collect()
    }

    /// Forward transform of `u - u[0]`. Constants map to exactly zero.
    pub fn hat(&self, u: &[f64]) -> Vec<Complex64> {
        let c = u[0];
        let shifted: Vec<f64> = u.iter().map(|v| v - c).collect();
        self.spectral.forward_values(&shifted)
    }

    /// `sum_j symbol_j * hat_j`, transformed back.
    pub fn combine(&self, hats: &[&[Complex64]], symbols: &[&[f64]]) -> Vec<f64> {
        let mut acc = vec![Complex64::default(); self.grid.size()];
        for (h, s) in hats.iter().zip(symbols) {
            for ((a, h), s) in acc.iter_mut().zip(h.iter()).zip(s.iter()) {
                *a += h * s;
            }
        }
        self.spectral.inverse_values(acc)
    }

    pub fn face_velocity(&self, psi: &[f64]) -> FaceField {
        face_gradient(&self.grid, psi)
    }

    pub fn flux(&self, rho: &[f64], vel: &[Vec<f64>]) -> FaceField {
        advective_flux(&self.grid, rho, vel, self.recon)
    }

    /// `rho - dt div_h(rho_f grad_h psi)`, optionally positivity-limited.
    pub fn transport(&self, rho: &[f64], psi: &[f64], dt: f64, limiter: bool) -> Transport {
        let g = &self.grid;
        let vel = self.face_velocity(psi);
        let vmax = max_abs_face(&vel);
        let mut flux = self.flux(rho, &vel);
        let mut limited_faces = 0;
        if limiter {
            let s = dt / g.h();
            let mut out = vec![0.0; g.size()];
            for (a, f) in flux.iter().enumerate() {
                for (i, &fv) in f.iter().enumerate() {
                    if fv > 0.0 {
                        out[i] += s * fv;
                    } else if fv < 0.0 {
                        out[g.neighbor(i, a, true)] -= s * fv;
                    }
                }
            }
            let theta: Vec<f64> = out
                .iter()
                .zip(rho)
                .map(|(&o, &r)| if o > r { r.max(0.0) / o } else { 1.0 })
                .collect();
            for (a, f) in flux.iter_mut().enumerate() {
                for (i, fv) in f.iter_mut().enumerate() {
                    let donor = if *fv >= 0.0 { i } else { g.neighbor(i, a, true) };
                    if theta[donor] < 1.0 {
                        *fv *= theta[donor];
                        limited_faces += 1;
                    }
                }
            }
        }
        let div = face_divergence(g, &flux);
        let rho_star = rho.iter().zip(&div).map(|(r, d)| r - dt * d).collect();
        Transport {
            rho_star,
            flux,
            vmax,
            limited_faces,
        }
    }

    /// Implicit diffusion of `rho_star`; `stab = (kappa, S)` adds the shift
    /// `dt kappa S (rho^{n+1} - rho_n)` on the left.
    pub fn diffuse(&self, rho_star: &[f64], rho_n: &[f64], dt: f64, stab: Option<(f64, &[f64])>) -> Vec<f64> {
        let c = rho_n[0];
        let shifted: Vec<f64> = rho_star.iter().map(|v| v - c).collect();
        let mut num = self.spectral.forward_values(&shifted);
        match stab {
            None => {
                for (x, l) in num.iter_mut().zip(&self.lam) {
                    *x /= 1.0 + dt * l;
                }
            }
            Some((kappa, s)) => {
                let old = self.hat(rho_n);
                for m in 0..num.len() {
                    let sh = dt * kappa * s[m];
                    num[m] = (num[m] + old[m] * sh) / (1.0 + dt * self.lam[m] + sh);
                }
            }
        }
        self.spectral
            .inverse_values(num)
            .into_iter()
            .map(|v| v + c)
            .collect()
    }

    /// `lam_h * (-symbol)`: linearized decay rate of the transport term per unit density.
    pub fn stiffness_symbol(&self, symbol: &[f64]) -> Vec<f64> {
        self.lam.iter().zip(symbol).map(|(l, s)| -l * s).collect()
    }

    /// Largest `dt` with `dt max|v| / h <= 1/(2d)`.
    pub fn cfl_bound(&self, vmax: f64) -> f64 {
        if vmax > 0.0 {
            self.grid.h() / (2.0 * self.grid.dim() as f64 * vmax)
        } else {
            f64::INFINITY
        }
    }
}

/// Bounds that an explicit step must respect.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DtBounds {
    pub cfl: f64,
    pub stiffness: f64,
}

impl DtBounds {
    pub fn admissible(&self) -> f64 {
        self.cfl.min(self.stiffness)
    }
}

/// Resolve the step size from the mode, bounds, and the remaining time.
pub fn choose_dt(params: &SchemeParams, bounds: DtBounds, max_dt: f64) -> Result<f64, StepError> {
    let adm = bounds.admissible();
    let dt = match params.dt {
        DtMode::Fixed(dt) => {
            let dt = dt.min(max_dt);
            if dt > adm {
                return Err(StepError::Cfl {
                    dt,
                    admissible: params.cfl_safety * adm,
                    cfl: bounds.cfl,
                    stiffness: bounds.stiffness,
                });
            }
            dt
        }
        DtMode::Auto => (params.cfl_safety * adm).min(params.dt_cap).min(max_dt),
    };
    if dt.is_finite() && dt > 0.0 {
        Ok(dt)
    } else {
        Err(StepError::Unbounded)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub rho: Field,
    pub t: f64,
    pub step: usize,
    /// Zero for the local equation.
    pub eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub dt: f64,
    pub vmax: f64,
    pub bounds: DtBounds,
    pub limited_faces: usize,
}

pub trait Observer {
    /// Called once before the first step (`info = None`) and after every step.
    fn observe(&mut self, solver: &Solver, state: &SolverState, info: Option<&StepInfo>) -> Result<(), String>;
}

pub type Trajectory = TrajectoryOf<SolverState>;

/// Single-species solver: the nonlocal equation or, without kernel, its local limit.
#[derive(Debug, Clone)]
pub struct Solver {
    ops: Operators,
    kernel: Option<KernelSamples>,
    omega_hat: Option<Vec<f64>>,
    symbol: Vec<f64>,
    stiff: Vec<f64>,
    stiff_max: f64,
    params: SchemeParams,
}

impl Solver {
    pub fn nonlocal(kernel: KernelSamples, params: SchemeParams) -> Self {
        let ops = Operators::new(*kernel.grid(), params.reconstruction);
        let w = ops.kernel_hat(&kernel.omega);
        Self::build(ops, Some(kernel), Some(w), params)
    }

    pub fn local(grid: Grid, params: SchemeParams) -> Self {
        let ops = Operators::new(grid, params.reconstruction);
        Self::build(ops, None, None, params)
    }

    fn build(ops: Operators, kernel: Option<KernelSamples>, omega_hat: Option<Vec<f64>>, params: SchemeParams) -> Self {
        let w = omega_hat.as_deref();
        let symbol = ops.pair_symbol(w, w, 1.0);
        let stiff = ops.stiffness_symbol(&symbol);
        let stiff_max = stiff.iter().cloned().fold(0.0, f64::max);
        Self {
            ops,
            kernel,
            omega_hat,
            symbol,
            stiff,
            stiff_max,
            params,
        }
    }

    pub fn ops(&self) -> &Operators {
        &self.ops
    }

    pub fn grid(&self) -> &Grid {
        self.ops.grid()
    }

    pub fn params(&self) -> &SchemeParams {
        &self.params
    }

    pub fn kernel(&self) -> Option<&KernelSamples> {
        self.kernel.as_ref()
    }

    pub fn eps(&self) -> f64 {
        self.kernel.as_ref().map_or(0.0, |k| k.eps)
    }

    /// Transform of `w_eps`, or `None` for the local equation.
    pub fn omega_hat(&self) -> Option<&[f64]> {
        self.omega_hat.as_deref()
    }

    /// Multiplier taking `rho` to `psi`.
    pub fn symbol(&self) -> &[f64] {
        &self.symbol
    }

    /// `psi = lap_s(rho * w * w)`.
    pub fn potential(&self, rho: &[f64]) -> Vec<f64> {
        let h = self.ops.hat(rho);
        self.ops.combine(&[&h], &[&self.symbol])
    }

    pub fn bounds(&self, rho: &[f64], vmax: f64) -> DtBounds {
        let stiffness = if self.params.stabilize || self.stiff_max == 0.0 {
            f64::INFINITY
        } else {
            let rmax = rho.iter().cloned().fold(0.0, f64::max);
            if rmax > 0.0 {
                1.0 / (rmax * self.stiff_max)
            } else {
                f64::INFINITY
            }
        };
        DtBounds {
            cfl: self.ops.cfl_bound(vmax),
            stiffness,
        }
    }

    pub fn initial_state(&self, spec: &InitialDataSpec) -> Result<SolverState, InitError> {
        let rho = spec.generate(self.grid())?;
        self.state_from_field(rho, spec.is_localized())
    }

    /// Validate `rho` and wrap it as a state at `t = 0`.
    pub fn state_from_field(&self, rho: Field, localized: bool) -> Result<SolverState, InitError> {
        let rho = check_initial_density(self.grid(), self.eps(), rho, localized)?;
        Ok(SolverState {
            rho,
            t: 0.0,
            step: 0,
            eps: self.eps(),
        })
    }

    /// One IMEX step of at most `max_dt`.
    pub fn step(&self, state: &SolverState, max_dt: f64) -> Result<(SolverState, StepInfo), StepError> {
        let rho = state.rho.values();
        let psi = self.potential(rho);
        let vmax = max_abs_face(&self.ops.face_velocity(&psi));
        let bounds = self.bounds(rho, vmax);
        let dt = choose_dt(&self.params, bounds, max_dt)?;
        let tr = self.ops.transport(rho, &psi, dt, self.params.positivity_limiter);
        let stab = self.params.stabilize.then(|| {
            let kappa = rho.iter().cloned().fold(0.0, f64::max);
            (kappa, self.stiff.as_slice())
        });
        let next = self.ops.diffuse(&tr.rho_star, rho, dt, stab);
        if let Some(index) = next.iter().position(|v| !v.is_finite()) {
            return Err(StepError::NonFinite { index });
        }
        Ok((
            SolverState {
                rho: Field::from_values(*self.grid(), FieldRole::Density, next),
                t: state.t + dt,
                step: state.step + 1,
                eps: state.eps,
            },
            StepInfo {
                dt,
                vmax,
                bounds,
                limited_faces: tr.limited_faces,
            },
        ))
    }

    /// Advance to `t_end`, landing exactly on every snapshot time.
    pub fn run(
        &self,
        state: SolverState,
        t_end: f64,
        cadence: Option<f64>,
        observers: &mut [&mut dyn Observer],
    ) -> Result<Trajectory, RunError> {
        run_loop(
            state,
            t_end,
            cadence,
            self.params.dt,
            |s, max_dt| self.step(s, max_dt),
            |s, info| {
                for o in observers.iter_mut() {
                    o.observe(self, s, info).map_err(|msg| RunError::Observer { step: s.step, msg })?;
                }
                Ok(())
            },
        )
    }
}

/// Snapshot targets `t0 + k cadence` below `t_end`, then `t_end`.
pub fn snapshot_targets(t0: f64, t_end: f64, cadence: Option<f64>) -> Vec<f64> {
    let mut out = Vec::new();
    if let Some(c) = cadence {
        let mut k = 1u64;
        loop {
            let t = t0 + k as f64 * c;
            if t >= t_end - 1e-12 * t_end.abs().max(1.0) {
                break;
            }
            out.push(t);
            k += 1;
        }
    }
    if t_end > t0 {
        out.push(t_end);
    }
    out
}

/// Generic driver shared by the single and multi-species solvers.
pub fn run_loop<S, I>(
    mut state: S,
    t_end: f64,
    cadence: Option<f64>,
    dt_mode: DtMode,
    mut step: impl FnMut(&S, f64) -> Result<(S, I), StepError>,
    mut observe: impl FnMut(&S, Option<&I>) -> Result<(), RunError>,
) -> Result<TrajectoryOf<S>, RunError>
where
    S: TimeState + Clone,
    I: HasDt,
{
    let t0 = state.time();
    if !(t_end >= t0) || !t_end.is_finite() {
        return Err(RunError::Invalid(format!("end time {t_end} precedes start time {t0}")));
    }
    if let Some(c) = cadence {
        if !(c > 0.0) {
            return Err(RunError::Invalid(format!("snapshot cadence {c} must be positive")));
        }
        if let DtMode::Fixed(dt) = dt_mode {
            if c < dt {
                return Err(RunError::Invalid(format!("snapshot cadence {c} is below the time step {dt}")));
            }
        }
    }
    let targets = snapshot_targets(t0, t_end, cadence);
    let mut traj = TrajectoryOf {
        snapshot_times: vec![t0],
        snapshots: vec![state.clone()],
        step_times: vec![t0],
        dts: Vec::new(),
    };
    observe(&state, None)?;
    for target in targets {
        while state.time() < target {
            let remaining = target - state.time();
            let (mut next, info) = match step(&state, remaining) {
                Ok(v) => v,
                Err(source) => {
                    return Err(state.step_error(source));
                }
            };
            // Absorb rounding so the clock lands on the target.
            if (next.time() - target).abs() <= 1e-12 * target.abs().max(1.0) {
                next.set_time(target);
            }
            traj.dts.push(info.dt());
            traj.step_times.push(next.time());
            state = next;
            observe(&state, Some(&info))?;
        }
        traj.snapshot_times.push(state.time());
        traj.snapshots.push(state.clone());
    }
    Ok(traj)
}

/// Time bookkeeping needed by [`run_loop`].
pub trait TimeState {
    fn time(&self) -> f64;
    fn set_time(&mut self, t: f64);
    fn step_error(&self, source: StepError) -> RunError;
}

pub trait HasDt {
    fn dt(&self) -> f64;
}

impl HasDt for StepInfo {
    fn dt(&self) -> f64 {
        self.dt
    }
}

impl TimeState for SolverState {
    fn time(&self) -> f64 {
        self.t
    }

    fn set_time(&mut self, t: f64) {
        self.t = t;
    }

    fn step_error(&self, source: StepError) -> RunError {
        RunError::Step {
            step: self.step + 1,
            t: self.t,
            source,
            last: Box::new(self.clone()),
        }
    }
}

/// Snapshots of any state type.
#[derive(Debug, Clone)]
pub struct TrajectoryOf<S> {
    pub snapshot_times: Vec<f64>,
    pub snapshots: Vec<S>,
    pub step_times: Vec<f64>,
    pub dts: Vec<f64>,
}

impl TrajectoryOf<SolverState> {
    pub fn final_state(&self) -> &SolverState {
        self.snapshots.last().expect("trajectory has an initial snapshot")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{sample_kernel, KernelFamily, KernelSpec};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn gaussian_solver(d: usize, n: usize, l: f64, eps: f64, params: SchemeParams) -> Solver {
        let g = Grid::new(d, n, l).unwrap();
        let spec = KernelSpec::new(KernelFamily::Gaussian, d).unwrap();
        Solver::nonlocal(sample_kernel(&spec, eps, &g).unwrap(), params)
    }

    #[test]
    fn constants_are_exact_fixed_points() {
        for stabilize in [false, true] {
            let p = SchemeParams {
                dt: DtMode::Fixed(1e-3),
                stabilize,
                ..Default::default()
            };
            let s = gaussian_solver(2, 32, 4.0, 0.5, p);
            let mut st = s.state_from_field(Field::constant(*s.grid(), FieldRole::Density, 0.37), false).unwrap();
            for _ in 0..50 {
                st = s.step(&st, 1.0).unwrap().0;
            }
            assert!(st.rho.values().iter().all(|&v| v == 0.37));
            // Unstabilized local steps are capped by the h^4 stiffness bound.
            let lp = SchemeParams {
                dt: if stabilize { p.dt } else { DtMode::Auto },
                ..p
            };
            let l = Solver::local(*s.grid(), lp);
            let mut st = l.state_from_field(Field::constant(*s.grid(), FieldRole::Density, 2.5), false).unwrap();
            for _ in 0..50 {
                st = l.step(&st, 1.0).unwrap().0;
            }
            assert!(st.rho.values().iter().all(|&v| v == 2.5));
        }
    }

    #[test]
    fn blob_initialization() {
        let s = gaussian_solver(2, 64, 8.0, 0.5, SchemeParams::default());
        let st = s
            .initial_state(&InitialDataSpec::GaussianBlob {
                sigma: 0.5,
                mass: 1.0,
                center: vec![],
            })
            .unwrap();
        assert!((st.rho.integral() - 1.0).abs() < 1e-12);
        let err = s.initial_state(&InitialDataSpec::GaussianBlob {
            sigma: 4.0,
            mass: 1.0,
            center: vec![],
        });
        assert!(matches!(err, Err(InitError::Seam { .. })));
    }

    #[test]
    fn perturbed_constant_bounds_and_determinism() {
        let s = gaussian_solver(2, 32, 4.0, 0.5, SchemeParams::default());
        let spec = InitialDataSpec::PerturbedConstant {
            mean: 1.0,
            amplitude: 0.01,
            seed: 7,
            modes: 4,
        };
        let a = s.initial_state(&spec).unwrap();
        let b = s.initial_state(&spec).unwrap();
        assert!(a.rho.min() >= 0.99 && a.rho.max() <= 1.01);
        assert_eq!(a.rho, b.rho);
        assert!(a.rho.max() - a.rho.min() > 1e-4);
    }

    #[test]
    fn fixed_step_above_bound_is_refused() {
        let p = SchemeParams {
            dt: DtMode::Fixed(1.0),
            ..Default::default()
        };
        let s = gaussian_solver(1, 64, 8.0, 0.5, p);
        let st = s
            .initial_state(&InitialDataSpec::GaussianBlob {
                sigma: 0.5,
                mass: 1.0,
                center: vec![],
            })
            .unwrap();
        match s.step(&st, 1.0) {
            Err(StepError::Cfl { admissible, dt, .. }) => {
                assert!(admissible < dt);
                let p2 = SchemeParams {
                    dt: DtMode::Fixed(admissible),
                    ..p
                };
                let s2 = gaussian_solver(1, 64, 8.0, 0.5, p2);
                assert!(s2.step(&st, 1.0).is_ok());
            }
            other => panic!("expected CFL error, got {other:?}"),
        }
    }

    /// Linearizing around `rho_bar` gives decay rate `|k|^2 + rho_bar |k|^4 w_hat(eps k)^2`.
    /// With `L = 2 pi` mode `m` has `|k| = m`.
    /// Returns (measured, continuum rate, discrete-symbol rate).
    fn measured_rate(local: bool, eps: f64, m: usize, n: usize) -> (f64, f64, f64) {
        let l = 2.0 * PI;
        let g = Grid::new(1, n, l).unwrap();
        let dt = 1e-5;
        let p = SchemeParams {
            dt: DtMode::Fixed(dt),
            stabilize: true,
            ..Default::default()
        };
        let s = if local {
            Solver::local(g, p)
        } else {
            let spec = KernelSpec::new(KernelFamily::Gaussian, 1).unwrap();
            Solver::nonlocal(sample_kernel(&spec, eps, &g).unwrap(), p)
        };
        let a0 = 1e-6;
        let k = m as f64;
        let rho = Field::from_coord_fn(g, FieldRole::Density, |x| 1.0 + a0 * (k * x[0]).cos());
        let mut st = s.state_from_field(rho, false).unwrap();
        let amp = |f: &Field| {
            let v = f.values();
            (0..n).map(|i| (v[i] - 1.0) * (k * g.h() * i as f64).cos()).sum::<f64>() * 2.0 / n as f64
        };
        let what = if local { 1.0 } else { (-eps * eps * k * k).exp() };
        // Discrete prediction: one implicit Euler factor per step.
        let lam = s.ops().lam()[m];
        let w = s.omega_hat().map_or(1.0, |w| w[m] * w[m]);
        let rate = lam * (1.0 + k * k * w);
        let discrete = (1.0 + dt * rate).ln() / dt;
        // About one e-fold, so the amplitude stays far above rounding.
        let steps = ((1.0 / (discrete * dt)).round() as usize).clamp(5, 2000);
        for _ in 0..steps {
            st = s.step(&st, 1.0).unwrap().0;
        }
        let measured = -(amp(&st.rho) / a0).ln() / (steps as f64 * dt);
        (measured, k * k + k.powi(4) * what, discrete)
    }

    #[test]
    fn linear_decay_rate_examples() {
        let (m, want, _) = measured_rate(false, 0.1, 1, 256);
        assert!((want - (1.0 + (-0.01f64).exp())).abs() < 1e-12);
        assert!((m - want).abs() < 0.05 * want, "nonlocal: {m} vs {want}");
        let (m, want, _) = measured_rate(true, 0.0, 1, 128);
        assert_eq!(want, 2.0);
        assert!((m - want).abs() < 0.05 * want, "local: {m} vs {want}");
    }

    /// The five-point diffusion symbol is `|k|^2 sinc^2(kh/2)`, about 5.04% low
    /// at `kh = pi/4`, so the 5% band holds strictly below an eighth of the modes.
    #[test]
    fn linear_decay_rate_below_an_eighth_of_the_modes() {
        let n = 64;
        for m in 1..n / 8 {
            for local in [false, true] {
                let (meas, want, _) = measured_rate(local, 0.4, m, n);
                assert!((meas - want).abs() < 0.05 * want, "local={local} m={m}: {meas} vs {want}");
            }
        }
    }

    #[test]
    fn linear_decay_rate_matches_discrete_symbol() {
        let n = 64;
        for m in 1..=n / 4 {
            for local in [false, true] {
                let (meas, _, disc) = measured_rate(local, 0.4, m, n);
                assert!((meas - disc).abs() < 0.01 * disc, "local={local} m={m}: {meas} vs {disc}");
            }
        }
    }

    fn blob_run(d: usize, n: usize, steps: usize) -> (Solver, Vec<SolverState>) {
        let s = gaussian_solver(d, n, 8.0, 0.5, SchemeParams::default());
        let mut st = s
            .initial_state(&InitialDataSpec::GaussianBlob {
                sigma: 0.5,
                mass: 1.0,
                center: vec![],
            })
            .unwrap();
        let mut all = vec![st.clone()];
        for _ in 0..steps {
            st = s.step(&st, 1.0).unwrap().0;
            all.push(st.clone());
        }
        (s, all)
    }

    #[test]
    fn mass_and_positivity_over_many_steps() {
        let (_, states) = blob_run(1, 128, 1000);
        let m0 = states[0].rho.integral();
        for st in &states {
            assert!((st.rho.integral() - m0).abs() <= 1e-12 * m0);
            assert!(st.rho.min() >= -1e-12 * st.rho.max());
        }
    }

    #[test]
    fn reflection_symmetry_is_preserved() {
        let (_, states) = blob_run(2, 64, 30);
        let g = *states[0].rho.grid();
        let last = &states.last().unwrap().rho;
        let scale = last.max();
        // Reflection about the centre maps index j to (n - j) mod n on the
        // centred grid; the blob is centred at index n/2.
        for i in 0..g.size() {
            let m = g.multi_index(i);
            let r = g.linear_index(&[(g.n() - m[0]) % g.n(), (g.n() - m[1]) % g.n(), 0]);
            assert!((last.values()[i] - last.values()[r]).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn run_lands_on_targets() {
        let s = gaussian_solver(1, 64, 8.0, 0.5, SchemeParams::default());
        let st = s
            .initial_state(&InitialDataSpec::GaussianBlob {
                sigma: 0.5,
                mass: 1.0,
                center: vec![],
            })
            .unwrap();
        let tr = s.run(st.clone(), 0.01, Some(0.003), &mut []).unwrap();
        let want = [0.0, 0.003, 0.006, 0.009, 0.01];
        assert_eq!(tr.snapshot_times.len(), want.len());
        for (a, b) in tr.snapshot_times.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(*tr.snapshot_times.last().unwrap(), 0.01);
        assert!(tr.step_times.windows(2).all(|w| w[1] > w[0]));
        let tr0 = s.run(st, 0.0, None, &mut []).unwrap();
        assert_eq!(tr0.snapshots.len(), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn random_positive_data_stays_nonnegative_and_conserved(
            vals in prop::collection::vec(0.0f64..2.0, 64),
            stabilize in any::<bool>(),
        ) {
            let g = Grid::new(1, 64, 4.0).unwrap();
            let spec = KernelSpec::new(KernelFamily::Gaussian, 1).unwrap();
            let p = SchemeParams { stabilize: false, ..Default::default() };
            let s = Solver::nonlocal(sample_kernel(&spec, 0.25, &g).unwrap(), p);
            let rho = Field::from_values(g, FieldRole::Density, vals);
            let m0 = rho.integral();
            let mut st = s.state_from_field(rho, false).unwrap();
            for _ in 0..20 {
                st = s.step(&st, 1.0).unwrap().0;
                prop_assert!(st.rho.min() >= -1e-12 * st.rho.max());
            }
            prop_assert!((st.rho.integral() - m0).abs() <= 1e-12 * m0.max(1e-300));
            let _ = stabilize;
        }
    }
}
