//! N-species system with Gram couplings `K^{ij} = (A A^T)_{ij} w^i_eps * w^j_eps`:
//!
//! ```text
//! d_t rho^i = lap rho^i - s div(rho^i grad lap sum_j K^{ij} * rho^j)
//! ```
//!
//! `s = +1` is the dissipative sign used by the single equation. Each species
//! goes through the same transport and diffusion stages as [`Solver`], with the
//! potential assembled per wavenumber from all species. For `N = 1, A = [1]` the
//! arithmetic is operation-for-operation that of [`Solver`].
//!
//! [`Solver`]: crate::solver::Solver

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::{balance_residual, entropy_terms, Balance, ResidualReport};
use crate::fd::{max_abs_face, Reconstruction};
use crate::grid::{Field, FieldRole, Grid, GridError};
use crate::kernels::KernelSamples;
use crate::solver::{
    check_initial_density, choose_dt, run_loop, DtBounds, HasDt, InitError, InitialDataSpec, Operators, RunError,
    SchemeParams, StepError, TimeState, TrajectoryOf,
};

/// Smallest admissible `sigma_min / sigma_max` of `A`.
pub const MIN_CONDITION: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum CouplingError {
    #[error("coupling matrix must be square and non-empty, got {rows}x{cols}")]
    Shape { rows: usize, cols: usize },
    #[error("coupling matrix is singular: sigma_min {sigma_min} < {MIN_CONDITION} * sigma_max {sigma_max}")]
    Singular { sigma_min: f64, sigma_max: f64 },
    #[error("non-finite coupling entry")]
    NonFinite,
    #[error("{species} species but {kernels} kernels")]
    KernelCount { species: usize, kernels: usize },
    #[error("species kernels disagree on eps: {0} vs {1}")]
    MixedEps(f64, f64),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Sign in front of the divergence term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DivergenceSign {
    /// `+div`, the gradient-flow sign.
    #[default]
    Dissipative,
    /// `-div`, as the multi-species equation is sometimes printed.
    Reversed,
}

impl DivergenceSign {
    fn factor(self) -> f64 {
        match self {
            Self::Dissipative => 1.0,
            Self::Reversed => -1.0,
        }
    }
}

/// Invertible `A`, with `K = A A^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingMatrix {
    a: DMatrix<f64>,
    k: DMatrix<f64>,
}

impl CouplingMatrix {
    pub fn new(a: DMatrix<f64>) -> Result<Self, CouplingError> {
        if a.nrows() != a.ncols() || a.nrows() == 0 {
            return Err(CouplingError::Shape {
                rows: a.nrows(),
                cols: a.ncols(),
            });
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(CouplingError::NonFinite);
        }
        let sv = a.clone().svd(false, false).singular_values;
        let sigma_max = sv.max();
        let sigma_min = sv.min();
        if !(sigma_min >= MIN_CONDITION * sigma_max) || sigma_max == 0.0 {
            return Err(CouplingError::Singular { sigma_min, sigma_max });
        }
        let k = &a * a.transpose();
        Ok(Self { a, k })
    }

    pub fn from_row_major(n: usize, entries: &[f64]) -> Result<Self, CouplingError> {
        if entries.len() != n * n {
            return Err(CouplingError::Shape {
                rows: n,
                cols: if n == 0 { 0 } else { entries.len() / n },
            });
        }
        Self::new(DMatrix::from_row_slice(n, n, entries))
    }

    pub fn species(&self) -> usize {
        self.a.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    /// `K = A A^T`, the local-limit coupling.
    pub fn k(&self) -> &DMatrix<f64> {
        &self.k
    }

    /// Extreme eigenvalues of `A A^T`; the smaller one is `1 / |A^{-1}|^2`.
    pub fn gram_eigen_range(&self) -> (f64, f64) {
        let e = SymmetricEigen::new(self.k.clone()).eigenvalues;
        (e.min(), e.max())
    }
}

/// Per-pair potential multipliers `-s |k|^2 K_ij w^i w^j`.
#[derive(Debug, Clone)]
pub struct Coupling {
    matrix: CouplingMatrix,
    ops: Operators,
    kernels: Vec<KernelSamples>,
    omega_hat: Vec<Vec<f64>>,
    /// `symbols[i][j]`.
    symbols: Vec<Vec<Vec<f64>>>,
    sign: DivergenceSign,
}

impl Coupling {
    pub fn new(
        matrix: CouplingMatrix,
        kernels: Vec<KernelSamples>,
        sign: DivergenceSign,
        recon: Reconstruction,
    ) -> Result<Self, CouplingError> {
        let n = matrix.species();
        if kernels.len() != n {
            return Err(CouplingError::KernelCount {
                species: n,
                kernels: kernels.len(),
            });
        }
        let grid = *kernels[0].grid();
        for k in &kernels[1..] {
            grid.check_same(k.grid())?;
            if k.eps != kernels[0].eps {
                return Err(CouplingError::MixedEps(kernels[0].eps, k.eps));
            }
        }
        let ops = Operators::new(grid, recon);
        let omega_hat: Vec<Vec<f64>> = kernels.iter().map(|k| ops.kernel_hat(&k.omega)).collect();
        let s = sign.factor();
        let symbols = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| ops.pair_symbol(Some(&omega_hat[i]), Some(&omega_hat[j]), s * matrix.k[(i, j)]))
                    .collect()
            })
            .collect();
        Ok(Self {
            matrix,
            ops,
            kernels,
            omega_hat,
            symbols,
            sign,
        })
    }

    pub fn matrix(&self) -> &CouplingMatrix {
        &self.matrix
    }

    pub fn ops(&self) -> &Operators {
        &self.ops
    }

    pub fn grid(&self) -> &Grid {
        self.ops.grid()
    }

    pub fn species(&self) -> usize {
        self.matrix.species()
    }

    pub fn eps(&self) -> f64 {
        self.kernels[0].eps
    }

    pub fn kernels(&self) -> &[KernelSamples] {
        &self.kernels
    }

    pub fn sign(&self) -> DivergenceSign {
        self.sign
    }

    /// Multiplier of `K^{ij}` itself (no Laplacian, no sign).
    pub fn kernel_symbol(&self, i: usize, j: usize) -> Vec<f64> {
        let kij = self.matrix.k[(i, j)];
        self.omega_hat[i]
            .iter()
            .zip(&self.omega_hat[j])
            .map(|(a, b)| kij * a * b)
            .collect()
    }

    pub fn symbol(&self, i: usize, j: usize) -> &[f64] {
        &self.symbols[i][j]
    }

    /// `psi^i` for every species.
    pub fn potentials(&self, rho: &[Field]) -> Vec<Vec<f64>> {
        let hats: Vec<Vec<Complex64>> = rho.iter().map(|r| self.ops.hat(r.values())).collect();
        let hat_refs: Vec<&[Complex64]> = hats.iter().map(|h| h.as_slice()).collect();
        (0..self.species())
            .map(|i| {
                let sym: Vec<&[f64]> = self.symbols[i].iter().map(|s| s.as_slice()).collect();
                self.ops.combine(&hat_refs, &sym)
            })
            .collect()
    }

    /// `sum_ij int eta^i K^{ij} * eta^j` by pairwise convolutions, and
    /// `int sum_k (sum_i a_ik eta^i * w^i)^2` from the mollified fields.
    pub fn sandwich_identity(&self, eta: &[Field]) -> Result<SandwichSides, GridError> {
        self.check_fields(eta)?;
        let sp = self.ops.spectral();
        let n = self.species();
        let moll: Vec<Field> = eta
            .iter()
            .zip(&self.kernels)
            .map(|(e, k)| sp.convolve(e, &k.omega))
            .collect::<Result<_, _>>()?;
        let mut lhs = 0.0;
        for i in 0..n {
            for j in 0..n {
                let kij = self.matrix.k[(i, j)];
                if kij == 0.0 {
                    continue;
                }
                let kj = sp.convolve(&moll[j], &self.kernels[i].omega)?;
                lhs += kij * eta[i].dot(&kj)?;
            }
        }
        let g = self.grid();
        let mut rhs = 0.0;
        for c in 0..n {
            for x in 0..g.size() {
                let v: f64 = (0..n).map(|i| self.matrix.a[(i, c)] * moll[i].values()[x]).sum();
                rhs += v * v;
            }
        }
        rhs *= g.cell_volume();
        let quad = moll.iter().map(|m| m.dot(m)).sum::<Result<f64, _>>()?;
        Ok(SandwichSides { lhs, rhs, quad })
    }

    /// Two-sided bound `l_min Q <= middle <= l_max Q` with `Q = sum_i int (eta^i * w^i)^2`.
    pub fn sandwich_bounds_check(&self, eta: &[Field]) -> Result<SandwichReport, GridError> {
        let sides = self.sandwich_identity(eta)?;
        let (lambda_min, lambda_max) = self.matrix.gram_eigen_range();
        let slack = 1e-12 * sides.quad.abs().max(sides.lhs.abs());
        Ok(SandwichReport {
            lambda_min,
            lambda_max,
            quad: sides.quad,
            middle: sides.lhs,
            lower_ok: lambda_min * sides.quad <= sides.lhs + slack,
            upper_ok: sides.lhs <= lambda_max * sides.quad + slack,
        })
    }

    fn check_fields(&self, eta: &[Field]) -> Result<(), GridError> {
        if eta.len() != self.species() {
            return Err(GridError::Mismatch);
        }
        for e in eta {
            self.grid().check_same(e.grid())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SandwichSides {
    pub lhs: f64,
    pub rhs: f64,
    pub quad: f64,
}

impl SandwichSides {
    pub fn relative_gap(&self) -> f64 {
        let s = self.lhs.abs().max(self.rhs.abs());
        if s == 0.0 {
            0.0
        } else {
            (self.lhs - self.rhs).abs() / s
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SandwichReport {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub quad: f64,
    pub middle: f64,
    pub lower_ok: bool,
    pub upper_ok: bool,
}

/// Report for a candidate matrix that may be singular.
pub fn sandwich_bounds_for(
    a: DMatrix<f64>,
    kernels: Vec<KernelSamples>,
    eta: &[Field],
) -> Result<SandwichReport, CouplingError> {
    let m = CouplingMatrix::new(a)?;
    let c = Coupling::new(m, kernels, DivergenceSign::Dissipative, Reconstruction::default())?;
    Ok(c.sandwich_bounds_check(eta)?)
}

/// `n` fields with entries uniform in `[-1, 1]`.
pub fn random_fields(grid: &Grid, n: usize, seed: u64) -> Vec<Field> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let v = (0..grid.size()).map(|_| rng.random_range(-1.0..=1.0)).collect();
            Field::from_values(*grid, FieldRole::Component, v)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub rho: Vec<Field>,
    pub t: f64,
    pub step: usize,
    pub eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemStepInfo {
    pub dt: f64,
    pub vmax: f64,
    pub bounds: DtBounds,
    pub limited_faces: usize,
}

impl HasDt for SystemStepInfo {
    fn dt(&self) -> f64 {
        self.dt
    }
}

impl TimeState for SystemState {
    fn time(&self) -> f64 {
        self.t
    }

    fn set_time(&mut self, t: f64) {
        self.t = t;
    }

    fn step_error(&self, source: StepError) -> RunError {
        RunError::SystemStep {
            step: self.step + 1,
            t: self.t,
            source,
        }
    }
}

pub type SystemTrajectory = TrajectoryOf<SystemState>;

#[derive(Debug, Clone)]
pub struct SystemSolver {
    coupling: Coupling,
    params: SchemeParams,
    /// Diagonal stiffness, handled implicitly when stabilized.
    stiff_diag: Vec<Vec<f64>>,
    /// Per-species bound on the explicit part of the linearized rate.
    stiff_max: Vec<f64>,
}

impl SystemSolver {
    pub fn new(coupling: Coupling, params: SchemeParams) -> Self {
        let n = coupling.species();
        let ops = coupling.ops();
        let stiff_diag: Vec<Vec<f64>> = (0..n).map(|i| ops.stiffness_symbol(coupling.symbol(i, i))).collect();
        let stiff_max = (0..n)
            .map(|i| {
                let explicit: Vec<f64> = if params.stabilize {
                    // Only the off-diagonal coupling stays explicit.
                    (0..coupling.grid().size())
                        .map(|m| {
                            (0..n)
                                .filter(|&j| j != i)
                                .map(|j| ops.lam()[m] * coupling.symbol(i, j)[m].abs())
                                .sum()
                        })
                        .collect()
                } else if n == 1 {
                    stiff_diag[0].clone()
                } else {
                    (0..coupling.grid().size())
                        .map(|m| (0..n).map(|j| ops.lam()[m] * coupling.symbol(i, j)[m].abs()).sum())
                        .collect()
                };
                explicit.into_iter().fold(0.0, f64::max)
            })
            .collect();
        Self {
            coupling,
            params,
            stiff_diag,
            stiff_max,
        }
    }

    pub fn coupling(&self) -> &Coupling {
        &self.coupling
    }

    pub fn params(&self) -> &SchemeParams {
        &self.params
    }

    pub fn grid(&self) -> &Grid {
        self.coupling.grid()
    }

    pub fn initial_state(&self, specs: &[InitialDataSpec]) -> Result<SystemState, InitError> {
        if specs.len() != self.coupling.species() {
            return Err(InitError::Param(format!(
                "{} initial data entries for {} species",
                specs.len(),
                self.coupling.species()
            )));
        }
        let fields = specs
            .iter()
            .map(|s| Ok((s.generate(self.grid())?, s.is_localized())))
            .collect::<Result<Vec<_>, InitError>>()?;
        self.state_from_fields(fields)
    }

    pub fn state_from_fields(&self, fields: Vec<(Field, bool)>) -> Result<SystemState, InitError> {
        let eps = self.coupling.eps();
        let rho = fields
            .into_iter()
            .map(|(f, loc)| check_initial_density(self.grid(), eps, f, loc))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SystemState {
            rho,
            t: 0.0,
            step: 0,
            eps,
        })
    }

    fn bounds(&self, rho: &[Field], vmax: f64) -> DtBounds {
        let mut stiffness = f64::INFINITY;
        for (r, &smax) in rho.iter().zip(&self.stiff_max) {
            if smax == 0.0 {
                continue;
            }
            let rmax = r.values().iter().cloned().fold(0.0, f64::max);
            if rmax > 0.0 {
                stiffness = stiffness.min(1.0 / (rmax * smax));
            }
        }
        DtBounds {
            cfl: self.coupling.ops().cfl_bound(vmax),
            stiffness,
        }
    }

    pub fn step(&self, state: &SystemState, max_dt: f64) -> Result<(SystemState, SystemStepInfo), StepError> {
        let ops = self.coupling.ops();
        let psi = self.coupling.potentials(&state.rho);
        let vmax = psi
            .iter()
            .map(|p| max_abs_face(&ops.face_velocity(p)))
            .fold(0.0, f64::max);
        let bounds = self.bounds(&state.rho, vmax);
        let dt = choose_dt(&self.params, bounds, max_dt)?;
        let mut limited_faces = 0;
        let mut next = Vec::with_capacity(state.rho.len());
        for (i, (r, p)) in state.rho.iter().zip(&psi).enumerate() {
            let rho = r.values();
            let tr = ops.transport(rho, p, dt, self.params.positivity_limiter);
            limited_faces += tr.limited_faces;
            let stab = self.params.stabilize.then(|| {
                let kappa = rho.iter().cloned().fold(0.0, f64::max);
                (kappa, self.stiff_diag[i].as_slice())
            });
            let v = ops.diffuse(&tr.rho_star, rho, dt, stab);
            if let Some(index) = v.iter().position(|x| !x.is_finite()) {
                return Err(StepError::NonFinite { index });
            }
            next.push(Field::from_values(*self.grid(), FieldRole::Density, v));
        }
        Ok((
            SystemState {
                rho: next,
                t: state.t + dt,
                step: state.step + 1,
                eps: state.eps,
            },
            SystemStepInfo {
                dt,
                vmax,
                bounds,
                limited_faces,
            },
        ))
    }

    pub fn run(
        &self,
        state: SystemState,
        t_end: f64,
        cadence: Option<f64>,
        mut observe: impl FnMut(&SystemSolver, &SystemState, Option<&SystemStepInfo>) -> Result<(), String>,
    ) -> Result<SystemTrajectory, RunError> {
        run_loop(
            state,
            t_end,
            cadence,
            self.params.dt,
            |s, max_dt| self.step(s, max_dt),
            |s, info| observe(self, s, info).map_err(|msg| RunError::Observer { step: s.step, msg }),
        )
    }

    /// Lyapunov functionals and their dissipation rates.
    pub fn record(&self, state: &SystemState, info: Option<&SystemStepInfo>) -> SystemRecord {
        let c = &self.coupling;
        let ops = c.ops();
        let g = self.grid();
        let n = c.species();
        let hats: Vec<Vec<Complex64>> = state.rho.iter().map(|r| ops.spectral().forward_values(r.values())).collect();
        let inv_vol = 1.0 / g.volume();
        let (mut energy, mut lap) = (0.0, 0.0);
        let mut diag_energy = 0.0;
        for i in 0..n {
            for j in 0..n {
                let ks = c.kernel_symbol(i, j);
                for m in 0..g.size() {
                    let cross = (hats[i][m].conj() * hats[j][m]).re * ks[m] * inv_vol;
                    energy += 0.5 * ops.k2()[m] * cross;
                    lap += ops.k2()[m] * ops.lam()[m] * cross;
                }
            }
            let w = &c.omega_hat[i];
            for m in 0..g.size() {
                diag_energy += 0.5 * ops.k2()[m] * hats[i][m].norm_sqr() * w[m] * w[m] * inv_vol;
            }
        }
        let psi = c.potentials(&state.rho);
        let (mut entropy, mut fisher, mut wv) = (0.0, 0.0, 0.0);
        let mut masses = Vec::with_capacity(n);
        for (r, p) in state.rho.iter().zip(&psi) {
            let et = entropy_terms(g, r.values());
            entropy += et.entropy;
            fisher += et.fisher;
            let vel = ops.face_velocity(p);
            let flux = ops.flux(r.values(), &vel);
            for (fa, va) in flux.iter().zip(&vel) {
                for (f, v) in fa.iter().zip(va) {
                    wv += f * v;
                }
            }
            masses.push(r.integral());
        }
        let s = c.sign.factor();
        SystemRecord {
            t: state.t,
            step: state.step,
            dt: info.map_or(0.0, |i| i.dt),
            masses,
            energy,
            diag_energy,
            entropy,
            fisher,
            lap_coupled: lap,
            // psi carries the sign; undo it so the rate is the dissipation.
            weighted_vel_sq: s * wv * g.cell_volume(),
            min_rho: state.rho.iter().map(|r| r.min()).fold(f64::INFINITY, f64::min),
        }
    }
}

/// `energy = 1/2 sum_ij int grad rho^i . grad K^{ij} * rho^j`; `diag_energy`
/// keeps only the species' own mollified gradients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SystemRecord {
    pub t: f64,
    pub step: usize,
    pub dt: f64,
    pub masses: Vec<f64>,
    pub energy: f64,
    pub diag_energy: f64,
    pub entropy: f64,
    pub fisher: f64,
    /// `sum_ij int lap_h rho^i lap K^{ij} * rho^j`.
    pub lap_coupled: f64,
    pub weighted_vel_sq: f64,
    pub min_rho: f64,
}

/// `dE/dt = -lap_coupled - weighted_vel_sq` under the dissipative sign.
pub fn system_energy_residual(records: &[SystemRecord], tolerance: f64) -> ResidualReport {
    let t: Vec<f64> = records.iter().map(|r| r.t).collect();
    let f: Vec<f64> = records.iter().map(|r| r.energy).collect();
    let rate: Vec<f64> = records.iter().map(|r| r.lap_coupled + r.weighted_vel_sq).collect();
    let total: f64 = (1..t.len()).map(|k| 0.5 * (t[k] - t[k - 1]) * (rate[k] + rate[k - 1])).sum();
    balance_residual(Balance::Energy, &t, &f, &rate, f[0] + total.abs(), tolerance)
}

/// `dPhi/dt = -fisher - lap_coupled`.
pub fn system_entropy_residual(records: &[SystemRecord], tolerance: f64) -> ResidualReport {
    let t: Vec<f64> = records.iter().map(|r| r.t).collect();
    let f: Vec<f64> = records.iter().map(|r| r.entropy).collect();
    let rate: Vec<f64> = records.iter().map(|r| r.fisher + r.lap_coupled).collect();
    let total: f64 = (1..t.len()).map(|k| 0.5 * (t[k] - t[k - 1]) * (rate[k] + rate[k - 1])).sum();
    let scale = (f[0] - f[f.len() - 1]).abs() + total.abs();
    balance_residual(Balance::Entropy, &t, &f, &rate, scale, tolerance)
}
