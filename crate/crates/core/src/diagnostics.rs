//! Structure monitors: mass, moments, energy, entropy and their balance laws.
//!
//! The discrete functionals are chosen so that the semi-discrete scheme
//! satisfies the balance laws exactly:
//!
//! ```text
//! dE/dt   = -lap_moll_sq - weighted_vel_sq
//! dPhi/dt = -fisher - lap_moll_sq                    (log-mean faces, rho > 0)
//! dM2/dt  = 2 d mass + moment_flux                   (mass away from the seam)
//! ```
//!
//! with `E = 1/2 sum |k|^2 |rho^ w^|^2 / L^d` and
//! `lap_moll_sq = sum |k|^2 lam_h |rho^ w^|^2 / L^d`. What remains in a
//! residual is the time discretization, which is first order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fd::{face_coordinate, face_gradient, FaceField};
use crate::grid::{norm, Grid};
use crate::solver::{mass_fraction_within, Observer, Solver, SolverState, StepInfo, SEAM_MASS_FRACTION};

/// Cells at or below `FLOOR_REL * max rho` are left out of log terms.
pub const FLOOR_REL: f64 = 1e-30;
/// Excluded mass above this is flagged.
pub const EXCLUDED_MASS_FLAG: f64 = 1e-8;
pub const DEFAULT_RESIDUAL_TOL: f64 = 1e-2;

#[derive(Debug, Error, PartialEq)]
pub enum DiagError {
    #[error("window [{t0}, {t1}] is not covered by records spanning [{first}, {last}]")]
    Window { t0: f64, t1: f64, first: f64, last: f64 },
    #[error("need at least two records, got {0}")]
    TooShort(usize),
}

/// One row of `diagnostics.csv`. The first eleven columns are the fixed schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub t: f64,
    pub mass: f64,
    pub moment2: f64,
    pub energy: f64,
    pub entropy: f64,
    pub fisher: f64,
    pub lap_moll_sq: f64,
    pub weighted_vel_sq: f64,
    pub grad_sqrt_sq: f64,
    pub grad_l1: f64,
    pub excluded_mass: f64,
    pub step: usize,
    /// Step that produced this record; zero for the initial one.
    pub dt: f64,
    /// `2 sum_f x_f F_f h^d`, the transport part of `dM2/dt`.
    pub moment_flux: f64,
    /// `sum rho |log rho| h^d`.
    pub entropy_abs: f64,
    /// `|rho * w|_{H^1}^2`.
    pub h1_moll_sq: f64,
    /// `|D^2 (rho * w)|_{L^2}^2`.
    pub h2_moll_sq: f64,
    pub min_rho: f64,
    pub max_rho: f64,
    pub seam_fraction: f64,
    pub limited_faces: usize,
}

/// Log-based terms with the vacuum convention `0 log 0 = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyTerms {
    pub entropy: f64,
    pub entropy_abs: f64,
    pub fisher: f64,
    pub grad_sqrt_sq: f64,
    pub excluded_mass: f64,
}

pub fn entropy_terms(grid: &Grid, rho: &[f64]) -> EntropyTerms {
    let hd = grid.cell_volume();
    let h = grid.h();
    let max = rho.iter().cloned().fold(0.0, f64::max);
    let floor = FLOOR_REL * max;
    let live = |v: f64| v > floor && v > 0.0;
    let logs: Vec<f64> = rho.iter().map(|&v| if live(v) { v.ln() } else { 0.0 }).collect();
    let (mut entropy, mut entropy_abs, mut excluded) = (0.0, 0.0, 0.0);
    for (&v, &l) in rho.iter().zip(&logs) {
        if live(v) {
            entropy += v * l;
            entropy_abs += (v * l).abs();
        } else {
            excluded += v.abs();
        }
    }
    let (mut fisher, mut gs) = (0.0, 0.0);
    for a in 0..grid.dim() {
        for i in 0..grid.size() {
            let j = grid.neighbor(i, a, true);
            if live(rho[i]) && live(rho[j]) {
                fisher += (rho[j] - rho[i]) * (logs[j] - logs[i]);
            }
            // sqrt is fine at vacuum; keeping these faces preserves Cauchy-Schwarz.
            let s = rho[j].max(0.0).sqrt() - rho[i].max(0.0).sqrt();
            gs += s * s;
        }
    }
    EntropyTerms {
        entropy: entropy * hd,
        entropy_abs: entropy_abs * hd,
        fisher: fisher * hd / (h * h),
        grad_sqrt_sq: gs * hd / (h * h),
        excluded_mass: excluded * hd,
    }
}

/// `sum_i |grad+ rho|_i h^d` with forward differences, the same stencil as
/// `grad_sqrt_sq`; in one dimension `grad_l1^2 <= 4 mass grad_sqrt_sq` holds exactly.
pub fn grad_l1(grid: &Grid, rho: &[f64]) -> f64 {
    let g = face_gradient(grid, rho);
    (0..grid.size())
        .map(|i| g.iter().map(|ga| ga[i] * ga[i]).sum::<f64>().sqrt())
        .sum::<f64>()
        * grid.cell_volume()
}

/// Minimal-image second moment about the domain centre.
pub fn second_moment(grid: &Grid, rho: &[f64]) -> f64 {
    let d = grid.dim();
    rho.iter()
        .enumerate()
        .map(|(i, v)| v * norm(&grid.displacement(i), d).powi(2))
        .sum::<f64>()
        * grid.cell_volume()
}

/// `2 sum_f x_f F_f h^d`.
pub fn moment_flux(grid: &Grid, flux: &FaceField) -> f64 {
    let mut s = 0.0;
    for (a, f) in flux.iter().enumerate() {
        for (i, fv) in f.iter().enumerate() {
            s += face_coordinate(grid, i, a) * fv;
        }
    }
    2.0 * s * grid.cell_volume()
}

/// Quadratic forms of `rho * w` read off the transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MollifiedNorms {
    pub energy: f64,
    pub lap_moll_sq: f64,
    pub h1_moll_sq: f64,
    pub h2_moll_sq: f64,
}

pub fn mollified_norms(solver: &Solver, rho: &[f64]) -> MollifiedNorms {
    let ops = solver.ops();
    let hat = ops.spectral().forward_values(rho);
    let w = solver.omega_hat();
    let inv_vol = 1.0 / ops.grid().volume();
    let mut out = MollifiedNorms {
        energy: 0.0,
        lap_moll_sq: 0.0,
        h1_moll_sq: 0.0,
        h2_moll_sq: 0.0,
    };
    for (m, c) in hat.iter().enumerate() {
        let wm = w.map_or(1.0, |w| w[m]);
        let p = c.norm_sqr() * wm * wm * inv_vol;
        let k2 = ops.k2()[m];
        out.energy += 0.5 * k2 * p;
        out.lap_moll_sq += k2 * ops.lam()[m] * p;
        out.h1_moll_sq += (1.0 + k2) * p;
        out.h2_moll_sq += k2 * k2 * p;
    }
    out
}

/// Evaluate every monitored quantity on `state`.
pub fn record(solver: &Solver, state: &SolverState, info: Option<&StepInfo>) -> DiagnosticsRecord {
    let g = solver.grid();
    let rho = state.rho.values();
    let hd = g.cell_volume();
    let psi = solver.potential(rho);
    let vel = solver.ops().face_velocity(&psi);
    let flux = solver.ops().flux(rho, &vel);
    let mut wv = 0.0;
    for (fa, va) in flux.iter().zip(&vel) {
        for (f, v) in fa.iter().zip(va) {
            wv += f * v;
        }
    }
    let et = entropy_terms(g, rho);
    let mn = mollified_norms(solver, rho);
    DiagnosticsRecord {
        t: state.t,
        mass: state.rho.integral(),
        moment2: second_moment(g, rho),
        energy: mn.energy,
        entropy: et.entropy,
        fisher: et.fisher,
        lap_moll_sq: mn.lap_moll_sq,
        weighted_vel_sq: wv * hd,
        grad_sqrt_sq: et.grad_sqrt_sq,
        grad_l1: grad_l1(g, rho),
        excluded_mass: et.excluded_mass,
        step: state.step,
        dt: info.map_or(0.0, |i| i.dt),
        moment_flux: moment_flux(g, &flux),
        entropy_abs: et.entropy_abs,
        h1_moll_sq: mn.h1_moll_sq,
        h2_moll_sq: mn.h2_moll_sq,
        min_rho: state.rho.min(),
        max_rho: state.rho.max(),
        seam_fraction: mass_fraction_within(&state.rho, g.len() / 4.0),
        limited_faces: info.map_or(0, |i| i.limited_faces),
    }
}

/// Observer collecting the initial record and one per `stride` steps
/// (every step when `stride <= 1`).
#[derive(Debug, Default, Clone)]
pub struct Recorder {
    pub records: Vec<DiagnosticsRecord>,
    pub stride: usize,
}

impl Recorder {
    pub fn every(stride: usize) -> Self {
        Self {
            records: Vec::new(),
            stride,
        }
    }
}

impl Observer for Recorder {
    fn observe(&mut self, solver: &Solver, state: &SolverState, info: Option<&StepInfo>) -> Result<(), String> {
        if info.is_none() || self.stride <= 1 || state.step.is_multiple_of(self.stride) {
            self.records.push(record(solver, state, info));
        }
        Ok(())
    }
}

pub fn write_csv<W: Write>(out: W, records: &[DiagnosticsRecord]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file(path: &Path, records: &[DiagnosticsRecord]) -> Result<(), csv::Error> {
    write_csv(std::fs::File::create(path)?, records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Balance {
    Energy,
    Entropy,
    Moment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub balance: Balance,
    pub t_start: f64,
    pub t_end: f64,
    /// Signed window residual divided by `scale`.
    pub residual: f64,
    /// Largest `|residual|` over sub-windows `[t_start, t_k]`.
    pub max_partial: f64,
    pub scale: f64,
    /// Largest increase between consecutive records, over `scale`; zero for the moment.
    pub max_increase: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub flags: Vec<String>,
}

/// Balance `F(t1) - F(t0) + int rate dt = 0` on sampled series, with the
/// integral by trapezoid. `scale` normalizes the residual.
pub fn balance_residual(
    balance: Balance,
    t: &[f64],
    functional: &[f64],
    rate: &[f64],
    scale: f64,
    tolerance: f64,
) -> ResidualReport {
    let mut integral = 0.0;
    let mut max_partial: f64 = 0.0;
    let mut max_increase: f64 = 0.0;
    for k in 1..t.len() {
        integral += 0.5 * (t[k] - t[k - 1]) * (rate[k] + rate[k - 1]);
        let r = functional[k] - functional[0] + integral;
        max_partial = max_partial.max(r.abs());
        max_increase = max_increase.max(functional[k] - functional[k - 1]);
    }
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let last = t.len() - 1;
    let residual = (functional[last] - functional[0] + integral) / scale;
    let max_increase = if balance == Balance::Moment { 0.0 } else { max_increase / scale };
    ResidualReport {
        balance,
        t_start: t[0],
        t_end: t[last],
        residual,
        max_partial: max_partial / scale,
        scale,
        max_increase,
        tolerance,
        pass: residual.abs() <= tolerance && max_increase <= 10.0 * tolerance,
        flags: Vec::new(),
    }
}

fn window(records: &[DiagnosticsRecord], win: Option<(f64, f64)>) -> Result<&[DiagnosticsRecord], DiagError> {
    if records.len() < 2 {
        return Err(DiagError::TooShort(records.len()));
    }
    let (first, last) = (records[0].t, records[records.len() - 1].t);
    let Some((t0, t1)) = win else {
        return Ok(records);
    };
    let slack = 1e-12 * last.abs().max(1.0);
    if t0 < first - slack || t1 > last + slack || t1 <= t0 {
        return Err(DiagError::Window { t0, t1, first, last });
    }
    let a = records.iter().position(|r| r.t >= t0 - slack).unwrap_or(0);
    let b = records.iter().rposition(|r| r.t <= t1 + slack).unwrap_or(records.len() - 1);
    if b <= a {
        return Err(DiagError::TooShort(b + 1 - a.min(b + 1)));
    }
    Ok(&records[a..=b])
}

fn trapezoid(t: &[f64], f: &[f64]) -> f64 {
    (1..t.len()).map(|k| 0.5 * (t[k] - t[k - 1]) * (f[k] + f[k - 1])).sum()
}

fn excluded_flag(rs: &[DiagnosticsRecord]) -> Option<String> {
    let worst = rs.iter().map(|r| r.excluded_mass).fold(0.0, f64::max);
    (worst > EXCLUDED_MASS_FLAG).then(|| format!("excluded mass {worst:e} near vacuum"))
}

/// Normalized by `E(t0)` plus the dissipated amount.
pub fn energy_dissipation_residual(
    records: &[DiagnosticsRecord],
    win: Option<(f64, f64)>,
    tolerance: f64,
) -> Result<ResidualReport, DiagError> {
    let rs = window(records, win)?;
    let t: Vec<f64> = rs.iter().map(|r| r.t).collect();
    let f: Vec<f64> = rs.iter().map(|r| r.energy).collect();
    let rate: Vec<f64> = rs.iter().map(|r| r.lap_moll_sq + r.weighted_vel_sq).collect();
    let scale = f[0] + trapezoid(&t, &rate);
    Ok(balance_residual(Balance::Energy, &t, &f, &rate, scale, tolerance))
}

/// Normalized by twice the dissipated amount; `Phi` itself carries an
/// arbitrary additive offset under rescaling and is not a usable scale.
pub fn entropy_dissipation_residual(
    records: &[DiagnosticsRecord],
    win: Option<(f64, f64)>,
    tolerance: f64,
) -> Result<ResidualReport, DiagError> {
    let rs = window(records, win)?;
    let t: Vec<f64> = rs.iter().map(|r| r.t).collect();
    let f: Vec<f64> = rs.iter().map(|r| r.entropy).collect();
    let rate: Vec<f64> = rs.iter().map(|r| r.fisher + r.lap_moll_sq).collect();
    let scale = (f[0] - f[f.len() - 1]).abs() + trapezoid(&t, &rate);
    let mut rep = balance_residual(Balance::Entropy, &t, &f, &rate, scale, tolerance);
    if let Some(flag) = excluded_flag(rs) {
        rep.flags.push(flag);
    }
    Ok(rep)
}

/// `dM2/dt = 2 d mass + moment_flux`, normalized by `M2(t0)` plus the
/// integrated magnitude of both right-hand terms. Fails if mass reaches the seam.
pub fn moment_identity_residual(
    records: &[DiagnosticsRecord],
    dim: usize,
    win: Option<(f64, f64)>,
    tolerance: f64,
) -> Result<ResidualReport, DiagError> {
    let rs = window(records, win)?;
    let t: Vec<f64> = rs.iter().map(|r| r.t).collect();
    let f: Vec<f64> = rs.iter().map(|r| r.moment2).collect();
    // Balance form: F(t1) - F(t0) + int rate = 0.
    let rate: Vec<f64> = rs.iter().map(|r| -(2.0 * dim as f64 * r.mass + r.moment_flux)).collect();
    let mag: Vec<f64> = rs.iter().map(|r| 2.0 * dim as f64 * r.mass.abs() + r.moment_flux.abs()).collect();
    let scale = f[0] + trapezoid(&t, &mag);
    let mut rep = balance_residual(Balance::Moment, &t, &f, &rate, scale, tolerance);
    let worst = rs.iter().map(|r| r.seam_fraction).fold(1.0, f64::min);
    if worst < SEAM_MASS_FRACTION {
        rep.flags.push(format!("seam guard: only {worst} of the mass within L/4"));
        rep.pass = false;
    }
    Ok(rep)
}

/// `|r(dt)| / |r(dt/2)|`; first order in time gives about 2.
pub fn refinement_ratio(coarse: &ResidualReport, fine: &ResidualReport) -> f64 {
    coarse.residual.abs() / fine.residual.abs()
}

/// Suprema and time integrals of the quantities bounded uniformly in `eps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dashboard {
    pub mass_sup: f64,
    pub entropy_abs_sup: f64,
    pub weighted_vel_int: f64,
    pub h1_moll_sup: f64,
    pub h2_moll_int: f64,
    pub moment2_sup: f64,
    pub grad_sqrt_int: f64,
    pub grad_l1_sq_int: f64,
    /// Largest `grad_l1^2 / (4 mass grad_sqrt_sq)` over the records.
    pub cauchy_schwarz_ratio: f64,
}

impl Dashboard {
    pub fn entries(&self) -> [(&'static str, f64); 8] {
        [
            ("mass_sup", self.mass_sup),
            ("entropy_abs_sup", self.entropy_abs_sup),
            ("weighted_vel_int", self.weighted_vel_int),
            ("h1_moll_sup", self.h1_moll_sup),
            ("h2_moll_int", self.h2_moll_int),
            ("moment2_sup", self.moment2_sup),
            ("grad_sqrt_int", self.grad_sqrt_int),
            ("grad_l1_sq_int", self.grad_l1_sq_int),
        ]
    }
}

pub fn estimate_dashboard(records: &[DiagnosticsRecord]) -> Dashboard {
    let t: Vec<f64> = records.iter().map(|r| r.t).collect();
    let sup = |f: fn(&DiagnosticsRecord) -> f64| records.iter().map(f).fold(0.0, f64::max);
    let int = |f: fn(&DiagnosticsRecord) -> f64| {
        let v: Vec<f64> = records.iter().map(f).collect();
        trapezoid(&t, &v)
    };
    let cs = records
        .iter()
        .map(|r| {
            let bound = 4.0 * r.mass * r.grad_sqrt_sq;
            if bound > 0.0 {
                r.grad_l1 * r.grad_l1 / bound
            } else if r.grad_l1 > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max);
    Dashboard {
        mass_sup: sup(|r| r.mass),
        entropy_abs_sup: sup(|r| r.entropy_abs),
        weighted_vel_int: int(|r| r.weighted_vel_sq),
        h1_moll_sup: sup(|r| r.h1_moll_sq.sqrt()),
        h2_moll_int: int(|r| r.h2_moll_sq),
        moment2_sup: sup(|r| r.moment2),
        grad_sqrt_int: int(|r| r.grad_sqrt_sq),
        grad_l1_sq_int: int(|r| r.grad_l1 * r.grad_l1),
        cauchy_schwarz_ratio: cs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Field, FieldRole};
    use crate::kernels::{sample_kernel, KernelFamily, KernelSpec};
    use crate::solver::{DtMode, InitialDataSpec, SchemeParams};
    use proptest::prelude::*;

    fn solver(d: usize, n: usize, l: f64, eps: f64, params: SchemeParams) -> Solver {
        let g = Grid::new(d, n, l).unwrap();
        let spec = KernelSpec::new(KernelFamily::Gaussian, d).unwrap();
        Solver::nonlocal(sample_kernel(&spec, eps, &g).unwrap(), params)
    }

    #[test]
    fn constant_state() {
        let s = solver(2, 32, 4.0, 0.5, SchemeParams::default());
        let c = 0.7;
        let st = s.state_from_field(Field::constant(*s.grid(), FieldRole::Density, c), false).unwrap();
        let r = record(&s, &st, None);
        let v = 16.0;
        assert!((r.mass - c * v).abs() < 1e-12);
        assert_eq!(r.energy, 0.0);
        assert!((r.entropy - c * v * c.ln()).abs() < 1e-12);
        assert_eq!(r.fisher, 0.0);
        assert_eq!(r.lap_moll_sq, 0.0);
        assert_eq!(r.weighted_vel_sq, 0.0);
        assert_eq!(r.grad_l1, 0.0);
        let traj = s.run(st, 0.01, None, &mut []).unwrap();
        let recs: Vec<_> = traj.snapshots.iter().map(|x| record(&s, x, None)).collect();
        let e = energy_dissipation_residual(&recs, None, 1e-2).unwrap();
        assert_eq!(e.residual, 0.0);
        let p = entropy_dissipation_residual(&recs, None, 1e-2).unwrap();
        assert_eq!(p.residual, 0.0);
    }

    #[test]
    fn blob_second_moment_matches_gaussian_moment() {
        for d in 1..=3 {
            let n = if d == 3 { 64 } else { 128 };
            let g = Grid::new(d, n, 8.0).unwrap();
            let sigma = 0.5;
            let rho = InitialDataSpec::GaussianBlob {
                sigma,
                mass: 2.0,
                center: vec![],
            }
            .generate(&g)
            .unwrap();
            let m2 = second_moment(&g, rho.values());
            let want = d as f64 * sigma * sigma * 2.0;
            assert!((m2 / want - 1.0).abs() < 0.01, "d={d}: {m2} vs {want}");
        }
    }

    #[test]
    fn impulse_moment_is_within_one_cell() {
        let g = Grid::new(2, 16, 2.0).unwrap();
        let mut rho = vec![0.0; g.size()];
        rho[g.linear_index(&[8, 8])] = 1.0 / g.cell_volume();
        assert!(second_moment(&g, &rho) <= g.h() * g.h());
        let et = entropy_terms(&g, &rho);
        assert_eq!(et.fisher, 0.0);
        assert!(et.excluded_mass == 0.0);
    }

    #[test]
    fn vacuum_convention() {
        let g = Grid::new(1, 8, 1.0).unwrap();
        let rho = [0.0, 0.0, 1.0, 2.0, 1.0, 0.0, 0.0, -1e-20];
        let et = entropy_terms(&g, &rho);
        let h = g.h();
        let want = h * 2.0 * 2.0f64.ln();
        assert!((et.entropy - want).abs() < 1e-15);
        // Only the two interior faces count.
        let f = 2.0 * (1.0 * 2.0f64.ln()) * h / (h * h);
        assert!((et.fisher - f).abs() < 1e-12);
        assert!((et.excluded_mass - 1e-20 * h).abs() < 1e-30);
    }

    fn blob_records(dt: f64) -> Vec<DiagnosticsRecord> {
        let params = SchemeParams {
            dt: DtMode::Fixed(dt),
            ..SchemeParams::default()
        };
        let s = solver(1, 128, 8.0, 0.3, params);
        let st = s
            .initial_state(&InitialDataSpec::GaussianBlob {
                sigma: 0.4,
                mass: 1.0,
                center: vec![],
            })
            .unwrap();
        let mut rec = Recorder::default();
        s.run(st, 0.02, None, &mut [&mut rec]).unwrap();
        rec.records
    }

    #[test]
    fn balances_are_first_order_in_dt() {
        let coarse = blob_records(4e-4);
        let fine = blob_records(2e-4);
        let checks = [
            (
                energy_dissipation_residual(&coarse, None, 1e-2).unwrap(),
                energy_dissipation_residual(&fine, None, 1e-2).unwrap(),
            ),
            (
                entropy_dissipation_residual(&coarse, None, 1e-2).unwrap(),
                entropy_dissipation_residual(&fine, None, 1e-2).unwrap(),
            ),
            (
                moment_identity_residual(&coarse, 1, None, 1e-2).unwrap(),
                moment_identity_residual(&fine, 1, None, 1e-2).unwrap(),
            ),
        ];
        for (c, f) in checks {
            assert!(c.pass && f.pass, "{c:?} {f:?}");
            let ratio = refinement_ratio(&c, &f);
            assert!((1.5..=3.0).contains(&ratio), "{:?}: ratio {ratio}", c.balance);
        }
    }

    #[test]
    fn energy_and_entropy_decrease() {
        let recs = blob_records(2e-4);
        for w in recs.windows(2) {
            assert!(w[1].energy <= w[0].energy);
            assert!(w[1].entropy <= w[0].entropy);
            assert!((w[1].mass - recs[0].mass).abs() <= 1e-12 * recs[0].mass);
        }
        let dash = estimate_dashboard(&recs);
        assert!(dash.cauchy_schwarz_ratio <= 1.0);
        assert!(dash.entries().iter().all(|(_, v)| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn window_errors() {
        let recs = blob_records(4e-4);
        assert!(matches!(
            energy_dissipation_residual(&recs, Some((0.0, 1.0)), 1e-2),
            Err(DiagError::Window { .. })
        ));
        assert_eq!(energy_dissipation_residual(&recs[..1], None, 1e-2), Err(DiagError::TooShort(1)));
        let part = energy_dissipation_residual(&recs, Some((0.004, 0.012)), 1e-2).unwrap();
        assert!((part.t_start - 0.004).abs() < 1e-12 && (part.t_end - 0.012).abs() < 1e-12);
    }

    #[test]
    fn csv_header_starts_with_schema() {
        let recs = blob_records(4e-3);
        let mut buf = Vec::new();
        write_csv(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let header = text.lines().next().unwrap();
        assert!(header.starts_with(
            "t,mass,moment2,energy,entropy,fisher,lap_moll_sq,weighted_vel_sq,grad_sqrt_sq,grad_l1,excluded_mass,"
        ));
        assert_eq!(text.lines().count(), recs.len() + 1);
    }

    proptest! {
        #[test]
        fn quadratic_terms_are_nonnegative(vals in prop::collection::vec(0.0f64..5.0, 64)) {
            let s = solver(2, 8, 4.0, 2.0, SchemeParams::default());
            let st = s.state_from_field(Field::from_values(*s.grid(), FieldRole::Density, vals), false).unwrap();
            let r = record(&s, &st, None);
            for v in [r.energy, r.fisher, r.lap_moll_sq, r.weighted_vel_sq, r.grad_sqrt_sq, r.grad_l1, r.h1_moll_sq, r.h2_moll_sq] {
                prop_assert!(v >= 0.0);
            }
        }

        #[test]
        fn cauchy_schwarz_in_one_dimension(vals in prop::collection::vec(0.0f64..5.0, 32)) {
            let g = Grid::new(1, 32, 3.0).unwrap();
            let mass: f64 = vals.iter().sum::<f64>() * g.h();
            let gs = entropy_terms(&g, &vals).grad_sqrt_sq;
            let l1 = grad_l1(&g, &vals);
            prop_assert!(l1 * l1 <= 4.0 * mass * gs * (1.0 + 1e-12) + 1e-300);
        }
    }
}
