//! Interacting particles `X_i' = -(1/N) sum_{j != i} grad W(X_i - X_j)` in free
//! space, and their comparison with `d_t mu - div(mu grad(mu * W)) = 0`.
//!
//! `W` is a radial kernel family at scale `delta`, `W(x) = delta^{-d} w(|x|/delta)`,
//! so the same object is evaluated exactly for particles and sampled for the PDE.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fd::max_abs_face;
use crate::grid::{Field, FieldRole, Grid, GridError, MAX_DIM};
use crate::kernels::{sample_kernel_with_guard, KernelError, KernelSamples, KernelSpec};
use crate::solver::{snapshot_targets, Operators, SchemeParams};

/// Particles farther than this from the origin count as blown up.
pub const BLOW_UP_RADIUS: f64 = 1e6;
/// Heuristic stability limit `dt Lip(grad W)`.
pub const MAX_DT_LIP: f64 = 0.1;
/// Bumps are truncated at this many bandwidths; the guard keeps them off the seam.
pub const BUMP_CUTOFF: f64 = 6.0;

#[derive(Debug, Error)]
pub enum ParticleError {
    #[error("need at least one particle")]
    Empty,
    #[error("particle {index} has a non-finite coordinate")]
    NonFinite { index: usize },
    #[error("particle {index} left the ball of radius {BLOW_UP_RADIUS} at t = {t}")]
    BlowUp { index: usize, t: f64 },
    #[error("dt = {dt} gives dt Lip(grad W) = {product:.3} > {MAX_DT_LIP}")]
    StepTooLarge { dt: f64, product: f64 },
    #[error("particle {index} at |x|_inf = {reach} is outside the guarded region |x|_inf <= {guard}")]
    OutsideGuard { index: usize, reach: f64, guard: f64 },
    #[error("interaction kernel mismatch: {0}")]
    KernelMismatch(String),
    #[error("bad parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// `W(x) = delta^{-d} w(|x| / delta)` with `w` the normalized family profile.
#[derive(Debug, Clone)]
pub struct Interaction {
    spec: KernelSpec,
    delta: f64,
}

impl Interaction {
    pub fn new(spec: KernelSpec, delta: f64) -> Result<Self, ParticleError> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(ParticleError::Parameter(format!("interaction scale must be positive, got {delta}")));
        }
        Ok(Self { spec, delta })
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    pub fn value(&self, x: &[f64; MAX_DIM]) -> f64 {
        let d = self.dim();
        let r = crate::grid::norm(x, d) / self.delta;
        self.delta.powi(-(d as i32)) * self.spec.omega_radial(r)
    }

    /// Odd in `x` bit for bit, so pair forces cancel exactly.
    pub fn grad(&self, x: &[f64; MAX_DIM]) -> [f64; MAX_DIM] {
        let d = self.dim();
        let r = crate::grid::norm(x, d);
        let mut g = [0.0; MAX_DIM];
        if r > 0.0 {
            let p = self.delta.powi(-(d as i32) - 1) * self.spec.omega_radial_deriv(r / self.delta) / r;
            for a in 0..d {
                g[a] = p * x[a];
            }
        }
        g
    }

    /// Estimate of `sup |D^2 W|` from the radial eigenvalues `p''` and `p'/r`.
    pub fn lipschitz_grad(&self) -> f64 {
        let d = self.dim();
        let reach = self.spec.support().unwrap_or(12.0);
        let n = 4000;
        let eta = 1e-5;
        let mut m = 0.0f64;
        for k in 1..n {
            let r = reach * k as f64 / n as f64;
            let p1 = self.spec.omega_radial_deriv(r);
            let p2 = (self.spec.omega_radial_deriv(r + eta) - self.spec.omega_radial_deriv((r - eta).max(0.0)))
                / (r + eta - (r - eta).max(0.0));
            m = m.max(p2.abs()).max((p1 / r).abs());
        }
        m * self.delta.powi(-(d as i32) - 2)
    }

    /// Same family, scale and dimension as the sampled kernel.
    pub fn check_samples(&self, samples: &KernelSamples) -> Result<(), ParticleError> {
        if samples.grid().dim() != self.dim() {
            return Err(ParticleError::KernelMismatch(format!(
                "grid has d = {}, interaction has d = {}",
                samples.grid().dim(),
                self.dim()
            )));
        }
        if (samples.eps - self.delta).abs() > 1e-14 * self.delta {
            return Err(ParticleError::KernelMismatch(format!(
                "sampled scale {} differs from interaction scale {}",
                samples.eps, self.delta
            )));
        }
        let g = samples.grid();
        let worst = (0..g.size())
            .map(|i| {
                let w = self.value(&g.origin_offset(i)) * samples.renormalization;
                (w - samples.omega.values()[i]).abs()
            })
            .fold(0.0, f64::max);
        if worst > 1e-12 * samples.omega.max_abs() {
            return Err(ParticleError::KernelMismatch(format!(
                "sampled profile differs from the interaction by {worst:e}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleState {
    pub dim: usize,
    pub positions: Vec<[f64; MAX_DIM]>,
    pub t: f64,
}

impl ParticleState {
    pub fn new(dim: usize, positions: Vec<[f64; MAX_DIM]>) -> Result<Self, ParticleError> {
        if positions.is_empty() {
            return Err(ParticleError::Empty);
        }
        if !(1..=MAX_DIM).contains(&dim) {
            return Err(ParticleError::Parameter(format!("dimension {dim}")));
        }
        if let Some(index) = positions.iter().position(|x| x[..dim].iter().any(|v| !v.is_finite())) {
            return Err(ParticleError::NonFinite { index });
        }
        Ok(Self { dim, positions, t: 0.0 })
    }

    /// `n` independent draws from `N(0, sigma^2 I)`.
    pub fn sample_gaussian(dim: usize, n: usize, sigma: f64, seed: u64) -> Result<Self, ParticleError> {
        let normal = Normal::new(0.0, sigma).map_err(|e| ParticleError::Parameter(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let positions = (0..n)
            .map(|_| {
                let mut x = [0.0; MAX_DIM];
                for v in x.iter_mut().take(dim) {
                    *v = normal.sample(&mut rng);
                }
                x
            })
            .collect();
        Self::new(dim, positions)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn center_of_mass(&self) -> [f64; MAX_DIM] {
        let mut c = [0.0; MAX_DIM];
        for x in &self.positions {
            for a in 0..self.dim {
                c[a] += x[a];
            }
        }
        c.iter_mut().for_each(|v| *v /= self.len() as f64);
        c
    }
}

/// `-(1/N) sum_{j != i} grad W(X_i - X_j)` for every `i`.
pub fn velocities(w: &Interaction, x: &[[f64; MAX_DIM]]) -> Vec<[f64; MAX_DIM]> {
    let n = x.len();
    let d = w.dim();
    x.par_iter()
        .enumerate()
        .map(|(i, xi)| {
            let mut v = [0.0; MAX_DIM];
            for (j, xj) in x.iter().enumerate() {
                if j == i {
                    continue;
                }
                let mut z = [0.0; MAX_DIM];
                for a in 0..d {
                    z[a] = xi[a] - xj[a];
                }
                let g = w.grad(&z);
                for a in 0..d {
                    v[a] -= g[a];
                }
            }
            v.iter_mut().for_each(|c| *c /= n as f64);
            v
        })
        .collect()
}

fn axpy(x: &[[f64; MAX_DIM]], k: &[[f64; MAX_DIM]], s: f64) -> Vec<[f64; MAX_DIM]> {
    x.iter()
        .zip(k)
        .map(|(x, k)| {
            let mut y = *x;
            for (y, k) in y.iter_mut().zip(k) {
                *y += s * k;
            }
            y
        })
        .collect()
}

/// One classical Runge-Kutta step; `dt < 0` integrates backwards.
pub fn rk4_step(w: &Interaction, x: &[[f64; MAX_DIM]], dt: f64) -> Vec<[f64; MAX_DIM]> {
    let k1 = velocities(w, x);
    let k2 = velocities(w, &axpy(x, &k1, 0.5 * dt));
    let k3 = velocities(w, &axpy(x, &k2, 0.5 * dt));
    let k4 = velocities(w, &axpy(x, &k3, dt));
    x.iter()
        .enumerate()
        .map(|(i, x)| {
            let mut y = *x;
            for a in 0..MAX_DIM {
                y[a] += dt / 6.0 * (k1[i][a] + 2.0 * k2[i][a] + 2.0 * k3[i][a] + k4[i][a]);
            }
            y
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParticleTrajectory {
    pub snapshots: Vec<ParticleState>,
    pub steps: usize,
}

/// Integrate to `t_end` with steps of at most `|dt|`, landing on every snapshot
/// time. A negative `dt` with `t_end < t` runs backwards.
pub fn simulate_particles(
    w: &Interaction,
    state: ParticleState,
    t_end: f64,
    dt: f64,
    cadence: Option<f64>,
) -> Result<ParticleTrajectory, ParticleError> {
    if state.dim != w.dim() {
        return Err(ParticleError::KernelMismatch(format!(
            "particles in d = {}, interaction in d = {}",
            state.dim,
            w.dim()
        )));
    }
    let forward = t_end >= state.t;
    if !(dt.is_finite() && dt != 0.0 && (dt > 0.0) == forward) {
        return Err(ParticleError::Parameter(format!(
            "dt = {dt} does not point from t = {} to {t_end}",
            state.t
        )));
    }
    let product = dt.abs() * w.lipschitz_grad();
    if product > MAX_DT_LIP {
        return Err(ParticleError::StepTooLarge { dt, product });
    }
    let span = (t_end - state.t).abs();
    let targets: Vec<f64> = snapshot_targets(0.0, span, cadence.map(f64::abs))
        .into_iter()
        .map(|s| if forward { state.t + s } else { state.t - s })
        .collect();
    let t0 = state.t;
    let mut cur = state;
    let mut snapshots = vec![cur.clone()];
    let mut steps = 0;
    for &target in targets.iter().skip_while(|&&t| t == t0) {
        while (target - cur.t).abs() > 1e-12 * dt.abs() {
            let left = target - cur.t;
            let h = if left.abs() <= dt.abs() * (1.0 + 1e-9) { left } else { dt };
            let next = rk4_step(w, &cur.positions, h);
            if let Some(index) = next
                .iter()
                .position(|x| !(crate::grid::norm(x, cur.dim) <= BLOW_UP_RADIUS))
            {
                return Err(ParticleError::BlowUp { index, t: cur.t + h });
            }
            cur.positions = next;
            cur.t = if (target - cur.t - h).abs() <= 1e-12 * dt.abs() { target } else { cur.t + h };
            steps += 1;
        }
        cur.t = target;
        snapshots.push(cur.clone());
    }
    Ok(ParticleTrajectory { snapshots, steps })
}

/// `max(2h, N^{-1/(d+4)})`.
pub fn default_bandwidth(grid: &Grid, n: usize) -> f64 {
    (2.0 * grid.h()).max((n as f64).powf(-1.0 / (grid.dim() as f64 + 4.0)))
}

/// `(1/N) sum_i G_b(x - X_i)` with `G_b` the normalized Gaussian of width `b`,
/// cut off at `BUMP_CUTOFF b`. Positions are measured from the grid centre.
pub fn empirical_density(state: &ParticleState, grid: &Grid, bandwidth: f64) -> Result<Field, ParticleError> {
    let d = grid.dim();
    if state.dim != d {
        return Err(GridError::Mismatch.into());
    }
    if !(bandwidth > 0.0) {
        return Err(ParticleError::Parameter(format!("bandwidth {bandwidth}")));
    }
    let h = grid.h();
    let n = grid.n();
    let half = grid.len() / 2.0;
    let guard = half - BUMP_CUTOFF * bandwidth - h;
    let reach = (BUMP_CUTOFF * bandwidth / h).ceil() as isize;
    let norm1 = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * bandwidth);
    let weight = 1.0 / state.len() as f64;
    let mut out = vec![0.0; grid.size()];
    let mut w1 = vec![Vec::new(); d];
    let mut base = [0isize; MAX_DIM];
    for (index, x) in state.positions.iter().enumerate() {
        let r = x[..d].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if r > guard {
            return Err(ParticleError::OutsideGuard { index, reach: r, guard });
        }
        for a in 0..d {
            // Point m sits at m h - L/2.
            let c = ((x[a] + half) / h).round() as isize;
            base[a] = c - reach;
            w1[a] = (c - reach..=c + reach)
                .map(|m| {
                    let z = (m as f64 * h - half - x[a]) / bandwidth;
                    norm1 * (-0.5 * z * z).exp()
                })
                .collect();
        }
        let width = (2 * reach + 1) as usize;
        let total = width.pow(d as u32);
        for k in 0..total {
            let mut rem = k;
            let mut idx = 0;
            let mut wgt = weight;
            for a in 0..d {
                let o = rem % width;
                rem /= width;
                let m = (base[a] + o as isize).rem_euclid(n as isize) as usize;
                idx += m * grid.stride(a);
                wgt *= w1[a][o];
            }
            out[idx] += wgt;
        }
    }
    Ok(Field::from_values(*grid, FieldRole::Density, out))
}

/// Explicit upwind-free solver for `d_t mu = div(mu_f grad_h(mu * W))` on the
/// torus, reusing the transport stage with potential `-(mu * W)`.
pub struct TransportPde {
    ops: Operators,
    symbol: Vec<f64>,
    params: SchemeParams,
}

impl TransportPde {
    pub fn new(samples: &KernelSamples, params: SchemeParams) -> Self {
        let ops = Operators::new(*samples.grid(), params.reconstruction);
        let symbol = ops.kernel_hat(&samples.omega).into_iter().map(|v| -v).collect();
        Self { ops, symbol, params }
    }

    pub fn potential(&self, mu: &[f64]) -> Vec<f64> {
        let hat: Vec<Complex64> = self.ops.hat(mu);
        self.ops.combine(&[&hat], &[&self.symbol])
    }

    /// Advance to every time in `times` (increasing, from `times[0]`).
    pub fn run(&self, mu0: &Field, times: &[f64]) -> Result<Vec<Field>, ParticleError> {
        let g = *self.ops.grid();
        g.check_same(mu0.grid())?;
        let mut mu = mu0.values().to_vec();
        let mut t = times.first().copied().unwrap_or(0.0);
        let mut out = Vec::with_capacity(times.len());
        for &target in times {
            while target - t > 1e-14 * target.abs().max(1.0) {
                let psi = self.potential(&mu);
                let vmax = max_abs_face(&self.ops.face_velocity(&psi));
                let cap = self.params.cfl_safety * self.ops.cfl_bound(vmax);
                let dt = cap.min(self.params.dt_cap).min(target - t);
                mu = self.ops.transport(&mu, &psi, dt, self.params.positivity_limiter).rho_star;
                t = if target - t - dt <= 1e-14 * target.abs().max(1.0) { target } else { t + dt };
            }
            if let Some(index) = mu.iter().position(|v| !v.is_finite()) {
                return Err(ParticleError::NonFinite { index });
            }
            out.push(Field::from_values(g, FieldRole::Density, mu.clone()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DistanceRow {
    pub t: f64,
    pub l1: f64,
    pub particle_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceTable {
    pub n_particles: usize,
    pub bandwidth: f64,
    pub rows: Vec<DistanceRow>,
}

impl DistanceTable {
    pub fn max_l1(&self) -> f64 {
        self.rows.iter().map(|r| r.l1).fold(0.0, f64::max)
    }
}

/// Sample `W` on the comparison grid at the interaction scale.
pub fn sample_interaction(w: &Interaction, grid: &Grid) -> Result<KernelSamples, ParticleError> {
    Ok(sample_kernel_with_guard(w.spec(), w.delta(), grid, 2.0)?)
}

/// `L^1` distance between the mollified empirical density and the PDE solution
/// started from `mu0`, at every snapshot of the trajectory.
pub fn compare_to_pde(
    traj: &ParticleTrajectory,
    w: &Interaction,
    samples: &KernelSamples,
    mu0: &Field,
    params: SchemeParams,
) -> Result<DistanceTable, ParticleError> {
    w.check_samples(samples)?;
    let grid = *samples.grid();
    let n = traj.snapshots.first().ok_or(ParticleError::Empty)?.len();
    let b = default_bandwidth(&grid, n);
    let times: Vec<f64> = traj.snapshots.iter().map(|s| s.t).collect();
    let pde = TransportPde::new(samples, params).run(mu0, &times)?;
    let rows = traj
        .snapshots
        .iter()
        .zip(&pde)
        .map(|(s, mu)| {
            let emp = empirical_density(s, &grid, b)?;
            Ok(DistanceRow {
                t: s.t,
                l1: emp.l1_distance(mu)?,
                particle_mass: emp.integral(),
            })
        })
        .collect::<Result<Vec<_>, ParticleError>>()?;
    Ok(DistanceTable {
        n_particles: n,
        bandwidth: b,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelFamily;
    use crate::solver::InitialDataSpec;

    fn gaussian_w(dim: usize, delta: f64) -> Interaction {
        Interaction::new(KernelSpec::new(KernelFamily::Gaussian, dim).unwrap(), delta).unwrap()
    }

    fn at(x: &[f64]) -> [f64; MAX_DIM] {
        let mut p = [0.0; MAX_DIM];
        p[..x.len()].copy_from_slice(x);
        p
    }

    #[test]
    fn single_particle_is_stationary() {
        let w = gaussian_w(2, 0.5);
        let s = ParticleState::new(2, vec![at(&[0.3, -0.2])]).unwrap();
        let tr = simulate_particles(&w, s.clone(), 1.0, 0.01, Some(0.5)).unwrap();
        assert!(tr.snapshots.iter().all(|q| q.positions == s.positions));
        assert!(matches!(ParticleState::new(2, vec![]), Err(ParticleError::Empty)));
    }

    /// Midpoint rule on `s' = s exp(-s^2/2) / sqrt(2 pi)` at a fine step.
    fn separation_oracle(s0: f64, t: f64, dt: f64) -> f64 {
        let f = |s: f64| s * (-0.5 * s * s).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let steps = (t / dt).round() as usize;
        let mut s = s0;
        for _ in 0..steps {
            s += dt * f(s + 0.5 * dt * f(s));
        }
        s
    }

    #[test]
    fn two_particles_follow_scalar_ode() {
        let w = gaussian_w(1, 1.0);
        let s = ParticleState::new(1, vec![at(&[0.2]), at(&[-0.3])]).unwrap();
        let tr = simulate_particles(&w, s, 1.0, 1e-3, None).unwrap();
        let x = &tr.snapshots.last().unwrap().positions;
        let sep = x[0][0] - x[1][0];
        let want = separation_oracle(0.5, 1.0, 1e-5);
        assert!((sep - want).abs() <= 1e-6, "{sep} vs {want}");
        assert_eq!(tr.steps, 1000);
    }

    #[test]
    fn center_of_mass_and_time_reversal() {
        let w = gaussian_w(2, 0.5);
        let s = ParticleState::sample_gaussian(2, 64, 0.6, 7).unwrap();
        let c0 = s.center_of_mass();
        let tr = simulate_particles(&w, s.clone(), 0.5, 0.02, None).unwrap();
        let end = tr.snapshots.last().unwrap().clone();
        let c1 = end.center_of_mass();
        for a in 0..2 {
            assert!((c1[a] - c0[a]).abs() <= 1e-12);
        }
        let back = simulate_particles(&w, end, 0.0, -0.02, None).unwrap();
        let x = &back.snapshots.last().unwrap().positions;
        let err = x
            .iter()
            .zip(&s.positions)
            .map(|(a, b)| (a[0] - b[0]).abs().max((a[1] - b[1]).abs()))
            .fold(0.0, f64::max);
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn step_guard_and_blow_up_inputs() {
        let w = gaussian_w(2, 0.1);
        let s = ParticleState::new(2, vec![at(&[0.0, 0.0]), at(&[0.05, 0.0])]).unwrap();
        assert!(matches!(
            simulate_particles(&w, s.clone(), 1.0, 0.1, None),
            Err(ParticleError::StepTooLarge { .. })
        ));
        assert!(matches!(simulate_particles(&w, s, 1.0, -1e-4, None), Err(ParticleError::Parameter(_))));
        assert!(matches!(
            ParticleState::new(1, vec![at(&[f64::NAN])]),
            Err(ParticleError::NonFinite { index: 0 })
        ));
    }

    #[test]
    fn lipschitz_estimate_of_gaussian() {
        // sup |D^2 W| = W(0) / delta^2 for the Gaussian.
        for (d, delta) in [(1usize, 1.0), (2, 0.5), (3, 0.7)] {
            let w = gaussian_w(d, delta);
            let exact = (2.0 * std::f64::consts::PI).powf(-(d as f64) / 2.0) * delta.powi(-(d as i32) - 2);
            assert!((w.lipschitz_grad() / exact - 1.0).abs() < 1e-3, "{d}");
        }
    }

    #[test]
    fn empirical_density_of_one_and_two_particles() {
        let g = Grid::new(2, 64, 8.0).unwrap();
        let one = ParticleState::new(2, vec![at(&[0.0, 0.0])]).unwrap();
        let two = ParticleState::new(2, vec![at(&[0.0, 0.0]), at(&[0.0, 0.0])]).unwrap();
        let a = empirical_density(&one, &g, 0.3).unwrap();
        let b = empirical_density(&two, &g, 0.3).unwrap();
        assert!((a.integral() - 1.0).abs() <= 1e-8);
        assert!(a.l1_distance(&b).unwrap() <= 1e-14);
        let blob = InitialDataSpec::GaussianBlob {
            sigma: 0.3,
            mass: 1.0,
            center: vec![],
        }
        .generate(&g)
        .unwrap();
        assert!(a.l1_distance(&blob).unwrap() <= 1e-8);
        let far = ParticleState::new(2, vec![at(&[3.5, 0.0])]).unwrap();
        assert!(matches!(empirical_density(&far, &g, 0.3), Err(ParticleError::OutsideGuard { .. })));
    }

    #[test]
    fn empirical_density_converges_in_n() {
        let g = Grid::new(2, 128, 16.0).unwrap();
        let truth = InitialDataSpec::GaussianBlob {
            sigma: 0.8,
            mass: 1.0,
            center: vec![],
        }
        .generate(&g)
        .unwrap();
        let d: Vec<f64> = [1000, 10000]
            .iter()
            .map(|&n| {
                let s = ParticleState::sample_gaussian(2, n, 0.8, 11).unwrap();
                let e = empirical_density(&s, &g, default_bandwidth(&g, n)).unwrap();
                assert!((e.integral() - 1.0).abs() <= 1e-8);
                e.l1_distance(&truth).unwrap()
            })
            .collect();
        assert!(d[1] < d[0], "{d:?}");
    }

    #[test]
    fn transport_pde_conserves_mass_and_spreads() {
        let g = Grid::new(2, 64, 8.0).unwrap();
        let w = gaussian_w(2, 0.5);
        let samples = sample_interaction(&w, &g).unwrap();
        let mu0 = InitialDataSpec::GaussianBlob {
            sigma: 0.6,
            mass: 1.0,
            center: vec![],
        }
        .generate(&g)
        .unwrap();
        let out = TransportPde::new(&samples, SchemeParams::default())
            .run(&mu0, &[0.0, 0.2])
            .unwrap();
        assert!((out[1].integral() - 1.0).abs() <= 1e-12);
        assert!(out[1].max() < mu0.max());
        assert!(out[1].min() >= 0.0);
    }

    #[test]
    fn mismatched_interaction_is_rejected() {
        let g = Grid::new(2, 64, 8.0).unwrap();
        let w = gaussian_w(2, 0.5);
        let other = sample_interaction(&gaussian_w(2, 0.6), &g).unwrap();
        let tr = ParticleTrajectory {
            snapshots: vec![ParticleState::new(2, vec![at(&[0.0, 0.0])]).unwrap()],
            steps: 0,
        };
        let mu0 = Field::constant(g, FieldRole::Density, 1.0 / 64.0);
        assert!(matches!(
            compare_to_pde(&tr, &w, &other, &mu0, SchemeParams::default()),
            Err(ParticleError::KernelMismatch(_))
        ));
    }

    #[test]
    fn initial_distance_is_sampling_error() {
        let g = Grid::new(2, 128, 16.0).unwrap();
        let w = gaussian_w(2, 0.5);
        let samples = sample_interaction(&w, &g).unwrap();
        let s = ParticleState::sample_gaussian(2, 500, 0.7, 3).unwrap();
        let mu0 = InitialDataSpec::GaussianBlob {
            sigma: 0.7,
            mass: 1.0,
            center: vec![],
        }
        .generate(&g)
        .unwrap();
        let tr = ParticleTrajectory {
            snapshots: vec![s.clone()],
            steps: 0,
        };
        let t = compare_to_pde(&tr, &w, &samples, &mu0, SchemeParams::default()).unwrap();
        let direct = empirical_density(&s, &g, default_bandwidth(&g, 500))
            .unwrap()
            .l1_distance(&mu0)
            .unwrap();
        assert_eq!(t.rows[0].l1, direct);
    }
}
