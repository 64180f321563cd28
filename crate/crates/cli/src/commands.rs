//! Subcommand bodies. Each writes its artifacts under an output directory and
//! returns the monitors that decide the exit status.

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

use nlch::diagnostics::{
    energy_dissipation_residual, entropy_dissipation_residual, estimate_dashboard, moment_identity_residual,
    write_csv_file, DiagnosticsRecord, Recorder, ResidualReport,
};
use nlch::grid::{Field, Grid, MAX_DIM};
use nlch::io::write_snapshot;
use nlch::kernels::{
    certify_assumption, check_decay, decay_passes, sample_kernel, sample_kernel_with_guard, KernelSpec,
};
use nlch::limit_lab::{
    choose_truncation_level, commutator_error, d2_decomposition_test, epsilon_sweep, j1_report, j2_bound_check,
    SweepConfig, TestFunction,
};
use nlch::particles::{compare_to_pde, sample_interaction, simulate_particles, Interaction, ParticleState};
use nlch::solver::{InitialDataSpec, RunError, SchemeParams, Solver};
use nlch::system::{
    system_energy_residual, system_entropy_residual, Coupling, CouplingMatrix, DivergenceSign, SystemSolver,
};

use crate::config::{family, to_toml, ConfigErrors, DtSetting, RunConfig, SignSetting, Tolerances};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error:\n{0}")]
    Config(#[from] ConfigErrors),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Io(_) => 2,
            Self::Numerical(_) => 3,
        }
    }

    fn config(msg: impl Into<String>) -> Self {
        Self::Config(ConfigErrors(vec![msg.into()]))
    }
}

fn io<E: std::fmt::Display>(path: &Path) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Monitor {
    pub name: String,
    pub pass: bool,
    pub value: f64,
    pub threshold: f64,
    /// Soft monitors are reported but do not fail the run.
    pub hard: bool,
}

impl Monitor {
    fn new(name: &str, pass: bool, value: f64, threshold: f64, hard: bool) -> Self {
        Self {
            name: name.to_string(),
            pass,
            value,
            threshold,
            hard,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Outcome {
    pub command: String,
    pub monitors: Vec<Monitor>,
    pub dir: Option<PathBuf>,
}

impl Outcome {
    pub fn pass(&self) -> bool {
        self.monitors.iter().all(|m| m.pass || !m.hard)
    }

    pub fn exit_code(&self) -> i32 {
        if self.pass() {
            0
        } else {
            1
        }
    }

    pub fn failing(&self) -> Vec<&str> {
        self.monitors
            .iter()
            .filter(|m| m.hard && !m.pass)
            .map(|m| m.name.as_str())
            .collect()
    }
}

pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn json_f64(v: f64) -> Value {
    // JSON has no infinities; keep them readable.
    if v.is_finite() {
        json!(v)
    } else {
        json!(num(v))
    }
}

/// Shortest round-trip text, exponent form for tiny values.
fn num(v: f64) -> String {
    format!("{v:?}")
}

fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(io(path))?;
    fs::write(path, text + "\n").map_err(io(path))
}

/// `summary.json` holds only reproducible content; wall clock goes to `timing.json`.
fn finish(
    dir: &Path,
    command: &str,
    resolved: Option<&str>,
    seeds: &[u64],
    monitors: Vec<Monitor>,
    details: Value,
    seconds: f64,
) -> Result<Outcome, CliError> {
    let outcome = Outcome {
        command: command.to_string(),
        monitors,
        dir: Some(dir.to_path_buf()),
    };
    let monitors: Vec<Value> = outcome
        .monitors
        .iter()
        .map(|m| {
            json!({
                "name": m.name,
                "pass": m.pass,
                "value": json_f64(m.value),
                "threshold": json_f64(m.threshold),
                "hard": m.hard,
            })
        })
        .collect();
    let summary = json!({
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "config_hash": resolved.map(config_hash),
        "seeds": seeds,
        "pass": outcome.pass(),
        "failing": outcome.failing(),
        "monitors": monitors,
        "details": details,
    });
    write_json(&dir.join("summary.json"), &summary)?;
    write_json(&dir.join("timing.json"), &json!({ "command": command, "wall_seconds": seconds }))?;
    Ok(outcome)
}

fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io(dir))
}

fn write_resolved(dir: &Path, cfg: &RunConfig) -> Result<String, CliError> {
    let text = to_toml(cfg);
    let path = dir.join("config.toml");
    fs::write(&path, &text).map_err(io(&path))?;
    Ok(text)
}

fn grid_of(cfg: &RunConfig) -> Result<Grid, CliError> {
    Grid::new(cfg.grid.dim, cfg.grid.n, cfg.grid.length).map_err(|e| CliError::config(format!("grid: {e}")))
}

fn seeds_of(spec: &InitialDataSpec) -> Vec<u64> {
    match spec {
        InitialDataSpec::PerturbedConstant { seed, .. } => vec![*seed],
        _ => Vec::new(),
    }
}

fn build_solver(cfg: &RunConfig, grid: Grid, params: SchemeParams) -> Result<Solver, CliError> {
    Ok(match &cfg.kernel {
        None => Solver::local(grid, params),
        Some(k) => {
            let mut spec = KernelSpec::new(family(&k.family).map_err(CliError::config)?, grid.dim())
                .map_err(|e| CliError::config(e.to_string()))?;
            if let Some(f) = &k.f_family {
                spec = spec.with_f(family(f).map_err(CliError::config)?);
            }
            let samples = sample_kernel_with_guard(&spec, k.epsilon, &grid, k.min_eps_over_h)
                .map_err(|e| CliError::config(e.to_string()))?;
            Solver::nonlocal(samples, params)
        }
    })
}

fn run_error(e: RunError) -> CliError {
    match e {
        RunError::Invalid(m) => CliError::config(m),
        other => CliError::Numerical(other.to_string()),
    }
}

fn residual_monitor(name: &str, r: &ResidualReport, hard: bool) -> Monitor {
    Monitor::new(name, r.pass, r.residual.abs(), r.tolerance, hard)
}

/// Invariant monitors over a single-species record stream.
pub fn run_monitors(records: &[DiagnosticsRecord], dim: usize, tol: &Tolerances, stabilized: bool) -> Vec<Monitor> {
    let mut out = Vec::new();
    let m0 = records[0].mass;
    let drift = records.iter().map(|r| ((r.mass - m0) / m0).abs()).fold(0.0, f64::max);
    out.push(Monitor::new("mass_drift", drift <= tol.mass_drift, drift, tol.mass_drift, true));
    let neg = records
        .iter()
        .map(|r| if r.max_rho > 0.0 { -r.min_rho / r.max_rho } else { 0.0 })
        .fold(f64::NEG_INFINITY, f64::max);
    // The stabilizing shift is not an M-matrix; positivity is only promised without it.
    out.push(Monitor::new("positivity", neg <= tol.positivity, neg, tol.positivity, !stabilized));
    let cs = records
        .iter()
        .map(|r| {
            let b = 4.0 * r.mass * r.grad_sqrt_sq;
            if b > 0.0 {
                r.grad_l1 * r.grad_l1 / b - 1.0
            } else {
                0.0
            }
        })
        .fold(f64::NEG_INFINITY, f64::max);
    // The forward-difference l1 gradient obeys the bound exactly only in 1d.
    out.push(Monitor::new("cauchy_schwarz", cs <= tol.cauchy_schwarz, cs, tol.cauchy_schwarz, dim == 1));
    if records.len() >= 3 {
        let hard = !stabilized;
        if let Ok(r) = energy_dissipation_residual(records, None, tol.residual) {
            out.push(residual_monitor("energy_residual", &r, hard));
        }
        if let Ok(r) = entropy_dissipation_residual(records, None, tol.residual) {
            out.push(residual_monitor("entropy_residual", &r, hard));
        }
        if let Ok(r) = moment_identity_residual(records, dim, None, tol.residual) {
            out.push(residual_monitor("moment_residual", &r, hard));
        }
    }
    out
}

pub fn run(cfg: &RunConfig, out: Option<&Path>) -> Result<Outcome, CliError> {
    let clock = Instant::now();
    let dir = out.unwrap_or(&cfg.output.dir).to_path_buf();
    let grid = grid_of(cfg)?;
    let init = cfg.initial.as_ref().ok_or_else(|| CliError::config("`run` needs an [initial] section"))?;
    let solver = build_solver(cfg, grid, cfg.solver.scheme())?;
    let state = solver.initial_state(init).map_err(|e| CliError::config(e.to_string()))?;
    prepare_dir(&dir)?;
    let resolved = write_resolved(&dir, cfg)?;
    let mut rec = Recorder::default();
    let traj = solver
        .run(state, cfg.solver.t_end, cfg.solver.cadence, &mut [&mut rec])
        .map_err(run_error)?;
    let csv = dir.join("diagnostics.csv");
    write_csv_file(&csv, &rec.records).map_err(io(&csv))?;
    if cfg.output.snapshots {
        let sdir = dir.join("snapshots");
        prepare_dir(&sdir)?;
        for (k, s) in traj.snapshots.iter().enumerate() {
            let p = sdir.join(format!("snap_{k:05}.csv"));
            write_snapshot(&p, &s.rho, s.t, s.eps).map_err(io(&p))?;
        }
    }
    let monitors = run_monitors(&rec.records, grid.dim(), &cfg.tolerances, cfg.solver.stabilize);
    let details = json!({
        "steps": traj.dts.len(),
        "final": rec.records.last(),
        "dashboard": estimate_dashboard(&rec.records),
    });
    finish(
        &dir,
        "run",
        Some(&resolved),
        &seeds_of(init),
        monitors,
        details,
        clock.elapsed().as_secs_f64(),
    )
}

pub fn sweep(cfg: &RunConfig, out: Option<&Path>) -> Result<Outcome, CliError> {
    let clock = Instant::now();
    let dir = out.unwrap_or(&cfg.output.dir).to_path_buf();
    let grid = grid_of(cfg)?;
    let sw = cfg.sweep.as_ref().ok_or_else(|| CliError::config("`sweep` needs a [sweep] section"))?;
    let k = cfg.kernel.as_ref().ok_or_else(|| CliError::config("`sweep` needs a [kernel] section"))?;
    let init = cfg.initial.clone().ok_or_else(|| CliError::config("`sweep` needs an [initial] section"))?;
    let mut reference = cfg.solver.clone();
    if let Some(dt) = sw.reference_dt {
        reference.dt = dt;
    }
    reference.stabilize = sw.reference_stabilize;
    let sc = SweepConfig {
        grid,
        family: family(&k.family).map_err(CliError::config)?,
        eps: sw.epsilons.clone(),
        initial: init.clone(),
        t_end: cfg.solver.t_end,
        cadence: sw.cadence,
        params: cfg.solver.scheme(),
        reference_params: reference.scheme(),
        reference_stride: match reference.dt {
            DtSetting::Fixed(_) => 10,
            DtSetting::Named(_) => 1,
        },
        min_eps_over_h: k.min_eps_over_h,
    };
    prepare_dir(&dir)?;
    let resolved = write_resolved(&dir, cfg)?;
    let (report, timings) = epsilon_sweep(&sc).map_err(|e| match e {
        nlch::limit_lab::LabError::Run(r) => run_error(r),
        other => CliError::config(other.to_string()),
    })?;
    let path = dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).map_err(io(&path))?;
    w.write_record(["eps", "sup_t_l1", "l1_t_l1", "l2_t_l1", "slope_so_far", "steps"])
        .map_err(io(&path))?;
    for r in &report.rows {
        w.write_record([
            num(r.eps),
            num(r.sup_t_l1),
            num(r.l1_t_l1),
            num(r.l2_t_l1),
            r.slope_so_far.map_or(String::new(), num),
            r.steps.to_string(),
        ])
        .map_err(io(&path))?;
    }
    w.flush().map_err(io(&path))?;
    let tol = &cfg.tolerances;
    let slope = report.slope.unwrap_or(f64::NAN);
    let monitors = vec![
        Monitor::new(
            "strictly_decreasing",
            report.strictly_decreasing,
            report.rows.len() as f64,
            0.0,
            true,
        ),
        Monitor::new("slope", slope >= tol.sweep_min_slope, slope, tol.sweep_min_slope, report.rows.len() >= 2),
    ];
    let t = clock.elapsed().as_secs_f64();
    let outcome = finish(
        &dir,
        "sweep",
        Some(&resolved),
        &seeds_of(&init),
        monitors,
        serde_json::to_value(&report).map_err(io(&dir))?,
        t,
    )?;
    write_json(
        &dir.join("timing.json"),
        &json!({ "command": "sweep", "wall_seconds": t, "reference_seconds": timings.reference, "run_seconds": timings.runs }),
    )?;
    Ok(outcome)
}

pub fn system_run(cfg: &RunConfig, out: Option<&Path>) -> Result<Outcome, CliError> {
    let clock = Instant::now();
    let dir = out.unwrap_or(&cfg.output.dir).to_path_buf();
    let grid = grid_of(cfg)?;
    let sys = cfg.system.as_ref().ok_or_else(|| CliError::config("`system-run` needs a [system] section"))?;
    let k = cfg.kernel.as_ref().ok_or_else(|| CliError::config("`system-run` needs a [kernel] section"))?;
    let matrix =
        CouplingMatrix::from_row_major(sys.species, &sys.matrix).map_err(|e| CliError::config(e.to_string()))?;
    let kernels = sys
        .families
        .iter()
        .map(|f| {
            let spec = KernelSpec::new(family(f).map_err(CliError::config)?, grid.dim())
                .map_err(|e| CliError::config(e.to_string()))?;
            sample_kernel_with_guard(&spec, k.epsilon, &grid, k.min_eps_over_h)
                .map_err(|e| CliError::config(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let sign = match sys.sign {
        SignSetting::Dissipative => DivergenceSign::Dissipative,
        SignSetting::Reversed => DivergenceSign::Reversed,
    };
    let coupling = Coupling::new(matrix, kernels, sign, cfg.solver.reconstruction)
        .map_err(|e| CliError::config(e.to_string()))?;
    let solver = SystemSolver::new(coupling, cfg.solver.scheme());
    let state = solver
        .initial_state(&sys.initial)
        .map_err(|e| CliError::config(e.to_string()))?;
    prepare_dir(&dir)?;
    let resolved = write_resolved(&dir, cfg)?;
    let mut records = Vec::new();
    let traj = solver
        .run(state, cfg.solver.t_end, cfg.solver.cadence, |s, st, info| {
            records.push(s.record(st, info));
            Ok(())
        })
        .map_err(run_error)?;
    let path = dir.join("system_diagnostics.csv");
    let mut w = csv::Writer::from_path(&path).map_err(io(&path))?;
    let mut header: Vec<String> = [
        "t",
        "step",
        "dt",
        "energy",
        "diag_energy",
        "entropy",
        "fisher",
        "lap_coupled",
        "weighted_vel_sq",
        "min_rho",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..sys.species).map(|i| format!("mass_{i}")));
    w.write_record(&header).map_err(io(&path))?;
    for r in &records {
        let mut row = vec![
            num(r.t),
            r.step.to_string(),
            num(r.dt),
            num(r.energy),
            num(r.diag_energy),
            num(r.entropy),
            num(r.fisher),
            num(r.lap_coupled),
            num(r.weighted_vel_sq),
            num(r.min_rho),
        ];
        row.extend(r.masses.iter().map(|m| num(*m)));
        w.write_record(&row).map_err(io(&path))?;
    }
    w.flush().map_err(io(&path))?;
    if cfg.output.snapshots {
        let sdir = dir.join("snapshots");
        prepare_dir(&sdir)?;
        for (k, s) in traj.snapshots.iter().enumerate() {
            for (i, rho) in s.rho.iter().enumerate() {
                let p = sdir.join(format!("snap_{k:05}_species_{i}.csv"));
                write_snapshot(&p, rho, s.t, s.eps).map_err(io(&p))?;
            }
        }
    }
    let tol = &cfg.tolerances;
    let m0 = &records[0].masses;
    let drift = records
        .iter()
        .flat_map(|r| r.masses.iter().zip(m0).map(|(m, z)| ((m - z) / z).abs()))
        .fold(0.0, f64::max);
    let dissipative = sys.sign == SignSetting::Dissipative && !cfg.solver.stabilize;
    let mut monitors = vec![Monitor::new("mass_drift", drift <= tol.mass_drift, drift, tol.mass_drift, true)];
    if records.len() >= 3 {
        monitors.push(residual_monitor(
            "energy_residual",
            &system_energy_residual(&records, tol.residual),
            dissipative,
        ));
        monitors.push(residual_monitor(
            "entropy_residual",
            &system_entropy_residual(&records, tol.residual),
            dissipative,
        ));
    }
    let seeds: Vec<u64> = sys.initial.iter().flat_map(seeds_of).collect();
    let details = json!({
        "steps": traj.dts.len(),
        "species": sys.species,
        "gram_eigen_range": solver.coupling().matrix().gram_eigen_range(),
        "final_energy": records.last().map(|r| r.energy),
        "final_entropy": records.last().map(|r| r.entropy),
    });
    finish(
        &dir,
        "system-run",
        Some(&resolved),
        &seeds,
        monitors,
        details,
        clock.elapsed().as_secs_f64(),
    )
}

#[derive(Debug, Clone)]
pub struct KernelCheckArgs {
    pub family: String,
    pub f_family: Option<String>,
    pub dim: usize,
    pub rmax: f64,
    pub resolution: usize,
}

pub fn kernel_check(a: &KernelCheckArgs) -> Result<(Value, Outcome), CliError> {
    let mut spec =
        KernelSpec::new(family(&a.family).map_err(CliError::config)?, a.dim).map_err(|e| CliError::config(e.to_string()))?;
    if let Some(f) = &a.f_family {
        spec = spec.with_f(family(f).map_err(CliError::config)?);
    }
    if !(a.rmax > 0.0) || a.resolution < 2 {
        return Err(CliError::config("kernel-check needs rmax > 0 and resolution >= 2"));
    }
    let cert = certify_assumption(&spec, a.rmax, a.resolution);
    let radii: Vec<f64> = (0..6).map(|k| 2f64.powi(k)).filter(|&r| r <= 4.0 * a.rmax).collect();
    let decay = check_decay(&spec, &radii);
    let decay_ok = decay_passes(&decay);
    let pass = cert.pass && decay_ok && cert.c_best.is_finite();
    let report = json!({
        "family": a.family,
        "f_family": spec.f_family().map(|f| f.name().to_string()),
        "dim": a.dim,
        "rmax": a.rmax,
        "C_best": json_f64(cert.c_best),
        "worst_x": cert.worst_x,
        "c_coarse": json_f64(cert.c_coarse),
        "c_fine": json_f64(cert.c_fine),
        "certification_failure": cert.failure,
        "decay_table": decay,
        "decay_pass": decay_ok,
        "pass": pass,
    });
    let outcome = Outcome {
        command: "kernel-check".into(),
        monitors: vec![Monitor::new("certified", pass, cert.c_best, f64::INFINITY, true)],
        dir: None,
    };
    Ok((report, outcome))
}

#[derive(Debug, Clone)]
pub struct FrozenArgs {
    pub family: String,
    pub dim: usize,
    pub n: usize,
    pub length: f64,
    pub sigma: f64,
    pub mass: f64,
    pub radius: f64,
    pub epsilons: Vec<f64>,
}

fn frozen_setup(a: &FrozenArgs) -> Result<(Grid, Field, KernelSpec, TestFunction), CliError> {
    let grid = Grid::new(a.dim, a.n, a.length).map_err(|e| CliError::config(e.to_string()))?;
    let rho = InitialDataSpec::GaussianBlob {
        sigma: a.sigma,
        mass: a.mass,
        center: vec![],
    }
    .generate(&grid)
    .map_err(|e| CliError::config(e.to_string()))?;
    let spec = KernelSpec::new(family(&a.family).map_err(CliError::config)?, a.dim)
        .map_err(|e| CliError::config(e.to_string()))?;
    let phi = TestFunction::centered(a.radius);
    phi.check(&grid).map_err(|e| CliError::config(e.to_string()))?;
    if a.epsilons.is_empty() || !a.epsilons.windows(2).all(|w| w[1] < w[0]) {
        return Err(CliError::config(format!(
            "epsilons must be non-empty and strictly decreasing, got {:?}",
            a.epsilons
        )));
    }
    Ok((grid, rho, spec, phi))
}

/// Smallest ratio between consecutive entries.
fn min_ratio(v: &[f64]) -> f64 {
    v.windows(2).map(|w| w[0] / w[1]).fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, Serialize)]
pub struct CommutatorRow {
    pub eps: f64,
    pub commutator: f64,
    pub j1_diag_l1: f64,
    pub j1_offdiag_l1: f64,
    pub j2_lhs: f64,
    pub j1_gap: f64,
    pub j2_gap: f64,
    pub scale: f64,
}

pub fn commutator_test(a: &FrozenArgs, tol: &Tolerances, dir: &Path) -> Result<Outcome, CliError> {
    let clock = Instant::now();
    let (grid, rho, spec, phi) = frozen_setup(a)?;
    if spec.f_family().is_none() {
        return Err(CliError::config(format!("kernel family {} has no comparison function f", a.family)));
    }
    let c = certify_assumption(&spec, 12.0, 200).c_best;
    let mut rows = Vec::new();
    let mut dominated = true;
    for &eps in &a.epsilons {
        let k = sample_kernel(&spec, eps, &grid).map_err(|e| CliError::config(e.to_string()))?;
        let lab = |e: nlch::limit_lab::LabError| CliError::Numerical(e.to_string());
        let comm = commutator_error(&rho, &phi, &k).map_err(lab)?;
        let j1 = j1_report(&rho, &k, c).map_err(lab)?;
        let j2 = j2_bound_check(&rho, &k, c).map_err(lab)?;
        let slack = tol.domination_slack;
        dominated &= j1.domination_gap <= slack * j1.domination_scale && j2.domination_gap <= slack * j2.domination_scale;
        rows.push(CommutatorRow {
            eps,
            commutator: comm,
            j1_diag_l1: j1.diag_l1_distance,
            j1_offdiag_l1: j1.offdiag_l1,
            j2_lhs: j2.lhs_norm,
            j1_gap: j1.domination_gap / j1.domination_scale,
            j2_gap: j2.domination_gap / j2.domination_scale,
            scale: j1.domination_scale,
        });
    }
    prepare_dir(dir)?;
    let path = dir.join("commutator.csv");
    let mut w = csv::Writer::from_path(&path).map_err(io(&path))?;
    for r in &rows {
        w.serialize(r).map_err(io(&path))?;
    }
    w.flush().map_err(io(&path))?;
    let col = |f: fn(&CommutatorRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let h = tol.halving_ratio;
    let mut monitors = Vec::new();
    for (name, v) in [
        ("commutator_ratio", col(|r| r.commutator)),
        ("j1_ratio", col(|r| r.j1_diag_l1)),
        ("j2_ratio", col(|r| r.j2_lhs)),
    ] {
        let m = min_ratio(&v);
        monitors.push(Monitor::new(name, m >= h, m, h, v.len() >= 2));
    }
    monitors.push(Monitor::new(
        "pointwise_domination",
        dominated,
        rows.iter().map(|r| r.j1_gap.max(r.j2_gap)).fold(f64::NEG_INFINITY, f64::max),
        tol.domination_slack,
        true,
    ));
    finish(
        dir,
        "commutator-test",
        None,
        &[],
        monitors,
        json!({ "C_best": c, "rows": rows }),
        clock.elapsed().as_secs_f64(),
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct D2Row {
    pub eps: f64,
    pub m: f64,
    pub i1a: f64,
    pub i1b: f64,
    pub i2a: f64,
    pub i2b: f64,
    pub i3a: f64,
    pub i3b: f64,
    pub remainder: f64,
    pub bound_shape: f64,
    pub ratio: f64,
    pub identity_gap: f64,
}

pub fn appendix_d2(a: &FrozenArgs, tol: &Tolerances, dir: &Path) -> Result<Outcome, CliError> {
    let clock = Instant::now();
    let (grid, rho, spec, phi) = frozen_setup(a)?;
    let mut rows = Vec::new();
    for &eps in &a.epsilons {
        let k = sample_kernel(&spec, eps, &grid).map_err(|e| CliError::config(e.to_string()))?;
        let d = d2_decomposition_test(&rho, &phi, &k).map_err(|e| CliError::config(e.to_string()))?;
        rows.push(D2Row {
            eps,
            m: d.m,
            i1a: d.i1a,
            i1b: d.i1b,
            i2a: d.i2a,
            i2b: d.i2b,
            i3a: d.i3a,
            i3b: d.i3b,
            remainder: d.remainder_norm,
            bound_shape: d.bound_value,
            ratio: d.remainder_norm / d.bound_value,
            identity_gap: if d.total_norm > 0.0 { d.identity_gap / d.total_norm } else { d.identity_gap },
        });
    }
    prepare_dir(dir)?;
    let path = dir.join("appendix_d2.csv");
    let mut w = csv::Writer::from_path(&path).map_err(io(&path))?;
    for r in &rows {
        w.serialize(r).map_err(io(&path))?;
    }
    w.flush().map_err(io(&path))?;
    let gap = rows.iter().map(|r| r.identity_gap).fold(0.0, f64::max);
    let decreasing = rows.windows(2).all(|w| w[1].remainder < w[0].remainder);
    let ratios: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
    let spread = ratios.iter().cloned().fold(0.0, f64::max) / ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let monitors = vec![
        Monitor::new("identity_exact", gap <= tol.identity, gap, tol.identity, true),
        Monitor::new("remainder_decreasing", decreasing, rows.len() as f64, 0.0, true),
        Monitor::new(
            "bound_ratio_spread",
            spread <= tol.bound_ratio_spread,
            spread,
            tol.bound_ratio_spread,
            true,
        ),
    ];
    finish(
        dir,
        "appendix-d2",
        None,
        &[],
        monitors,
        json!({ "rows": rows }),
        clock.elapsed().as_secs_f64(),
    )
}

pub fn truncation_level(eps: f64) -> Result<Value, CliError> {
    let t = choose_truncation_level(eps).map_err(|e| CliError::config(e.to_string()))?;
    Ok(json!({ "eps": t.eps, "M": t.m, "residual": t.residual }))
}

pub fn particles(cfg: &RunConfig, out: Option<&Path>) -> Result<Outcome, CliError> {
    let clock = Instant::now();
    let dir = out.unwrap_or(&cfg.output.dir).to_path_buf();
    let grid = grid_of(cfg)?;
    let p = cfg
        .particles
        .as_ref()
        .ok_or_else(|| CliError::config("`particles` needs a [particles] section"))?;
    let spec = KernelSpec::new(family(&p.family).map_err(CliError::config)?, grid.dim())
        .map_err(|e| CliError::config(e.to_string()))?;
    let perr = |e: nlch::particles::ParticleError| match e {
        nlch::particles::ParticleError::BlowUp { .. } | nlch::particles::ParticleError::NonFinite { .. } => {
            CliError::Numerical(e.to_string())
        }
        other => CliError::config(other.to_string()),
    };
    let w = Interaction::new(spec, p.scale).map_err(perr)?;
    let samples = sample_interaction(&w, &grid).map_err(perr)?;
    let state = ParticleState::sample_gaussian(grid.dim(), p.count, p.sigma, p.seed).map_err(perr)?;
    let mu0 = InitialDataSpec::GaussianBlob {
        sigma: p.sigma,
        mass: 1.0,
        center: vec![],
    }
    .generate(&grid)
    .map_err(|e| CliError::config(e.to_string()))?;
    prepare_dir(&dir)?;
    let resolved = write_resolved(&dir, cfg)?;
    let c0 = state.center_of_mass();
    let traj = simulate_particles(&w, state, cfg.solver.t_end, p.dt, cfg.solver.cadence).map_err(perr)?;
    let table = compare_to_pde(&traj, &w, &samples, &mu0, cfg.solver.scheme()).map_err(perr)?;
    if p.write_positions {
        let path = dir.join("positions.csv");
        let mut wr = csv::Writer::from_path(&path).map_err(io(&path))?;
        let mut header = vec!["step".to_string(), "t".into(), "particle".into()];
        header.extend((0..grid.dim()).map(|a| format!("x{a}")));
        wr.write_record(&header).map_err(io(&path))?;
        for s in &traj.snapshots {
            let step = (s.t / p.dt).round() as u64;
            for (i, x) in s.positions.iter().enumerate() {
                let mut row = vec![step.to_string(), num(s.t), i.to_string()];
                row.extend(x[..grid.dim()].iter().map(|v| num(*v)));
                wr.write_record(&row).map_err(io(&path))?;
            }
        }
        wr.flush().map_err(io(&path))?;
    }
    let path = dir.join("distances.csv");
    let mut wr = csv::Writer::from_path(&path).map_err(io(&path))?;
    for r in &table.rows {
        wr.serialize(r).map_err(io(&path))?;
    }
    wr.flush().map_err(io(&path))?;
    let c1 = traj.snapshots.last().map(|s| s.center_of_mass()).unwrap_or([0.0; MAX_DIM]);
    let drift = (0..MAX_DIM).map(|a| (c1[a] - c0[a]).abs()).fold(0.0, f64::max);
    let leak = table
        .rows
        .iter()
        .map(|r| (r.particle_mass - 1.0).abs())
        .fold(0.0, f64::max);
    let monitors = vec![
        Monitor::new("center_of_mass_drift", drift <= 1e-12, drift, 1e-12, true),
        Monitor::new("density_mass", leak <= 1e-8, leak, 1e-8, true),
    ];
    let details = json!({
        "steps": traj.steps,
        "bandwidth": table.bandwidth,
        "distances": table.rows,
        "max_l1": table.max_l1(),
    });
    finish(
        &dir,
        "particles",
        Some(&resolved),
        &[p.seed],
        monitors,
        details,
        clock.elapsed().as_secs_f64(),
    )
}
