//! TOML run configuration.
//!
//! Parsing collects every problem it can find (unknown keys, ranges, guards)
//! before giving up, so a bad file is fixed in one pass.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::PathBuf;

use nlch::fd::Reconstruction;
use nlch::grid::Grid;
use nlch::kernels::{KernelFamily, KernelSpec, MIN_EPS_OVER_H};
use nlch::solver::{DtMode, InitialDataSpec, SchemeParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub grid: GridConfig,
    /// Absent for the local equation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelConfig>,
    pub solver: SolverConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialDataSpec>,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<SystemSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub particles: Option<ParticleSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub dim: usize,
    pub n: usize,
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub family: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f_family: Option<String>,
    pub epsilon: f64,
    /// Resolution guard `epsilon >= min_eps_over_h * h`.
    #[serde(default = "default_min_ratio")]
    pub min_eps_over_h: f64,
}

fn default_min_ratio() -> f64 {
    MIN_EPS_OVER_H
}

/// `"auto"` or a fixed step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DtSetting {
    Fixed(f64),
    Named(AutoTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoTag {
    Auto,
}

impl Default for DtSetting {
    fn default() -> Self {
        Self::Named(AutoTag::Auto)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub t_end: f64,
    #[serde(default)]
    pub dt: DtSetting,
    #[serde(default = "default_cfl")]
    pub cfl_safety: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt_cap: Option<f64>,
    #[serde(default)]
    pub stabilize: bool,
    #[serde(default)]
    pub reconstruction: Reconstruction,
    #[serde(default = "yes")]
    pub positivity_limiter: bool,
    /// Snapshot interval; only the endpoints when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cadence: Option<f64>,
}

fn default_cfl() -> f64 {
    0.9
}

fn yes() -> bool {
    true
}

impl SolverConfig {
    pub fn scheme(&self) -> SchemeParams {
        SchemeParams {
            cfl_safety: self.cfl_safety,
            dt: match self.dt {
                DtSetting::Fixed(v) => DtMode::Fixed(v),
                DtSetting::Named(AutoTag::Auto) => DtMode::Auto,
            },
            dt_cap: self.dt_cap.unwrap_or(f64::INFINITY),
            stabilize: self.stabilize,
            reconstruction: self.reconstruction,
            positivity_limiter: self.positivity_limiter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "yes")]
    pub snapshots: bool,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            snapshots: true,
        }
    }
}

/// Every numeric acceptance threshold, overridable per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    /// Relative mass drift over a run.
    pub mass_drift: f64,
    /// `min rho >= -positivity * max rho` at every record.
    pub positivity: f64,
    /// Normalized balance residuals.
    pub residual: f64,
    /// Relative slack in `(int |grad rho|)^2 <= 4 mass int |grad sqrt rho|^2`.
    pub cauchy_schwarz: f64,
    pub sweep_min_slope: f64,
    pub halving_ratio: f64,
    pub domination_slack: f64,
    /// Relative gap allowed in exact discrete identities.
    pub identity: f64,
    pub bound_ratio_spread: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            mass_drift: 1e-12,
            positivity: 1e-12,
            residual: nlch::diagnostics::DEFAULT_RESIDUAL_TOL,
            cauchy_schwarz: 1e-10,
            sweep_min_slope: 1.0,
            halving_ratio: 1.8,
            domination_slack: 1e-10,
            identity: 1e-12,
            bound_ratio_spread: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSection {
    pub epsilons: Vec<f64>,
    pub cadence: f64,
    /// Scheme for the local reference; inherits `[solver]` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_dt: Option<DtSetting>,
    #[serde(default = "yes")]
    pub reference_stabilize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SignSetting {
    #[default]
    Dissipative,
    Reversed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSection {
    pub species: usize,
    /// Row-major `A`; the coupling is `K = A A^T`.
    pub matrix: Vec<f64>,
    /// One family per species; all share `[kernel].epsilon`.
    pub families: Vec<String>,
    #[serde(default)]
    pub sign: SignSetting,
    pub initial: Vec<InitialDataSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleSection {
    pub count: usize,
    pub seed: u64,
    /// Particles start as draws from `N(0, sigma^2 I)`.
    pub sigma: f64,
    pub family: String,
    /// Interaction scale `delta` of `W`.
    pub scale: f64,
    pub dt: f64,
    #[serde(default = "yes")]
    pub write_positions: bool,
}

/// All problems found in one document.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors(pub Vec<String>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, e) in self.0.iter().enumerate() {
            if k > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigErrors> {
    let mut unknown = Vec::new();
    let de = toml::Deserializer::parse(text).map_err(|e| ConfigErrors(vec![e.to_string().trim_end().to_string()]))?;
    let parsed: Result<RunConfig, _> = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()));
    let mut errors: Vec<String> = unknown.iter().map(|p| format!("unknown key `{p}`")).collect();
    match parsed {
        Ok(cfg) => {
            errors.extend(validate(&cfg));
            if errors.is_empty() {
                Ok(cfg)
            } else {
                Err(ConfigErrors(errors))
            }
        }
        Err(e) => {
            errors.push(e.to_string().trim_end().to_string());
            Err(ConfigErrors(errors))
        }
    }
}

pub fn to_toml(cfg: &RunConfig) -> String {
    toml::to_string(cfg).expect("configuration serializes")
}

fn positive(errors: &mut Vec<String>, name: &str, v: f64) {
    if !(v > 0.0 && v.is_finite()) {
        errors.push(format!("{name} must be positive and finite, got {v}"));
    }
}

pub fn family(name: &str) -> Result<KernelFamily, String> {
    KernelFamily::parse(name).map_err(|e| e.to_string())
}

/// Range checks and cross-field guards.
pub fn validate(cfg: &RunConfig) -> Vec<String> {
    let mut e = Vec::new();
    let g = &cfg.grid;
    let grid = match Grid::new(g.dim, g.n, g.length) {
        Ok(grid) => Some(grid),
        Err(err) => {
            e.push(format!("grid: {err}"));
            None
        }
    };
    if !g.n.is_power_of_two() {
        e.push(format!("grid.n must be a power of two, got {}", g.n));
    }
    let s = &cfg.solver;
    if !(s.t_end >= 0.0 && s.t_end.is_finite()) {
        e.push(format!("solver.t_end must be nonnegative, got {}", s.t_end));
    }
    if let DtSetting::Fixed(dt) = s.dt {
        positive(&mut e, "solver.dt", dt);
    }
    if !(s.cfl_safety > 0.0 && s.cfl_safety <= 1.0) {
        e.push(format!("solver.cfl_safety must lie in (0, 1], got {}", s.cfl_safety));
    }
    if let Some(c) = s.dt_cap {
        positive(&mut e, "solver.dt_cap", c);
    }
    if let Some(c) = s.cadence {
        positive(&mut e, "solver.cadence", c);
    }
    if let Some(k) = &cfg.kernel {
        let fam = family(&k.family);
        if let Err(err) = &fam {
            e.push(format!("kernel.family: {err}"));
        }
        if let Some(f) = &k.f_family {
            if let Err(err) = family(f) {
                e.push(format!("kernel.f_family: {err}"));
            }
        }
        positive(&mut e, "kernel.epsilon", k.epsilon);
        positive(&mut e, "kernel.min_eps_over_h", k.min_eps_over_h);
        if let Some(grid) = &grid {
            let min = k.min_eps_over_h * grid.h();
            if k.epsilon < min * (1.0 - 1e-12) {
                e.push(format!(
                    "resolution guard: kernel.epsilon = {} < {} h = {min} (lower kernel.min_eps_over_h to override)",
                    k.epsilon, k.min_eps_over_h
                ));
            }
            if grid.len() * (1.0 + 1e-9) < 8.0 * k.epsilon {
                e.push(format!(
                    "domain guard: grid.length = {} < 8 epsilon = {}",
                    grid.len(),
                    8.0 * k.epsilon
                ));
            }
            if let Ok(fam) = fam {
                if let Ok(spec) = KernelSpec::new(fam, grid.dim()) {
                    if let Some(sup) = spec.support() {
                        if sup * k.epsilon > grid.len() / 4.0 {
                            e.push(format!(
                                "support guard: kernel support {} exceeds L/4 = {}",
                                sup * k.epsilon,
                                grid.len() / 4.0
                            ));
                        }
                    }
                }
            }
        }
    }
    let t = &cfg.tolerances;
    for (name, v) in [
        ("mass_drift", t.mass_drift),
        ("positivity", t.positivity),
        ("residual", t.residual),
        ("cauchy_schwarz", t.cauchy_schwarz),
        ("halving_ratio", t.halving_ratio),
        ("domination_slack", t.domination_slack),
        ("identity", t.identity),
        ("bound_ratio_spread", t.bound_ratio_spread),
    ] {
        positive(&mut e, &format!("tolerances.{name}"), v);
    }
    if !t.sweep_min_slope.is_finite() {
        e.push("tolerances.sweep_min_slope must be finite".into());
    }
    if let Some(sw) = &cfg.sweep {
        if cfg.kernel.is_none() {
            e.push("[sweep] needs a [kernel] section for the family".into());
        }
        if sw.epsilons.is_empty() || !sw.epsilons.windows(2).all(|w| w[1] < w[0]) {
            e.push(format!("sweep.epsilons must be non-empty and strictly decreasing, got {:?}", sw.epsilons));
        }
        positive(&mut e, "sweep.cadence", sw.cadence);
        if let (Some(grid), Some(k)) = (&grid, &cfg.kernel) {
            for &eps in &sw.epsilons {
                if eps < k.min_eps_over_h * grid.h() * (1.0 - 1e-12) {
                    e.push(format!(
                        "resolution guard: sweep epsilon {eps} < {} h = {}",
                        k.min_eps_over_h,
                        k.min_eps_over_h * grid.h()
                    ));
                }
                if grid.len() * (1.0 + 1e-9) < 8.0 * eps {
                    e.push(format!("domain guard: grid.length < 8 epsilon for sweep epsilon {eps}"));
                }
            }
        }
        if let Some(DtSetting::Fixed(dt)) = sw.reference_dt {
            positive(&mut e, "sweep.reference_dt", dt);
        }
    }
    if let Some(sys) = &cfg.system {
        if cfg.kernel.is_none() {
            e.push("[system] needs a [kernel] section for epsilon".into());
        }
        let n = sys.species;
        if n == 0 {
            e.push("system.species must be at least 1".into());
        }
        if sys.matrix.len() != n * n {
            e.push(format!("system.matrix needs {} entries, got {}", n * n, sys.matrix.len()));
        }
        if sys.families.len() != n {
            e.push(format!("system.families needs {n} entries, got {}", sys.families.len()));
        }
        for f in &sys.families {
            if let Err(err) = family(f) {
                e.push(format!("system.families: {err}"));
            }
        }
        if sys.initial.len() != n {
            e.push(format!("system.initial needs {n} entries, got {}", sys.initial.len()));
        }
    }
    if let Some(p) = &cfg.particles {
        if p.count == 0 {
            e.push("particles.count must be at least 1".into());
        }
        positive(&mut e, "particles.sigma", p.sigma);
        positive(&mut e, "particles.scale", p.scale);
        positive(&mut e, "particles.dt", p.dt);
        if let Err(err) = family(&p.family) {
            e.push(format!("particles.family: {err}"));
        }
    }
    e
}
