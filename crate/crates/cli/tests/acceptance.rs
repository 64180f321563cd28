//! Acceptance suite. One PASS/FAIL line per criterion.
//!
//! Run everything with `cargo test --test acceptance`, or pick criteria by
//! number: `cargo test --test acceptance -- 1 3 7`.
//!
//! A criterion whose failing checks are all listed in `KNOWN_UNATTAINABLE`
//! prints FAIL but does not fail the target; any other failure does.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nlch::diagnostics::{energy_dissipation_residual, entropy_dissipation_residual, refinement_ratio, DiagnosticsRecord};
use nlch::fd::Reconstruction;
use nlch::grid::{Grid, MAX_DIM};
use nlch::kernels::{
    certify_assumption, check_decay, decay_passes, moment_identity_check, sample_kernel, self_convolution,
    KernelFamily, KernelSpec,
};
use nlch::limit_lab::choose_truncation_level;
use nlch::particles::{simulate_particles, Interaction, ParticleState};
use nlch::solver::{InitialDataSpec, SchemeParams, Solver};
use nlch::system::{random_fields, Coupling, CouplingMatrix, DivergenceSign, SystemSolver};
use nlch_cli::commands::{self, FrozenArgs, Monitor, Outcome};
use nlch_cli::config::{parse_config, DtSetting, RunConfig, Tolerances};

/// Checks that cannot pass as stated, with the reason printed next to them.
const KNOWN_UNATTAINABLE: &[(&str, &str)] = &[
    (
        "gaussian_self_convolution_stated_constant",
        "w*w for the unit Gaussian is (4 pi)^{-d/2} e^{-|x|^2/4}; the stated prefactor (2 pi)^{-d/2} is off by 2^{d/2}",
    ),
    (
        "bump_moment_identity",
        "exp(-1/(1-r^2)) has steep edge gradients; with 8 points per radius the quadrature error is 5e-3 and only settles below 1e-3 near eps = 16h",
    ),
];

struct Check {
    name: String,
    pass: bool,
    detail: String,
}

fn check(name: &str, pass: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.to_string(),
        pass,
        detail: detail.into(),
    }
}

fn from_monitor(m: &Monitor) -> Check {
    check(&m.name, m.pass, format!("{:.3e} vs {:.1e}", m.value, m.threshold))
}

fn monitors(o: &Outcome, names: &[&str]) -> Vec<Check> {
    names
        .iter()
        .map(|n| match o.monitors.iter().find(|m| m.name == *n) {
            Some(m) => from_monitor(m),
            None => check(n, false, "monitor missing"),
        })
        .collect()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> RunConfig {
    let text = std::fs::read_to_string(configs().join(name)).expect("config readable");
    parse_config(&text).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn read_records(dir: &Path) -> Vec<DiagnosticsRecord> {
    let mut r = csv::Reader::from_path(dir.join("diagnostics.csv")).expect("diagnostics.csv");
    r.deserialize().map(|x| x.expect("record")).collect()
}

fn max_rel_gap(a: &[f64], b: &[f64]) -> f64 {
    let s = a.iter().map(|v| v.abs()).fold(0.0, f64::max);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / s
}

// 1: conservation and positivity.
fn criterion_1() -> Vec<Check> {
    let cfg = load("blob.toml");
    let dir = tempfile::tempdir().unwrap();
    let o = commands::run(&cfg, Some(dir.path())).expect("blob run");
    let recs = read_records(dir.path());
    let mut out = monitors(&o, &["mass_drift", "positivity"]);
    out.push(check("records_every_step", recs.len() > 400, format!("{} records", recs.len())));
    out
}

// 2: dissipation balances and their first-order convergence in dt.
fn criterion_2() -> Vec<Check> {
    let coarse = load("blob.toml");
    let mut fine = coarse.clone();
    let DtSetting::Fixed(dt) = coarse.solver.dt else {
        panic!("blob.toml must use a fixed step");
    };
    fine.solver.dt = DtSetting::Fixed(dt / 2.0);
    let tol = coarse.tolerances.residual;
    let run = |cfg: &RunConfig| {
        let dir = tempfile::tempdir().unwrap();
        commands::run(cfg, Some(dir.path())).expect("blob run");
        read_records(dir.path())
    };
    let (rc, rf) = (run(&coarse), run(&fine));
    let mut out = Vec::new();
    for (name, f) in [
        ("energy", energy_dissipation_residual as fn(_, _, _) -> _),
        ("entropy", entropy_dissipation_residual),
    ] {
        let c = f(&rc, None, tol).unwrap();
        let h = f(&rf, None, tol).unwrap();
        out.push(check(
            &format!("{name}_residual"),
            c.residual.abs() <= tol && h.residual.abs() <= tol,
            format!("{:.2e} / {:.2e}", c.residual.abs(), h.residual.abs()),
        ));
        let ratio = refinement_ratio(&c, &h);
        out.push(check(
            &format!("{name}_halving_ratio"),
            (1.5..=3.0).contains(&ratio),
            format!("{ratio:.3}"),
        ));
        let inc = c.max_increase.max(h.max_increase);
        out.push(check(
            &format!("{name}_non_increasing"),
            inc <= 10.0 * tol,
            format!("max increase {inc:.2e}"),
        ));
    }
    out
}

// 3: kernel certification, decay, moment identity, Gaussian self-convolution.
fn criterion_3() -> Vec<Check> {
    let mut out = Vec::new();
    let radii: Vec<f64> = (0..6).map(|k| 2f64.powi(k)).collect();
    for fam in [KernelFamily::Gaussian, KernelFamily::Bump, KernelFamily::CarrilloExponential] {
        let name = fam.name().to_string();
        let spec = KernelSpec::new(fam, 2).unwrap();
        let coarse = certify_assumption(&spec, 12.0, 200);
        let fine = certify_assumption(&spec, 12.0, 400);
        let stable = (coarse.c_best / fine.c_best - 1.0).abs() <= 0.05;
        out.push(check(
            &format!("{name}_certified"),
            coarse.pass && fine.pass && coarse.c_best.is_finite() && stable,
            format!("C_best {:.4} / {:.4}", coarse.c_best, fine.c_best),
        ));
        out.push(check(&format!("{name}_decay"), decay_passes(&check_decay(&spec, &radii)), ""));
        // h = eps/8.
        let g = Grid::new(2, 256, 8.0).unwrap();
        let s = sample_kernel(&spec, 0.25, &g).unwrap();
        let worst = (0..2)
            .flat_map(|i| (0..2).map(move |j| (i, j)))
            .map(|(i, j)| (moment_identity_check(&s, i, j) + if i == j { 1.0 } else { 0.0 }).abs())
            .fold(0.0, f64::max);
        out.push(check(&format!("{name}_moment_identity"), worst <= 1e-3, format!("{worst:.2e} at h = eps/8")));
    }
    let g = Grid::new(2, 512, 8.0).unwrap();
    let s = sample_kernel(&KernelSpec::new(KernelFamily::Bump, 2).unwrap(), 0.25, &g).unwrap();
    let m = (moment_identity_check(&s, 0, 0) + 1.0).abs();
    out.push(check("bump_moment_identity_fine", m <= 1e-3, format!("{m:.2e} at h = eps/16")));
    let g = Grid::new(2, 128, 16.0).unwrap();
    let s = self_convolution(&KernelSpec::new(KernelFamily::Gaussian, 2).unwrap(), 1.0, &g).unwrap();
    let gap = |c: f64| {
        (0..g.size())
            .map(|k| {
                let x = g.origin_offset(k);
                let r2 = x[0] * x[0] + x[1] * x[1];
                (s.omega.values()[k] - c * (-r2 / 4.0).exp()).abs()
            })
            .fold(0.0, f64::max)
    };
    let stated = gap(1.0 / (2.0 * PI));
    let exact = gap(1.0 / (4.0 * PI));
    out.push(check(
        "gaussian_self_convolution_stated_constant",
        stated <= 1e-4,
        format!("{stated:.3e} (against (4 pi)^-1: {exact:.1e})"),
    ));
    out
}

// 4: epsilon sweep against the local equation.
fn criterion_4() -> Vec<Check> {
    let cfg = load("sweep.toml");
    let dir = tempfile::tempdir().unwrap();
    let o = commands::sweep(&cfg, Some(dir.path())).expect("sweep");
    let table = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let sup: Vec<String> = table.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().to_string()).collect();
    let mut out = monitors(&o, &["strictly_decreasing", "slope"]);
    out[0].detail = format!("sup_t L1 = [{}]", sup.join(", "));
    out
}

// 5: frozen-field commutator, J1 and J2.
fn criterion_5() -> Vec<Check> {
    let a = FrozenArgs {
        family: "gaussian".into(),
        dim: 2,
        n: 512,
        length: 6.4,
        sigma: 0.7,
        mass: 1.0,
        radius: 2.5,
        epsilons: vec![0.2, 0.1, 0.05],
    };
    let dir = tempfile::tempdir().unwrap();
    let o = commands::commutator_test(&a, &Tolerances::default(), dir.path()).expect("commutator-test");
    monitors(&o, &["commutator_ratio", "j1_ratio", "j2_ratio", "pointwise_domination"])
}

fn random_coupling(n: usize, rng: &mut ChaCha8Rng) -> CouplingMatrix {
    // Diagonal shift keeps A well away from singular.
    let a: Vec<f64> = (0..n * n)
        .map(|k| rng.random_range(-1.0..1.0) + if k % (n + 1) == 0 { 2.0 } else { 0.0 })
        .collect();
    CouplingMatrix::from_row_major(n, &a).unwrap()
}

// 6: species coupling.
fn criterion_6() -> Vec<Check> {
    let g = Grid::new(2, 64, 8.0).unwrap();
    let fams = [KernelFamily::Gaussian, KernelFamily::Bump, KernelFamily::Gaussian];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for set in 0..20u64 {
        let n = 2 + (set as usize % 2);
        let ks = (0..n)
            .map(|i| sample_kernel(&KernelSpec::new(fams[i].clone(), 2).unwrap(), 0.5, &g).unwrap())
            .collect();
        let c = Coupling::new(random_coupling(n, &mut rng), ks, DivergenceSign::Dissipative, Reconstruction::default())
            .unwrap();
        let sides = c.sandwich_identity(&random_fields(&g, n, 100 + set)).unwrap();
        worst = worst.max(sides.relative_gap());
    }
    let mut out = vec![check("sandwich_identity", worst <= 1e-10, format!("{worst:.2e} over 20 sets"))];

    let params = SchemeParams::default();
    let k = sample_kernel(&KernelSpec::new(KernelFamily::Gaussian, 2).unwrap(), 0.5, &g).unwrap();
    let solo = Solver::nonlocal(k.clone(), params.clone());
    let m = CouplingMatrix::from_row_major(1, &[1.0]).unwrap();
    let sys = SystemSolver::new(
        Coupling::new(m, vec![k], DivergenceSign::Dissipative, params.reconstruction).unwrap(),
        params,
    );
    let init = InitialDataSpec::GaussianBlob {
        sigma: 0.4,
        mass: 1.0,
        center: vec![0.1, -0.2],
    };
    let mut a = solo.initial_state(&init).unwrap();
    let mut b = sys.initial_state(&[init]).unwrap();
    let mut gap = 0.0f64;
    for _ in 0..100 {
        a = solo.step(&a, 1.0).unwrap().0;
        b = sys.step(&b, 1.0).unwrap().0;
        gap = gap.max(max_rel_gap(a.rho.values(), b.rho[0].values())).max((a.t - b.t).abs());
    }
    out.push(check("single_species_matches_solver", gap <= 1e-12, format!("{gap:.1e} over 100 steps")));

    let dir = tempfile::tempdir().unwrap();
    let o = commands::system_run(&load("system.toml"), Some(dir.path())).expect("system-run");
    out.extend(monitors(&o, &["mass_drift", "energy_residual", "entropy_residual"]));
    out
}

/// Newton on `g(M) = ln ln M + 2 ln M + 4 ln eps`, monotone for `M > 1`.
fn truncation_oracle(eps: f64) -> f64 {
    let mut m = 2.0f64;
    for _ in 0..200 {
        let g = m.ln().ln() + 2.0 * m.ln() + 4.0 * eps.ln();
        let dg = 1.0 / (m * m.ln()) + 2.0 / m;
        let next = (m - g / dg).max(1.0 + 1e-9);
        if (next - m).abs() <= 1e-15 * m {
            break;
        }
        m = next;
    }
    m
}

// 7: truncated decomposition.
fn criterion_7() -> Vec<Check> {
    let mut out = Vec::new();
    for (eps, stated, rel) in [(1.0, 1.5315, 1e-4), (0.5, 3.56, 1e-2)] {
        let t = choose_truncation_level(eps).unwrap();
        let oracle = truncation_oracle(eps);
        out.push(check(
            &format!("truncation_eps_{eps}"),
            t.residual.abs() <= 1e-10 && (t.m / oracle - 1.0).abs() <= 1e-10 && (t.m / stated - 1.0).abs() <= rel,
            format!("M {:.5} oracle {:.5} residual {:.1e}", t.m, oracle, t.residual),
        ));
    }
    let a = FrozenArgs {
        family: "gaussian".into(),
        dim: 2,
        n: 256,
        length: 6.4,
        sigma: 0.4,
        mass: 16.0,
        radius: 2.0,
        epsilons: vec![0.4, 0.2, 0.1],
    };
    let dir = tempfile::tempdir().unwrap();
    let o = commands::appendix_d2(&a, &Tolerances::default(), dir.path()).expect("appendix-d2");
    out.extend(monitors(&o, &["identity_exact", "remainder_decreasing", "bound_ratio_spread"]));
    out
}

// 8: particles.
fn criterion_8() -> Vec<Check> {
    // Two particles on an axis: the separation s obeys s' = s W(s) for the
    // unit Gaussian W in the plane.
    let w = Interaction::new(KernelSpec::new(KernelFamily::Gaussian, 2).unwrap(), 1.0).unwrap();
    let at = |x: f64| {
        let mut p = [0.0; MAX_DIM];
        p[0] = x;
        p
    };
    let s = ParticleState::new(2, vec![at(0.2), at(-0.3)]).unwrap();
    let tr = simulate_particles(&w, s, 1.0, 1e-3, None).unwrap();
    let x = &tr.snapshots.last().unwrap().positions;
    let f = |s: f64| s * (-0.5 * s * s).exp() / (2.0 * PI);
    let mut want = 0.5;
    let dt = 1e-5;
    for _ in 0..100_000 {
        want += dt * f(want + 0.5 * dt * f(want));
    }
    let sep = x[0][0] - x[1][0];
    let mut out = vec![check(
        "two_particle_separation",
        (sep - want).abs() <= 1e-6,
        format!("{:.1e}", (sep - want).abs()),
    )];

    let small = load("particles.toml");
    let mut large = small.clone();
    large.particles.as_mut().unwrap().count = 10_000;
    let mut dists = Vec::new();
    for cfg in [&small, &large] {
        let dir = tempfile::tempdir().unwrap();
        let o = commands::particles(cfg, Some(dir.path())).expect("particles");
        let mut c = from_monitor(o.monitors.iter().find(|m| m.name == "center_of_mass_drift").unwrap());
        c.name = format!("center_of_mass_drift_n{}", cfg.particles.as_ref().unwrap().count);
        out.push(c);
        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
        dists.push(summary["details"]["max_l1"].as_f64().unwrap());
    }
    out.push(check(
        "distance_shrinks_with_n",
        dists[1] < dists[0],
        format!("N=1e3 {:.4}, N=1e4 {:.4}", dists[0], dists[1]),
    ));
    out
}

// 9: byte-identical reruns through the binary.
fn criterion_9() -> Vec<Check> {
    let bin = env!("CARGO_BIN_EXE_nlch");
    let mut out = Vec::new();
    for (cmd, cfg, files) in [
        ("run", "blob.toml", &["diagnostics.csv", "summary.json"][..]),
        ("system-run", "system.toml", &["system_diagnostics.csv", "summary.json"][..]),
        ("particles", "particles.toml", &["distances.csv", "positions.csv", "summary.json"][..]),
    ] {
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        let mut ok = true;
        for d in &dirs {
            let status = Command::new(bin)
                .args([cmd, configs().join(cfg).to_str().unwrap(), "--out", d.path().to_str().unwrap()])
                .env("NLCH_THREADS", "2")
                .output()
                .expect("binary runs")
                .status;
            ok &= status.success();
        }
        let same = files.iter().all(|f| {
            let a = std::fs::read(dirs[0].path().join(f)).unwrap_or_default();
            let b = std::fs::read(dirs[1].path().join(f)).unwrap_or(vec![1]);
            a == b
        });
        out.push(check(&format!("{cmd}_reproducible"), ok && same, files.join(", ")));
    }
    out
}

type Criterion = (u32, &'static str, f64, fn() -> Vec<Check>);

const CRITERIA: &[Criterion] = &[
    (1, "conservation and positivity", 120.0, criterion_1),
    (2, "dissipation structure", 300.0, criterion_2),
    (3, "kernel certification", 60.0, criterion_3),
    (4, "epsilon limit", 1800.0, criterion_4),
    (5, "commutator mechanism", 180.0, criterion_5),
    (6, "species system", 300.0, criterion_6),
    (7, "truncated decomposition", 180.0, criterion_7),
    (8, "particles", 300.0, criterion_8),
    (9, "reproducibility", f64::INFINITY, criterion_9),
];

fn main() {
    let picked: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let known: BTreeSet<&str> = KNOWN_UNATTAINABLE.iter().map(|k| k.0).collect();
    let mut unexpected = Vec::new();
    for &(id, title, budget, f) in CRITERIA {
        if !picked.is_empty() && !picked.contains(&id) {
            continue;
        }
        let clock = Instant::now();
        let mut checks = f();
        let secs = clock.elapsed().as_secs_f64();
        checks.push(check("runtime", secs <= budget, format!("{secs:.1} s of {budget} s")));
        let failed: Vec<&Check> = checks.iter().filter(|c| !c.pass).collect();
        let verdict = if failed.is_empty() { "PASS" } else { "FAIL" };
        println!("{verdict} criterion {id}: {title} ({secs:.1} s)");
        for c in &checks {
            let mark = if c.pass { "ok" } else { "FAILED" };
            println!("    {mark:<6} {:<44} {}", c.name, c.detail);
            if !c.pass {
                if let Some((_, why)) = KNOWN_UNATTAINABLE.iter().find(|k| k.0 == c.name) {
                    println!("           known unattainable: {why}");
                }
            }
        }
        unexpected.extend(failed.iter().filter(|c| !known.contains(c.name.as_str())).map(|c| format!("{id}:{}", c.name)));
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {}", unexpected.join(", "));
        std::process::exit(1);
    }
}
