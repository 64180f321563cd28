use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use nlch_cli::commands::{self, CliError, FrozenArgs, KernelCheckArgs, Outcome};
use nlch_cli::config::{parse_config, RunConfig, Tolerances};

/// Environment variable that sets the worker thread count.
const THREADS_ENV: &str = "NLCH_THREADS";

#[derive(Parser)]
#[command(name = "nlch", version, about = "Nonlocal Cahn-Hilliard solver and local-limit laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    config: PathBuf,
    /// Output directory; overrides [output].dir.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FrozenFlags {
    #[arg(long, default_value = "gaussian")]
    family: String,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, short)]
    n: Option<usize>,
    #[arg(long, default_value_t = 6.4)]
    length: f64,
    /// Width of the frozen Gaussian density.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    mass: Option<f64>,
    /// Support radius of the test function.
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    epsilons: Option<Vec<f64>>,
    #[arg(long, short, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Single-species run.
    Run(ConfigArgs),
    /// Epsilon sweep against the local reference.
    Sweep(ConfigArgs),
    /// Multi-species run.
    SystemRun(ConfigArgs),
    /// Certify a kernel against the comparison-function assumption.
    KernelCheck {
        #[arg(long)]
        family: String,
        #[arg(long)]
        f_family: Option<String>,
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, default_value_t = 12.0)]
        rmax: f64,
        #[arg(long, default_value_t = 200)]
        resolution: usize,
    },
    /// Frozen-field commutator and J1/J2 rates.
    CommutatorTest(FrozenFlags),
    /// Truncated decomposition table.
    AppendixD2(FrozenFlags),
    /// Solve eps^2 M sqrt(ln M) = 1 for M.
    TruncationLevel {
        #[arg(long)]
        epsilon: f64,
    },
    /// Particle system compared with the transport PDE.
    Particles(ConfigArgs),
}

fn load(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(parse_config(&text)?)
}

fn frozen(f: FrozenFlags, commutator: bool) -> (FrozenArgs, PathBuf) {
    // Defaults are the measured configurations where the rates are asymptotic.
    let (n, sigma, mass, radius, eps) = if commutator {
        (512, 0.7, 1.0, 2.5, vec![0.2, 0.1, 0.05])
    } else {
        (256, 0.4, 16.0, 2.0, vec![0.4, 0.2, 0.1])
    };
    let a = FrozenArgs {
        family: f.family,
        dim: f.dim,
        n: f.n.unwrap_or(n),
        length: f.length,
        sigma: f.sigma.unwrap_or(sigma),
        mass: f.mass.unwrap_or(mass),
        radius: f.radius.unwrap_or(radius),
        epsilons: f.epsilons.unwrap_or(eps),
    };
    (a, f.out)
}

fn report(o: &Outcome) {
    for m in &o.monitors {
        let tag = match (m.pass, m.hard) {
            (true, _) => "ok  ",
            (false, true) => "FAIL",
            (false, false) => "warn",
        };
        println!("{tag} {:<24} {:>12.4e}  (threshold {:.1e})", m.name, m.value, m.threshold);
    }
    if let Some(d) = &o.dir {
        println!("artifacts in {}", d.display());
    }
}

fn dispatch(cmd: Command) -> Result<i32, CliError> {
    let outcome = match cmd {
        Command::Run(a) => commands::run(&load(&a.config)?, a.out.as_deref())?,
        Command::Sweep(a) => commands::sweep(&load(&a.config)?, a.out.as_deref())?,
        Command::SystemRun(a) => commands::system_run(&load(&a.config)?, a.out.as_deref())?,
        Command::Particles(a) => commands::particles(&load(&a.config)?, a.out.as_deref())?,
        Command::KernelCheck {
            family,
            f_family,
            dim,
            rmax,
            resolution,
        } => {
            let (json, o) = commands::kernel_check(&KernelCheckArgs {
                family,
                f_family,
                dim,
                rmax,
                resolution,
            })?;
            println!("{}", serde_json::to_string_pretty(&json).expect("report serializes"));
            return Ok(o.exit_code());
        }
        Command::CommutatorTest(f) => {
            let (a, out) = frozen(f, true);
            commands::commutator_test(&a, &Tolerances::default(), &out)?
        }
        Command::AppendixD2(f) => {
            let (a, out) = frozen(f, false);
            commands::appendix_d2(&a, &Tolerances::default(), &out)?
        }
        Command::TruncationLevel { epsilon } => {
            let v = commands::truncation_level(epsilon)?;
            println!("{}", v["M"]);
            return Ok(0);
        }
    };
    report(&outcome);
    Ok(outcome.exit_code())
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| CliError::Config(nlch_cli::config::ConfigErrors(vec![format!("{THREADS_ENV}={v} is not a thread count")])))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Io(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = init_threads().and_then(|_| dispatch(cli.command)).unwrap_or_else(|e| {
        eprintln!("error: {e}");
        e.exit_code()
    });
    ExitCode::from(code as u8)
}
