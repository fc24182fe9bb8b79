//! Command-line front end: argument parsing, run orchestration and artifact
//! emission.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::analytic::{solve_radial, RadialProblem};
use crate::checkpoint::{self, Sidecar};
use crate::engine::{stabilize, SandpileState, Schedule, ScheduleKind, StabilizeOptions, DEFAULT_MAX_TOPPLINGS};
use crate::error::{Result, SandpileError};
use crate::lattice::Site;
use crate::render::render_image;
use crate::verify::{calibrate_f, verify_state, CalibrationBudget};

/// Environment variable consulted for the worker count when `--threads` is
/// absent.
pub const THREADS_ENV: &str = "SANDPILE_THREADS";

/// Process exit statuses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    CheckFailed = 1,
    Usage = 2,
    NonConvergence = 3,
}

impl Exit {
    pub fn of_error(e: &SandpileError) -> Exit {
        match e {
            SandpileError::InvalidConfig(_)
            | SandpileError::Parse(_)
            | SandpileError::Domain(_)
            | SandpileError::NotApplicable(_) => Exit::Usage,
            SandpileError::NonConvergence { .. } => Exit::NonConvergence,
            SandpileError::Resource(_)
            | SandpileError::Bracket { .. }
            | SandpileError::Numerical(_)
            | SandpileError::Io { .. } => Exit::CheckFailed,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "sandpile", version, about = "Divisible sandpile with an odometer cutoff on Z^d")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stabilize an initial configuration and write the requested artifacts.
    Simulate(SimulateArgs),
    /// Solve the radial free-boundary problem and print its coefficients.
    Radial(RadialArgs),
    /// Check a stored run and print a JSON report.
    Verify(VerifyArgs),
    /// Search the smallest mass n(m) whose rescaled odometer is within
    /// tolerance of the radial profile.
    Calibrate(CalibrateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, ValueEnum)]
pub enum Emit {
    /// `<out>.ppm`
    Image,
    /// `<out>.csv`
    Csv,
    /// `<out>.json`
    Json,
    /// `<out>.report.json`
    Report,
}

/// `x1,...,xd:mass`
pub fn parse_source(text: &str) -> std::result::Result<(Site, f64), String> {
    let (coords, mass) = text.rsplit_once(':').ok_or_else(|| format!("expected x,y[,z]:mass, got `{text}`"))?;
    let coords = coords
        .split(',')
        .map(|c| c.trim().parse::<i64>().map_err(|e| format!("bad coordinate `{c}`: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mass = mass.trim().parse::<f64>().map_err(|e| format!("bad mass `{mass}`: {e}"))?;
    Ok((Site::new(coords), mass))
}

fn parse_schedule(text: &str) -> std::result::Result<ScheduleKind, String> {
    ScheduleKind::from_str(text).map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    /// Point mass `x,y[,z]:mass`; repeat for several sources.
    #[arg(long = "source", required = true, allow_hyphen_values = true, value_parser = parse_source)]
    pub sources: Vec<(Site, f64)>,
    /// Threshold m.
    #[arg(long)]
    pub threshold: f64,
    /// Stop once every excess is at most this [default: 1e-12 n].
    #[arg(long)]
    pub eps_stop: Option<f64>,
    /// Toppling order: sweep, random or priority.
    #[arg(long, default_value = "sweep", value_parser = parse_schedule)]
    pub schedule: ScheduleKind,
    /// Seed of the random schedule.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output prefix.
    #[arg(long, default_value = "sandpile")]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "csv,json")]
    pub emit: Vec<Emit>,
    /// Worker threads [default: $SANDPILE_THREADS, else all cores].
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_MAX_TOPPLINGS)]
    pub max_topplings: u64,
    /// Topple only, without the block relaxation steps.
    #[arg(long)]
    pub no_block: bool,
}

#[derive(Debug, Args)]
pub struct RadialArgs {
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    /// Threshold m; sets lambda = 2dm, A = 2d, k = 1/m unless overridden.
    #[arg(long)]
    pub threshold: f64,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub amplitude: Option<f64>,
    #[arg(long)]
    pub k: Option<f64>,
    #[arg(long, default_value_t = 1e-13)]
    pub tol: f64,
    /// Write the JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Prefix of `<prefix>.csv` and `<prefix>.json` written by `simulate`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    /// Increasing thresholds, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub threshold: Vec<f64>,
    /// Exclusion radius [default: 1/m].
    #[arg(long)]
    pub rho: Option<f64>,
    /// Accepted sup error [default: 1/m].
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long, default_value_t = 64.0)]
    pub n_start: f64,
    #[arg(long, default_value_t = 1e6)]
    pub n_max: f64,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Validated parameters of a `simulate` run.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub d: usize,
    pub sources: Vec<(Site, f64)>,
    pub m: f64,
    pub schedule: Schedule,
    pub eps_stop: Option<f64>,
    pub out_prefix: PathBuf,
    pub emit: Vec<Emit>,
    pub threads: Option<usize>,
    pub max_topplings: u64,
    pub block: bool,
}

/// Worker count from the flag, else the environment, else `None`.
pub fn resolve_threads(flag: Option<usize>, env: Option<&str>) -> Result<Option<usize>> {
    let threads = match (flag, env) {
        (Some(t), _) => Some(t),
        (None, Some(v)) => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| SandpileError::InvalidConfig(format!("{THREADS_ENV}={v} is not a thread count")))?,
        ),
        (None, None) => None,
    };
    if threads == Some(0) {
        return Err(SandpileError::InvalidConfig("thread count must be positive".into()));
    }
    Ok(threads)
}

fn env_threads() -> Option<String> {
    std::env::var(THREADS_ENV).ok().filter(|v| !v.is_empty())
}

impl RunConfig {
    pub fn from_args(a: SimulateArgs) -> Result<Self> {
        if let Some(eps) = a.eps_stop {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(SandpileError::InvalidConfig(format!("--eps-stop must be positive, got {eps}")));
            }
        }
        let schedule = Schedule { kind: a.schedule, seed: a.seed };
        let mut emit = a.emit;
        emit.dedup();
        Ok(RunConfig {
            d: a.dim,
            sources: a.sources,
            m: a.threshold,
            schedule,
            eps_stop: a.eps_stop,
            out_prefix: a.out,
            emit,
            threads: resolve_threads(a.threads, env_threads().as_deref())?,
            max_topplings: a.max_topplings,
            block: !a.no_block,
        })
    }

    fn options(&self) -> StabilizeOptions<f64> {
        StabilizeOptions {
            eps_stop: self.eps_stop,
            max_topplings: self.max_topplings,
            block_interval: if self.block { StabilizeOptions::<f64>::default().block_interval } else { None },
            threads: self.threads,
        }
    }
}

/// Parses `argv` (including the program name).
pub fn parse_args<I, S>(argv: I) -> std::result::Result<Cli, clap::Error>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    Cli::try_parse_from(argv)
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut p = prefix.as_os_str().to_owned();
    p.push(suffix);
    PathBuf::from(p)
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| SandpileError::Numerical(e.to_string()))?;
    text.push('\n');
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| SandpileError::io(path, e)),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(|e| SandpileError::io("<stdout>", e)),
    }
}

#[derive(Serialize)]
struct RunSummary<'a> {
    n: f64,
    m: f64,
    schedule: &'a str,
    sweeps: u64,
    topplings: u64,
    block_solves: u64,
    residual_excess: f64,
    elapsed_s: f64,
    visited: usize,
    artifacts: Vec<PathBuf>,
}

/// Stabilizes, writes the requested artifacts and returns the exit status.
pub fn run(cfg: &RunConfig) -> Result<Exit> {
    let mut state = SandpileState::new(cfg.d, &cfg.sources, cfg.m)?;
    let opts = cfg.options();
    let outcome = stabilize(&mut state, cfg.schedule, &opts)?;
    let eps = opts.resolved_eps(state.n());

    if let Some(dir) = cfg.out_prefix.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| SandpileError::io(dir, e))?;
    }
    let mut artifacts = Vec::new();
    let mut status = Exit::Ok;
    for kind in &cfg.emit {
        let path = match kind {
            Emit::Csv => {
                let p = with_suffix(&cfg.out_prefix, ".csv");
                checkpoint::write_csv(&state, &p)?;
                p
            }
            Emit::Json => {
                let p = with_suffix(&cfg.out_prefix, ".json");
                checkpoint::write_sidecar(&Sidecar::new(&state, cfg.schedule, eps, &outcome), &p)?;
                p
            }
            Emit::Image => {
                let p = with_suffix(&cfg.out_prefix, ".ppm");
                render_image(&state, &p)?;
                p
            }
            Emit::Report => {
                let p = with_suffix(&cfg.out_prefix, ".report.json");
                let report = verify_state(&state, eps)?;
                write_json(&report, Some(&p))?;
                if !report.passed {
                    status = Exit::CheckFailed;
                }
                p
            }
        };
        artifacts.push(path);
    }
    write_json(
        &RunSummary {
            n: state.n(),
            m: state.m(),
            schedule: cfg.schedule.kind.name(),
            sweeps: outcome.sweeps,
            topplings: outcome.topplings,
            block_solves: outcome.block_solves,
            residual_excess: outcome.residual_excess,
            elapsed_s: outcome.elapsed.as_secs_f64(),
            visited: state.visited_sites().len(),
            artifacts,
        },
        None,
    )?;
    Ok(status)
}

#[derive(Serialize)]
struct RadialOutput {
    d: usize,
    m: f64,
    lambda: f64,
    #[serde(rename = "A")]
    amplitude: f64,
    k: f64,
    a1: f64,
    a2: f64,
    a3: f64,
    r1: f64,
    r2: f64,
    residuals: [f64; 5],
}

fn run_radial(a: &RadialArgs) -> Result<Exit> {
    let base = RadialProblem::scaled(a.dim, a.threshold)?;
    let p = RadialProblem::new(
        a.dim,
        a.lambda.unwrap_or(base.lambda),
        a.amplitude.unwrap_or(base.amplitude),
        a.k.unwrap_or(base.k),
    )?;
    let sol = solve_radial(&p, a.tol)?;
    let out = RadialOutput {
        d: p.d,
        m: a.threshold,
        lambda: p.lambda,
        amplitude: p.amplitude,
        k: p.k,
        a1: sol.a1,
        a2: sol.a2,
        a3: sol.a3,
        r1: sol.r1,
        r2: sol.r2,
        residuals: sol.residuals(),
    };
    write_json(&out, a.out.as_deref())?;
    Ok(Exit::Ok)
}

fn run_verify(a: &VerifyArgs) -> Result<Exit> {
    let (meta, state) = checkpoint::load(&a.checkpoint)?;
    let report = verify_state(&state, meta.eps_stop)?;
    write_json(&report, a.out.as_deref())?;
    Ok(if report.passed { Exit::Ok } else { Exit::CheckFailed })
}

fn run_calibrate(a: &CalibrateArgs) -> Result<Exit> {
    let opts = StabilizeOptions { threads: resolve_threads(a.threads, env_threads().as_deref())?, ..Default::default() };
    let budget = CalibrationBudget { n_start: a.n_start, n_max: a.n_max };
    let cal = calibrate_f(
        a.dim,
        &a.threshold,
        |m| a.rho.unwrap_or(1.0 / m),
        |m| a.tol.unwrap_or(1.0 / m),
        &budget,
        &opts,
    )?;
    write_json(&cal, a.out.as_deref())?;
    Ok(if cal.truncated { Exit::NonConvergence } else { Exit::Ok })
}

pub fn dispatch(cli: Cli) -> Result<Exit> {
    match cli.command {
        Command::Simulate(a) => run(&RunConfig::from_args(a)?),
        Command::Radial(a) => run_radial(&a),
        Command::Verify(a) => run_verify(&a),
        Command::Calibrate(a) => run_calibrate(&a),
    }
}

/// Entry point of the binary; returns the process exit status.
pub fn main_with_args<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match parse_args(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { Exit::Usage as i32 } else { Exit::Ok as i32 };
        }
    };
    match dispatch(cli) {
        Ok(code) => code as i32,
        Err(e) => {
            eprintln!("sandpile: {e}");
            Exit::of_error(&e) as i32
        }
    }
}
