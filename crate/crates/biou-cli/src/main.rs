//! Command-line front end: exact simulation, maximum likelihood fitting,
//! equivalence diagnostics, asymptotic covariances, and Monte Carlo tables.
//!
//! Exit codes: 0 success, 2 usage or domain error, 3 numeric or estimation
//! failure, 4 I/O failure.

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand};
use serde::Serialize;

use biou::estimate::{Coord, FitOptions, ParamBox};
use biou::model::{BivariateSample, Params, SamplingGrid};
use biou::montecarlo::{run_experiment, ExperimentSpec, QuantileTable};
use biou::simulate::{draw_dense, draw_recursive, replication_rng, SimMethod};
use biou::{
    asym_cov, fit_mle, symmetrized_entropy_with, EntropyMethod, Error as BiouError, Scenario,
};

/// Default master seed used when `--seed` is not given.
const DEFAULT_SEED: u64 = 1729;

#[derive(Parser)]
#[command(
    name = "biou",
    about = "Bivariate Ornstein-Uhlenbeck toolkit: simulate, fit, classify, tabulate",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw one exact sample and write it as CSV (`s,z1,z2`).
    Simulate(SimulateArgs),
    /// Maximum likelihood fit of a sample CSV; prints the fit as JSON.
    Fit(FitArgs),
    /// Symmetrized entropy and equivalence classification of two parameter
    /// points on an equispaced grid; prints JSON.
    Entropy(EntropyArgs),
    /// Asymptotic covariance matrix of a scenario's estimates; prints JSON.
    Asymcov(AsymcovArgs),
    /// Replicated simulate-fit-standardize experiment from a JSON config;
    /// writes a quantile table as CSV.
    Montecarlo(MontecarloArgs),
}

#[derive(Args)]
#[command(group(ArgGroup::new("decay").required(true).args(["theta", "practical_range"])))]
struct ParamFlags {
    #[arg(long, value_name = "VAR")]
    sigma1_sq: f64,
    #[arg(long, value_name = "VAR")]
    sigma2_sq: f64,
    #[arg(long, value_name = "CORR", allow_hyphen_values = true)]
    rho: f64,
    /// Decay rate of the exponential correlation.
    #[arg(long, value_name = "RATE")]
    theta: Option<f64>,
    /// Practical range x: the distance at which correlation drops to 0.05;
    /// equivalent to `--theta 3/x`.
    #[arg(long, value_name = "DIST")]
    practical_range: Option<f64>,
}

impl ParamFlags {
    fn params(&self) -> Result<Params, CliError> {
        let theta = match (self.theta, self.practical_range) {
            (Some(t), None) => t,
            (None, Some(x)) => {
                if !x.is_finite() || x <= 0.0 {
                    return Err(CliError::Usage(format!(
                        "practical range must be finite and positive, got {x}"
                    )));
                }
                3.0 / x
            }
            _ => unreachable!("clap enforces the theta/practical-range group"),
        };
        Ok(Params::new(self.sigma1_sq, self.sigma2_sq, self.rho, theta)?)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    params: ParamFlags,
    /// Number of observation points.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Sampler: the O(n) recursion or the dense Cholesky factor.
    #[arg(long, value_parser = parse_method, default_value = "recursive")]
    method: SimMethod,
    /// Grid layout: `uniform` draws ordered uniform points, `equispaced`
    /// spaces them evenly on [0, 1].
    #[arg(long, value_parser = parse_grid_kind, default_value = "uniform")]
    grid: GridKind,
    /// Output CSV path; stdout when omitted.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum GridKind {
    Uniform,
    Equispaced,
}

fn parse_grid_kind(s: &str) -> Result<GridKind, String> {
    match s {
        "uniform" => Ok(GridKind::Uniform),
        "equispaced" => Ok(GridKind::Equispaced),
        _ => Err(format!("unknown grid {s:?}, expected uniform or equispaced")),
    }
}

fn parse_method(s: &str) -> Result<SimMethod, String> {
    match s {
        "recursive" => Ok(SimMethod::Recursive),
        "dense" => Ok(SimMethod::Dense),
        _ => Err(format!("unknown method {s:?}, expected recursive or dense")),
    }
}

#[derive(Args)]
struct FitArgs {
    /// Sample CSV with columns `s,z1,z2`; `#` lines are ignored.
    #[arg(long, short)]
    input: PathBuf,
    /// Pin a parameter at a value, e.g. `--pin rho=0`; repeatable. Names:
    /// sigma1-sq, sigma2-sq, rho, theta.
    #[arg(long, value_parser = parse_pin)]
    pin: Vec<(String, f64)>,
    /// Output JSON path; stdout when omitted.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

fn parse_pin(s: &str) -> Result<(String, f64), String> {
    let (name, value) = s
        .split_once('=')
        .ok_or_else(|| format!("expected name=value, got {s:?}"))?;
    let canonical = match name {
        "sigma1-sq" | "sigma1_sq" => "sigma1_sq",
        "sigma2-sq" | "sigma2_sq" => "sigma2_sq",
        "rho" => "rho",
        "theta" => "theta",
        _ => {
            return Err(format!(
                "unknown parameter {name:?}, expected sigma1-sq, sigma2-sq, rho, or theta"
            ))
        }
    };
    let value: f64 = value
        .parse()
        .map_err(|_| format!("pin value {value:?} is not a number"))?;
    Ok((canonical.to_string(), value))
}

#[derive(Args)]
struct EntropyArgs {
    /// First parameter point as JSON, e.g.
    /// '{"sigma1_sq":1,"sigma2_sq":1,"rho":0.5,"theta":3}'.
    #[arg(long)]
    psi1: String,
    /// Second parameter point as JSON.
    #[arg(long)]
    psi2: String,
    /// Equispaced grid size.
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// closed (O(n) form) or dense (full-matrix cross-check).
    #[arg(long, value_parser = parse_entropy_method, default_value = "closed")]
    method: EntropyMethod,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

fn parse_entropy_method(s: &str) -> Result<EntropyMethod, String> {
    match s {
        "closed" => Ok(EntropyMethod::ClosedForm),
        "dense" => Ok(EntropyMethod::Dense),
        _ => Err(format!("unknown method {s:?}, expected closed or dense")),
    }
}

#[derive(Args)]
struct AsymcovArgs {
    #[command(flatten)]
    params: ParamFlags,
    /// theta_only, theta_rho, or full.
    #[arg(long)]
    scenario: String,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct MontecarloArgs {
    /// Experiment config JSON (psi0, n, m, scenario, master_seed, optional
    /// grid_policy and quantile_probs).
    #[arg(long, short)]
    config: PathBuf,
    /// Override the config's replication count (quick runs).
    #[arg(long)]
    m: Option<usize>,
    /// Worker threads; falls back to BIOU_WORKERS, then to all cores.
    #[arg(long)]
    workers: Option<usize>,
    /// Output CSV path; stdout when omitted.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Also write the full table (with the standard normal reference row)
    /// as JSON to this path.
    #[arg(long)]
    summary: Option<PathBuf>,
}

enum CliError {
    Usage(String),
    Numeric(String),
    Io(String),
}

impl From<BiouError> for CliError {
    fn from(e: BiouError) -> Self {
        match e {
            BiouError::Domain(_) => CliError::Usage(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) | CliError::Io(m) => m,
        }
    }
}

fn io_err(context: &str, path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{context} {}: {e}", path.display()))
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Entropy(args) => cmd_entropy(args),
        Command::Asymcov(args) => cmd_asymcov(args),
        Command::Montecarlo(args) => cmd_montecarlo(args),
    };
    if let Err(e) = result {
        eprintln!("error: {}", e.message());
        std::process::exit(e.exit_code());
    }
}

/// Writes to the path when given, else to stdout.
fn emit(output: Option<&Path>, content: &str) -> Result<(), CliError> {
    match output {
        Some(path) => fs::write(path, content).map_err(|e| io_err("cannot write", path, e)),
        None => std::io::stdout()
            .write_all(content.as_bytes())
            .map_err(|e| CliError::Io(format!("cannot write to stdout: {e}"))),
    }
}

fn to_json_pretty<T: Serialize>(value: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Numeric(format!("cannot serialize result: {e}")))?;
    s.push('\n');
    Ok(s)
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let params = args.params.params()?;
    let mut rng = replication_rng(args.seed, 0);
    let grid = match args.grid {
        GridKind::Uniform => SamplingGrid::uniform_random(args.n, &mut rng)?,
        GridKind::Equispaced => SamplingGrid::equispaced(args.n)?,
    };
    let sample = match args.method {
        SimMethod::Recursive => draw_recursive(&params, &grid, &mut rng),
        SimMethod::Dense => draw_dense(&params, &grid, &mut rng)?,
    };

    let mut out = String::new();
    let _ = writeln!(out, "# sigma1_sq={}", params.sigma1_sq());
    let _ = writeln!(out, "# sigma2_sq={}", params.sigma2_sq());
    let _ = writeln!(out, "# rho={}", params.rho());
    let _ = writeln!(out, "# theta={}", params.theta());
    let _ = writeln!(out, "# seed={}", args.seed);
    let _ = writeln!(
        out,
        "# method={}",
        match args.method {
            SimMethod::Recursive => "recursive",
            SimMethod::Dense => "dense",
        }
    );
    let _ = writeln!(
        out,
        "# grid={}",
        match args.grid {
            GridKind::Uniform => "uniform",
            GridKind::Equispaced => "equispaced",
        }
    );
    let _ = writeln!(out, "# n={}", args.n);
    let _ = writeln!(out, "s,z1,z2");
    for ((s, z1), z2) in sample
        .grid()
        .points()
        .iter()
        .zip(sample.z1())
        .zip(sample.z2())
    {
        let _ = writeln!(out, "{s},{z1},{z2}");
    }
    emit(args.output.as_deref(), &out)
}

fn read_sample_csv(path: &Path) -> Result<BivariateSample, CliError> {
    let mut raw = String::new();
    fs::File::open(path)
        .map_err(|e| io_err("cannot open", path, e))?
        .read_to_string(&mut raw)
        .map_err(|e| io_err("cannot read", path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(raw.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| CliError::Usage(format!("{}: bad CSV header: {e}", path.display())))?;
    if headers.iter().ne(["s", "z1", "z2"]) {
        return Err(CliError::Usage(format!(
            "{}: expected header s,z1,z2, got {:?}",
            path.display(),
            headers
        )));
    }
    let mut points = Vec::new();
    let mut z1 = Vec::new();
    let mut z2 = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let record =
            record.map_err(|e| CliError::Usage(format!("{}: bad CSV row: {e}", path.display())))?;
        let field = |i: usize| -> Result<f64, CliError> {
            record
                .get(i)
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| {
                    CliError::Usage(format!(
                        "{}: row {} field {} is not a number",
                        path.display(),
                        k + 2,
                        i + 1
                    ))
                })
        };
        points.push(field(0)?);
        z1.push(field(1)?);
        z2.push(field(2)?);
    }
    Ok(BivariateSample::new(SamplingGrid::new(points)?, z1, z2)?)
}

#[derive(Serialize)]
struct FitOutput {
    input: String,
    pins: std::collections::BTreeMap<String, f64>,
    fit: biou::FitResult,
}

fn cmd_fit(args: FitArgs) -> Result<(), CliError> {
    let sample = read_sample_csv(&args.input)?;
    let mut bounds = ParamBox::default();
    for (name, value) in &args.pin {
        let coord = match name.as_str() {
            "sigma1_sq" => Coord::Sigma1Sq,
            "sigma2_sq" => Coord::Sigma2Sq,
            "rho" => Coord::Rho,
            _ => Coord::Theta,
        };
        bounds = bounds.pin(coord, *value)?;
    }
    let fit = fit_mle(&sample, &bounds, &FitOptions::default())?;
    let out = to_json_pretty(&FitOutput {
        input: args.input.display().to_string(),
        pins: args.pin.iter().cloned().collect(),
        fit,
    })?;
    emit(args.output.as_deref(), &out)
}

fn parse_params_json(label: &str, raw: &str) -> Result<Params, CliError> {
    serde_json::from_str(raw)
        .map_err(|e| CliError::Usage(format!("{label} is not a valid parameter JSON: {e}")))
}

#[derive(Serialize)]
struct EntropyOutput {
    psi1: Params,
    psi2: Params,
    n: usize,
    report: biou::EntropyReport,
}

fn cmd_entropy(args: EntropyArgs) -> Result<(), CliError> {
    let psi1 = parse_params_json("--psi1", &args.psi1)?;
    let psi2 = parse_params_json("--psi2", &args.psi2)?;
    let grid = SamplingGrid::equispaced(args.n)?;
    let report = symmetrized_entropy_with(&psi1, &psi2, &grid, args.method)?;
    let out = to_json_pretty(&EntropyOutput {
        psi1,
        psi2,
        n: args.n,
        report,
    })?;
    emit(args.output.as_deref(), &out)
}

fn cmd_asymcov(args: AsymcovArgs) -> Result<(), CliError> {
    let params = args.params.params()?;
    let scenario: Scenario = args
        .scenario
        .parse()
        .map_err(|e: BiouError| CliError::Usage(e.to_string()))?;
    let cov = asym_cov(scenario, &params);
    emit(args.output.as_deref(), &to_json_pretty(&cov)?)
}

fn table_csv(table: &QuantileTable) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# master_seed={}", table.master_seed);
    let _ = writeln!(
        out,
        "# scenario={}",
        serde_json::to_value(table.scenario)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default()
    );
    let _ = writeln!(
        out,
        "# grid_policy={}",
        serde_json::to_value(table.grid_policy)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default()
    );
    let _ = writeln!(
        out,
        "# psi0=({},{},{},{})",
        table.psi0.sigma1_sq(),
        table.psi0.sigma2_sq(),
        table.psi0.rho(),
        table.psi0.theta()
    );
    let _ = writeln!(out, "# m={}", table.m);
    let mut header = String::from("n,theta0,rho0,statistic");
    for p in &table.quantile_probs {
        let _ = write!(header, ",q{p}");
    }
    header.push_str(",variance,replications,failures");
    let _ = writeln!(out, "{header}");
    for row in &table.rows {
        let _ = write!(
            out,
            "{},{},{},{}",
            row.n, row.theta0, row.rho0, row.statistic
        );
        for q in &row.quantiles {
            let _ = write!(out, ",{q}");
        }
        let _ = writeln!(out, ",{},{},{}", row.variance, row.replications, row.failures);
    }
    out
}

fn cmd_montecarlo(args: MontecarloArgs) -> Result<(), CliError> {
    let raw = fs::read_to_string(&args.config).map_err(|e| io_err("cannot read", &args.config, e))?;
    let mut spec: ExperimentSpec = serde_json::from_str(&raw).map_err(|e| {
        CliError::Usage(format!("{}: invalid config: {e}", args.config.display()))
    })?;
    if let Some(m) = args.m {
        spec.m = m;
    }
    spec.validate()?;

    let workers = args.workers.or_else(|| {
        std::env::var("BIOU_WORKERS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(workers) = workers {
        if workers == 0 {
            return Err(CliError::Usage("worker count must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure {workers} workers: {e}")))?;
    }

    let table = run_experiment(&spec)?;
    if let Some(summary) = &args.summary {
        fs::write(summary, to_json_pretty(&table)?)
            .map_err(|e| io_err("cannot write", summary, e))?;
    }
    emit(args.output.as_deref(), &table_csv(&table))
}
