use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use rbmlmc::harness::{
    fit_cost_curve, parse_eps_grid, parse_level_grid, rmse_points, run_levels, run_rmse,
    ConfigSummary, CostFitResult, ExperimentConfig, LevelRow, OutputFormat, RmseRow,
};
use rbmlmc::invariants::selftest;
use rbmlmc::{AdaptiveOptions, DriverKind, Error, SchemeKind};

const THREADS_VAR: &str = "RBMLMC_THREADS";

#[derive(Parser)]
#[command(name = "rbmlmc", version, about = "Random-bit multilevel Monte Carlo experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Bias, variance and cost of the coupled differences per level
    Levels(LevelsArgs),
    /// RMSE of the adaptive estimator over a grid of accuracy demands
    Rmse(RmseArgs),
    /// Fit κ ε⁻² (ln ε⁻¹)^γ to (rmse, cost) pairs
    Fit(FitArgs),
    /// Exact invariant checks; exits nonzero on any failure
    Selftest,
}

#[derive(Args)]
struct Common {
    /// gbm, ou or cir
    #[arg(long)]
    model: String,
    /// euler, euler-pos or milstein
    #[arg(long, default_value = "euler")]
    scheme: String,
    /// classic, bit-lc, bit-iid or bit-bern
    #[arg(long, default_value = "classic")]
    driver: String,
    /// Fixed maximal level L of bit-iid and bit-bern
    #[arg(long)]
    max_level: Option<u32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; standard output when absent
    #[arg(long)]
    out: Option<PathBuf>,
    /// csv or json
    #[arg(long, default_value = "csv")]
    format: String,
}

#[derive(Args)]
struct LevelsArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 0)]
    lmin: u32,
    #[arg(long, default_value_t = 8)]
    lmax: u32,
    /// Explicit level grid (`a..=b` or `a,b,c`), overrides --lmin/--lmax
    #[arg(long)]
    levels: Option<String>,
    /// Samples per level
    #[arg(long, default_value_t = 20000)]
    reps: u64,
}

#[derive(Args)]
struct AdaptiveArgs {
    /// start:stop:count[log|lin] or a single value
    #[arg(long, default_value = "1e-2:1e-3:5log")]
    eps: String,
    /// Repetitions of the whole adaptive algorithm per accuracy demand
    #[arg(long, default_value_t = 2000)]
    reps: u64,
    /// Warm-up samples on each new level
    #[arg(long)]
    warmup: Option<u64>,
    /// Level cap of the adaptive algorithm
    #[arg(long)]
    lmax: Option<u32>,
}

#[derive(Args)]
struct RmseArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    adaptive: AdaptiveArgs,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    adaptive: AdaptiveArgs,
    /// Reuse an rmse CSV instead of running the experiment
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Serialize)]
struct Report<T: Serialize> {
    config: ConfigSummary,
    rows: Vec<T>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fit: Option<CostFitResult>,
    total_wall_seconds: f64,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn experiment(common: &Common) -> Result<ExperimentConfig, Failure> {
    let scheme: SchemeKind = common.scheme.parse()?;
    let driver = DriverKind::parse(&common.driver, common.max_level)?;
    let mut cfg = ExperimentConfig::new(common.model.clone(), scheme, driver);
    cfg.seed = common.seed;
    cfg.output = common.out.clone();
    cfg.format = common.format.parse()?;
    cfg.mlmc_config()?;
    Ok(cfg)
}

fn adaptive(cfg: &mut ExperimentConfig, args: &AdaptiveArgs) -> Result<(), Failure> {
    cfg.eps = parse_eps_grid(&args.eps)?;
    cfg.repetitions = args.reps;
    let defaults = AdaptiveOptions::default();
    cfg.adaptive = AdaptiveOptions {
        warmup: args.warmup.unwrap_or(defaults.warmup),
        max_level: args.lmax.unwrap_or(defaults.max_level),
        ..defaults
    };
    Ok(())
}

fn sink(cfg: &ExperimentConfig) -> Result<Box<dyn Write>, Failure> {
    Ok(match &cfg.output {
        Some(path) => Box::new(File::create(path)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn emit<T: Serialize>(
    cfg: &ExperimentConfig,
    header: &[&str],
    rows: Vec<T>,
    records: Vec<Vec<String>>,
    fit: Option<CostFitResult>,
    started: Instant,
) -> Result<(), Failure> {
    let mut out = sink(cfg)?;
    match cfg.format {
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(header)?;
            for r in records {
                w.write_record(&r)?;
            }
            w.flush()?;
        }
        OutputFormat::Json => {
            let report = Report {
                config: cfg.summary(),
                rows,
                fit,
                total_wall_seconds: started.elapsed().as_secs_f64(),
            };
            serde_json::to_writer_pretty(&mut out, &report)?;
            writeln!(out)?;
        }
    }
    Ok(())
}

fn levels(args: &LevelsArgs) -> Result<(), Failure> {
    let started = Instant::now();
    let mut cfg = experiment(&args.common)?;
    cfg.levels = match &args.levels {
        Some(grid) => parse_level_grid(grid)?,
        None if args.lmin <= args.lmax => (args.lmin..=args.lmax).collect(),
        None => return Err(Failure::Usage("--lmin exceeds --lmax".into())),
    };
    cfg.repetitions = args.reps;
    let rows = run_levels(&cfg)?;
    let records = rows.iter().map(LevelRow::record).collect();
    emit(&cfg, &LevelRow::HEADER, rows, records, None, started)
}

fn rmse(args: &RmseArgs) -> Result<(), Failure> {
    let started = Instant::now();
    let mut cfg = experiment(&args.common)?;
    adaptive(&mut cfg, &args.adaptive)?;
    let rows = run_rmse(&cfg)?;
    let records = rows.iter().map(RmseRow::record).collect();
    emit(&cfg, &RmseRow::HEADER, rows, records, None, started)
}

fn read_rmse_points(path: &PathBuf) -> Result<Vec<(f64, f64)>, Failure> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Failure::Usage(format!("{} has no `{name}` column", path.display())))
    };
    let (rmse, cost) = (col("rmse")?, col("cost")?);
    let mut points = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| {
            rec[i]
                .parse::<f64>()
                .map_err(|_| Failure::Usage(format!("bad number `{}` in {}", &rec[i], path.display())))
        };
        points.push((num(rmse)?, num(cost)?));
    }
    Ok(points)
}

fn fit(args: &FitArgs) -> Result<(), Failure> {
    let started = Instant::now();
    let mut cfg = experiment(&args.common)?;
    adaptive(&mut cfg, &args.adaptive)?;
    let (rows, points) = match &args.input {
        Some(path) => (Vec::new(), read_rmse_points(path)?),
        None => {
            let rows = run_rmse(&cfg)?;
            let points = rmse_points(&rows);
            (rows, points)
        }
    };
    let result = fit_cost_curve(&points)?;
    let records = vec![vec![
        result.kappa.to_string(),
        result.gamma.to_string(),
        result.residual.to_string(),
    ]];
    emit(&cfg, &["kappa", "gamma", "residual"], rows, records, Some(result), started)
}

fn run_selftest() -> ExitCode {
    let mut ok = true;
    for c in selftest() {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        ok &= c.passed;
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn configure_threads() -> Result<(), Failure> {
    if let Ok(v) = std::env::var(THREADS_VAR) {
        let n: usize = v
            .parse()
            .map_err(|_| Failure::Usage(format!("{THREADS_VAR} must be a thread count, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Levels(a) => levels(a),
        Command::Rmse(a) => rmse(a),
        Command::Fit(a) => fit(a),
        Command::Selftest => Ok(()),
    });
    match result {
        Ok(()) if matches!(cli.command, Command::Selftest) => run_selftest(),
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun `rbmlmc --help` for usage.");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
