//! Experiment runners behind the command line: per-level bias/variance
//! tables, RMSE against the reference value over an accuracy grid, and the
//! `κ ε⁻² (ln ε⁻¹)^γ` cost-curve fit.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::bitcore::{BitSource, CostLedger};
use crate::drivers::DriverKind;
use crate::error::{invalid, Error, Result};
use crate::mlmc::{
    estimate_level_chunked, run_adaptive_with_source, AdaptiveOptions, LevelStats, MlmcConfig,
    MlmcResult,
};
use crate::models::{model_by_name, ModelKind, ModelSpec};
use crate::schemes::SchemeKind;

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.96;

/// Samples per parallel chunk in level tables.
pub const LEVEL_CHUNK: u64 = 1024;

pub const GAMMA_MIN: f64 = -1.0;
pub const GAMMA_MAX: f64 = 3.0;
pub const GAMMA_STEP: f64 = 0.05;

impl SchemeKind {
    pub fn name(&self) -> &'static str {
        match self {
            SchemeKind::Euler => "euler",
            SchemeKind::EulerPositive => "euler-pos",
            SchemeKind::TruncatedMilstein => "milstein",
        }
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(SchemeKind::Euler),
            "euler-pos" => Ok(SchemeKind::EulerPositive),
            "milstein" => Ok(SchemeKind::TruncatedMilstein),
            _ => Err(invalid(format!(
                "unknown scheme `{s}` (expected euler, euler-pos or milstein)"
            ))),
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl DriverKind {
    pub fn name(&self) -> &'static str {
        match self {
            DriverKind::Classic => "classic",
            DriverKind::BitLc => "bit-lc",
            DriverKind::BitIid { .. } => "bit-iid",
            DriverKind::BitBernoulli { .. } => "bit-bern",
        }
    }

    pub fn fixed_level(&self) -> Option<u32> {
        match *self {
            DriverKind::BitIid { max_level } | DriverKind::BitBernoulli { max_level } => {
                Some(max_level)
            }
            _ => None,
        }
    }

    /// `name` as printed by [`DriverKind::name`]; the fixed-level drivers
    /// need `max_level`.
    pub fn parse(name: &str, max_level: Option<u32>) -> Result<Self> {
        let need = || {
            max_level.ok_or_else(|| invalid(format!("driver `{name}` needs an explicit max level")))
        };
        match name {
            "classic" => Ok(DriverKind::Classic),
            "bit-lc" => Ok(DriverKind::BitLc),
            "bit-iid" => Ok(DriverKind::BitIid { max_level: need()? }),
            "bit-bern" => Ok(DriverKind::BitBernoulli { max_level: need()? }),
            _ => Err(invalid(format!(
                "unknown driver `{name}` (expected classic, bit-lc, bit-iid or bit-bern)"
            ))),
        }
    }
}

impl fmt::Display for DriverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            _ => Err(invalid(format!("unknown format `{s}` (expected csv or json)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub model: String,
    pub scheme: SchemeKind,
    pub driver: DriverKind,
    pub levels: Vec<u32>,
    pub eps: Vec<f64>,
    pub repetitions: u64,
    pub seed: u64,
    pub adaptive: AdaptiveOptions,
    pub output: Option<PathBuf>,
    pub format: OutputFormat,
}

impl ExperimentConfig {
    pub fn new(model: impl Into<String>, scheme: SchemeKind, driver: DriverKind) -> Self {
        ExperimentConfig {
            model: model.into(),
            scheme,
            driver,
            levels: Vec::new(),
            eps: Vec::new(),
            repetitions: 2000,
            seed: 0,
            adaptive: AdaptiveOptions::default(),
            output: None,
            format: OutputFormat::Csv,
        }
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        model_by_name(&self.model)
    }

    /// Resolves the model and checks the scheme/driver combination.
    pub fn mlmc_config(&self) -> Result<MlmcConfig> {
        let model = self.model_spec()?;
        if self.scheme == SchemeKind::TruncatedMilstein && model.kind != ModelKind::Cir {
            return Err(invalid("milstein requires model = cir"));
        }
        Ok(MlmcConfig::new(model, self.scheme, self.driver))
    }

    /// Stable, serializable view used in JSON output.
    pub fn summary(&self) -> ConfigSummary {
        ConfigSummary {
            model: self.model.clone(),
            scheme: self.scheme.name().to_string(),
            driver: self.driver.name().to_string(),
            max_level: self.driver.fixed_level(),
            levels: self.levels.clone(),
            eps: self.eps.clone(),
            repetitions: self.repetitions,
            seed: self.seed,
            adaptive: self.adaptive,
            format: self.format,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigSummary {
    pub model: String,
    pub scheme: String,
    pub driver: String,
    pub max_level: Option<u32>,
    pub levels: Vec<u32>,
    pub eps: Vec<f64>,
    pub repetitions: u64,
    pub seed: u64,
    pub adaptive: AdaptiveOptions,
    pub format: OutputFormat,
}

/// Per-level statistics on the linear scale; the `log2_*` methods give
/// the values as they appear in bias/variance decay plots.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelRow {
    pub level: u32,
    pub bias: f64,
    pub bias_ci_lo: f64,
    pub bias_ci_hi: f64,
    pub var: f64,
    pub var_ci_lo: f64,
    pub var_ci_hi: f64,
    pub cost_numbers: f64,
    pub cost_bits: f64,
}

impl LevelRow {
    pub const HEADER: [&'static str; 9] = [
        "level",
        "bias",
        "bias_ci_lo",
        "bias_ci_hi",
        "var",
        "var_ci_lo",
        "var_ci_hi",
        "cost_numbers",
        "cost_bits",
    ];

    pub fn from_stats(s: &LevelStats) -> Self {
        let bias_hw = Z95 * s.moments.mean_std_error();
        let var_hw = Z95 * s.moments.variance_std_error();
        let n = s.n.max(1) as f64;
        LevelRow {
            level: s.level,
            bias: s.mean_diff,
            bias_ci_lo: s.mean_diff - bias_hw,
            bias_ci_hi: s.mean_diff + bias_hw,
            var: s.var_diff,
            var_ci_lo: (s.var_diff - var_hw).max(0.0),
            var_ci_hi: s.var_diff + var_hw,
            cost_numbers: s.cost.numbers_drawn as f64 / n,
            cost_bits: s.cost.bits_drawn as f64 / n,
        }
    }

    pub fn log2_bias(&self) -> f64 {
        self.bias.abs().log2()
    }

    pub fn log2_var(&self) -> f64 {
        self.var.log2()
    }

    pub fn record(&self) -> Vec<String> {
        vec![
            self.level.to_string(),
            self.bias.to_string(),
            self.bias_ci_lo.to_string(),
            self.bias_ci_hi.to_string(),
            self.var.to_string(),
            self.var_ci_lo.to_string(),
            self.var_ci_hi.to_string(),
            self.cost_numbers.to_string(),
            self.cost_bits.to_string(),
        ]
    }
}

/// Level `ℓ` draws `repetitions` samples from streams starting at `ℓ << 32`.
pub fn run_levels(config: &ExperimentConfig) -> Result<Vec<LevelRow>> {
    if config.levels.is_empty() {
        return Err(invalid("level grid is empty"));
    }
    if config.repetitions < 2 {
        return Err(invalid("level tables need at least two repetitions"));
    }
    let mc = config.mlmc_config()?;
    config
        .levels
        .iter()
        .map(|&l| {
            let stats = estimate_level_chunked(
                &mc,
                l,
                config.repetitions,
                config.seed,
                u64::from(l) << 32,
                LEVEL_CHUNK,
            )?;
            Ok(LevelRow::from_stats(&stats))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RmseRow {
    pub eps: f64,
    pub rmse: f64,
    pub rmse_ci_lo: f64,
    pub rmse_ci_hi: f64,
    /// Mean ledger total per run, in the driver's own unit.
    pub cost: f64,
    pub cost_numbers: f64,
    pub cost_bits: f64,
    pub mean_max_level: f64,
    /// Runs that hit the maximal level before the bias test passed; their
    /// partial estimates are included.
    pub failures: u64,
    pub repetitions: u64,
}

impl RmseRow {
    pub const HEADER: [&'static str; 10] = [
        "eps",
        "rmse",
        "rmse_ci_lo",
        "rmse_ci_hi",
        "cost",
        "cost_numbers",
        "cost_bits",
        "mean_max_level",
        "failures",
        "repetitions",
    ];

    pub fn record(&self) -> Vec<String> {
        vec![
            self.eps.to_string(),
            self.rmse.to_string(),
            self.rmse_ci_lo.to_string(),
            self.rmse_ci_hi.to_string(),
            self.cost.to_string(),
            self.cost_numbers.to_string(),
            self.cost_bits.to_string(),
            self.mean_max_level.to_string(),
            self.failures.to_string(),
            self.repetitions.to_string(),
        ]
    }
}

/// Minimum number of whole-algorithm repetitions per accuracy demand.
pub const MIN_RMSE_REPETITIONS: u64 = 100;

/// Repetition `r` at grid index `e` uses stream `e << 32 | r`.
pub fn run_rmse(config: &ExperimentConfig) -> Result<Vec<RmseRow>> {
    if config.eps.is_empty() {
        return Err(invalid("accuracy grid is empty"));
    }
    if config.repetitions < MIN_RMSE_REPETITIONS {
        return Err(invalid(format!(
            "rmse runs need at least {MIN_RMSE_REPETITIONS} repetitions"
        )));
    }
    let mc = config.mlmc_config()?;
    let truth = mc
        .model
        .analytic_value
        .ok_or_else(|| invalid(format!("model `{}` has no reference value", mc.model.name)))?;
    if !mc.driver.is_level_extensible() {
        return Err(invalid(format!(
            "driver `{}` has a fixed maximal level and cannot run adaptively",
            mc.driver
        )));
    }

    config
        .eps
        .iter()
        .enumerate()
        .map(|(e, &eps)| {
            let runs = (0..config.repetitions)
                .into_par_iter()
                .map(|r| {
                    let mut src = BitSource::new(config.seed, (e as u64) << 32 | r);
                    match run_adaptive_with_source(&mc, eps, &mut src, &config.adaptive) {
                        Ok(res) => Ok((res, false)),
                        Err(Error::NonConvergence { partial, .. }) => Ok((*partial, true)),
                        Err(err) => Err(err),
                    }
                })
                .collect::<Result<Vec<(MlmcResult, bool)>>>()?;
            Ok(summarize_runs(eps, truth, &runs))
        })
        .collect()
}

fn summarize_runs(eps: f64, truth: f64, runs: &[(MlmcResult, bool)]) -> RmseRow {
    let n = runs.len() as f64;
    let sq: Vec<f64> = runs.iter().map(|(r, _)| (r.estimate - truth).powi(2)).collect();
    let mse = sq.iter().sum::<f64>() / n;
    let sd = (sq.iter().map(|s| (s - mse).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let hw = Z95 * sd / n.sqrt();
    let ledger: CostLedger = runs.iter().map(|(r, _)| r.total_cost).sum();
    RmseRow {
        eps,
        rmse: mse.sqrt(),
        rmse_ci_lo: (mse - hw).max(0.0).sqrt(),
        rmse_ci_hi: (mse + hw).sqrt(),
        cost: ledger.total() as f64 / n,
        cost_numbers: ledger.numbers_drawn as f64 / n,
        cost_bits: ledger.bits_drawn as f64 / n,
        mean_max_level: runs.iter().map(|(r, _)| f64::from(r.max_level())).sum::<f64>() / n,
        failures: runs.iter().filter(|(_, failed)| *failed).count() as u64,
        repetitions: runs.len() as u64,
    }
}

/// `cost ≈ κ ε⁻² (ln ε⁻¹)^γ`; `residual` is the root mean square of the
/// log-cost residuals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostFitResult {
    pub kappa: f64,
    pub gamma: f64,
    pub residual: f64,
}

impl CostFitResult {
    pub fn predict(&self, eps: f64) -> f64 {
        self.kappa * eps.powi(-2) * (-eps.ln()).powf(self.gamma)
    }
}

/// Least squares in log space over `(rmse, cost)` pairs: γ on a grid over
/// `[-1, 3]` in steps of 0.05, `ln κ` in closed form for each γ.
pub fn fit_cost_curve(points: &[(f64, f64)]) -> Result<CostFitResult> {
    if points.len() < 4 {
        return Err(invalid("cost fit needs at least four points"));
    }
    if points.iter().any(|&(e, c)| !(e > 0.0 && e < 1.0) || !(c > 0.0) || !c.is_finite()) {
        return Err(invalid("cost fit needs rmse in (0, 1) and positive finite cost"));
    }
    let lo = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.0).fold(0.0, f64::max);
    if hi / lo < 10.0 {
        return Err(invalid("cost fit needs rmse values spanning at least a decade"));
    }

    let n = points.len() as f64;
    let steps = ((GAMMA_MAX - GAMMA_MIN) / GAMMA_STEP).round() as usize;
    let mut best: Option<CostFitResult> = None;
    for s in 0..=steps {
        let gamma = GAMMA_MIN + s as f64 * GAMMA_STEP;
        let resid: Vec<f64> = points
            .iter()
            .map(|&(e, c)| c.ln() - (-2.0 * e.ln() + gamma * (-e.ln()).ln()))
            .collect();
        let log_kappa = resid.iter().sum::<f64>() / n;
        let rms = (resid.iter().map(|r| (r - log_kappa).powi(2)).sum::<f64>() / n).sqrt();
        if best.is_none_or(|b| rms < b.residual) {
            best = Some(CostFitResult {
                kappa: log_kappa.exp(),
                gamma,
                residual: rms,
            });
        }
    }
    Ok(best.expect("gamma grid is nonempty"))
}

/// Ratio of two fitted cost curves at accuracy `eps`.
pub fn cost_ratio_at(numerator: &CostFitResult, denominator: &CostFitResult, eps: f64) -> f64 {
    numerator.predict(eps) / denominator.predict(eps)
}

pub fn rmse_points(rows: &[RmseRow]) -> Vec<(f64, f64)> {
    rows.iter().map(|r| (r.rmse, r.cost)).collect()
}

/// Parses `start:stop:count` followed by an optional `log` (default) or
/// `lin`, e.g. `1e-2:3e-4:25log`; a bare number is a one-point grid.
pub fn parse_eps_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = || invalid(format!("bad accuracy grid `{spec}` (expected start:stop:count[log|lin])"));
    let parts: Vec<&str> = spec.split(':').collect();
    let grid = match parts.as_slice() {
        [single] => vec![single.trim().parse::<f64>().map_err(|_| bad())?],
        [start, stop, count] => {
            let count = count.trim();
            let (digits, log) = if let Some(c) = count.strip_suffix("log") {
                (c, true)
            } else if let Some(c) = count.strip_suffix("lin") {
                (c, false)
            } else {
                (count, true)
            };
            let start: f64 = start.trim().parse().map_err(|_| bad())?;
            let stop: f64 = stop.trim().parse().map_err(|_| bad())?;
            let count: usize = digits.parse().map_err(|_| bad())?;
            if count == 0 {
                return Err(bad());
            }
            if count == 1 {
                vec![start]
            } else {
                let last = (count - 1) as f64;
                (0..count)
                    .map(|i| {
                        let t = i as f64 / last;
                        if i == 0 {
                            start
                        } else if i == count - 1 {
                            stop
                        } else if log {
                            (start.ln() + t * (stop.ln() - start.ln())).exp()
                        } else {
                            start + t * (stop - start)
                        }
                    })
                    .collect()
            }
        }
        _ => return Err(bad()),
    };
    if grid.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
        return Err(invalid(format!("accuracy grid `{spec}` must be positive")));
    }
    Ok(grid)
}

/// Parses `a..=b`, `a..b`, or a comma-separated list of levels.
pub fn parse_level_grid(spec: &str) -> Result<Vec<u32>> {
    let bad = || invalid(format!("bad level grid `{spec}`"));
    let num = |s: &str| s.trim().parse::<u32>().map_err(|_| bad());
    if let Some((a, b)) = spec.split_once("..=") {
        let (a, b) = (num(a)?, num(b)?);
        return if a <= b { Ok((a..=b).collect()) } else { Err(bad()) };
    }
    if let Some((a, b)) = spec.split_once("..") {
        let (a, b) = (num(a)?, num(b)?);
        return if a < b { Ok((a..b).collect()) } else { Err(bad()) };
    }
    spec.split(',').map(num).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::gbm_model;

    #[test]
    fn names_round_trip() {
        for s in [SchemeKind::Euler, SchemeKind::EulerPositive, SchemeKind::TruncatedMilstein] {
            assert_eq!(s.name().parse::<SchemeKind>().unwrap(), s);
        }
        for d in [
            DriverKind::Classic,
            DriverKind::BitLc,
            DriverKind::BitIid { max_level: 5 },
            DriverKind::BitBernoulli { max_level: 5 },
        ] {
            assert_eq!(DriverKind::parse(d.name(), Some(5)).unwrap(), d);
        }
        assert!(DriverKind::parse("bit-iid", None).is_err());
        assert!(DriverKind::parse("sobol", None).is_err());
        assert!("rk4".parse::<SchemeKind>().is_err());
    }

    #[test]
    fn eps_grids() {
        let g = parse_eps_grid("1e-2:3e-4:25log").unwrap();
        assert_eq!(g.len(), 25);
        assert_eq!(g[0], 1e-2);
        assert_eq!(g[24], 3e-4);
        let ratio = g[1] / g[0];
        for w in g.windows(2) {
            assert!((w[1] / w[0] - ratio).abs() < 1e-12);
        }
        assert_eq!(parse_eps_grid("0.1:0.4:4lin").unwrap().len(), 4);
        let lin = parse_eps_grid("0.1:0.4:4lin").unwrap();
        assert!((lin[1] - 0.2).abs() < 1e-15 && (lin[2] - 0.3).abs() < 1e-15);
        assert_eq!(parse_eps_grid("0.01").unwrap(), vec![0.01]);
        assert_eq!(parse_eps_grid("1e-2:1e-3:2").unwrap(), vec![1e-2, 1e-3]);
        for bad in ["", "a:b:c", "1:2", "1e-2:1e-3:0", "-1", "1:2:3exp"] {
            assert!(parse_eps_grid(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn level_grids() {
        assert_eq!(parse_level_grid("1..=3").unwrap(), vec![1, 2, 3]);
        assert_eq!(parse_level_grid("0..3").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_level_grid("2,5,7").unwrap(), vec![2, 5, 7]);
        assert!(parse_level_grid("3..=1").is_err());
        assert!(parse_level_grid("x").is_err());
    }

    #[test]
    fn fit_recovers_synthetic_curves() {
        let grid = parse_eps_grid("1e-2:1e-4:9").unwrap();
        for (kappa, gamma) in [(3.0, 1.6), (0.7, 0.0), (12.0, -0.5), (1.0, 2.95)] {
            let pts: Vec<(f64, f64)> = grid
                .iter()
                .map(|&e| (e, kappa * e.powi(-2) * (-e.ln()).powf(gamma)))
                .collect();
            let fit = fit_cost_curve(&pts).unwrap();
            assert!((fit.gamma - gamma).abs() <= 0.05 / 2.0 + 1e-9, "{fit:?}");
            assert!((fit.kappa / kappa - 1.0).abs() < 0.01, "{fit:?}");
            assert!(fit.residual < 1e-9);
            assert!((cost_ratio_at(&fit, &fit, 1e-3) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn fit_rejects_degenerate_data() {
        let pts = [(0.01, 1.0), (0.02, 1.0), (0.03, 1.0), (0.05, 1.0)];
        assert!(fit_cost_curve(&pts).is_err());
        assert!(fit_cost_curve(&pts[..3]).is_err());
        assert!(fit_cost_curve(&[(0.1, 1.0), (0.01, 1.0), (0.001, -1.0), (0.05, 1.0)]).is_err());
    }

    #[test]
    fn level_rows_for_frozen_dynamics() {
        let mut cfg = ExperimentConfig::new("ou", SchemeKind::Euler, DriverKind::Classic);
        cfg.levels = vec![0, 1, 2];
        cfg.repetitions = 1;
        assert!(run_levels(&cfg).is_err());
        cfg.repetitions = 3000;
        let rows = run_levels(&cfg).unwrap();
        assert_eq!(rows.len(), 3);
        for r in &rows {
            assert!(r.bias_ci_lo <= r.bias && r.bias <= r.bias_ci_hi);
            assert!(r.var_ci_lo <= r.var && r.var <= r.var_ci_hi);
            assert_eq!(r.cost_numbers, (1u64 << r.level) as f64);
            assert_eq!(r.cost_bits, 0.0);
            assert_eq!(r.record().len(), LevelRow::HEADER.len());
        }
        assert_eq!(run_levels(&cfg).unwrap(), rows);
    }

    #[test]
    fn config_validation() {
        let cfg = ExperimentConfig::new("gbm", SchemeKind::TruncatedMilstein, DriverKind::Classic);
        assert!(cfg.mlmc_config().is_err());
        let mut cfg = ExperimentConfig::new("gbm", SchemeKind::Euler, DriverKind::BitIid { max_level: 4 });
        cfg.eps = vec![0.1];
        cfg.repetitions = 100;
        assert!(run_rmse(&cfg).is_err());
        cfg.driver = DriverKind::Classic;
        cfg.repetitions = 99;
        assert!(run_rmse(&cfg).is_err());
        assert!(ExperimentConfig::new("nope", SchemeKind::Euler, DriverKind::Classic)
            .mlmc_config()
            .is_err());
        assert_eq!(gbm_model().name, "gbm");
    }

    #[test]
    fn rmse_rows_are_reproducible() {
        let mut cfg = ExperimentConfig::new("ou", SchemeKind::Euler, DriverKind::Classic);
        cfg.eps = vec![0.1, 0.05];
        cfg.repetitions = 100;
        cfg.seed = 11;
        let rows = run_rmse(&cfg).unwrap();
        assert_eq!(rows.len(), 2);
        for r in &rows {
            assert!(r.rmse_ci_lo <= r.rmse && r.rmse <= r.rmse_ci_hi);
            assert!(r.rmse / r.eps > 0.2 && r.rmse / r.eps < 2.0, "{r:?}");
            assert_eq!(r.cost, r.cost_numbers);
            assert_eq!(r.record().len(), RmseRow::HEADER.len());
        }
        assert!(rows[1].cost > rows[0].cost);
        assert_eq!(run_rmse(&cfg).unwrap(), rows);
    }
}
