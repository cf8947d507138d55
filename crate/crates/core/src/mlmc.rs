//! The adaptive multilevel estimator.
//!
//! Levels `0..=L` are sampled with coupled payoff differences; replication
//! counts follow the variance/cost optimal allocation for a variance budget
//! of `ε²/2`, and `L` grows until the extrapolated remaining bias drops
//! below `ε/√2`.

use rayon::prelude::*;
use serde::Serialize;

use crate::bitcore::{BitSource, CostLedger, RandomSource};
use crate::drivers::DriverKind;
use crate::error::{invalid, Error, Result};
use crate::models::ModelSpec;
use crate::schemes::{CoupledSampler, SchemeKind};

pub const VARIANCE_FLOOR: f64 = 1e-30;

/// One-pass mean and central moments up to order four, mergeable.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct RunningStats {
    n: u64,
    mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

impl RunningStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        let n0 = self.n as f64;
        self.n += 1;
        let n = self.n as f64;
        let delta = x - self.mean;
        let dn = delta / n;
        let dn2 = dn * dn;
        let term = delta * dn * n0;
        self.mean += dn;
        self.m4 += term * dn2 * (n * n - 3.0 * n + 3.0) + 6.0 * dn2 * self.m2 - 4.0 * dn * self.m3;
        self.m3 += term * dn * (n - 2.0) - 3.0 * dn * self.m2;
        self.m2 += term;
    }

    pub fn merge(&self, other: &RunningStats) -> RunningStats {
        if self.n == 0 {
            return *other;
        }
        if other.n == 0 {
            return *self;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let d = other.mean - self.mean;
        let d2 = d * d;
        RunningStats {
            n: self.n + other.n,
            mean: self.mean + d * nb / n,
            m2: self.m2 + other.m2 + d2 * na * nb / n,
            m3: self.m3
                + other.m3
                + d2 * d * na * nb * (na - nb) / (n * n)
                + 3.0 * d * (na * other.m2 - nb * self.m2) / n,
            m4: self.m4
                + other.m4
                + d2 * d2 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
                + 6.0 * d2 * (na * na * other.m2 + nb * nb * self.m2) / (n * n)
                + 4.0 * d * (na * other.m3 - nb * self.m3) / n,
        }
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; zero below two samples.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / (self.n - 1) as f64).max(0.0)
        }
    }

    /// Standard error of the sample mean.
    pub fn mean_std_error(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        (self.variance() / self.n as f64).sqrt()
    }

    /// Large-sample standard error of the sample variance, `sqrt((μ4 - σ⁴)/n)`.
    pub fn variance_std_error(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        let mu4 = self.m4 / n;
        let s2 = self.m2 / n;
        ((mu4 - s2 * s2).max(0.0) / n).sqrt()
    }
}

/// Everything the estimator needs to draw coupled samples.
#[derive(Debug, Clone)]
pub struct MlmcConfig {
    pub model: ModelSpec,
    pub scheme: SchemeKind,
    pub driver: DriverKind,
}

impl MlmcConfig {
    pub fn new(model: ModelSpec, scheme: SchemeKind, driver: DriverKind) -> Self {
        MlmcConfig {
            model,
            scheme,
            driver,
        }
    }

    pub fn sampler(&self) -> Result<CoupledSampler> {
        CoupledSampler::new(self.model.clone(), self.scheme, self.driver)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelStats {
    pub level: u32,
    pub n: u64,
    /// Sample mean of the coupled difference; `E f(X_0)` at level 0.
    pub mean_diff: f64,
    pub var_diff: f64,
    /// Mean ledger units (bits or numbers) per coupled sample.
    pub cost_per_sample: f64,
    pub cost: CostLedger,
    #[serde(skip)]
    pub moments: RunningStats,
}

impl LevelStats {
    fn from_parts(level: u32, moments: RunningStats, cost: CostLedger) -> Self {
        let n = moments.count();
        LevelStats {
            level,
            n,
            mean_diff: moments.mean(),
            var_diff: moments.variance(),
            cost_per_sample: if n == 0 { 0.0 } else { cost.total() as f64 / n as f64 },
            cost,
            moments,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MlmcResult {
    pub estimate: f64,
    pub levels: Vec<LevelStats>,
    pub eps: f64,
    pub total_cost: CostLedger,
    pub converged: bool,
    pub weak_rate_alpha: f64,
}

impl MlmcResult {
    pub fn max_level(&self) -> u32 {
        self.levels.last().map_or(0, |l| l.level)
    }
}

/// Tunables of the adaptive loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdaptiveOptions {
    /// Samples drawn on every newly added level.
    pub warmup: u64,
    /// Levels `0..=start_level` are present from the start.
    pub start_level: u32,
    pub max_level: u32,
    pub alpha_floor: f64,
    /// Cap on the number of most recent levels in the rate regression.
    pub alpha_window: u32,
    /// Extra samples below this fraction of the current count do not trigger
    /// another allocation round.
    pub refine_tolerance: f64,
}

impl Default for AdaptiveOptions {
    fn default() -> Self {
        AdaptiveOptions {
            warmup: 100,
            start_level: 2,
            max_level: 20,
            alpha_floor: 0.5,
            alpha_window: 5,
            refine_tolerance: 0.01,
        }
    }
}

fn draw_into<R: RandomSource + ?Sized>(
    sampler: &mut CoupledSampler,
    level: u32,
    count: u64,
    src: &mut R,
    moments: &mut RunningStats,
    cost: &mut CostLedger,
) -> Result<()> {
    for _ in 0..count {
        let s = sampler.sample(level, src)?;
        moments.push(s.diff);
        *cost += s.cost;
    }
    Ok(())
}

/// `n` independent coupled samples at one level.
pub fn estimate_level<R: RandomSource + ?Sized>(
    config: &MlmcConfig,
    level: u32,
    n: u64,
    src: &mut R,
) -> Result<LevelStats> {
    if n < 2 {
        return Err(invalid("a level estimate needs at least two samples"));
    }
    let mut sampler = config.sampler()?;
    let mut moments = RunningStats::new();
    let mut cost = CostLedger::default();
    draw_into(&mut sampler, level, n, src, &mut moments, &mut cost)?;
    Ok(LevelStats::from_parts(level, moments, cost))
}

/// Parallel [`estimate_level`]: chunk `c` draws from stream
/// `first_stream + c` of `seed`, so results do not depend on the thread count.
pub fn estimate_level_chunked(
    config: &MlmcConfig,
    level: u32,
    n: u64,
    seed: u64,
    first_stream: u64,
    chunk: u64,
) -> Result<LevelStats> {
    if n < 2 {
        return Err(invalid("a level estimate needs at least two samples"));
    }
    let chunk = chunk.max(1);
    let chunks = n.div_ceil(chunk);
    let parts = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let count = chunk.min(n - c * chunk);
            let mut sampler = config.sampler()?;
            let mut src = BitSource::new(seed, first_stream + c);
            let mut moments = RunningStats::new();
            let mut cost = CostLedger::default();
            draw_into(&mut sampler, level, count, &mut src, &mut moments, &mut cost)?;
            Ok((moments, cost))
        })
        .collect::<Result<Vec<_>>>()?;
    let (moments, cost) = parts
        .into_iter()
        .fold((RunningStats::new(), CostLedger::default()), |(m, c), (pm, pc)| {
            (m.merge(&pm), c + pc)
        });
    Ok(LevelStats::from_parts(level, moments, cost))
}

/// `N_ℓ = ⌈2 ε⁻² sqrt(V_ℓ/C_ℓ) Σ_m sqrt(V_m C_m)⌉`, which keeps
/// `Σ V_ℓ/N_ℓ <= ε²/2` at minimal `Σ N_ℓ C_ℓ`. Variances are floored at
/// [`VARIANCE_FLOOR`].
pub fn optimal_replications(eps: f64, variances: &[f64], costs: &[f64]) -> Result<Vec<u64>> {
    if !(eps > 0.0) {
        return Err(invalid(format!("accuracy demand {eps} must be positive")));
    }
    if variances.len() != costs.len() {
        return Err(invalid("one variance and one cost per level"));
    }
    if costs.iter().any(|&c| !(c > 0.0)) {
        return Err(invalid("per-sample costs must be positive"));
    }
    let inv_eps = 1.0 / eps;
    let v: Vec<f64> = variances.iter().map(|&x| x.max(VARIANCE_FLOOR)).collect();
    let total: f64 = v.iter().zip(costs).map(|(v, c)| (v * c).sqrt()).sum();
    Ok(v
        .iter()
        .zip(costs)
        .map(|(v, c)| (2.0 * inv_eps * inv_eps * (v / c).sqrt() * total).ceil().max(1.0) as u64)
        .collect())
}

/// Remaining-bias test on the two finest level means:
/// `max(|m_L|, |m_{L-1}|/2^α) / (2^α - 1) <= ε/√2`.
pub fn bias_converged(means: &[f64], alpha: f64, eps: f64) -> bool {
    if means.len() < 3 || !(alpha > 0.0) {
        return false;
    }
    let last = means.len() - 1;
    let growth = alpha.exp2();
    let tail = means[last].abs().max(means[last - 1].abs() / growth);
    tail / (growth - 1.0) <= eps / std::f64::consts::SQRT_2
}

/// Weak rate from least squares on `log2 |mean_ℓ|` over the last
/// `min(L - 1, window)` levels, floored at `floor`. Fewer than two points
/// give the floor.
pub fn fit_weak_rate(means: &[f64], window: u32, floor: f64) -> f64 {
    let top = means.len().saturating_sub(1);
    let count = top.saturating_sub(1).min(window as usize);
    if count < 2 {
        return floor;
    }
    let first = top + 1 - count;
    let pts: Vec<(f64, f64)> = (first..=top)
        .map(|l| (l as f64, means[l].abs().max(f64::MIN_POSITIVE).log2()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    if slope.is_finite() {
        (-slope).max(floor)
    } else {
        floor
    }
}

/// The adaptive estimator with its own source `(seed, stream 0)`.
pub fn run_adaptive(
    config: &MlmcConfig,
    eps: f64,
    seed: u64,
    options: &AdaptiveOptions,
) -> Result<MlmcResult> {
    run_adaptive_with_source(config, eps, &mut BitSource::new(seed, 0), options)
}

pub fn run_adaptive_with_source<R: RandomSource + ?Sized>(
    config: &MlmcConfig,
    eps: f64,
    src: &mut R,
    options: &AdaptiveOptions,
) -> Result<MlmcResult> {
    if !(eps > 0.0) {
        return Err(invalid(format!("accuracy demand {eps} must be positive")));
    }
    if !config.driver.is_level_extensible() {
        return Err(invalid(
            "adaptive runs need a driver without a fixed maximal level (classic or bit-lc)",
        ));
    }
    if options.warmup < 2 {
        return Err(invalid("warm-up needs at least two samples per level"));
    }
    if options.start_level < 2 || options.start_level > options.max_level {
        return Err(invalid("start level must lie in 2..=max_level"));
    }
    if options.alpha_window < 2 {
        return Err(invalid("the rate regression needs at least two levels"));
    }

    let mut sampler = config.sampler()?;
    let mut moments: Vec<RunningStats> = Vec::new();
    let mut costs: Vec<CostLedger> = Vec::new();
    let add_level = |moments: &mut Vec<RunningStats>,
                         costs: &mut Vec<CostLedger>,
                         sampler: &mut CoupledSampler,
                         src: &mut R|
     -> Result<()> {
        let level = moments.len() as u32;
        let mut m = RunningStats::new();
        let mut c = CostLedger::default();
        draw_into(sampler, level, options.warmup, src, &mut m, &mut c)?;
        moments.push(m);
        costs.push(c);
        Ok(())
    };
    for _ in 0..=options.start_level {
        add_level(&mut moments, &mut costs, &mut sampler, src)?;
    }

    loop {
        loop {
            let v: Vec<f64> = moments.iter().map(|m| m.variance()).collect();
            let c: Vec<f64> = moments
                .iter()
                .zip(&costs)
                .map(|(m, c)| c.total() as f64 / m.count() as f64)
                .collect();
            let target = optimal_replications(eps, &v, &c)?;
            let mut significant = false;
            let mut extra = Vec::with_capacity(target.len());
            for (m, &t) in moments.iter().zip(&target) {
                let dn = t.saturating_sub(m.count());
                significant |= dn as f64 > options.refine_tolerance * m.count() as f64;
                extra.push(dn);
            }
            for (level, dn) in extra.into_iter().enumerate() {
                draw_into(
                    &mut sampler,
                    level as u32,
                    dn,
                    src,
                    &mut moments[level],
                    &mut costs[level],
                )?;
            }
            if !significant {
                break;
            }
        }

        let means: Vec<f64> = moments.iter().map(|m| m.mean()).collect();
        let alpha = fit_weak_rate(&means, options.alpha_window, options.alpha_floor);
        let converged = bias_converged(&means, alpha, eps);
        let top = (moments.len() - 1) as u32;
        if converged || top == options.max_level {
            let levels: Vec<LevelStats> = moments
                .iter()
                .zip(&costs)
                .enumerate()
                .map(|(l, (m, c))| LevelStats::from_parts(l as u32, *m, *c))
                .collect();
            let result = MlmcResult {
                estimate: levels.iter().map(|l| l.mean_diff).sum(),
                total_cost: costs.iter().copied().sum(),
                levels,
                eps,
                converged,
                weak_rate_alpha: alpha,
            };
            return if converged {
                Ok(result)
            } else {
                Err(Error::NonConvergence {
                    max_level: options.max_level,
                    partial: Box::new(result),
                })
            };
        }
        add_level(&mut moments, &mut costs, &mut sampler, src)?;
    }
}
