//! Time-stepping schemes driven by coupled increments, and payoff evaluation
//! on the resulting grid values.

use crate::bitcore::{CostLedger, RandomSource};
use crate::drivers::{CoupledIncrements, Driver, DriverKind};
use crate::error::{invalid, Error, Result};
use crate::models::{Coefficients, Functional, ModelKind, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemeKind {
    Euler,
    /// Euler with every state clamped at zero after the update.
    EulerPositive,
    /// The positivity-preserving truncated Milstein map for the built-in CIR
    /// model.
    TruncatedMilstein,
}

/// States at `t_k = k 2^-ℓ`, step-major with `r` components per node.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSkeleton {
    pub level: u32,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl PathSkeleton {
    pub fn nodes(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn node(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn terminal(&self) -> &[f64] {
        self.node(self.nodes() - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoupledPayoffSample {
    pub fine_payoff: f64,
    pub coarse_payoff: f64,
    pub diff: f64,
    pub cost: CostLedger,
}

/// `Θ(x, h, w) = max(0, max(√h, √max(h, x) + w)² + (1/2 - x) h)`.
pub fn milstein_trunc_step(x: f64, h: f64, w: f64) -> f64 {
    let inner = h.sqrt().max(h.max(x).sqrt() + w);
    (inner * inner + (0.5 - x) * h).max(0.0)
}

fn check_scheme(model: &ModelSpec, scheme: SchemeKind) -> Result<()> {
    if scheme == SchemeKind::TruncatedMilstein && model.kind != ModelKind::Cir {
        return Err(invalid(format!(
            "truncated Milstein is defined for the built-in CIR model only, not `{}`",
            model.name
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
struct Scratch {
    state: Vec<f64>,
    next: Vec<f64>,
    drift: Vec<f64>,
    diffusion: Vec<f64>,
}

/// Steps the scheme over `inc` and returns the payoff. When `record` is
/// given, every grid state is appended to it.
fn run_scheme(
    model: &ModelSpec,
    scheme: SchemeKind,
    functional: Functional,
    level: u32,
    inc: &[f64],
    scratch: &mut Scratch,
    mut record: Option<&mut Vec<f64>>,
) -> Result<f64> {
    let h = (-f64::from(level)).exp2();
    let d = model.noise_dim;
    let fail = |k: usize| Error::NumericalFailure { level, step: k + 1 };

    match (&model.coefficients, scheme) {
        (_, SchemeKind::TruncatedMilstein) => {
            let mut x = model.x0[0];
            let mut best = x;
            if let Some(r) = record.as_deref_mut() {
                r.push(x);
            }
            for (k, &w) in inc.iter().enumerate() {
                x = milstein_trunc_step(x, h, w);
                if !x.is_finite() {
                    return Err(fail(k));
                }
                best = best.max(x);
                if let Some(r) = record.as_deref_mut() {
                    r.push(x);
                }
            }
            Ok(match functional {
                Functional::Max => best,
                Functional::Terminal => x,
            })
        }
        (Coefficients::Scalar { drift, diffusion }, _) => {
            let positive = scheme == SchemeKind::EulerPositive;
            let mut x = model.x0[0];
            let mut best = x;
            if let Some(r) = record.as_deref_mut() {
                r.push(x);
            }
            for (k, &w) in inc.iter().enumerate() {
                x = x + h * drift(x) + diffusion(x) * w;
                if positive {
                    x = x.max(0.0);
                }
                if !x.is_finite() {
                    return Err(fail(k));
                }
                best = best.max(x);
                if let Some(r) = record.as_deref_mut() {
                    r.push(x);
                }
            }
            Ok(match functional {
                Functional::Max => best,
                Functional::Terminal => x,
            })
        }
        (Coefficients::Vector { drift, diffusion }, _) => {
            let r = model.state_dim;
            let positive = scheme == SchemeKind::EulerPositive;
            scratch.state.clear();
            scratch.state.extend_from_slice(&model.x0);
            scratch.next.resize(r, 0.0);
            scratch.drift.resize(r, 0.0);
            scratch.diffusion.resize(r * d, 0.0);
            let mut best = scratch.state[0];
            if let Some(rec) = record.as_deref_mut() {
                rec.extend_from_slice(&scratch.state);
            }
            for (k, w) in inc.chunks_exact(d).enumerate() {
                drift(&scratch.state, &mut scratch.drift);
                diffusion(&scratch.state, &mut scratch.diffusion);
                for i in 0..r {
                    let noise: f64 = (0..d).map(|j| scratch.diffusion[i * d + j] * w[j]).sum();
                    let mut v = scratch.state[i] + h * scratch.drift[i] + noise;
                    if positive {
                        v = v.max(0.0);
                    }
                    if !v.is_finite() {
                        return Err(fail(k));
                    }
                    scratch.next[i] = v;
                }
                std::mem::swap(&mut scratch.state, &mut scratch.next);
                best = best.max(scratch.state[0]);
                if let Some(rec) = record.as_deref_mut() {
                    rec.extend_from_slice(&scratch.state);
                }
            }
            Ok(match functional {
                Functional::Max => best,
                Functional::Terminal => scratch.state[0],
            })
        }
    }
}

fn check_increments(model: &ModelSpec, level: u32, inc: &[f64]) -> Result<()> {
    if level > 62 {
        return Err(invalid(format!("level {level} too deep")));
    }
    let want = (1usize << level) * model.noise_dim;
    if inc.len() != want {
        return Err(invalid(format!(
            "level {level} needs {want} increment values, got {}",
            inc.len()
        )));
    }
    Ok(())
}

fn skeleton(
    model: &ModelSpec,
    scheme: SchemeKind,
    level: u32,
    inc: &[f64],
) -> Result<PathSkeleton> {
    check_increments(model, level, inc)?;
    let mut values = Vec::with_capacity(((1usize << level) + 1) * model.state_dim);
    run_scheme(
        model,
        scheme,
        model.functional,
        level,
        inc,
        &mut Scratch::default(),
        Some(&mut values),
    )?;
    Ok(PathSkeleton {
        level,
        dim: model.state_dim,
        values,
    })
}

/// Euler scheme with step `2^-ℓ` over the given increments.
pub fn euler_path(
    model: &ModelSpec,
    level: u32,
    inc: &[f64],
    positive_part: bool,
) -> Result<PathSkeleton> {
    let scheme = if positive_part {
        SchemeKind::EulerPositive
    } else {
        SchemeKind::Euler
    };
    skeleton(model, scheme, level, inc)
}

/// Iterates the truncated Milstein map; only the built-in CIR model is
/// accepted since the map hard-codes its coefficients.
pub fn milstein_trunc_path(model: &ModelSpec, level: u32, inc: &[f64]) -> Result<PathSkeleton> {
    check_scheme(model, SchemeKind::TruncatedMilstein)?;
    skeleton(model, SchemeKind::TruncatedMilstein, level, inc)
}

/// Payoff on grid values; the maximum of the piecewise-linear interpolant is
/// attained at a node.
pub fn evaluate_payoff(functional: Functional, path: &PathSkeleton) -> f64 {
    match functional {
        Functional::Terminal => path.terminal()[0],
        Functional::Max => (0..path.nodes())
            .map(|k| path.node(k)[0])
            .fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Draws coupled fine/coarse payoffs for one model, scheme and driver,
/// reusing its buffers between samples. One sampler per task.
#[derive(Debug, Clone)]
pub struct CoupledSampler {
    model: ModelSpec,
    functional: Functional,
    scheme: SchemeKind,
    driver: Driver,
    increments: CoupledIncrements,
    scratch: Scratch,
}

impl CoupledSampler {
    pub fn new(model: ModelSpec, scheme: SchemeKind, driver: DriverKind) -> Result<Self> {
        let functional = model.functional;
        Self::with_functional(model, functional, scheme, driver)
    }

    pub fn with_functional(
        model: ModelSpec,
        functional: Functional,
        scheme: SchemeKind,
        driver: DriverKind,
    ) -> Result<Self> {
        check_scheme(&model, scheme)?;
        let dim = model.noise_dim;
        Ok(CoupledSampler {
            model,
            functional,
            scheme,
            driver: Driver::new(driver),
            increments: CoupledIncrements::empty(dim),
            scratch: Scratch::default(),
        })
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn scheme(&self) -> SchemeKind {
        self.scheme
    }

    pub fn driver_kind(&self) -> DriverKind {
        self.driver.kind()
    }

    pub fn sample<R: RandomSource + ?Sized>(
        &mut self,
        level: u32,
        src: &mut R,
    ) -> Result<CoupledPayoffSample> {
        let before = src.ledger();
        self.driver
            .generate(level, self.model.noise_dim, src, &mut self.increments)?;
        let fine_payoff = run_scheme(
            &self.model,
            self.scheme,
            self.functional,
            level,
            &self.increments.fine,
            &mut self.scratch,
            None,
        )?;
        let coarse_payoff = if level == 0 {
            0.0
        } else {
            run_scheme(
                &self.model,
                self.scheme,
                self.functional,
                level - 1,
                &self.increments.coarse,
                &mut self.scratch,
                None,
            )?
        };
        Ok(CoupledPayoffSample {
            fine_payoff,
            coarse_payoff,
            diff: fine_payoff - coarse_payoff,
            cost: src.ledger() - before,
        })
    }
}

/// One coupled payoff sample; see [`CoupledSampler`] for repeated draws.
pub fn coupled_payoff<R: RandomSource + ?Sized>(
    model: &ModelSpec,
    functional: Functional,
    scheme: SchemeKind,
    driver: DriverKind,
    level: u32,
    src: &mut R,
) -> Result<CoupledPayoffSample> {
    CoupledSampler::with_functional(model.clone(), functional, scheme, driver)?.sample(level, src)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitcore::BitSource;
    use crate::drivers::classic_coupled_increments;
    use crate::models::{cir_model, gbm_model, ou_model};
    use proptest::prelude::*;

    fn frozen(x0: f64, functional: Functional) -> ModelSpec {
        ModelSpec::scalar("frozen", x0, |_| 0.0, |_| 0.0, functional, Some(x0))
    }

    #[test]
    fn zero_dynamics_stay_put() {
        let m = frozen(1.3, Functional::Max);
        let path = euler_path(&m, 3, &[0.7; 8], false).unwrap();
        assert!(path.values.iter().all(|&v| v == 1.3));
        assert_eq!(path.nodes(), 9);
    }

    #[test]
    fn gbm_single_step() {
        let path = euler_path(&gbm_model(), 0, &[0.1], false).unwrap();
        assert_eq!(path.values[0], 1.0);
        assert!((path.values[1] - 1.04).abs() < 1e-15);
    }

    #[test]
    fn cir_positive_part_clamps() {
        let mut m = cir_model();
        m.x0 = vec![0.01];
        // 0.01 + 0.745 - 0.2 w is negative for w = -5
        let raw = euler_path(&m, 1, &[-5.0, 0.0], false).unwrap();
        assert!((raw.values[1] + 0.245).abs() < 1e-12);
        let clamped = euler_path(&m, 1, &[-5.0, 0.0], true).unwrap();
        assert_eq!(clamped.values[1], 0.0);
    }

    #[test]
    fn theta_examples() {
        assert!((milstein_trunc_step(1.0, 0.25, 0.0) - 0.875).abs() < 1e-15);
        assert!((milstein_trunc_step(0.0, 0.25, -5.0) - 0.375).abs() < 1e-15);
        let path = milstein_trunc_path(&cir_model(), 0, &[0.0]).unwrap();
        assert!((path.values[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn milstein_rejects_other_models() {
        assert!(milstein_trunc_path(&ou_model(), 0, &[0.0]).is_err());
        assert!(CoupledSampler::new(gbm_model(), SchemeKind::TruncatedMilstein, DriverKind::Classic)
            .is_err());
    }

    #[test]
    fn increment_length_is_checked() {
        assert!(euler_path(&ou_model(), 2, &[0.0; 3], false).is_err());
    }

    #[test]
    fn non_finite_state_is_reported() {
        let m = ModelSpec::scalar("blowup", 1.0, |x| x * x * 1e300, |_| 0.0, Functional::Terminal, None);
        match euler_path(&m, 2, &[0.0; 4], false) {
            Err(Error::NumericalFailure { level: 2, step }) => assert!(step >= 1),
            other => panic!("expected numerical failure, got {other:?}"),
        }
    }

    #[test]
    fn payoffs() {
        let flat = PathSkeleton { level: 1, dim: 1, values: vec![1.0, 1.0, 1.0] };
        assert_eq!(evaluate_payoff(Functional::Max, &flat), 1.0);
        let p = PathSkeleton { level: 1, dim: 1, values: vec![1.0, 1.2, 0.9] };
        assert_eq!(evaluate_payoff(Functional::Max, &p), 1.2);
        assert_eq!(evaluate_payoff(Functional::Terminal, &p), 0.9);
    }

    #[test]
    fn level_zero_contract() {
        let mut src = BitSource::new(1, 0);
        for driver in [DriverKind::Classic, DriverKind::BitLc] {
            let s = coupled_payoff(&ou_model(), Functional::Terminal, SchemeKind::Euler, driver, 0, &mut src)
                .unwrap();
            assert_eq!(s.coarse_payoff, 0.0);
            assert_eq!(s.diff, s.fine_payoff);
        }
    }

    #[test]
    fn deterministic_model_has_zero_difference() {
        let m = frozen(2.0, Functional::Terminal);
        let mut sampler = CoupledSampler::new(m, SchemeKind::Euler, DriverKind::Classic).unwrap();
        let mut src = BitSource::new(3, 3);
        for level in 1..6 {
            assert_eq!(sampler.sample(level, &mut src).unwrap().diff, 0.0);
        }
        // deterministic drift still couples exactly: both paths solve x' = 1
        let drift_only = ModelSpec::scalar("drift", 0.0, |_| 1.0, |_| 0.0, Functional::Terminal, None);
        let s = coupled_payoff(&drift_only, Functional::Terminal, SchemeKind::Euler, DriverKind::Classic, 4, &mut src)
            .unwrap();
        assert!((s.fine_payoff - 1.0).abs() < 1e-15);
        assert!((s.diff).abs() < 1e-15);
    }

    #[test]
    fn sample_cost_matches_driver() {
        let mut src = BitSource::new(4, 0);
        let s = coupled_payoff(&gbm_model(), Functional::Max, SchemeKind::Euler, DriverKind::Classic, 5, &mut src)
            .unwrap();
        assert_eq!(s.cost, CostLedger { bits_drawn: 0, numbers_drawn: 32 });
        let s = coupled_payoff(&gbm_model(), Functional::Max, SchemeKind::Euler, DriverKind::BitLc, 5, &mut src)
            .unwrap();
        assert_eq!(s.cost, CostLedger { bits_drawn: 126, numbers_drawn: 0 });
    }

    #[test]
    fn classic_coarse_path_is_the_direct_coarse_euler_path() {
        let m = gbm_model();
        let mut a = BitSource::new(12, 1);
        let mut b = BitSource::new(12, 1);
        for level in 1..8u32 {
            let inc = classic_coupled_increments(level, 1, &mut a).unwrap();
            let coarse = euler_path(&m, level - 1, &inc.coarse, false).unwrap();
            let fine = euler_path(&m, level, &inc.fine, false).unwrap();
            let s = coupled_payoff(&m, Functional::Max, SchemeKind::Euler, DriverKind::Classic, level, &mut b)
                .unwrap();
            assert_eq!(s.coarse_payoff, evaluate_payoff(Functional::Max, &coarse));
            assert_eq!(s.fine_payoff, evaluate_payoff(Functional::Max, &fine));
        }
    }

    #[test]
    fn vector_model_matches_scalar_version() {
        let scalar = ou_model();
        let vector = ModelSpec::vector(
            "ou-vec",
            vec![1.0],
            1,
            |x, a| a[0] = 2.0 - x[0],
            |_, b| b[0] = 1.0,
            Functional::Terminal,
            None,
        )
        .unwrap();
        let mut src = BitSource::new(2, 2);
        let inc = classic_coupled_increments(5, 1, &mut src).unwrap();
        let a = euler_path(&scalar, 5, &inc.fine, false).unwrap();
        let b = euler_path(&vector, 5, &inc.fine, false).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn two_dimensional_noise() {
        // independent components: X_i = W_i
        let m = ModelSpec::vector(
            "planar",
            vec![0.0, 0.0],
            2,
            |_, a| a.fill(0.0),
            |_, b| b.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]),
            Functional::Terminal,
            None,
        )
        .unwrap();
        let inc = [0.5, -1.0, 0.25, 2.0];
        let p = euler_path(&m, 1, &inc, false).unwrap();
        assert_eq!(p.terminal(), &[0.75, 1.0]);
    }

    proptest! {
        #[test]
        fn theta_never_negative(x in 0.0f64..50.0, h in 1e-9f64..1.0, w in -50.0f64..50.0) {
            prop_assert!(milstein_trunc_step(x, h, w) >= 0.0);
        }

        #[test]
        fn positive_schemes_stay_nonnegative(seed in 0u64..1000, level in 0u32..8) {
            let mut src = BitSource::new(seed, 0);
            let inc = classic_coupled_increments(level, 1, &mut src).unwrap();
            let m = cir_model();
            let e = euler_path(&m, level, &inc.fine, true).unwrap();
            prop_assert!(e.values.iter().all(|&v| v >= 0.0));
            let t = milstein_trunc_path(&m, level, &inc.fine).unwrap();
            prop_assert!(t.values.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn nodal_max_bounds_interpolant(values in proptest::collection::vec(-5.0f64..5.0, 2..40)) {
            let path = PathSkeleton { level: 0, dim: 1, values: values.clone() };
            let nodal = evaluate_payoff(Functional::Max, &path);
            for w in values.windows(2) {
                for s in 0..=10 {
                    let t = s as f64 / 10.0;
                    prop_assert!((1.0 - t) * w[0] + t * w[1] <= nodal + 1e-12);
                }
            }
        }
    }
}
