//! SDE problems `dX = a(X) dt + b(X) dW` on `[0, 1]` with a payoff.
//!
//! The three built-in benchmarks are scalar and come with closed-form
//! reference expectations. User models use the same record with the
//! reference value left empty.

use std::fmt;
use std::sync::Arc;

use crate::error::{invalid, Result};

pub type ScalarCoefficient = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Writes `a(x)` (length `r`) or `b(x)` (row-major `r x d`) into the output.
pub type VectorCoefficient = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

#[derive(Clone)]
pub enum Coefficients {
    Scalar {
        drift: ScalarCoefficient,
        diffusion: ScalarCoefficient,
    },
    Vector {
        drift: VectorCoefficient,
        diffusion: VectorCoefficient,
    },
}

/// Path functionals; on vector states both act on the first component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Functional {
    /// `max_{0<=t<=1} x(t)`
    Max,
    /// `x(1)`
    Terminal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Gbm,
    OrnsteinUhlenbeck,
    Cir,
    Custom,
}

#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    pub kind: ModelKind,
    pub state_dim: usize,
    pub noise_dim: usize,
    pub x0: Vec<f64>,
    pub coefficients: Coefficients,
    pub functional: Functional,
    pub analytic_value: Option<f64>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("kind", &self.kind)
            .field("state_dim", &self.state_dim)
            .field("noise_dim", &self.noise_dim)
            .field("x0", &self.x0)
            .field("functional", &self.functional)
            .field("analytic_value", &self.analytic_value)
            .finish_non_exhaustive()
    }
}

impl ModelSpec {
    pub fn scalar(
        name: impl Into<String>,
        x0: f64,
        drift: impl Fn(f64) -> f64 + Send + Sync + 'static,
        diffusion: impl Fn(f64) -> f64 + Send + Sync + 'static,
        functional: Functional,
        analytic_value: Option<f64>,
    ) -> Self {
        ModelSpec {
            name: name.into(),
            kind: ModelKind::Custom,
            state_dim: 1,
            noise_dim: 1,
            x0: vec![x0],
            coefficients: Coefficients::Scalar {
                drift: Arc::new(drift),
                diffusion: Arc::new(diffusion),
            },
            functional,
            analytic_value,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn vector(
        name: impl Into<String>,
        x0: Vec<f64>,
        noise_dim: usize,
        drift: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        diffusion: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        functional: Functional,
        analytic_value: Option<f64>,
    ) -> Result<Self> {
        if x0.is_empty() || noise_dim == 0 {
            return Err(invalid("state and noise dimensions must be positive"));
        }
        Ok(ModelSpec {
            name: name.into(),
            kind: ModelKind::Custom,
            state_dim: x0.len(),
            noise_dim,
            x0,
            coefficients: Coefficients::Vector {
                drift: Arc::new(drift),
                diffusion: Arc::new(diffusion),
            },
            functional,
            analytic_value,
        })
    }

    /// `a(x)`, allocating; meant for inspection rather than inner loops.
    pub fn drift(&self, x: &[f64]) -> Vec<f64> {
        match &self.coefficients {
            Coefficients::Scalar { drift, .. } => vec![drift(x[0])],
            Coefficients::Vector { drift, .. } => {
                let mut out = vec![0.0; self.state_dim];
                drift(x, &mut out);
                out
            }
        }
    }

    /// `b(x)` as a row-major `r x d` matrix.
    pub fn diffusion(&self, x: &[f64]) -> Vec<f64> {
        match &self.coefficients {
            Coefficients::Scalar { diffusion, .. } => vec![diffusion(x[0])],
            Coefficients::Vector { diffusion, .. } => {
                let mut out = vec![0.0; self.state_dim * self.noise_dim];
                diffusion(x, &mut out);
                out
            }
        }
    }
}

/// `dX = X/50 dt + X/5 dW`, `X(0) = 1`, payoff `max X`.
pub fn gbm_model() -> ModelSpec {
    ModelSpec {
        kind: ModelKind::Gbm,
        // E exp(|W(1)|/5) = 2 e^(1/50) Φ(1/5)
        ..ModelSpec::scalar(
            "gbm",
            1.0,
            |x| x / 50.0,
            |x| x / 5.0,
            Functional::Max,
            Some(1.181_923_063_586_564_2),
        )
    }
}

/// `dX = (2 - X) dt + dW`, `X(0) = 1`, payoff `X(1)`.
pub fn ou_model() -> ModelSpec {
    ModelSpec {
        kind: ModelKind::OrnsteinUhlenbeck,
        ..ModelSpec::scalar(
            "ou",
            1.0,
            |x| 2.0 - x,
            |_| 1.0,
            Functional::Terminal,
            Some(2.0 - (-1.0f64).exp()),
        )
    }
}

/// `dX = (3/2 - X) dt + 2 sqrt(X) dW`, `X(0) = 1`, payoff `X(1)`.
pub fn cir_model() -> ModelSpec {
    let e = (-1.0f64).exp();
    ModelSpec {
        kind: ModelKind::Cir,
        ..ModelSpec::scalar(
            "cir",
            1.0,
            |x| 1.5 - x,
            |x| 2.0 * x.max(0.0).sqrt(),
            Functional::Terminal,
            Some(e + 1.5 * (1.0 - e)),
        )
    }
}

pub fn model_by_name(name: &str) -> Result<ModelSpec> {
    match name.to_ascii_lowercase().as_str() {
        "gbm" => Ok(gbm_model()),
        "ou" => Ok(ou_model()),
        "cir" => Ok(cir_model()),
        other => Err(invalid(format!("unknown model `{other}` (expected gbm, ou or cir)"))),
    }
}
