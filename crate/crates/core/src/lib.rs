//! Multilevel Monte Carlo for SDEs driven by random bits.
//!
//! Brownian increments are produced either from standard normals (the
//! classic coupling) or from a finite number of fair bits per sample, with a
//! Lévy-Ciesielski construction that keeps the multilevel telescoping sum
//! unbiased. Costs are booked per bit or per number in a [`CostLedger`].

pub mod bitcore;
pub mod drivers;
pub mod error;
pub mod harness;
pub mod invariants;
pub mod mlmc;
pub mod models;
pub mod rbnormal;
pub mod schemes;

pub use bitcore::{BitSource, CostLedger, RandomSource, ReplayBits};
pub use drivers::{CoupledIncrements, Driver, DriverKind};
pub use error::{Error, Result};
pub use mlmc::{run_adaptive, AdaptiveOptions, LevelStats, MlmcConfig, MlmcResult};
pub use models::{cir_model, gbm_model, model_by_name, ou_model, Functional, ModelSpec};
pub use rbnormal::{rb_normal_table, RbNormalTable};
pub use schemes::{CoupledSampler, SchemeKind};
