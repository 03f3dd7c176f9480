//! Harmonic moments, small-value probabilities and lower large deviations
//! for supercritical branching processes in an i.i.d. random environment
//! with finitely many states.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod env_model;
pub mod error;
pub mod exact_engine;
pub mod exec;
pub mod limit_constants;
pub mod monte_carlo;
pub mod numeric;
pub mod rate_fn;
pub mod report;
pub mod small_value;

pub use env_model::{EnvPath, EnvironmentModel, OffspringLaw, TiltedEnv};
pub use error::{Error, Result};
pub use exec::Exec;
