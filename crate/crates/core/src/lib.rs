//! Fair generalized linear models.
//!
//! Fits Gaussian, Bernoulli, Poisson and multinomial GLMs under a convex
//! penalty on cross-group differences of the linear predictor within outcome
//! segments, evaluates group disparities, and sweeps the penalty weight.

pub mod dataset;
pub mod error;
pub mod experiment;
pub mod family;
pub mod metrics;
pub mod penalty;
pub mod solver;

pub use error::{Error, Result};
