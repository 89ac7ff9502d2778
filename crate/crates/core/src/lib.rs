//! Multivariate Ornstein-Uhlenbeck (mOU) network model with three connectivity
//! estimators (moments, Bayesian posterior mean, Lyapunov optimization) and
//! the synthetic-data experiments that compare them.

pub mod error;
pub mod matfun;
pub mod estimators;
pub mod model;
pub mod synth;
pub mod experiments;

pub use error::{Error, ErrorClass, Result};
