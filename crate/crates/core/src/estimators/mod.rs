//! Connectivity estimators: closed-form moments and Bayesian inversions, and
//! the iterative Lyapunov fit.

mod closed_form;
mod lyapunov_fit;

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::matfun::{imag_real_ratio, off_diagonal, pearson, real_part};
use crate::model::ModelParams;

pub use closed_form::{bayesian_estimate, bayesian_moments, bayesian_propagator, moments_estimate, sigma_from_estimate};
pub use lyapunov_fit::{lyapunov_fit, FitInit, LyapunovFitConfig, UpdateRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Moments,
    Bayesian,
    Lyapunov,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Moments => "moments",
            Method::Bayesian => "bayesian",
            Method::Lyapunov => "lyapunov",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moments" => Ok(Method::Moments),
            "bayesian" => Ok(Method::Bayesian),
            "lyapunov" => Ok(Method::Lyapunov),
            other => Err(Error::Config(format!(
                "unknown method `{other}` (expected moments, bayesian or lyapunov)"
            ))),
        }
    }
}

/// Output of any estimator.
#[derive(Debug, Clone)]
pub struct Estimate {
    /// Estimated Jacobian; complex for the logarithm-based methods.
    pub j_hat: DMatrix<Complex64>,
    /// Off-diagonal real part of Ĵ, zero diagonal.
    pub c_hat: DMatrix<f64>,
    pub sigma_hat: Vec<f64>,
    /// Frobenius norm of the off-diagonal part of −ĴQ̂⁰ − Q̂⁰Ĵᵀ.
    pub sigma_offdiag_residual: f64,
    /// −M / trace(Re Ĵ).
    pub tau_x_hat: f64,
    pub imag_ratio: f64,
    pub method: Method,
    pub iterations: usize,
    pub fit_value: Option<f64>,
}

impl Estimate {
    /// Assemble an estimate from a (possibly complex) Jacobian and the
    /// covariance used for Σ recovery.
    pub(crate) fn from_jacobian(j_hat: DMatrix<Complex64>, q0: &DMatrix<f64>, method: Method) -> Result<Self> {
        let j_real = real_part(&j_hat);
        let (sigma_hat, sigma_offdiag_residual) = sigma_from_estimate(&j_real, q0)?;
        let m = j_real.nrows();
        let mut c_hat = j_real.clone();
        c_hat.fill_diagonal(0.0);
        let tau_x_hat = -(m as f64) / j_real.trace();
        let imag_ratio = imag_real_ratio(&j_hat)?;
        Ok(Estimate {
            j_hat,
            c_hat,
            sigma_hat,
            sigma_offdiag_residual,
            tau_x_hat,
            imag_ratio,
            method,
            iterations: 0,
            fit_value: None,
        })
    }
}

/// (accuracy_C, accuracy_Σ): Pearson correlation of the off-diagonal
/// connectivity entries, and of the noise variances.
pub fn accuracy(truth: &ModelParams, estimate: &Estimate) -> Result<(f64, f64)> {
    let c_true = truth.connectivity();
    if c_true.shape() != estimate.c_hat.shape() || truth.sigma_diag().len() != estimate.sigma_hat.len() {
        return Err(Error::Shape(format!(
            "ground truth is {}x{}, estimate is {}x{}",
            c_true.nrows(),
            c_true.ncols(),
            estimate.c_hat.nrows(),
            estimate.c_hat.ncols()
        )));
    }
    let acc_c = pearson(&off_diagonal(c_true), &off_diagonal(&estimate.c_hat))?;
    let acc_s = pearson(truth.sigma_diag(), &estimate.sigma_hat)?;
    Ok((acc_c, acc_s))
}
