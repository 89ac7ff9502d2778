//! The mOU network model and its forward step.
//!
//! Dynamics: dx/dt = J x + Σ^{1/2} dB/dt with J = −I/τ_x + C. Everything
//! here assumes a zero-mean stationary process, so the constructor refuses
//! parameter sets whose Jacobian is not Hurwitz-stable.
//!
//! Lag convention used throughout the crate: `Qτ[i][j] = E[x_i(t) x_j(t+τ)]`,
//! which gives `Qτ = Q0 · expm(Jᵀ τ)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::matfun::{mat_exp, LyapunovSolver};
use crate::synth::TimeSeries;

/// Tolerance for the PSD check on conditional covariances.
pub const PSD_TOL: f64 = 1e-10;

/// Generative parameters θ = {C, Σ, τ_x}.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    c: DMatrix<f64>,
    sigma_diag: Vec<f64>,
    tau_x: f64,
}

impl ModelParams {
    /// Validates shape, zero diagonal, positivity and stability.
    pub fn new(c: DMatrix<f64>, sigma_diag: Vec<f64>, tau_x: f64) -> Result<Self> {
        let m = c.nrows();
        if !c.is_square() {
            return Err(Error::Shape(format!("connectivity must be square, got {}x{}", c.nrows(), c.ncols())));
        }
        if sigma_diag.len() != m {
            return Err(Error::Shape(format!(
                "noise vector has length {}, connectivity is {m}x{m}",
                sigma_diag.len()
            )));
        }
        if m == 0 {
            return Err(Error::Shape("empty network".into()));
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite connectivity entry".into()));
        }
        if let Some(i) = (0..m).find(|&i| c[(i, i)] != 0.0) {
            return Err(Error::Domain(format!("connectivity diagonal entry {i} is {} (must be 0)", c[(i, i)])));
        }
        if let Some((i, s)) = sigma_diag.iter().enumerate().find(|(_, s)| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::Domain(format!("noise variance {i} is {s} (must be > 0)")));
        }
        if !(tau_x > 0.0 && tau_x.is_finite()) {
            return Err(Error::Domain(format!("time constant must be > 0, got {tau_x}")));
        }
        let params = ModelParams { c, sigma_diag, tau_x };
        // Rejects unstable Jacobians.
        LyapunovSolver::new(&params.jacobian())?;
        Ok(params)
    }

    pub fn node_count(&self) -> usize {
        self.c.nrows()
    }

    pub fn connectivity(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn sigma_diag(&self) -> &[f64] {
        &self.sigma_diag
    }

    pub fn tau_x(&self) -> f64 {
        self.tau_x
    }

    pub fn noise_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&self.sigma_diag))
    }

    /// J = −I/τ_x + C.
    pub fn jacobian(&self) -> DMatrix<f64> {
        jacobian_of(&self.c, self.tau_x)
    }

    /// Apply the node permutation `perm` (new index i takes old node perm[i]).
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let m = self.node_count();
        let c = DMatrix::from_fn(m, m, |i, j| self.c[(perm[i], perm[j])]);
        let s = perm.iter().map(|&p| self.sigma_diag[p]).collect();
        ModelParams::new(c, s, self.tau_x)
    }
}

pub(crate) fn jacobian_of(c: &DMatrix<f64>, tau_x: f64) -> DMatrix<f64> {
    let mut j = c.clone();
    for i in 0..j.nrows() {
        j[(i, i)] -= 1.0 / tau_x;
    }
    j
}

/// Whether a moment pair was computed from θ or estimated from data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentKind {
    Theoretical,
    Empirical,
}

/// Zero-lag and lagged covariances (Q⁰, Qτ) at lag `tau` seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentPair {
    pub q0: DMatrix<f64>,
    pub qtau: DMatrix<f64>,
    pub tau: f64,
    pub kind: MomentKind,
}

impl MomentPair {
    pub fn node_count(&self) -> usize {
        self.q0.nrows()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if !self.q0.is_square() || self.qtau.shape() != self.q0.shape() {
            return Err(Error::Shape(format!(
                "moment pair shapes {:?} and {:?} do not match",
                self.q0.shape(),
                self.qtau.shape()
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Domain(format!("lag must be > 0, got {}", self.tau)));
        }
        if self.q0.iter().chain(self.qtau.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite covariance entry".into()));
        }
        Ok(())
    }
}

pub fn jacobian(params: &ModelParams) -> DMatrix<f64> {
    params.jacobian()
}

/// Stationary covariance Q⁰ solving J Q⁰ + Q⁰ Jᵀ + Σ = 0.
pub fn model_cov(params: &ModelParams) -> Result<DMatrix<f64>> {
    LyapunovSolver::new(&params.jacobian())?.solve(&params.noise_matrix())
}

/// Qτ = Q⁰ · expm(Jᵀ τ).
pub fn model_lagged_cov(q0: &DMatrix<f64>, j: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    if !q0.is_square() || q0.shape() != j.shape() {
        return Err(Error::Shape(format!(
            "covariance {:?} and Jacobian {:?} disagree",
            q0.shape(),
            j.shape()
        )));
    }
    if !(tau >= 0.0) {
        return Err(Error::Domain(format!("lag must be >= 0, got {tau}")));
    }
    if tau == 0.0 {
        return Ok(q0.clone());
    }
    Ok(q0 * mat_exp(&(j.transpose() * tau))?)
}

/// Theoretical (Q⁰, Qτ) of θ at lag `tau`.
pub fn theoretical_moments(params: &ModelParams, tau: f64) -> Result<MomentPair> {
    let q0 = model_cov(params)?;
    let qtau = model_lagged_cov(&q0, &params.jacobian(), tau)?;
    Ok(MomentPair { q0, qtau, tau, kind: MomentKind::Theoretical })
}

/// One-step propagator Λ = expm(J dt).
pub fn propagator(j: &DMatrix<f64>, dt: f64) -> Result<DMatrix<f64>> {
    if !(dt >= 0.0 && dt.is_finite()) {
        return Err(Error::Domain(format!("time step must be >= 0, got {dt}")));
    }
    mat_exp(&(j * dt))
}

/// Ξ = Q⁰ − Λ Q⁰ Λᵀ, symmetrized and checked PSD.
pub fn conditional_cov(q0: &DMatrix<f64>, lambda: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !q0.is_square() || q0.shape() != lambda.shape() {
        return Err(Error::Shape(format!(
            "covariance {:?} and propagator {:?} disagree",
            q0.shape(),
            lambda.shape()
        )));
    }
    let xi = q0 - lambda * q0 * lambda.transpose();
    let xi = (&xi + xi.transpose()) * 0.5;
    let scale = q0.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let min_eig = xi.clone().symmetric_eigenvalues().min();
    if min_eig < -PSD_TOL * scale {
        return Err(Error::Domain(format!(
            "conditional covariance is not PSD (min eigenvalue {min_eig:e})"
        )));
    }
    Ok(xi)
}

/// Log posterior of the observed series under θ with a uniform prior, up to
/// the additive constant −ln p(X):
///
/// ```text
/// −½ Σₙ Δₙᵀ Ξ⁻¹ Δₙ − ½ x¹ᵀ (Q⁰)⁻¹ x¹ − (N−1)/2 ln((2π)^M |Ξ|) − ½ ln((2π)^M |Q⁰|)
/// ```
///
/// with Δₙ = xⁿ⁺¹ − Λ xⁿ. Data are used as given (no demeaning).
pub fn log_posterior(x: &TimeSeries, params: &ModelParams, dt: f64) -> Result<f64> {
    let m = params.node_count();
    if x.node_count() != m {
        return Err(Error::Shape(format!(
            "series has {} nodes, parameters have {m}",
            x.node_count()
        )));
    }
    let n = x.sample_count();
    if n < 2 {
        return Err(Error::Length { needed: 1, got: n });
    }
    let j = params.jacobian();
    let q0 = model_cov(params)?;
    let lambda = propagator(&j, dt)?;
    let xi = conditional_cov(&q0, &lambda)?;

    let chol_xi = xi.clone().cholesky().ok_or_else(|| Error::Singular {
        magnitude: xi.clone().symmetric_eigenvalues().min().abs(),
        context: "conditional covariance in log posterior".into(),
    })?;
    let chol_q0 = q0.clone().cholesky().ok_or_else(|| Error::Singular {
        magnitude: q0.clone().symmetric_eigenvalues().min().abs(),
        context: "stationary covariance in log posterior".into(),
    })?;
    let logdet = |l: &DMatrix<f64>| 2.0 * (0..m).map(|i| l[(i, i)].ln()).sum::<f64>();
    let logdet_xi = logdet(&chol_xi.l());
    let logdet_q0 = logdet(&chol_q0.l());

    let data = x.data();
    let prev = data.columns(0, n - 1);
    let next = data.columns(1, n - 1);
    let residuals = next - &lambda * prev;
    let whitened = chol_xi.l().solve_lower_triangular(&residuals).ok_or_else(|| Error::Singular {
        magnitude: 0.0,
        context: "conditional covariance factor".into(),
    })?;
    let transition_quad = whitened.norm_squared();

    let first = data.column(0).into_owned();
    let first_w = chol_q0.l().solve_lower_triangular(&first).ok_or_else(|| Error::Singular {
        magnitude: 0.0,
        context: "stationary covariance factor".into(),
    })?;
    let initial_quad = first_w.norm_squared();

    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let transitions = (n - 1) as f64;
    Ok(-0.5 * transition_quad - 0.5 * initial_quad
        - 0.5 * transitions * (m as f64 * ln2pi + logdet_xi)
        - 0.5 * (m as f64 * ln2pi + logdet_q0))
}
