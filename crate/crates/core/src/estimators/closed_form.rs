//! Moments method and Bayesian posterior mean.
//!
//! Under the lag convention `Qτ = Q⁰ expm(Jᵀτ)` the moments inversion reads
//! `Ĵ = logm((Q̂⁰)⁻¹ Q̂τ)ᵀ / τ`. The Bayesian route forms `Λ̂ = T¹(T⁰)⁻¹`
//! directly; with `q0 = T⁰/(N−2)` and `qτ = (T¹)ᵀ/(N−2)` both routes invert the
//! same matrix up to a transpose.

use nalgebra::DMatrix;
use num_complex::Complex64;

use super::{Estimate, Method};
use crate::error::{Error, Result};
use crate::matfun::mat_log;
use crate::model::{MomentKind, MomentPair};
use crate::synth::{demeaned, lagged_products, TimeSeries};

/// Σ̂ = diag(−ĴQ̂⁰ − Q̂⁰Ĵᵀ), plus the Frobenius norm of the discarded off-diagonal part.
pub fn sigma_from_estimate(j_hat_real: &DMatrix<f64>, q0: &DMatrix<f64>) -> Result<(Vec<f64>, f64)> {
    if !j_hat_real.is_square() || j_hat_real.shape() != q0.shape() {
        return Err(Error::Shape(format!(
            "Jacobian {:?} and covariance {:?} disagree",
            j_hat_real.shape(),
            q0.shape()
        )));
    }
    let jq = j_hat_real * q0;
    let s = -(&jq + jq.transpose());
    let m = s.nrows();
    let diag = (0..m).map(|i| s[(i, i)]).collect();
    let mut off = 0.0;
    for j in 0..m {
        for i in 0..m {
            if i != j {
                off += s[(i, j)] * s[(i, j)];
            }
        }
    }
    Ok((diag, off.sqrt()))
}

fn solve_left(a: &DMatrix<f64>, b: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let lu = a.clone().lu();
    let u = lu.u();
    let min_pivot = (0..u.nrows()).map(|i| u[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    let scale = a.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if !(min_pivot > 1e-14 * scale) {
        return Err(Error::Singular { magnitude: min_pivot, context: context.into() });
    }
    lu.solve(b).ok_or_else(|| Error::Singular { magnitude: min_pivot, context: context.into() })
}

/// Ĵ = (1/τ)·logm((Q̂⁰)⁻¹ Q̂τ)ᵀ.
pub fn moments_estimate(moments: &MomentPair) -> Result<Estimate> {
    moments.validate()?;
    let a = solve_left(&moments.q0, &moments.qtau, "zero-lag covariance in moments estimate")?;
    let log_a = mat_log(&a)?;
    let j_hat = log_a.transpose() / Complex64::new(moments.tau, 0.0);
    Estimate::from_jacobian(j_hat, &moments.q0, Method::Moments)
}

fn transition_sums(x: &TimeSeries) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = x.sample_count();
    if n < 3 {
        return Err(Error::Length { needed: 2, got: n });
    }
    let d = demeaned(x);
    // T⁰ = Σ xⁿ(xⁿ)ᵀ and S = Σ xⁿ(xⁿ⁺¹)ᵀ = (T¹)ᵀ over n = 1..N−1.
    let t0 = lagged_products(&d, 0, n - 1);
    let s = lagged_products(&d, 1, n - 1);
    Ok((t0, s))
}

/// The moment pair whose moments estimate coincides with the Bayesian estimate.
pub fn bayesian_moments(x: &TimeSeries) -> Result<MomentPair> {
    let (t0, s) = transition_sums(x)?;
    let norm = (x.sample_count() - 2) as f64;
    Ok(MomentPair { q0: t0 / norm, qtau: s / norm, tau: x.sample_interval(), kind: MomentKind::Empirical })
}

/// Posterior mean Λ̂ = T¹(T⁰)⁻¹ of the one-step propagator.
pub fn bayesian_propagator(x: &TimeSeries) -> Result<DMatrix<f64>> {
    let (t0, s) = transition_sums(x)?;
    // Λ̂ᵀ = (T⁰)⁻¹ (T¹)ᵀ since T⁰ is symmetric.
    Ok(solve_left(&t0, &s, "transition Gram matrix T0")?.transpose())
}

/// Ĵ = logm(Λ̂)/Δt; Σ̂ and the diagnostics use Q̂⁰ = T⁰/(N−2).
pub fn bayesian_estimate(x: &TimeSeries) -> Result<Estimate> {
    let lambda = bayesian_propagator(x)?;
    let dt = x.sample_interval();
    let j_hat = mat_log(&lambda)? / Complex64::new(dt, 0.0);
    let (t0, _) = transition_sums(x)?;
    let q0 = t0 / (x.sample_count() - 2) as f64;
    Estimate::from_jacobian(j_hat, &q0, Method::Bayesian)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matfun::{max_abs_diff, real_part};
    use crate::model::{theoretical_moments, ModelParams};
    use crate::synth::{draw_stable_params, simulate, NetworkConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cmax(a: &DMatrix<Complex64>, b: &DMatrix<Complex64>) -> f64 {
        a.iter().zip(b.iter()).fold(0.0_f64, |m, (x, y)| m.max((x - y).norm()))
    }

    #[test]
    fn scalar_moments() {
        let e1 = (-1.0f64).exp();
        let mp = MomentPair {
            q0: DMatrix::from_element(1, 1, 0.5),
            qtau: DMatrix::from_element(1, 1, 0.5 * e1),
            tau: 1.0,
            kind: MomentKind::Theoretical,
        };
        let est = moments_estimate(&mp).unwrap();
        assert!((est.j_hat[(0, 0)] - Complex64::new(-1.0, 0.0)).norm() < 1e-14);
        assert_eq!(est.c_hat[(0, 0)], 0.0);
        assert!((est.tau_x_hat - 1.0).abs() < 1e-14);
        assert!((est.sigma_hat[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn sigma_examples() {
        let j = -DMatrix::<f64>::identity(2, 2);
        let q0 = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 1.0]);
        let (s, off) = sigma_from_estimate(&j, &q0).unwrap();
        assert_eq!(s, vec![1.0, 2.0]);
        assert_eq!(off, 0.0);
        assert!(matches!(sigma_from_estimate(&j, &DMatrix::zeros(3, 3)), Err(Error::Shape(_))));
    }

    #[test]
    fn roundtrip_recovers_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (p, _) = draw_stable_params(&NetworkConfig::new(5, 0.4, 0), 1.0, &mut rng).unwrap();
        let est = moments_estimate(&theoretical_moments(&p, 1.0).unwrap()).unwrap();
        assert!(max_abs_diff(&est.c_hat, p.connectivity()) < 1e-8);
        assert!(est.imag_ratio < 1e-10);
        for (a, b) in est.sigma_hat.iter().zip(p.sigma_diag()) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(est.sigma_offdiag_residual < 1e-8);
    }

    #[test]
    fn singular_covariance_is_reported() {
        let mp = MomentPair {
            q0: DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]),
            qtau: DMatrix::identity(2, 2),
            tau: 1.0,
            kind: MomentKind::Empirical,
        };
        assert!(matches!(moments_estimate(&mp), Err(Error::Singular { .. })));
    }

    #[test]
    fn bayesian_hand_case() {
        let x = [0.7, -0.2, 1.3];
        let ts = TimeSeries::new(DMatrix::from_row_slice(1, 3, &x), 1.0).unwrap();
        let mean = x.iter().sum::<f64>() / 3.0;
        let d: Vec<f64> = x.iter().map(|v| v - mean).collect();
        let expected = (d[1] * d[0] + d[2] * d[1]) / (d[0] * d[0] + d[1] * d[1]);
        let lam = bayesian_propagator(&ts).unwrap();
        assert!((lam[(0, 0)] - expected).abs() < 1e-15);
        let short = TimeSeries::new(DMatrix::from_row_slice(1, 2, &x[..2]), 1.0).unwrap();
        assert!(matches!(bayesian_estimate(&short), Err(Error::Length { .. })));
    }

    #[test]
    fn bayesian_equals_moments_on_matching_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for m in [3, 12] {
            let (p, _) = draw_stable_params(&NetworkConfig::new(m, 0.3, 0), 1.0, &mut rng).unwrap();
            let ts = simulate(&p, 300.0, 0.05, 1.0, &mut rng).unwrap();
            let b = bayesian_estimate(&ts).unwrap();
            let mo = moments_estimate(&bayesian_moments(&ts).unwrap()).unwrap();
            assert!(cmax(&b.j_hat, &mo.j_hat) < 1e-10);
            assert!(max_abs_diff(&real_part(&b.j_hat), &real_part(&mo.j_hat)) < 1e-10);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (p, _) = draw_stable_params(&NetworkConfig::new(6, 0.4, 0), 1.0, &mut rng).unwrap();
        let perm = [3, 0, 5, 1, 4, 2];
        let pp: ModelParams = p.permuted(&perm).unwrap();
        let a = moments_estimate(&theoretical_moments(&p, 1.0).unwrap()).unwrap();
        let b = moments_estimate(&theoretical_moments(&pp, 1.0).unwrap()).unwrap();
        let a_perm = DMatrix::from_fn(6, 6, |i, j| a.c_hat[(perm[i], perm[j])]);
        assert!(max_abs_diff(&a_perm, &b.c_hat) < 1e-9);

        let ts = simulate(&p, 200.0, 0.05, 1.0, &mut rng).unwrap();
        let a = bayesian_estimate(&ts).unwrap();
        let b = bayesian_estimate(&ts.permuted(&perm)).unwrap();
        let a_perm = DMatrix::from_fn(6, 6, |i, j| a.c_hat[(perm[i], perm[j])]);
        assert!(max_abs_diff(&a_perm, &b.c_hat) < 1e-9);
    }
}
