//! Principal matrix logarithm by inverse scaling and squaring on the complex
//! Schur form.
//!
//! The triangular factor is square-rooted until it is close to the identity,
//! `log(I + X)` is evaluated with an 8-point Gauss-Legendre rule (the [8/8]
//! Padé approximant in partial-fraction form), and the result is scaled back
//! by 2^s. Diagonal entries are then replaced by the scalar principal logs of
//! the eigenvalues, which is both more accurate and pins negative real
//! eigenvalues to the +iπ side of the branch cut.

use std::sync::OnceLock;

use nalgebra::DMatrix;
use num_complex::Complex64;

use super::schur::ComplexSchur;
use crate::error::{Error, Result};

/// Smallest admissible eigenvalue magnitude.
pub const SINGULAR_TOL: f64 = 1e-12;

const NODES: usize = 8;
/// ‖T − I‖₁ bound at which the 8-point rule is accurate to double precision.
const THETA: f64 = 0.25;
const MAX_ROOTS: usize = 64;

fn gauss_legendre_unit() -> &'static [(f64, f64); NODES] {
    static RULE: OnceLock<[(f64, f64); NODES]> = OnceLock::new();
    RULE.get_or_init(|| {
        let m = NODES;
        let mut rule = [(0.0, 0.0); NODES];
        for (i, slot) in rule.iter_mut().enumerate() {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=m {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = m as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            *slot = (0.5 * (x + 1.0), 0.5 * w);
        }
        rule
    })
}

/// Principal logarithm of a real, nonsingular square matrix. The result is
/// complex; imaginary parts are kept even when they are rounding noise.
pub fn mat_log(a: &DMatrix<f64>) -> Result<DMatrix<Complex64>> {
    if !a.is_square() {
        return Err(Error::Shape(format!(
            "matrix logarithm needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let n = a.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let schur = ComplexSchur::from_real(a)?;
    let min_mag = (0..n).map(|i| schur.t[(i, i)].norm()).fold(f64::INFINITY, f64::min);
    if min_mag < SINGULAR_TOL {
        return Err(Error::Singular {
            magnitude: min_mag,
            context: "matrix logarithm of a matrix with a (near-)zero eigenvalue".into(),
        });
    }
    let log_t = log_upper_triangular(&schur.t);
    Ok(&schur.u * log_t * schur.u.adjoint())
}

fn norm1_minus_identity(t: &DMatrix<Complex64>) -> f64 {
    let n = t.nrows();
    let one = Complex64::new(1.0, 0.0);
    (0..n)
        .map(|j| {
            (0..=j)
                .map(|i| if i == j { (t[(i, j)] - one).norm() } else { t[(i, j)].norm() })
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}

/// Principal square root of an upper-triangular matrix (Björck–Hammarling recurrence).
pub(crate) fn sqrt_upper_triangular(t: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    let n = t.nrows();
    let mut r = DMatrix::<Complex64>::zeros(n, n);
    for j in 0..n {
        r[(j, j)] = t[(j, j)].sqrt();
        for i in (0..j).rev() {
            let mut s = Complex64::new(0.0, 0.0);
            for k in i + 1..j {
                s += r[(i, k)] * r[(k, j)];
            }
            r[(i, j)] = (t[(i, j)] - s) / (r[(i, i)] + r[(j, j)]);
        }
    }
    r
}

/// Solve (I + c X) Y = X for upper-triangular X by back substitution.
fn shifted_solve(x: &DMatrix<Complex64>, c: f64) -> DMatrix<Complex64> {
    let n = x.nrows();
    let one = Complex64::new(1.0, 0.0);
    let mut y = DMatrix::<Complex64>::zeros(n, n);
    for j in 0..n {
        for i in (0..=j).rev() {
            let mut s = x[(i, j)];
            for k in i + 1..=j {
                s -= x[(i, k)] * c * y[(k, j)];
            }
            y[(i, j)] = s / (one + x[(i, i)] * c);
        }
    }
    y
}

pub(crate) fn log_upper_triangular(t0: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    let n = t0.nrows();
    let mut t = t0.clone();
    let mut roots = 0;
    while norm1_minus_identity(&t) > THETA && roots < MAX_ROOTS {
        t = sqrt_upper_triangular(&t);
        roots += 1;
    }
    let mut x = t;
    for i in 0..n {
        x[(i, i)] -= Complex64::new(1.0, 0.0);
    }
    let mut out = DMatrix::<Complex64>::zeros(n, n);
    for &(node, weight) in gauss_legendre_unit() {
        out += shifted_solve(&x, node) * Complex64::new(weight, 0.0);
    }
    let scale = Complex64::new(2f64.powi(roots as i32), 0.0);
    out *= scale;
    for i in 0..n {
        out[(i, i)] = t0[(i, i)].ln();
        for k in i + 1..n {
            out[(k, i)] = Complex64::new(0.0, 0.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matfun::mat_exp;
    use std::f64::consts::PI;

    fn max_abs_c(a: &DMatrix<Complex64>, b: &DMatrix<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .fold(0.0_f64, |m, (x, y)| m.max((x - Complex64::new(*y, 0.0)).norm()))
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        // Exact for degree <= 15 on [0, 1].
        let rule = gauss_legendre_unit();
        for deg in 0..=15 {
            let q: f64 = rule.iter().map(|(x, w)| w * x.powi(deg)).sum();
            assert!((q - 1.0 / (deg as f64 + 1.0)).abs() < 1e-15, "deg={deg}");
        }
    }

    #[test]
    fn log_of_identity_is_zero() {
        let l = mat_log(&DMatrix::identity(3, 3)).unwrap();
        assert!(l.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn roundtrip_through_exponential() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.3, 0.1, -0.8]);
        let l = mat_log(&mat_exp(&a).unwrap()).unwrap();
        assert!(max_abs_c(&l, &a) < 1e-9);
    }

    #[test]
    fn negative_eigenvalue_gives_i_pi() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 1.0]);
        let l = mat_log(&a).unwrap();
        assert!((l[(0, 0)] - Complex64::new(0.0, PI)).norm() < 1e-14);
        assert!(l[(1, 1)].norm() < 1e-14);
        assert!(l[(0, 1)].norm() < 1e-14 && l[(1, 0)].norm() < 1e-14);
    }

    #[test]
    fn rotation_log_recovers_angle() {
        let th: f64 = 2.5;
        let a = DMatrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]);
        let l = mat_log(&a).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.0, -th, th, 0.0]);
        assert!(max_abs_c(&l, &expected) < 1e-13);
    }

    #[test]
    fn singular_input_reports_magnitude() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        match mat_log(&a) {
            Err(Error::Singular { magnitude, .. }) => assert!(magnitude < 1e-12),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn triangular_sqrt_squares_back() {
        let t = DMatrix::from_row_slice(
            3,
            3,
            &[4.0, 1.0, -2.0, 0.0, 9.0, 0.5, 0.0, 0.0, 0.25],
        )
        .map(|v| Complex64::new(v, 0.0));
        let r = sqrt_upper_triangular(&t);
        let back = &r * &r;
        let err = back.iter().zip(t.iter()).fold(0.0_f64, |m, (x, y)| m.max((x - y).norm()));
        assert!(err < 1e-14);
    }
}
