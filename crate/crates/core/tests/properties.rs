use mou_core::matfun::{max_abs_diff, mat_exp, mat_log, pearson, real_part, solve_lyapunov};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn square(max_n: usize, scale: f64) -> impl Strategy<Value = DMatrix<f64>> {
    (1..=max_n).prop_flat_map(move |n| {
        prop::collection::vec(-1.0..1.0f64, n * n).prop_map(move |v| DMatrix::from_vec(n, n, v) * scale)
    })
}

/// Shift the diagonal so every Gershgorin disc sits left of −0.5.
fn stabilize(mut j: DMatrix<f64>) -> DMatrix<f64> {
    for i in 0..j.nrows() {
        let radius: f64 = (0..j.ncols()).filter(|&k| k != i).map(|k| j[(i, k)].abs()).sum();
        j[(i, i)] = -radius - 0.5 - j[(i, i)].abs();
    }
    j
}

fn taylor_exp(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut sum = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..40 {
        term = &term * a / k as f64;
        sum += &term;
    }
    sum
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lyapunov_matches_kronecker_solve(j in square(6, 1.0).prop_map(stabilize), s in square(6, 1.0)) {
        prop_assume!(j.nrows() == s.nrows());
        let n = j.nrows();
        let s = &s * s.transpose();
        let q = solve_lyapunov(&j, &s).unwrap();
        let eye = DMatrix::<f64>::identity(n, n);
        let op = eye.kronecker(&j) + j.kronecker(&eye);
        let rhs = -DVector::from_column_slice(s.as_slice());
        let vec_q = op.lu().solve(&rhs).unwrap();
        let q_ref = DMatrix::from_column_slice(n, n, vec_q.as_slice());
        prop_assert!(max_abs_diff(&q, &q_ref) <= 1e-9 * (1.0 + q_ref.amax()));
    }

    #[test]
    fn expm_agrees_with_taylor_for_small_norm(a in square(6, 0.3)) {
        let e = mat_exp(&a).unwrap();
        prop_assert!(max_abs_diff(&e, &taylor_exp(&a)) < 1e-12);
    }

    #[test]
    fn expm_of_negation_is_inverse(a in square(6, 2.0)) {
        let n = a.nrows();
        let prod = mat_exp(&a).unwrap() * mat_exp(&(-&a)).unwrap();
        prop_assert!(max_abs_diff(&prod, &DMatrix::identity(n, n)) < 1e-9);
    }

    #[test]
    fn logm_inverts_expm_near_the_identity(a in square(6, 0.4)) {
        let l = mat_log(&mat_exp(&a).unwrap()).unwrap();
        prop_assert!(max_abs_diff(&real_part(&l), &a) < 1e-10);
        prop_assert!(l.iter().all(|z| z.im.abs() < 1e-10));
    }

    #[test]
    fn pearson_is_affine_invariant(
        x in prop::collection::vec(-10.0..10.0f64, 3..40),
        y_seed in prop::collection::vec(-10.0..10.0f64, 40),
        scale in 0.1..5.0f64,
        shift in -5.0..5.0f64,
    ) {
        let y: Vec<f64> = y_seed[..x.len()].to_vec();
        if let (Ok(r), Ok(r2)) = (pearson(&x, &y), pearson(&x, &y.iter().map(|v| scale * v + shift).collect::<Vec<_>>())) {
            prop_assert!((r - r2).abs() < 1e-9);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
            let flipped = pearson(&x, &y.iter().map(|v| -scale * v).collect::<Vec<_>>()).unwrap();
            prop_assert!((r + flipped).abs() < 1e-9);
        }
    }
}
