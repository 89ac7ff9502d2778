//! Continuous Lyapunov equations `J Q + Q Jᵀ + S = 0` by the Bartels–Stewart
//! method: real Schur form of `J`, a quasi-triangular Sylvester solve, and a
//! back-transformation.
//!
//! [`LyapunovSolver`] keeps the factorization so the same `J` can be used for
//! several right-hand sides and for the adjoint equation `Jᵀ P + P J + G = 0`.

use nalgebra::DMatrix;

use super::schur::{quasi_blocks, RealSchur};
use crate::error::{Error, Result};

/// Eigenvalue real parts must stay below `-STABILITY_TOL`.
pub const STABILITY_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct LyapunovSolver {
    schur: RealSchur,
    /// Π Tᵀ Π (Π the reversal permutation), upper quasi-triangular, for the adjoint.
    t_rev: DMatrix<f64>,
    zt: DMatrix<f64>,
    spectral_abscissa: f64,
}

impl LyapunovSolver {
    /// Factorize `J`, failing if it is not square or not Hurwitz-stable.
    pub fn new(j: &DMatrix<f64>) -> Result<Self> {
        let schur = RealSchur::new(j)?;
        let spectral_abscissa = schur.spectral_abscissa();
        if spectral_abscissa >= -STABILITY_TOL {
            return Err(Error::Unstable { max_real: spectral_abscissa });
        }
        let n = j.nrows();
        let t_rev = DMatrix::from_fn(n, n, |i, k| schur.t[(n - 1 - k, n - 1 - i)]);
        let zt = schur.z.transpose();
        Ok(LyapunovSolver { schur, t_rev, zt, spectral_abscissa })
    }

    pub fn spectral_abscissa(&self) -> f64 {
        self.spectral_abscissa
    }

    pub fn dim(&self) -> usize {
        self.schur.t.nrows()
    }

    /// Solve `J Q + Q Jᵀ + S = 0`; the result is symmetrized when `S` is symmetric.
    pub fn solve(&self, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_rhs(s)?;
        let z = &self.schur.z;
        let f = -(&self.zt * s * z);
        let y = solve_quasi_triangular(&self.schur.t, f);
        let q = z * y * &self.zt;
        Ok(symmetrize_if(q, is_symmetric(s)))
    }

    /// Solve the adjoint equation `Jᵀ P + P J + G = 0`.
    pub fn solve_adjoint(&self, g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_rhs(g)?;
        let n = self.dim();
        let z = &self.schur.z;
        let f = -(&self.zt * g * z);
        let f_rev = DMatrix::from_fn(n, n, |i, k| f[(n - 1 - i, n - 1 - k)]);
        let y_rev = solve_quasi_triangular(&self.t_rev, f_rev);
        let y = DMatrix::from_fn(n, n, |i, k| y_rev[(n - 1 - i, n - 1 - k)]);
        let p = z * y * &self.zt;
        Ok(symmetrize_if(p, is_symmetric(g)))
    }

    fn check_rhs(&self, s: &DMatrix<f64>) -> Result<()> {
        let n = self.dim();
        if s.shape() != (n, n) {
            return Err(Error::Shape(format!(
                "Lyapunov right-hand side is {}x{}, expected {n}x{n}",
                s.nrows(),
                s.ncols()
            )));
        }
        Ok(())
    }
}

fn is_symmetric(a: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    (0..n).all(|j| (j + 1..n).all(|i| a[(i, j)] == a[(j, i)]))
}

fn symmetrize_if(q: DMatrix<f64>, sym: bool) -> DMatrix<f64> {
    if sym {
        (&q + q.transpose()) * 0.5
    } else {
        q
    }
}

/// Solve `J Q + Q Jᵀ + S = 0` for Hurwitz-stable `J`. The returned `Q` is
/// symmetrized as `(Q + Qᵀ)/2` when `S` is symmetric.
pub fn solve_lyapunov(j: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !j.is_square() {
        return Err(Error::Shape(format!(
            "Lyapunov coefficient must be square, got {}x{}",
            j.nrows(),
            j.ncols()
        )));
    }
    if s.shape() != j.shape() {
        return Err(Error::Shape(format!(
            "Lyapunov right-hand side is {}x{}, coefficient is {}x{}",
            s.nrows(),
            s.ncols(),
            j.nrows(),
            j.ncols()
        )));
    }
    LyapunovSolver::new(j)?.solve(s)
}

/// Columns per block in [`solve_quasi_triangular`]; updates across blocks are one GEMM.
const COL_BLOCK: usize = 16;

/// Solve `T Y + Y Tᵀ = F` for upper quasi-triangular `T`, overwriting `F`.
fn solve_quasi_triangular(t: &DMatrix<f64>, mut y: DMatrix<f64>) -> DMatrix<f64> {
    let n = t.nrows();
    let blocks = quasi_blocks(t);
    // Rows of T as contiguous columns.
    let tt = t.transpose();
    // Group the diagonal blocks into column panels, never splitting a 2x2 block.
    let mut panels: Vec<(usize, usize)> = Vec::new();
    let mut end = blocks.len();
    while end > 0 {
        let mut start = end - 1;
        while start > 0 && blocks[end - 1].0 + blocks[end - 1].1 - blocks[start - 1].0 <= COL_BLOCK {
            start -= 1;
        }
        panels.push((start, end));
        end = start;
    }
    for &(pb0, pb1) in &panels {
        let p0 = blocks[pb0].0;
        for &(k0, kq) in blocks[pb0..pb1].iter().rev() {
            for &(i0, ip) in blocks.iter().rev() {
                // Fold in the already-solved rows below this block.
                let mut rhs = [0.0; 4];
                let lo = i0 + ip;
                for c in 0..kq {
                    let col = (k0 + c) * n;
                    let ycol = &y.as_slice()[col + lo..col + n];
                    for r in 0..ip {
                        let row = (i0 + r) * n;
                        let trow = &tt.as_slice()[row + lo..row + n];
                        rhs[c * ip + r] = y[(i0 + r, k0 + c)] - dot(trow, ycol);
                    }
                }
                let sol = solve_small_sylvester(t, i0, ip, k0, kq, rhs);
                for c in 0..kq {
                    for r in 0..ip {
                        y[(i0 + r, k0 + c)] = sol[c * ip + r];
                    }
                }
            }
            // Remove this column block's contribution from earlier columns of
            // the same panel: (Y Tᵀ)[:, j] includes Σ_c Y[:, c] T[j, c].
            for c in k0..k0 + kq {
                let (done, mut rest) = y.columns_range_pair_mut(c.., p0..k0);
                let yc = done.column(0);
                for j in p0..k0 {
                    let w = t[(j, c)];
                    if w != 0.0 {
                        rest.column_mut(j - p0).axpy(-w, &yc, 1.0);
                    }
                }
            }
        }
        // Then from all columns left of the panel at once.
        if p0 > 0 {
            let width = blocks[pb1 - 1].0 + blocks[pb1 - 1].1 - p0;
            let solved = y.columns(p0, width).into_owned();
            let coupling = t.view((0, p0), (p0, width));
            y.columns_mut(0, p0).gemm(-1.0, &solved, &coupling.transpose(), 1.0);
        }
    }
    y
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators so the loop vectorizes.
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Solve `A Z + Z Bᵀ = R` for the diagonal blocks A = T[i0.., i0..] (ip×ip) and
/// B = T[k0.., k0..] (kq×kq), with Z and R stored column-major.
fn solve_small_sylvester(t: &DMatrix<f64>, i0: usize, ip: usize, k0: usize, kq: usize, rhs: [f64; 4]) -> [f64; 4] {
    let dim = ip * kq;
    if dim == 1 {
        return [rhs[0] / (t[(i0, i0)] + t[(k0, k0)]), 0.0, 0.0, 0.0];
    }
    // Kronecker form: (I_kq ⊗ A + B ⊗ I_ip) vec(Z) = vec(R).
    let mut m = [[0.0; 5]; 4];
    for c in 0..kq {
        for r in 0..ip {
            let row = c * ip + r;
            for c2 in 0..kq {
                for r2 in 0..ip {
                    let col = c2 * ip + r2;
                    let mut v = 0.0;
                    if c == c2 {
                        v += t[(i0 + r, i0 + r2)];
                    }
                    if r == r2 {
                        v += t[(k0 + c, k0 + c2)];
                    }
                    m[row][col] = v;
                }
            }
            m[row][4] = rhs[row];
        }
    }
    // Gaussian elimination with partial pivoting.
    for col in 0..dim {
        let piv = (col..dim)
            .max_by(|&a, &b| m[a][col].abs().partial_cmp(&m[b][col].abs()).unwrap())
            .unwrap();
        m.swap(col, piv);
        let d = m[col][col];
        for row in col + 1..dim {
            let f = m[row][col] / d;
            if f != 0.0 {
                for k in col..dim {
                    m[row][k] -= f * m[col][k];
                }
                m[row][4] -= f * m[col][4];
            }
        }
    }
    let mut out = [0.0; 4];
    for row in (0..dim).rev() {
        let mut s = m[row][4];
        for k in row + 1..dim {
            s -= m[row][k] * out[k];
        }
        out[row] = s / m[row][row];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn max_abs(a: &DMatrix<f64>) -> f64 {
        a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    #[test]
    fn scalar_equation() {
        let q = solve_lyapunov(&DMatrix::from_element(1, 1, -1.0), &DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert!((q[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn decoupled_scalars() {
        let j = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -2.0]));
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 4.0]));
        let q = solve_lyapunov(&j, &s).unwrap();
        assert!(max_abs(&(q - DMatrix::identity(2, 2))) < 1e-15);
    }

    #[test]
    fn complex_pair_block() {
        // Rotation-dominated J exercises the 2x2 Schur blocks.
        let j = DMatrix::from_row_slice(3, 3, &[-0.5, 2.0, 0.0, -2.0, -0.5, 0.3, 0.1, 0.0, -1.0]);
        let s = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.2, 2.0, 0.1, 0.0, 0.1, 0.5]);
        let q = solve_lyapunov(&j, &s).unwrap();
        let res = &j * &q + &q * j.transpose() + &s;
        assert!(max_abs(&res) < 1e-13);
        assert_eq!(q, q.transpose());
    }

    #[test]
    fn adjoint_equation() {
        let j = DMatrix::from_row_slice(3, 3, &[-0.5, 2.0, 0.0, -2.0, -0.5, 0.3, 0.1, 0.4, -1.0]);
        let g = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, -0.2, 0.3, 2.0, 0.1, -0.2, 0.1, 0.5]);
        let solver = LyapunovSolver::new(&j).unwrap();
        let p = solver.solve_adjoint(&g).unwrap();
        let res = j.transpose() * &p + &p * &j + &g;
        assert!(max_abs(&res) < 1e-13);
    }

    #[test]
    fn large_systems_span_several_column_panels() {
        // Deterministic pseudo-random J with complex pairs, sizes around the panel width.
        for n in [COL_BLOCK - 1, COL_BLOCK + 1, 3 * COL_BLOCK + 5, 70] {
            let mut x = 0.5_f64;
            let mut next = || {
                x = (x * 3.7 + 0.13).fract();
                x - 0.5
            };
            let mut j = DMatrix::from_fn(n, n, |_, _| next() * 3.0 / (n as f64).sqrt());
            for i in 0..n {
                j[(i, i)] -= 2.5;
            }
            let g = DMatrix::from_fn(n, n, |_, _| next());
            let s = &g * g.transpose();
            let solver = LyapunovSolver::new(&j).unwrap();
            let q = solver.solve(&s).unwrap();
            let res = &j * &q + &q * j.transpose() + &s;
            assert!(max_abs(&res) < 1e-11 * max_abs(&s), "n={n}: {}", max_abs(&res));
            let p = solver.solve_adjoint(&g).unwrap();
            let res = j.transpose() * &p + &p * &j + &g;
            assert!(max_abs(&res) < 1e-11 * max_abs(&g).max(1.0), "adjoint n={n}");
        }
    }

    #[test]
    fn unstable_coefficient_is_rejected() {
        let j = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, 0.0]));
        let s = DMatrix::identity(2, 2);
        assert!(matches!(solve_lyapunov(&j, &s), Err(Error::Unstable { .. })));
        let j = DMatrix::from_row_slice(2, 2, &[0.1, 1.0, -1.0, 0.1]);
        assert!(matches!(solve_lyapunov(&j, &s), Err(Error::Unstable { .. })));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let j = -DMatrix::<f64>::identity(2, 2);
        assert!(matches!(solve_lyapunov(&j, &DMatrix::identity(3, 3)), Err(Error::Shape(_))));
        assert!(matches!(solve_lyapunov(&DMatrix::zeros(2, 3), &DMatrix::identity(2, 2)), Err(Error::Shape(_))));
    }
}
