//! Matrix exponential by scaling and squaring with diagonal Padé approximants
//! of degree 3, 5, 7, 9 or 13, following Higham's 2005 backward-error bounds.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const THETA: [(usize, f64); 4] = [
    (3, 1.495585217958292e-2),
    (5, 2.539398330063230e-1),
    (7, 9.504178996162932e-1),
    (9, 2.097847961257068e0),
];
const THETA_13: f64 = 5.371920351148152;

const B3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const B5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const B7: [f64; 8] = [17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0];
const B9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const B13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

pub(crate) fn norm1(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential `expm(A)` of a square, finite matrix.
pub fn mat_exp(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::Shape(format!(
            "matrix exponential needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite entry in matrix exponential input".into()));
    }
    let n = a.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let nrm = norm1(a);
    for (m, theta) in THETA {
        if nrm <= theta {
            let (u, v) = match m {
                3 => pade_low(a, &B3),
                5 => pade_low(a, &B5),
                7 => pade_low(a, &B7),
                _ => pade_low(a, &B9),
            };
            return pade_solve(&u, &v);
        }
    }
    let s = if nrm > THETA_13 {
        (nrm / THETA_13).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let scaled = a * 2f64.powi(-s);
    let (u, v) = pade13(&scaled);
    let mut r = pade_solve(&u, &v)?;
    for _ in 0..s {
        r = &r * &r;
    }
    Ok(r)
}

/// `expm(A)` together with the Fréchet derivative `L(A, E)` in direction `E`.
///
/// Differentiates the scaling-and-squaring recurrence alongside the
/// exponential itself (Al-Mohy and Higham, 2009), so the cost is a small
/// multiple of one `expm` of the same size.
pub fn mat_exp_frechet(a: &DMatrix<f64>, e: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let f = ExpmFrechet::new(a)?;
    let l = f.apply(e)?;
    Ok((f.exp, l))
}

enum PadeTerms {
    /// Degree 3..9: even powers I, A², A⁴, ... and W with U = A·W.
    Low { b: &'static [f64], powers: Vec<DMatrix<f64>>, w: DMatrix<f64> },
    /// Degree 13.
    High { a2: DMatrix<f64>, a4: DMatrix<f64>, a6: DMatrix<f64>, w1: DMatrix<f64>, z1: DMatrix<f64>, w: DMatrix<f64> },
}

/// `expm(A)` with everything that depends on `A` alone kept, so Fréchet
/// derivatives in many directions cost only the `E`-dependent products.
pub struct ExpmFrechet {
    /// A·2⁻ˢ
    a: DMatrix<f64>,
    scale: f64,
    terms: PadeTerms,
    /// (V − U)⁻¹
    denom_inv: DMatrix<f64>,
    /// Padé approximant of the scaled A and its successive squares.
    squares: Vec<DMatrix<f64>>,
    exp: DMatrix<f64>,
}

impl ExpmFrechet {
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Shape(format!(
                "matrix exponential needs a square matrix, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite entry in matrix exponential input".into()));
        }
        let n = a.nrows();
        let nrm = norm1(a);
        let ident = DMatrix::<f64>::identity(n, n);
        let low = THETA.iter().find(|(_, theta)| nrm <= *theta).map(|&(m, _)| m);
        let (s, a, terms, u, v) = match low {
            Some(m) => {
                let b: &'static [f64] = match m {
                    3 => &B3,
                    5 => &B5,
                    7 => &B7,
                    _ => &B9,
                };
                let a2 = a * a;
                let mut powers = vec![ident, a2.clone()];
                while powers.len() * 2 < b.len() {
                    let next = powers.last().unwrap() * &a2;
                    powers.push(next);
                }
                let mut w = DMatrix::<f64>::zeros(n, n);
                let mut v = DMatrix::<f64>::zeros(n, n);
                for (k, p) in powers.iter().enumerate() {
                    if 2 * k + 1 < b.len() {
                        w += p * b[2 * k + 1];
                    }
                    v += p * b[2 * k];
                }
                let u = a * &w;
                (0, a.clone(), PadeTerms::Low { b, powers, w }, u, v)
            }
            None => {
                let s = if nrm > THETA_13 { (nrm / THETA_13).log2().ceil().max(0.0) as i32 } else { 0 };
                let a = a * 2f64.powi(-s);
                let b = &B13;
                let a2 = &a * &a;
                let a4 = &a2 * &a2;
                let a6 = &a2 * &a4;
                let w1 = &a6 * b[13] + &a4 * b[11] + &a2 * b[9];
                let w2 = &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &ident * b[1];
                let z1 = &a6 * b[12] + &a4 * b[10] + &a2 * b[8];
                let z2 = &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &ident * b[0];
                let w = &a6 * &w1 + w2;
                let u = &a * &w;
                let v = &a6 * &z1 + z2;
                (s, a, PadeTerms::High { a2, a4, a6, w1, z1, w }, u, v)
            }
        };
        let denom_inv = (&v - &u).try_inverse().ok_or_else(singular_pade)?;
        let r = &denom_inv * (&v + &u);
        let mut squares = vec![r];
        for _ in 0..s {
            let last = squares.last().unwrap();
            let next = last * last;
            squares.push(next);
        }
        let exp = squares.last().unwrap().clone();
        Ok(ExpmFrechet { a, scale: 2f64.powi(-s), terms, denom_inv, squares, exp })
    }

    pub fn exp(&self) -> &DMatrix<f64> {
        &self.exp
    }

    /// Fréchet derivative `L(A, E)`.
    pub fn apply(&self, e: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if e.shape() != self.a.shape() {
            return Err(Error::Shape("Fréchet derivative needs square A and E of equal shape".into()));
        }
        if e.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite entry in Fréchet derivative input".into()));
        }
        let n = e.nrows();
        if n == 0 {
            return Ok(DMatrix::zeros(0, 0));
        }
        let a = &self.a;
        let e = e * self.scale;
        let (lu, lv) = match &self.terms {
            PadeTerms::Low { b, powers, w } => {
                let a2 = &powers[1];
                let m2 = a * &e + &e * a;
                let mut lw = &m2 * b[3];
                let mut lv = &m2 * b[2];
                let mut m_prev = m2.clone();
                for k in 2..powers.len() {
                    // M_{2k} = A^{2k-2}·M₂ + M_{2k-2}·A²
                    let m_k = &powers[k - 1] * &m2 + &m_prev * a2;
                    if 2 * k + 1 < b.len() {
                        lw += &m_k * b[2 * k + 1];
                    }
                    lv += &m_k * b[2 * k];
                    m_prev = m_k;
                }
                (a * lw + &e * w, lv)
            }
            PadeTerms::High { a2, a4, a6, w1, z1, w } => {
                let b = &B13;
                let mut m2 = a * &e;
                m2.gemm(1.0, &e, a, 1.0);
                let mut m4 = a2 * &m2;
                m4.gemm(1.0, &m2, a2, 1.0);
                let mut m6 = a4 * &m2;
                m6.gemm(1.0, &m4, a2, 1.0);
                let comb = |c6: f64, c4: f64, c2: f64| {
                    m6.zip_zip_map(&m4, &m2, |x6, x4, x2| c6 * x6 + c4 * x4 + c2 * x2)
                };
                let mut lw = comb(b[7], b[5], b[3]);
                lw.gemm(1.0, a6, &comb(b[13], b[11], b[9]), 1.0);
                lw.gemm(1.0, &m6, w1, 1.0);
                let mut lv = comb(b[6], b[4], b[2]);
                lv.gemm(1.0, a6, &comb(b[12], b[10], b[8]), 1.0);
                lv.gemm(1.0, &m6, z1, 1.0);
                let mut lu = &e * w;
                lu.gemm(1.0, a, &lw, 1.0);
                (lu, lv)
            }
        };
        let mut rhs = &lu + &lv;
        rhs.gemm(1.0, &(lu - lv), &self.squares[0], 1.0);
        let mut l = &self.denom_inv * rhs;
        for r in &self.squares[..self.squares.len() - 1] {
            let mut next = r * &l;
            next.gemm(1.0, &l, r, 1.0);
            l = next;
        }
        Ok(l)
    }
}

fn singular_pade() -> Error {
    Error::Singular { magnitude: 0.0, context: "Padé denominator in matrix exponential".into() }
}

fn pade_low(a: &DMatrix<f64>, b: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let ident = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    // Even powers A^0, A^2, A^4, ...
    let mut powers = vec![ident.clone(), a2.clone()];
    while powers.len() * 2 < b.len() {
        let next = powers.last().unwrap() * &a2;
        powers.push(next);
    }
    let mut u_inner = DMatrix::<f64>::zeros(n, n);
    let mut v = DMatrix::<f64>::zeros(n, n);
    for (k, p) in powers.iter().enumerate() {
        if 2 * k + 1 < b.len() {
            u_inner += p * b[2 * k + 1];
        }
        v += p * b[2 * k];
    }
    (a * u_inner, v)
}

fn pade13(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let ident = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let b = &B13;
    let u_hi = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9]);
    let u_inner = u_hi + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &ident * b[1];
    let u = a * u_inner;
    let v_hi = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8]);
    let v = v_hi + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &ident * b[0];
    (u, v)
}

fn pade_solve(u: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = v + u;
    let q = v - u;
    q.lu().solve(&p).ok_or_else(|| Error::Singular {
        magnitude: 0.0,
        context: "Padé denominator in matrix exponential".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_abs(a: &DMatrix<f64>) -> f64 {
        a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    #[test]
    fn zero_matrix_gives_identity() {
        let e = mat_exp(&DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(e, DMatrix::identity(2, 2));
    }

    #[test]
    fn diagonal_case() {
        let a = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, -1.0]));
        let e = mat_exp(&a).unwrap();
        assert!((e[(0, 0)] - std::f64::consts::E).abs() < 1e-14);
        assert!((e[(1, 1)] - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(e[(0, 1)], 0.0);
        assert_eq!(e[(1, 0)], 0.0);
    }

    #[test]
    fn nilpotent_series_truncates() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let e = mat_exp(&a).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!(max_abs(&(e - expected)) < 1e-15);
    }

    #[test]
    fn large_norm_uses_squaring() {
        // Scalar check through every branch of the degree selection.
        for x in [1e-3, 0.1, 0.5, 1.5, 4.0, 12.0, -30.0] {
            let a = DMatrix::from_element(1, 1, x);
            let e = mat_exp(&a).unwrap()[(0, 0)];
            assert!((e - x.exp()).abs() <= 1e-13 * x.exp().max(1.0), "x={x}");
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(mat_exp(&DMatrix::zeros(2, 3)), Err(Error::Shape(_))));
        let a = DMatrix::from_element(2, 2, f64::INFINITY);
        assert!(matches!(mat_exp(&a), Err(Error::Domain(_))));
    }

    fn block_frechet(a: &DMatrix<f64>, e: &DMatrix<f64>) -> DMatrix<f64> {
        let n = a.nrows();
        let mut big = DMatrix::<f64>::zeros(2 * n, 2 * n);
        big.view_mut((0, 0), (n, n)).copy_from(a);
        big.view_mut((n, n), (n, n)).copy_from(a);
        big.view_mut((0, n), (n, n)).copy_from(e);
        mat_exp(&big).unwrap().view((0, n), (n, n)).into_owned()
    }

    #[test]
    fn frechet_matches_block_exponential() {
        // Scales chosen to hit every Padé degree and the squaring phase.
        let base = DMatrix::from_row_slice(3, 3, &[-1.0, 0.4, 0.0, 0.2, -0.7, 0.3, 0.1, 0.5, -1.2]);
        let e = DMatrix::from_row_slice(3, 3, &[0.3, -0.1, 0.2, 0.0, 0.5, 0.1, -0.4, 0.2, 0.0]);
        for scale in [0.005, 0.1, 0.4, 1.0, 2.0, 5.0, 20.0] {
            let a = &base * scale;
            let (x, l) = mat_exp_frechet(&a, &e).unwrap();
            let oracle = block_frechet(&a, &e);
            let tol = 1e-12 * oracle.norm().max(1.0);
            assert!(max_abs(&(l - oracle)) < tol, "scale={scale}");
            assert!(max_abs(&(x - mat_exp(&a).unwrap())) < 1e-12 * scale.max(1.0));
        }
    }

    #[test]
    fn frechet_matches_finite_difference() {
        let a = DMatrix::from_row_slice(3, 3, &[-1.0, 0.4, 0.0, 0.2, -0.7, 0.3, 0.1, 0.0, -1.2]);
        let e = DMatrix::from_row_slice(3, 3, &[0.3, -0.1, 0.2, 0.0, 0.5, 0.1, -0.4, 0.2, 0.0]);
        let (x, l) = mat_exp_frechet(&a, &e).unwrap();
        assert!(max_abs(&(x - mat_exp(&a).unwrap())) < 1e-13);
        let h = 1e-6;
        let fd = (mat_exp(&(&a + &e * h)).unwrap() - mat_exp(&(&a - &e * h)).unwrap()) / (2.0 * h);
        assert!(max_abs(&(l - fd)) < 1e-8);
    }
}
