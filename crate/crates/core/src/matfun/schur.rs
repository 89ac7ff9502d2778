//! Real and complex Schur decompositions.
//!
//! The real form reduces to upper Hessenberg with Householder reflectors and
//! then runs implicit double-shift (Francis) QR sweeps with deflation. The
//! result is quasi upper-triangular: 1x1 blocks for real eigenvalues and
//! 2x2 blocks for complex-conjugate pairs. 2x2 blocks with real eigenvalues
//! are split with a rotation so every remaining 2x2 block is a genuine pair.
//!
//! The complex form is obtained from the real one by eliminating the
//! subdiagonal of each 2x2 block with a complex rotation.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// A = Z T Zᵀ with Z orthogonal and T quasi upper-triangular.
#[derive(Debug, Clone)]
pub struct RealSchur {
    pub t: DMatrix<f64>,
    pub z: DMatrix<f64>,
}

/// A = U T Uᴴ with U unitary and T upper-triangular.
#[derive(Debug, Clone)]
pub struct ComplexSchur {
    pub t: DMatrix<Complex64>,
    pub u: DMatrix<Complex64>,
}

const MAX_SWEEPS_PER_EIGENVALUE: usize = 40;

impl RealSchur {
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Shape(format!(
                "Schur decomposition needs a square matrix, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite entry in Schur input".into()));
        }
        let (mut h, mut z) = hessenberg(a);
        francis_qr(&mut h, &mut z)?;
        Ok(RealSchur { t: h, z })
    }

    /// Start index and size (1 or 2) of each diagonal block.
    pub fn blocks(&self) -> Vec<(usize, usize)> {
        quasi_blocks(&self.t)
    }

    pub fn eigenvalues(&self) -> Vec<Complex64> {
        let t = &self.t;
        let mut out = Vec::with_capacity(t.nrows());
        for (i, size) in self.blocks() {
            if size == 1 {
                out.push(Complex64::new(t[(i, i)], 0.0));
            } else {
                let (a, b, c, d) = (t[(i, i)], t[(i, i + 1)], t[(i + 1, i)], t[(i + 1, i + 1)]);
                let re = 0.5 * (a + d);
                let p = 0.5 * (a - d);
                let disc = p * p + b * c;
                let im = (-disc).max(0.0).sqrt();
                out.push(Complex64::new(re, im));
                out.push(Complex64::new(re, -im));
            }
        }
        out
    }

    /// Largest real part over the spectrum.
    pub fn spectral_abscissa(&self) -> f64 {
        self.eigenvalues()
            .iter()
            .map(|l| l.re)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

impl ComplexSchur {
    pub fn from_real(a: &DMatrix<f64>) -> Result<Self> {
        let real = RealSchur::new(a)?;
        Ok(real_to_complex_schur(&real))
    }
}

pub(crate) fn quasi_blocks(t: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let n = t.nrows();
    let mut blocks = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        if i + 1 < n && t[(i + 1, i)] != 0.0 {
            blocks.push((i, 2));
            i += 2;
        } else {
            blocks.push((i, 1));
            i += 1;
        }
    }
    blocks
}

/// Householder reduction to upper Hessenberg form, returning (H, Q) with A = Q H Qᵀ.
fn hessenberg(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut h = a.clone();
    let mut q = DMatrix::<f64>::identity(n, n);
    let mut work = DVector::<f64>::zeros(n);
    for k in 0..n.saturating_sub(2) {
        let len = n - k - 1;
        let mut v = h.view((k + 1, k), (len, 1)).clone_owned();
        let norm = v.norm();
        if norm == 0.0 {
            continue;
        }
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm2 = v.norm_squared();
        if vnorm2 == 0.0 {
            continue;
        }
        let beta = 2.0 / vnorm2;
        let v = v.column(0);

        // H <- P H on rows k+1.., columns k.. : H -= β v (vᵀ H).
        {
            let mut block = h.view_mut((k + 1, k), (len, n - k));
            let mut w = work.rows_mut(0, n - k);
            w.gemv_tr(1.0, &block, &v, 0.0);
            block.ger(-beta, &v, &w, 1.0);
        }
        // H <- H P and Q <- Q P on columns k+1.. : X -= β (X v) vᵀ.
        for m in [&mut h, &mut q] {
            let mut block = m.view_mut((0, k + 1), (n, len));
            work.gemv(1.0, &block, &v, 0.0);
            block.ger(-beta, &work, &v, 1.0);
        }
        h[(k + 1, k)] = alpha;
        for i in k + 2..n {
            h[(i, k)] = 0.0;
        }
    }
    (h, q)
}

/// Reflector `I - beta v vᵀ` mapping `x` onto a multiple of e1. Returns None for x = 0.
fn house<const L: usize>(x: [f64; L]) -> Option<([f64; L], f64)> {
    let norm = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm == 0.0 {
        return None;
    }
    let alpha = if x[0] >= 0.0 { -norm } else { norm };
    let mut v = x;
    v[0] -= alpha;
    let vv: f64 = v.iter().map(|a| a * a).sum();
    if vv == 0.0 {
        return None;
    }
    Some((v, 2.0 / vv))
}

fn reflect_rows<const L: usize>(h: &mut DMatrix<f64>, r0: usize, v: &[f64; L], beta: f64, cols: std::ops::Range<usize>) {
    let n = h.nrows();
    let data = h.as_mut_slice();
    for j in cols {
        let col = &mut data[j * n + r0..j * n + r0 + L];
        let mut s = 0.0;
        for l in 0..L {
            s += v[l] * col[l];
        }
        s *= beta;
        for l in 0..L {
            col[l] -= s * v[l];
        }
    }
}

fn reflect_cols<const L: usize>(h: &mut DMatrix<f64>, c0: usize, v: &[f64; L], beta: f64, rows: std::ops::Range<usize>) {
    let n = h.nrows();
    let data = h.as_mut_slice();
    let block = &mut data[c0 * n..(c0 + L) * n];
    for i in rows {
        let mut s = 0.0;
        for l in 0..L {
            s += block[l * n + i] * v[l];
        }
        s *= beta;
        for l in 0..L {
            block[l * n + i] -= s * v[l];
        }
    }
}

/// In-place Francis double-shift QR on an upper Hessenberg matrix, accumulating
/// the orthogonal transformations into `z`.
fn francis_qr(h: &mut DMatrix<f64>, z: &mut DMatrix<f64>) -> Result<()> {
    let n = h.nrows();
    if n == 0 {
        return Ok(());
    }
    let eps = f64::EPSILON;
    let norm = h.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut hi = n - 1;
    let mut iter = 0usize;
    let mut total = 0usize;
    let budget = MAX_SWEEPS_PER_EIGENVALUE * n.max(1);

    loop {
        // Locate the top of the unreduced block ending at `hi`.
        let mut lo = hi;
        while lo > 0 {
            let mut s = h[(lo - 1, lo - 1)].abs() + h[(lo, lo)].abs();
            if s == 0.0 {
                s = norm;
            }
            if h[(lo, lo - 1)].abs() <= eps * s {
                h[(lo, lo - 1)] = 0.0;
                break;
            }
            lo -= 1;
        }

        if lo == hi {
            if hi == 0 {
                break;
            }
            hi -= 1;
            iter = 0;
            continue;
        }
        if lo + 1 == hi {
            split_real_pair(h, z, lo);
            if hi < 2 {
                break;
            }
            hi -= 2;
            iter = 0;
            continue;
        }

        iter += 1;
        total += 1;
        if total > budget {
            return Err(Error::Domain(format!(
                "Schur QR iteration did not converge within {budget} sweeps"
            )));
        }

        // Shift polynomial coefficients from the trailing 2x2, with exceptional
        // shifts every 10 stagnant sweeps.
        let (s, t) = if iter % 10 == 0 {
            let w = h[(hi, hi - 1)].abs() + h[(hi - 1, hi - 2)].abs();
            (1.5 * w, w * w)
        } else {
            let a = h[(hi - 1, hi - 1)];
            let b = h[(hi - 1, hi)];
            let c = h[(hi, hi - 1)];
            let d = h[(hi, hi)];
            (a + d, a * d - b * c)
        };

        let h00 = h[(lo, lo)];
        let h10 = h[(lo + 1, lo)];
        let mut x = h00 * h00 + h[(lo, lo + 1)] * h10 - s * h00 + t;
        let mut y = h10 * (h00 + h[(lo + 1, lo + 1)] - s);
        let mut w = h10 * h[(lo + 2, lo + 1)];

        for k in lo..hi - 1 {
            if let Some((v, beta)) = house([x, y, w]) {
                let c0 = if k > lo { k - 1 } else { lo };
                reflect_rows(h, k, &v, beta, c0..n);
                let r1 = (k + 4).min(hi + 1);
                reflect_cols(h, k, &v, beta, 0..r1);
                reflect_cols(z, k, &v, beta, 0..n);
                if k > lo {
                    h[(k + 1, k - 1)] = 0.0;
                    h[(k + 2, k - 1)] = 0.0;
                }
            }
            x = h[(k + 1, k)];
            y = h[(k + 2, k)];
            if k + 3 <= hi {
                w = h[(k + 3, k)];
            }
        }
        if let Some((v, beta)) = house([x, y]) {
            let k = hi - 1;
            reflect_rows(h, k, &v, beta, (k - 1)..n);
            reflect_cols(h, k, &v, beta, 0..hi + 1);
            reflect_cols(z, k, &v, beta, 0..n);
            h[(hi, hi - 2)] = 0.0;
        }
    }

    // Clear rounding residue below the first subdiagonal.
    for j in 0..n {
        for i in j + 2..n {
            h[(i, j)] = 0.0;
        }
    }
    Ok(())
}

/// If the 2x2 block at (p, p) has real eigenvalues, rotate it to upper-triangular.
fn split_real_pair(h: &mut DMatrix<f64>, z: &mut DMatrix<f64>, p: usize) {
    let n = h.nrows();
    let q_ = p + 1;
    let a = h[(p, p)];
    let d = h[(q_, q_)];
    let b = h[(p, q_)];
    let c = h[(q_, p)];
    if c == 0.0 {
        return;
    }
    let half = 0.5 * (a - d);
    let disc = half * half + b * c;
    if disc < 0.0 {
        return;
    }
    let root = disc.sqrt();
    let zz = if half >= 0.0 { half + root } else { half - root };
    let s = c.abs() + zz.abs();
    let (mut sn, mut cs) = (c / s, zz / s);
    let r = (sn * sn + cs * cs).sqrt();
    sn /= r;
    cs /= r;
    for j in p..n {
        let u = h[(p, j)];
        let v = h[(q_, j)];
        h[(p, j)] = cs * u + sn * v;
        h[(q_, j)] = cs * v - sn * u;
    }
    for i in 0..=q_ {
        let u = h[(i, p)];
        let v = h[(i, q_)];
        h[(i, p)] = cs * u + sn * v;
        h[(i, q_)] = cs * v - sn * u;
    }
    for i in 0..n {
        let u = z[(i, p)];
        let v = z[(i, q_)];
        z[(i, p)] = cs * u + sn * v;
        z[(i, q_)] = cs * v - sn * u;
    }
    h[(q_, p)] = 0.0;
}

/// Convert a real Schur form into a complex (triangular) one.
pub(crate) fn real_to_complex_schur(real: &RealSchur) -> ComplexSchur {
    let n = real.t.nrows();
    let mut t = real.t.map(|v| Complex64::new(v, 0.0));
    let mut u = real.z.map(|v| Complex64::new(v, 0.0));
    for m in (1..n).rev() {
        let sub = t[(m, m - 1)];
        if sub == Complex64::new(0.0, 0.0) {
            continue;
        }
        // Eigenvalue of the 2x2 block, shifted by the trailing diagonal.
        let a = t[(m - 1, m - 1)];
        let b = t[(m - 1, m)];
        let d = t[(m, m)];
        let tr_half = (a + d) * 0.5;
        let det = a * d - b * sub;
        let disc = (tr_half * tr_half - det).sqrt();
        let mu = tr_half + disc - d;
        let r = (mu.norm_sqr() + sub.norm_sqr()).sqrt();
        let c = mu / r;
        let s = sub / r;
        // G = [c̄ s; -s c]
        for j in (m - 1)..n {
            let x = t[(m - 1, j)];
            let y = t[(m, j)];
            t[(m - 1, j)] = c.conj() * x + s * y;
            t[(m, j)] = -s * x + c * y;
        }
        for i in 0..=m {
            let x = t[(i, m - 1)];
            let y = t[(i, m)];
            t[(i, m - 1)] = x * c + y * s.conj();
            t[(i, m)] = -x * s.conj() + y * c.conj();
        }
        for i in 0..n {
            let x = u[(i, m - 1)];
            let y = u[(i, m)];
            u[(i, m - 1)] = x * c + y * s.conj();
            u[(i, m)] = -x * s.conj() + y * c.conj();
        }
        t[(m, m - 1)] = Complex64::new(0.0, 0.0);
    }
    // Normalize signed zeros so real negative eigenvalues sit on the upper
    // side of the branch cut.
    for i in 0..n {
        let v = t[(i, i)];
        t[(i, i)] = Complex64::new(v.re, v.im + 0.0);
    }
    ComplexSchur { t, u }
}
