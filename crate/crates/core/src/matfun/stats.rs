use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Sample Pearson correlation of two equal-length vectors.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "pearson inputs differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Degenerate("pearson needs at least two samples".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 && sbb == 0.0 {
        return Err(Error::Degenerate("pearson inputs are both constant".into()));
    }
    if saa == 0.0 || sbb == 0.0 {
        // One side constant: no linear association.
        return Ok(0.0);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// ‖Im A‖_F / ‖Re A‖_F.
pub fn imag_real_ratio(a: &DMatrix<Complex64>) -> Result<f64> {
    let re: f64 = a.iter().map(|z| z.re * z.re).sum::<f64>().sqrt();
    let im: f64 = a.iter().map(|z| z.im * z.im).sum::<f64>().sqrt();
    if re == 0.0 {
        return Err(Error::Degenerate("real part has zero norm".into()));
    }
    Ok(im / re)
}

pub fn real_part(a: &DMatrix<Complex64>) -> DMatrix<f64> {
    a.map(|z| z.re)
}

pub fn imag_part(a: &DMatrix<Complex64>) -> DMatrix<f64> {
    a.map(|z| z.im)
}

/// Entries with i != j, in column-major order.
pub fn off_diagonal(a: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len().saturating_sub(a.nrows()));
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            if i != j {
                out.push(a[(i, j)]);
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_and_anti_correlation() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn matches_direct_formula() {
        // Independent single-pass formula from raw sums.
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.0, 2.0, 3.0, 5.0];
        let n = 4.0;
        let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
        let sab: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let saa: f64 = a.iter().map(|x| x * x).sum();
        let sbb: f64 = b.iter().map(|x| x * x).sum();
        let r = (n * sab - sa * sb) / ((n * saa - sa * sa).sqrt() * (n * sbb - sb * sb).sqrt());
        // = 0.9827076298239908
        assert!((r - 0.982_707_629_823_990_8).abs() < 1e-15);
        assert!((pearson(&a, &b).unwrap() - r).abs() < 1e-14);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(pearson(&[1.0, 1.0], &[2.0, 2.0]), Err(Error::Degenerate(_))));
        assert!(matches!(pearson(&[1.0], &[2.0]), Err(Error::Degenerate(_))));
        assert!(matches!(pearson(&[1.0, 2.0], &[2.0]), Err(Error::Shape(_))));
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]).unwrap(), 0.0);
    }

    #[test]
    fn imag_ratio_cases() {
        let re = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -1.0, 0.5]);
        let purely_real = re.map(|v| Complex64::new(v, 0.0));
        assert_eq!(imag_real_ratio(&purely_real).unwrap(), 0.0);
        let equal = re.map(|v| Complex64::new(v, v));
        assert!((imag_real_ratio(&equal).unwrap() - 1.0).abs() < 1e-15);
        let a = DMatrix::from_row_slice(
            2,
            2,
            &[
                Complex64::new(1.0, 0.0),
                Complex64::new(0.0, 1.0),
                Complex64::new(0.0, 0.0),
                Complex64::new(1.0, 0.0),
            ],
        );
        assert!((imag_real_ratio(&a).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        let zero_re = DMatrix::from_element(2, 2, Complex64::new(0.0, 1.0));
        assert!(matches!(imag_real_ratio(&zero_re), Err(Error::Degenerate(_))));
    }
}
