//! Multinomial logistic regression by full-batch gradient descent.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LogRegConfig {
    pub l2_penalty: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Stop once the loss changes by less than this between epochs.
    pub tolerance: f64,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        LogRegConfig { l2_penalty: 1e-3, learning_rate: 0.1, max_epochs: 2000, tolerance: 1e-8 }
    }
}

/// Softmax classifier over z-scored features.
#[derive(Debug, Clone)]
pub struct LogRegModel {
    mean: DVector<f64>,
    scale: DVector<f64>,
    /// classes × features
    weights: DMatrix<f64>,
    bias: DVector<f64>,
    pub epochs: usize,
    pub final_loss: f64,
}

impl LogRegModel {
    pub fn class_count(&self) -> usize {
        self.bias.len()
    }

    fn standardize(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = x.clone();
        for (j, mut col) in z.column_iter_mut().enumerate() {
            col.apply(|v| *v = (*v - self.mean[j]) / self.scale[j]);
        }
        z
    }

    fn logits(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let mut s = z * self.weights.transpose();
        for mut row in s.row_iter_mut() {
            row += self.bias.transpose();
        }
        s
    }

    pub fn predict(&self, features: &DMatrix<f64>) -> Result<Vec<usize>> {
        if features.ncols() != self.mean.len() {
            return Err(Error::Shape(format!(
                "model has {} features, input has {}",
                self.mean.len(),
                features.ncols()
            )));
        }
        let s = self.logits(&self.standardize(features));
        Ok(s.row_iter()
            .map(|row| {
                // First maximum wins, so ties go to the lowest class id.
                let mut best = 0;
                for k in 1..row.len() {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect())
    }

    /// Fraction of rows predicted correctly.
    pub fn score(&self, features: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(features)?;
        if pred.len() != labels.len() || labels.is_empty() {
            return Err(Error::Shape(format!("{} rows vs {} labels", pred.len(), labels.len())));
        }
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

/// Row-wise softmax in place; returns the mean cross-entropy of `labels`.
fn softmax_rows(s: &mut DMatrix<f64>, labels: &[usize]) -> f64 {
    let mut ce = 0.0;
    for (i, mut row) in s.row_iter_mut().enumerate() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let total = row.sum();
        ce -= (row[labels[i]] / total).ln();
        row /= total;
    }
    ce / labels.len() as f64
}

/// Fit a softmax classifier: features are z-scored with training statistics,
/// weights start at zero, and gradient descent runs on mean cross-entropy
/// plus ½·l2·‖W‖² (bias unpenalized).
pub fn train_logreg(features: &DMatrix<f64>, labels: &[usize], cfg: &LogRegConfig) -> Result<LogRegModel> {
    let (n, f) = features.shape();
    if n != labels.len() {
        return Err(Error::Shape(format!("{n} feature rows vs {} labels", labels.len())));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Degenerate("logistic regression needs at least two classes".into()));
    }
    if !(cfg.learning_rate > 0.0 && cfg.l2_penalty >= 0.0 && cfg.max_epochs >= 1) {
        return Err(Error::Config(format!("invalid logistic regression settings {cfg:?}")));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("features contain non-finite values".into()));
    }

    let mean = DVector::from_fn(f, |j, _| features.column(j).mean());
    let scale = DVector::from_fn(f, |j, _| {
        let sd = features.column(j).variance().sqrt();
        if sd > 0.0 {
            sd
        } else {
            1.0
        }
    });
    let mut model = LogRegModel {
        mean,
        scale,
        weights: DMatrix::zeros(classes, f),
        bias: DVector::zeros(classes),
        epochs: 0,
        final_loss: f64::NAN,
    };
    let z = model.standardize(features);
    let mut onehot = DMatrix::zeros(n, classes);
    for (i, &l) in labels.iter().enumerate() {
        onehot[(i, l)] = 1.0;
    }

    let mut prev = f64::INFINITY;
    for epoch in 1..=cfg.max_epochs {
        let mut p = model.logits(&z);
        let loss = softmax_rows(&mut p, labels) + 0.5 * cfg.l2_penalty * model.weights.norm_squared();
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        model.epochs = epoch;
        model.final_loss = loss;
        if (prev - loss).abs() < cfg.tolerance {
            break;
        }
        prev = loss;
        p -= &onehot;
        let grad_w = p.transpose() * &z / n as f64 + &model.weights * cfg.l2_penalty;
        let grad_b = p.row_mean().transpose();
        model.weights -= grad_w * cfg.learning_rate;
        model.bias.axpy(-cfg.learning_rate, &grad_b, 1.0);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn separable_toy_set() {
        let x = DMatrix::from_row_slice(6, 2, &[0.0, 0.1, 0.2, 0.0, 0.1, 0.3, 2.0, 2.1, 2.2, 1.9, 1.8, 2.3]);
        let y = [0, 0, 0, 1, 1, 1];
        let model = train_logreg(&x, &y, &LogRegConfig::default()).unwrap();
        assert_eq!(model.score(&x, &y).unwrap(), 1.0);
    }

    #[test]
    fn constant_features_give_the_majority_class() {
        let x = DMatrix::from_element(10, 3, 4.2);
        let y = [2, 2, 2, 2, 2, 2, 0, 0, 1, 1];
        let model = train_logreg(&x, &y, &LogRegConfig::default()).unwrap();
        assert_eq!(model.predict(&x).unwrap(), vec![2; 10]);
        assert!((model.score(&x, &y).unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn gaussian_boundary_matches_equal_likelihood_point() {
        // N(-1, 1) vs N(2, 1) with equal priors: the densities cross at 0.5.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let per = 4000;
        let mut vals = Vec::new();
        let mut y = Vec::new();
        for (k, mu) in [-1.0, 2.0].into_iter().enumerate() {
            let d = Normal::new(mu, 1.0).unwrap();
            for _ in 0..per {
                vals.push(d.sample(&mut rng));
                y.push(k);
            }
        }
        let x = DMatrix::from_column_slice(2 * per, 1, &vals);
        let cfg = LogRegConfig { l2_penalty: 0.0, ..Default::default() };
        let model = train_logreg(&x, &y, &cfg).unwrap();
        let grid = DMatrix::from_fn(3001, 1, |i, _| -1.0 + i as f64 * 1e-3);
        let pred = model.predict(&grid).unwrap();
        let switch = pred.iter().position(|&p| p == 1).unwrap();
        let boundary = grid[(switch, 0)];
        assert!((boundary - 0.5).abs() < 0.1, "boundary {boundary}");
    }

    #[test]
    fn divergence_and_input_errors() {
        let x = DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 2.0, 3.0]);
        let y = [0, 0, 1, 1];
        let cfg = LogRegConfig { learning_rate: 1e308, l2_penalty: 1.0, ..Default::default() };
        assert!(matches!(train_logreg(&x, &y, &cfg), Err(Error::Divergence { .. })));
        assert!(matches!(train_logreg(&x, &[0, 0, 0, 0], &LogRegConfig::default()), Err(Error::Degenerate(_))));
        assert!(matches!(train_logreg(&x, &[0, 1], &LogRegConfig::default()), Err(Error::Shape(_))));
    }

    #[test]
    fn training_is_deterministic() {
        let x = DMatrix::from_fn(20, 4, |i, j| ((i * 7 + j * 3) % 11) as f64);
        let y: Vec<usize> = (0..20).map(|i| i % 3).collect();
        let a = train_logreg(&x, &y, &LogRegConfig::default()).unwrap();
        let b = train_logreg(&x, &y, &LogRegConfig::default()).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.final_loss.to_bits(), b.final_loss.to_bits());
    }
}
