//! Synthetic subject-identification cohorts.
//!
//! Each subject gets its own θ; each session is an independent series from
//! that θ. Features are the estimated connectivity entries on a mask shared by
//! the whole cohort, so every row lives in the same feature space.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::logreg::{train_logreg, LogRegConfig};
use super::Protocol;
use crate::error::{Error, Result};
use crate::estimators::Method;
use crate::model::ModelParams;
use crate::synth::{draw_stable_params, simulate, NetworkConfig};

// ChaCha stream offsets under the cohort seed.
const SESSION_STREAM: u64 = 1;
const SPLIT_STREAM: u64 = 1 << 32;
const NULL_STREAM: u64 = 1 << 33;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMask {
    /// Union of all subjects' true adjacency matrices.
    TrueAdjacency,
    /// Every off-diagonal entry.
    Full,
}

impl std::str::FromStr for FeatureMask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "true-adjacency" => Ok(FeatureMask::TrueAdjacency),
            "full" => Ok(FeatureMask::Full),
            other => Err(Error::Config(format!("unknown feature mask `{other}` (expected true-adjacency or full)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortConfig {
    pub subjects: usize,
    pub sessions: usize,
    pub m: usize,
    pub n: usize,
    pub density: f64,
    pub feature_mask: FeatureMask,
    pub train_fraction: f64,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            subjects: 30,
            sessions: 10,
            m: 50,
            n: 300,
            density: 0.2,
            feature_mask: FeatureMask::TrueAdjacency,
            train_fraction: 0.8,
            repetitions: 100,
            seed: 0,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.subjects < 2 {
            return bad(format!("subjects must be >= 2, got {}", self.subjects));
        }
        if self.sessions < 2 {
            return bad(format!("sessions must be >= 2, got {}", self.sessions));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction must lie in (0, 1), got {}", self.train_fraction));
        }
        if self.m < 2 || self.n < 3 {
            return bad(format!("cohort needs m >= 2 and n >= 3, got m={} n={}", self.m, self.n));
        }
        if self.repetitions == 0 {
            return bad("repetitions must be >= 1".into());
        }
        NetworkConfig::new(self.m, self.density, self.seed).validate()
    }
}

#[derive(Debug, Clone)]
pub struct Cohort {
    /// One row per (subject, session), subject-major.
    pub features: DMatrix<f64>,
    pub labels: Vec<usize>,
    /// Binary M×M matrix selecting the feature entries (column-major order).
    pub mask: DMatrix<f64>,
}

fn subject_params(cfg: &CohortConfig, tau_x: f64) -> Result<Vec<ModelParams>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = NetworkConfig::new(cfg.m, cfg.density, cfg.seed);
    (0..cfg.subjects).map(|_| draw_stable_params(&net, tau_x, &mut rng).map(|(p, _)| p)).collect()
}

fn cohort_mask(cfg: &CohortConfig, params: &[ModelParams]) -> DMatrix<f64> {
    let m = cfg.m;
    DMatrix::from_fn(m, m, |i, j| {
        let on = i != j
            && match cfg.feature_mask {
                FeatureMask::Full => true,
                FeatureMask::TrueAdjacency => params.iter().any(|p| p.connectivity()[(i, j)] > 0.0),
            };
        if on {
            1.0
        } else {
            0.0
        }
    })
}

/// Simulate every session, estimate C with `method` and collect the masked
/// entries. With the adjacency mask the Lyapunov fit is also restricted to it.
/// Any failed session aborts the cohort.
pub fn gen_cohort(cfg: &CohortConfig, method: Method, protocol: &Protocol) -> Result<Cohort> {
    cfg.validate()?;
    protocol.validate()?;
    let params = subject_params(cfg, protocol.tau_x)?;
    let mask = cohort_mask(cfg, &params);
    let mut est_protocol = protocol.clone();
    if cfg.feature_mask == FeatureMask::TrueAdjacency {
        est_protocol.fit.mask = Some(mask.clone());
    }
    let selected: Vec<usize> = (0..mask.len()).filter(|&k| mask[k] == 1.0).collect();

    let jobs: Vec<(usize, usize)> = (0..cfg.subjects).flat_map(|s| (0..cfg.sessions).map(move |k| (s, k))).collect();
    let rows: Vec<Result<Vec<f64>>> = jobs
        .into_par_iter()
        .map(|(s, k)| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(SESSION_STREAM + (s * cfg.sessions + k) as u64);
            let duration = cfg.n as f64 * protocol.sample_interval;
            let mut run = || -> Result<Vec<f64>> {
                let ts = simulate(&params[s], duration, protocol.euler_dt, protocol.sample_interval, &mut rng)?;
                let est = est_protocol.estimate(method, &ts)?;
                Ok(selected.iter().map(|&idx| est.c_hat[idx]).collect())
            };
            run().inspect_err(|e| log::error!("cohort seed={} subject {s} session {k} ({method}): {e}", cfg.seed))
        })
        .collect();

    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let features = DMatrix::from_fn(rows.len(), selected.len(), |i, j| rows[i][j]);
    let labels = (0..cfg.subjects).flat_map(|s| std::iter::repeat_n(s, cfg.sessions)).collect();
    Ok(Cohort { features, labels, mask })
}

/// Per-class shuffle, then the first round(fraction·size) members of each
/// class (at least one, and at least one left over) go to training.
pub fn stratified_split(labels: &[usize], train_fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(rng);
        let k = if members.len() == 1 {
            1
        } else {
            ((train_fraction * members.len() as f64).round() as usize).clamp(1, members.len() - 1)
        };
        train.extend_from_slice(&members[..k]);
        test.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn rows(x: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), x.ncols(), |i, j| x[(idx[i], j)])
}

fn split_accuracy(features: &DMatrix<f64>, labels: &[usize], cfg: &CohortConfig, logreg: &LogRegConfig, rng: &mut ChaCha8Rng) -> Result<f64> {
    let (train, test) = stratified_split(labels, cfg.train_fraction, rng);
    let pick = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    let model = train_logreg(&rows(features, &train), &pick(&train), logreg)?;
    model.score(&rows(features, &test), &pick(&test))
}

/// Test accuracies over `cfg.repetitions` stratified splits. Split r uses the
/// same stream for every cohort, so methods are compared on identical splits.
pub fn split_accuracies(cohort: &Cohort, cfg: &CohortConfig, logreg: &LogRegConfig) -> Result<Vec<f64>> {
    (0..cfg.repetitions)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(SPLIT_STREAM + r as u64);
            split_accuracy(&cohort.features, &cohort.labels, cfg, logreg, &mut rng)
        })
        .collect()
}

/// Chance-level reference: labels are shuffled across all rows before each
/// split, then training and scoring proceed against the shuffled labels.
pub fn permutation_null(cohort: &Cohort, cfg: &CohortConfig, logreg: &LogRegConfig) -> Result<Vec<f64>> {
    (0..cfg.repetitions)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(NULL_STREAM + r as u64);
            let mut labels = cohort.labels.clone();
            labels.shuffle(&mut rng);
            split_accuracy(&cohort.features, &labels, cfg, logreg, &mut rng)
        })
        .collect()
}

/// For each method: build its cohort (same θ and series for every method) and
/// return the test accuracy of every repetition.
pub fn classify_experiment(
    cfg: &CohortConfig,
    methods: &[Method],
    protocol: &Protocol,
    logreg: &LogRegConfig,
) -> Result<Vec<(Method, Vec<f64>)>> {
    methods
        .iter()
        .map(|&method| {
            let cohort = gen_cohort(cfg, method, protocol)?;
            Ok((method, split_accuracies(&cohort, cfg, logreg)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CohortConfig {
        CohortConfig { subjects: 3, sessions: 4, m: 6, n: 200, repetitions: 3, seed: 9, ..Default::default() }
    }

    #[test]
    fn cohort_shape_and_labels() {
        let cfg = small();
        let c = gen_cohort(&cfg, Method::Bayesian, &Protocol::default()).unwrap();
        assert_eq!(c.features.nrows(), 12);
        assert_eq!(c.features.ncols(), c.mask.iter().filter(|v| **v == 1.0).count());
        for s in 0..3 {
            assert_eq!(c.labels.iter().filter(|l| **l == s).count(), 4);
        }
        assert!((0..6).all(|i| c.mask[(i, i)] == 0.0));
        assert!(c.features.iter().all(|v| v.is_finite()));

        let full = CohortConfig { feature_mask: FeatureMask::Full, ..cfg };
        let c = gen_cohort(&full, Method::Bayesian, &Protocol::default()).unwrap();
        assert_eq!(c.features.ncols(), 30);
    }

    #[test]
    fn lyapunov_features_respect_the_mask() {
        let cfg = small();
        let mut p = Protocol::default();
        p.fit.max_iters = 30;
        let a = gen_cohort(&cfg, Method::Lyapunov, &p).unwrap();
        let b = gen_cohort(&cfg, Method::Lyapunov, &p).unwrap();
        assert_eq!(a.features, b.features);
        assert!(a.features.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn stratified_split_keeps_every_class() {
        let labels: Vec<usize> = (0..5).flat_map(|s| std::iter::repeat_n(s, 5)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (train, test) = stratified_split(&labels, 0.8, &mut rng);
        assert_eq!(train.len(), 20);
        assert_eq!(test.len(), 5);
        for s in 0..5 {
            assert_eq!(test.iter().filter(|&&i| labels[i] == s).count(), 1);
        }
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..25).collect::<Vec<_>>());
    }

    #[test]
    fn separable_cohort_is_classified_perfectly() {
        // Two subjects with very different networks and long recordings.
        let cfg = CohortConfig {
            subjects: 2,
            sessions: 5,
            m: 5,
            n: 3000,
            density: 0.5,
            repetitions: 1,
            seed: 4,
            ..Default::default()
        };
        let out = classify_experiment(&cfg, &[Method::Bayesian], &Protocol::default(), &LogRegConfig::default()).unwrap();
        assert_eq!(out[0].1, vec![1.0]);
    }

    #[test]
    fn shuffled_labels_sit_at_chance() {
        let cfg = CohortConfig { subjects: 4, sessions: 5, m: 6, n: 300, repetitions: 40, seed: 2, ..Default::default() };
        let cohort = gen_cohort(&cfg, Method::Bayesian, &Protocol::default()).unwrap();
        let null = permutation_null(&cohort, &cfg, &LogRegConfig { max_epochs: 200, ..Default::default() }).unwrap();
        let mean = null.iter().sum::<f64>() / null.len() as f64;
        let sd = (null.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (null.len() - 1) as f64).sqrt();
        let se = sd / (null.len() as f64).sqrt();
        assert!((mean - 0.25).abs() < 3.0 * se + 1e-12, "mean {mean} se {se}");
    }

    #[test]
    fn config_validation() {
        let bad = [
            CohortConfig { subjects: 1, ..small() },
            CohortConfig { sessions: 1, ..small() },
            CohortConfig { train_fraction: 1.0, ..small() },
            CohortConfig { density: 0.0, ..small() },
        ];
        for cfg in bad {
            assert!(matches!(gen_cohort(&cfg, Method::Bayesian, &Protocol::default()), Err(Error::Config(_))));
        }
        assert!("adjacency".parse::<FeatureMask>().is_err());
    }
}
