//! Monte-Carlo studies: accuracy sweeps over network size and sample count,
//! the Bayesian failure decomposition, and cohort classification.
//!
//! Every trial owns a ChaCha stream seeded with `base_seed + repeat`, so a
//! single (m, repeat) cell can be rerun in isolation and reproduces its rows.
//! Trials run on the ambient rayon pool; results come back in grid order.

mod cohort;
mod logreg;

use std::io::Write;
use std::time::Instant;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::estimators::{
    accuracy, bayesian_estimate, bayesian_moments, bayesian_propagator, lyapunov_fit, Estimate, LyapunovFitConfig,
    Method,
};
use crate::matfun::{imag_real_ratio, mat_log, off_diagonal, pearson, real_part};
use crate::model::{model_cov, model_lagged_cov, propagator, ModelParams};
use crate::synth::{draw_stable_params, empirical_moments, simulate, NetworkConfig, TimeSeries};

pub use cohort::{
    classify_experiment, gen_cohort, permutation_null, split_accuracies, stratified_split, Cohort, CohortConfig,
    FeatureMask,
};
pub use logreg::{train_logreg, LogRegConfig, LogRegModel};

impl Serialize for Method {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

/// Simulation and fitting settings shared by every trial of a study.
#[derive(Debug, Clone)]
pub struct Protocol {
    pub tau_x: f64,
    pub euler_dt: f64,
    pub sample_interval: f64,
    pub density: f64,
    /// Lag, in samples, of the covariance pair fed to the Lyapunov fit.
    pub lag_steps: usize,
    pub fit: LyapunovFitConfig,
    /// Fill `wall_time_ms`. Off by default so output tables are reproducible byte for byte.
    pub record_timing: bool,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            tau_x: 1.0,
            euler_dt: 0.05,
            sample_interval: 1.0,
            density: 0.2,
            lag_steps: 1,
            fit: LyapunovFitConfig::default(),
            record_timing: false,
        }
    }
}

impl Protocol {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_x > 0.0 && self.tau_x.is_finite()) {
            return Err(Error::Config(format!("tau_x must be > 0, got {}", self.tau_x)));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::Config(format!("density must lie in (0, 1], got {}", self.density)));
        }
        if self.lag_steps == 0 {
            return Err(Error::Config("lag_steps must be >= 1".into()));
        }
        if !(self.euler_dt > 0.0 && self.sample_interval > 0.0) {
            return Err(Error::Config("euler_dt and sample_interval must be > 0".into()));
        }
        Ok(())
    }

    /// Draw a stable θ and simulate `n` samples from it.
    pub fn draw_and_simulate(&self, m: usize, n: usize, rng: &mut ChaCha8Rng, seed: u64) -> Result<(ModelParams, TimeSeries)> {
        let net = NetworkConfig::new(m, self.density, seed);
        let (params, _) = draw_stable_params(&net, self.tau_x, rng)?;
        let ts = simulate(&params, n as f64 * self.sample_interval, self.euler_dt, self.sample_interval, rng)?;
        Ok((params, ts))
    }

    pub fn estimate(&self, method: Method, ts: &TimeSeries) -> Result<Estimate> {
        match method {
            Method::Bayesian => bayesian_estimate(ts),
            Method::Moments => crate::estimators::moments_estimate(&empirical_moments(ts, self.lag_steps)?),
            Method::Lyapunov => lyapunov_fit(&empirical_moments(ts, self.lag_steps)?, &self.fit),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyRecord {
    pub m: usize,
    pub n: usize,
    pub method: Method,
    pub seed: u64,
    pub accuracy_c: f64,
    pub accuracy_sigma: f64,
    pub imag_ratio: f64,
    /// Empty unless timing was requested.
    pub wall_time_ms: Option<f64>,
}

impl AccuracyRecord {
    pub fn failed(&self) -> bool {
        self.accuracy_c.is_nan()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosisRecord {
    pub m: usize,
    pub seed: u64,
    pub corr_precision: f64,
    pub corr_lagged: f64,
    pub corr_lambda: f64,
    pub corr_logm: f64,
    pub corr_c: f64,
    pub imag_ratio: f64,
}

/// Seed of the `repeat`-th trial.
pub fn trial_seed(base_seed: u64, repeat: usize) -> u64 {
    base_seed.wrapping_add(repeat as u64)
}

const SWEEP_METHODS: [Method; 2] = [Method::Bayesian, Method::Lyapunov];

fn check_grid(values: &[usize], min: usize, what: &str, repeats: usize) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Config(format!("{what} list is empty")));
    }
    if let Some(v) = values.iter().find(|v| **v < min) {
        return Err(Error::Config(format!("{what} values must be >= {min}, got {v}")));
    }
    if repeats == 0 {
        return Err(Error::Config("repeats must be >= 1".into()));
    }
    Ok(())
}

/// One paired trial: both estimators on the same simulated series.
/// Failures become NaN rows, never missing ones.
pub fn accuracy_trial(m: usize, n: usize, seed: u64, protocol: &Protocol) -> Vec<AccuracyRecord> {
    accuracy_trial_with(m, n, seed, protocol, &SWEEP_METHODS)
}

/// As [`accuracy_trial`], restricted to `methods` (rows in that order).
pub fn accuracy_trial_with(m: usize, n: usize, seed: u64, protocol: &Protocol, methods: &[Method]) -> Vec<AccuracyRecord> {
    let nan_row = |method| AccuracyRecord {
        m,
        n,
        method,
        seed,
        accuracy_c: f64::NAN,
        accuracy_sigma: f64::NAN,
        imag_ratio: f64::NAN,
        wall_time_ms: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (params, ts) = match protocol.draw_and_simulate(m, n, &mut rng, seed) {
        Ok(v) => v,
        Err(e) => {
            log::warn!("trial m={m} n={n} seed={seed}: simulation failed: {e}");
            return methods.iter().map(|&k| nan_row(k)).collect();
        }
    };
    methods
        .iter()
        .map(|&method| {
            let start = Instant::now();
            let result = protocol.estimate(method, &ts).and_then(|est| {
                let (ac, asg) = accuracy(&params, &est)?;
                Ok((ac, asg, est.imag_ratio))
            });
            let elapsed = start.elapsed().as_secs_f64() * 1e3;
            match result {
                Ok((accuracy_c, accuracy_sigma, imag_ratio)) => AccuracyRecord {
                    m,
                    n,
                    method,
                    seed,
                    accuracy_c,
                    accuracy_sigma,
                    imag_ratio,
                    wall_time_ms: protocol.record_timing.then_some(elapsed),
                },
                Err(e) => {
                    log::warn!("trial m={m} n={n} seed={seed}: {method} estimate failed: {e}");
                    nan_row(method)
                }
            }
        })
        .collect()
}

fn run_grid(cells: Vec<(usize, usize, u64)>, protocol: &Protocol) -> Vec<AccuracyRecord> {
    let rows: Vec<Vec<AccuracyRecord>> = cells
        .into_par_iter()
        .map(|(m, n, seed)| accuracy_trial(m, n, seed, protocol))
        .collect();
    rows.into_iter().flatten().collect()
}

/// Accuracy of both estimators against network size at fixed sample count.
pub fn sweep_nodes(
    m_values: &[usize],
    n_fixed: usize,
    repeats: usize,
    base_seed: u64,
    protocol: &Protocol,
) -> Result<Vec<AccuracyRecord>> {
    check_grid(m_values, 2, "m", repeats)?;
    check_grid(&[n_fixed], 3, "n", repeats)?;
    protocol.validate()?;
    let cells = m_values
        .iter()
        .flat_map(|&m| (0..repeats).map(move |r| (m, n_fixed, trial_seed(base_seed, r))))
        .collect();
    Ok(run_grid(cells, protocol))
}

/// Accuracy of both estimators against sample count at fixed size. For a
/// given repeat every N sees the same network.
pub fn sweep_samples(
    n_values: &[usize],
    m_fixed: usize,
    repeats: usize,
    base_seed: u64,
    protocol: &Protocol,
) -> Result<Vec<AccuracyRecord>> {
    check_grid(n_values, 3, "n", repeats)?;
    check_grid(&[m_fixed], 2, "m", repeats)?;
    protocol.validate()?;
    let cells = n_values
        .iter()
        .flat_map(|&n| (0..repeats).map(move |r| (m_fixed, n, trial_seed(base_seed, r))))
        .collect();
    Ok(run_grid(cells, protocol))
}

fn flat(a: &DMatrix<f64>) -> &[f64] {
    a.as_slice()
}

fn diagnosis(m: usize, n: usize, seed: u64, protocol: &Protocol) -> Result<DiagnosisRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (params, ts) = protocol.draw_and_simulate(m, n, &mut rng, seed)?;
    let dt = protocol.sample_interval;
    let j = params.jacobian();

    let q0 = model_cov(&params)?;
    let q0_inv = q0.clone().try_inverse().ok_or(Error::Singular { magnitude: 0.0, context: "model covariance".into() })?;
    let qt = model_lagged_cov(&q0, &j, dt)?;
    let lambda = propagator(&j, dt)?;
    let log_lambda = &j * dt;

    // Empirical side: the same accumulations the Bayesian estimator uses.
    let emp = bayesian_moments(&ts)?;
    let emp_q0_inv = emp.q0.clone().try_inverse().ok_or(Error::Singular {
        magnitude: 0.0,
        context: format!("empirical covariance (m={m}, seed={seed})"),
    })?;
    let emp_lambda = bayesian_propagator(&ts)?;
    let emp_log: DMatrix<Complex64> = mat_log(&emp_lambda)?;
    let emp_log_re = real_part(&emp_log);
    let mut c_hat = &emp_log_re / dt;
    c_hat.fill_diagonal(0.0);

    Ok(DiagnosisRecord {
        m,
        seed,
        corr_precision: pearson(flat(&q0_inv), flat(&emp_q0_inv))?,
        corr_lagged: pearson(flat(&qt), flat(&emp.qtau))?,
        corr_lambda: pearson(flat(&lambda), flat(&emp_lambda))?,
        corr_logm: pearson(flat(&log_lambda), flat(&emp_log_re))?,
        corr_c: pearson(&off_diagonal(params.connectivity()), &off_diagonal(&c_hat))?,
        imag_ratio: imag_real_ratio(&emp_log)?,
    })
}

/// Similarity of each intermediate quantity of the Bayesian estimate to its
/// theoretical counterpart, plus the imaginary/real ratio of logm(Λ̂).
pub fn diagnose_bayes(
    m_values: &[usize],
    n_fixed: usize,
    repeats: usize,
    base_seed: u64,
    protocol: &Protocol,
) -> Result<Vec<DiagnosisRecord>> {
    check_grid(m_values, 2, "m", repeats)?;
    check_grid(&[n_fixed], 3, "n", repeats)?;
    protocol.validate()?;
    let cells: Vec<(usize, u64)> = m_values
        .iter()
        .flat_map(|&m| (0..repeats).map(move |r| (m, trial_seed(base_seed, r))))
        .collect();
    Ok(cells
        .into_par_iter()
        .map(|(m, seed)| {
            diagnosis(m, n_fixed, seed, protocol).unwrap_or_else(|e| {
                log::warn!("diagnosis m={m} n={n_fixed} seed={seed} failed: {e}");
                DiagnosisRecord {
                    m,
                    seed,
                    corr_precision: f64::NAN,
                    corr_lagged: f64::NAN,
                    corr_lambda: f64::NAN,
                    corr_logm: f64::NAN,
                    corr_c: f64::NAN,
                    imag_ratio: f64::NAN,
                }
            })
        })
        .collect())
}

/// Write records as CSV with a header row naming every field.
pub fn write_csv<W: Write, T: Serialize>(writer: W, records: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean over non-NaN values; NaN when none remain.
pub fn nan_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, count) = values.into_iter().filter(|v| !v.is_nan()).fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

/// Mean accuracy_c per (grid value, method), in first-seen grid order.
pub fn mean_accuracy_by(records: &[AccuracyRecord], key: impl Fn(&AccuracyRecord) -> usize) -> Vec<(usize, Method, f64)> {
    let mut keys: Vec<(usize, Method)> = Vec::new();
    for r in records {
        if !keys.contains(&(key(r), r.method)) {
            keys.push((key(r), r.method));
        }
    }
    keys.into_iter()
        .map(|(k, method)| {
            let mean = nan_mean(records.iter().filter(|r| key(r) == k && r.method == method).map(|r| r.accuracy_c));
            (k, method, mean)
        })
        .collect()
}
