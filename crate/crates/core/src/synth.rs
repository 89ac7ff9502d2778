//! Random networks, Euler-Maruyama simulation and empirical moments.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Bernoulli, Distribution, LogNormal, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::model::{ModelParams, MomentKind, MomentPair};

const MAX_EMPTY_REDRAWS: usize = 100;
const MAX_UNSTABLE_REDRAWS: usize = 1000;

/// Node × sample activity matrix at a fixed sampling interval.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    data: DMatrix<f64>,
    sample_interval: f64,
}

impl TimeSeries {
    pub fn new(data: DMatrix<f64>, sample_interval: f64) -> Result<Self> {
        if !(sample_interval > 0.0 && sample_interval.is_finite()) {
            return Err(Error::Domain(format!("sample interval must be > 0, got {sample_interval}")));
        }
        if data.nrows() == 0 {
            return Err(Error::Shape("time series has no nodes".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("time series contains non-finite values".into()));
        }
        Ok(TimeSeries { data, sample_interval })
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn sample_interval(&self) -> f64 {
        self.sample_interval
    }

    pub fn node_count(&self) -> usize {
        self.data.nrows()
    }

    pub fn sample_count(&self) -> usize {
        self.data.ncols()
    }

    /// Relabel nodes: row i of the result is row perm[i] of self.
    pub fn permuted(&self, perm: &[usize]) -> TimeSeries {
        let data = DMatrix::from_fn(self.node_count(), self.sample_count(), |i, n| self.data[(perm[i], n)]);
        TimeSeries { data, sample_interval: self.sample_interval }
    }

    /// Write as CSV with header `node_0,...,node_{M-1}` and one row per sample.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record((0..self.node_count()).map(|i| format!("node_{i}")))?;
        for n in 0..self.sample_count() {
            // `{:?}` round-trips f64 exactly.
            w.write_record(self.data.column(n).iter().map(|v| format!("{v:?}")))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parse the CSV layout written by [`TimeSeries::write_csv`]. Row numbers in
    /// errors are 1-based file lines (the header is line 1).
    pub fn read_csv<R: Read>(reader: R, sample_interval: f64) -> Result<TimeSeries> {
        let mut r = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(reader);
        let mut records = r.records();
        let header = match records.next() {
            None => return Err(Error::Format("empty file: missing header row".into())),
            Some(h) => h.map_err(|e| Error::Format(format!("line 1: {e}")))?,
        };
        for (col, name) in header.iter().enumerate() {
            if name.trim() != format!("node_{col}") {
                return Err(Error::Format(format!(
                    "line 1, column {}: expected header `node_{col}`, found `{name}`",
                    col + 1
                )));
            }
        }
        let m = header.len();
        if m == 0 {
            return Err(Error::Format("line 1: header has no columns".into()));
        }
        let mut values = Vec::new();
        let mut rows = 0usize;
        for (idx, rec) in records.enumerate() {
            let line = idx + 2;
            let rec = rec.map_err(|e| Error::Format(format!("line {line}: {e}")))?;
            if rec.len() != m {
                return Err(Error::Format(format!("line {line}: expected {m} columns, found {}", rec.len())));
            }
            for (col, cell) in rec.iter().enumerate() {
                let v: f64 = cell.trim().parse().map_err(|_| {
                    Error::Format(format!("line {line}, column {} (node_{col}): `{cell}` is not a number", col + 1))
                })?;
                if !v.is_finite() {
                    return Err(Error::Format(format!(
                        "line {line}, column {} (node_{col}): non-finite value `{cell}`",
                        col + 1
                    )));
                }
                values.push(v);
            }
            rows += 1;
        }
        if rows == 0 {
            return Err(Error::Format("no sample rows after header".into()));
        }
        // Samples arrive row by row, i.e. column-major for the M×N layout.
        TimeSeries::new(DMatrix::from_vec(m, rows, values), sample_interval)
            .map_err(|e| Error::Format(e.to_string()))
    }
}

/// Random-network law: Bernoulli adjacency times log-normal weights.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub node_count: usize,
    pub density: f64,
    pub weight_log_mean: f64,
    pub weight_log_sd: f64,
    pub seed: u64,
}

impl NetworkConfig {
    pub fn new(node_count: usize, density: f64, seed: u64) -> Self {
        NetworkConfig { node_count, density, weight_log_mean: 0.0, weight_log_sd: 1.0, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.node_count < 2 {
            return Err(Error::Config(format!("node count must be >= 2, got {}", self.node_count)));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::Config(format!("density must be in (0, 1], got {}", self.density)));
        }
        if !(self.weight_log_sd >= 0.0 && self.weight_log_sd.is_finite() && self.weight_log_mean.is_finite()) {
            return Err(Error::Config("log-weight mean/sd must be finite, sd >= 0".into()));
        }
        Ok(())
    }

    /// The random stream this config's seed denotes.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Draw C = C′·M/ΣC′ with C′ = A ⊙ W, so that ΣC = M exactly up to rounding.
pub fn gen_connectivity<R: Rng + ?Sized>(cfg: &NetworkConfig, rng: &mut R) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    let m = cfg.node_count;
    let edge = Bernoulli::new(cfg.density).map_err(|e| Error::Config(e.to_string()))?;
    let weight = LogNormal::new(cfg.weight_log_mean, cfg.weight_log_sd).map_err(|e| Error::Config(e.to_string()))?;
    for _ in 0..MAX_EMPTY_REDRAWS {
        let mut c = DMatrix::<f64>::zeros(m, m);
        for j in 0..m {
            for i in 0..m {
                if i != j && edge.sample(rng) {
                    c[(i, j)] = weight.sample(rng);
                }
            }
        }
        let total: f64 = c.sum();
        if total > 0.0 {
            c *= m as f64 / total;
            return Ok(c);
        }
    }
    Err(Error::Degenerate(format!(
        "{MAX_EMPTY_REDRAWS} consecutive connectivity draws had no edges (M={m}, p={})",
        cfg.density
    )))
}

/// σᵢ² = 0.5 + 0.5·uᵢ with uᵢ ~ U(0, 1).
pub fn gen_sigma<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Vec<f64> {
    let u = Uniform::new(0.0, 1.0).expect("valid unit interval");
    (0..m).map(|_| 0.5 + 0.5 * u.sample(rng)).collect()
}

/// Draw (C, Σ) until the Jacobian is stable. Returns the parameters and the
/// number of rejected connectivity draws.
pub fn draw_stable_params<R: Rng + ?Sized>(cfg: &NetworkConfig, tau_x: f64, rng: &mut R) -> Result<(ModelParams, usize)> {
    for rejected in 0..MAX_UNSTABLE_REDRAWS {
        let c = gen_connectivity(cfg, rng)?;
        let sigma = gen_sigma(cfg.node_count, rng);
        match ModelParams::new(c, sigma, tau_x) {
            Ok(p) => {
                if rejected > 0 {
                    log::debug!("M={} seed={}: {rejected} unstable draws rejected", cfg.node_count, cfg.seed);
                }
                return Ok((p, rejected));
            }
            Err(Error::Unstable { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Degenerate(format!(
        "no stable connectivity in {MAX_UNSTABLE_REDRAWS} draws (M={}, p={}, tau_x={tau_x})",
        cfg.node_count, cfg.density
    )))
}

/// Euler-Maruyama integration from x₀ = 0 with a 10·τ_x burn-in, recording
/// every `sample_interval` seconds.
pub fn simulate<R: Rng + ?Sized>(
    params: &ModelParams,
    duration_s: f64,
    euler_dt: f64,
    sample_interval: f64,
    rng: &mut R,
) -> Result<TimeSeries> {
    if !(euler_dt > 0.0 && euler_dt.is_finite()) {
        return Err(Error::Config(format!("Euler step must be > 0, got {euler_dt}")));
    }
    if !(sample_interval > 0.0 && sample_interval.is_finite()) {
        return Err(Error::Config(format!("sample interval must be > 0, got {sample_interval}")));
    }
    let ratio = sample_interval / euler_dt;
    let substeps = ratio.round();
    if substeps < 1.0 || (ratio - substeps).abs() > 1e-9 * ratio {
        return Err(Error::Config(format!(
            "sample interval {sample_interval} is not an integer multiple of the Euler step {euler_dt}"
        )));
    }
    let substeps = substeps as usize;
    if !(duration_s >= 2.0 * sample_interval) {
        return Err(Error::Config(format!(
            "duration {duration_s} s is shorter than two sample intervals ({sample_interval} s)"
        )));
    }
    let n = (duration_s / sample_interval + 1e-9).floor() as usize;
    let burn_steps = (10.0 * params.tau_x() / euler_dt).round() as usize;

    let m = params.node_count();
    let j = params.jacobian();
    // x ← (I + dt·J) x + √dt·σ ξ
    let mut step = j * euler_dt;
    for i in 0..m {
        step[(i, i)] += 1.0;
    }
    let noise: Vec<f64> = params.sigma_diag().iter().map(|s2| (s2 * euler_dt).sqrt()).collect();

    let mut x = DVector::<f64>::zeros(m);
    let mut next = DVector::<f64>::zeros(m);
    let mut data = DMatrix::<f64>::zeros(m, n);
    let total = burn_steps + n * substeps;
    for k in 0..total {
        next.gemv(1.0, &step, &x, 0.0);
        for i in 0..m {
            let xi: f64 = StandardNormal.sample(rng);
            next[i] += noise[i] * xi;
        }
        std::mem::swap(&mut x, &mut next);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged { step: k + 1 });
        }
        let after_burn = (k + 1).checked_sub(burn_steps);
        if let Some(s) = after_burn {
            if s > 0 && s % substeps == 0 {
                data.set_column(s / substeps - 1, &x);
            }
        }
    }
    TimeSeries::new(data, sample_interval)
}

/// Per-node demeaned copy of the series.
pub(crate) fn demeaned(x: &TimeSeries) -> DMatrix<f64> {
    let mut d = x.data().clone();
    for mut row in d.row_iter_mut() {
        let mean = row.sum() / row.len() as f64;
        row.add_scalar_mut(-mean);
    }
    d
}

/// S[i][j] = Σ_{n<count} x_i(n)·x_j(n+lag). Zero-lag products are mirrored so
/// the result is exactly symmetric.
pub(crate) fn lagged_products(x: &DMatrix<f64>, lag: usize, count: usize) -> DMatrix<f64> {
    let a = x.columns(0, count);
    let b = x.columns(lag, count);
    let mut s = a * b.transpose();
    if lag == 0 {
        let m = s.nrows();
        for j in 0..m {
            for i in j + 1..m {
                s[(j, i)] = s[(i, j)];
            }
        }
    }
    s
}

/// Demeaned Q̂⁰ (normalizer N−1) and Q̂ᵗ at `lag_steps` (normalizer N−lag−1).
pub fn empirical_moments(x: &TimeSeries, lag_steps: usize) -> Result<MomentPair> {
    let n = x.sample_count();
    if n <= lag_steps + 1 {
        return Err(Error::Length { needed: lag_steps + 1, got: n });
    }
    let d = demeaned(x);
    let q0 = lagged_products(&d, 0, n) / (n - 1) as f64;
    let qtau = lagged_products(&d, lag_steps, n - lag_steps) / (n - lag_steps - 1) as f64;
    Ok(MomentPair {
        q0,
        qtau,
        tau: lag_steps as f64 * x.sample_interval(),
        kind: MomentKind::Empirical,
    })
}
