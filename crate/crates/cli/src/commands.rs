//! One function per subcommand. Each takes a fully resolved config (flags
//! already merged in), writes its outputs and a manifest into `out`, and
//! returns the files it wrote.

use std::path::Path;

use mou_core::estimators::{accuracy, Method};
use mou_core::experiments::{
    diagnose_bayes, gen_cohort, nan_mean, permutation_null, split_accuracies, sweep_nodes, sweep_samples,
};
use mou_core::model::ModelParams;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{
    ClassifyConfig, DiagnoseConfig, EstimateConfig, SimulateConfig, SweepNodesConfig, SweepSamplesConfig,
};
use crate::error::CliError;
use crate::io::{self, Manifest};

pub struct Run<'a> {
    pub out: &'a Path,
    pub seed: u64,
    pub workers: usize,
}

fn finish<C: Serialize>(run: &Run, command: &str, config: &C, outputs: Vec<String>, interval: Option<f64>) -> Result<Vec<String>, CliError> {
    let mut m = Manifest::new(command, run.seed, run.workers, config)?;
    m.outputs = outputs.clone();
    m.sample_interval = interval;
    m.write(run.out)?;
    Ok(outputs)
}

pub fn simulate(cfg: &SimulateConfig, run: &Run) -> Result<Vec<String>, CliError> {
    let protocol = cfg.protocol.to_protocol()?;
    if cfg.m < 2 || cfg.n < 3 {
        return Err(CliError::Config(format!("need m >= 2 and n >= 3, got m={} n={}", cfg.m, cfg.n)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let (params, ts) = protocol.draw_and_simulate(cfg.m, cfg.n, &mut rng, run.seed)?;
    io::ensure_dir(run.out)?;
    let ts_path = run.out.join("timeseries.csv");
    let file = std::fs::File::create(&ts_path).map_err(|e| CliError::io(&ts_path, e))?;
    ts.write_csv(std::io::BufWriter::new(file)).map_err(|e| CliError::file(&ts_path, e))?;
    io::write_matrix(&run.out.join("connectivity.csv"), params.connectivity())?;
    io::write_sigma(&run.out.join("sigma.csv"), params.sigma_diag())?;
    let outputs = vec!["timeseries.csv".into(), "connectivity.csv".into(), "sigma.csv".into()];
    finish(run, "simulate", cfg, outputs, Some(ts.sample_interval()))
}

#[derive(Serialize)]
struct EstimateRow {
    method: Method,
    m: usize,
    n: usize,
    iterations: usize,
    fit_value: Option<f64>,
    tau_x_hat: f64,
    imag_ratio: f64,
    sigma_offdiag_residual: f64,
    accuracy_c: Option<f64>,
    accuracy_sigma: Option<f64>,
}

pub fn estimate(cfg: &EstimateConfig, run: &Run) -> Result<Vec<String>, CliError> {
    let protocol = cfg.protocol.to_protocol()?;
    let method = cfg.method()?;
    let input = cfg.input.as_deref().ok_or_else(|| CliError::Config("estimate: no input series (--input or `input`)".into()))?;
    let ts = io::load_timeseries(input, cfg.dt)?;
    let est = protocol.estimate(method, &ts)?;

    let (accuracy_c, accuracy_sigma) = match &cfg.truth {
        Some(dir) => {
            let c = io::read_matrix(&dir.join("connectivity.csv"))?;
            let sigma = io::read_sigma(&dir.join("sigma.csv"))?;
            let truth = ModelParams::new(c, sigma, protocol.tau_x)?;
            let (a, s) = accuracy(&truth, &est)?;
            (Some(a), Some(s))
        }
        None => (None, None),
    };

    io::ensure_dir(run.out)?;
    let row = EstimateRow {
        method,
        m: ts.node_count(),
        n: ts.sample_count(),
        iterations: est.iterations,
        fit_value: est.fit_value,
        tau_x_hat: est.tau_x_hat,
        imag_ratio: est.imag_ratio,
        sigma_offdiag_residual: est.sigma_offdiag_residual,
        accuracy_c,
        accuracy_sigma,
    };
    io::write_table(&run.out.join("estimate.csv"), &[row])?;
    io::write_matrix(&run.out.join("c_hat.csv"), &est.c_hat)?;
    io::write_sigma(&run.out.join("sigma_hat.csv"), &est.sigma_hat)?;
    let outputs = vec!["estimate.csv".into(), "c_hat.csv".into(), "sigma_hat.csv".into()];
    finish(run, "estimate", cfg, outputs, None)
}

pub fn sweep_nodes_cmd(cfg: &SweepNodesConfig, run: &Run) -> Result<Vec<String>, CliError> {
    let protocol = cfg.protocol.to_protocol()?;
    let rows = sweep_nodes(&cfg.m_values, cfg.n, cfg.repeats, run.seed, &protocol)?;
    report_failures(rows.iter().filter(|r| r.failed()).count(), rows.len());
    io::ensure_dir(run.out)?;
    io::write_table(&run.out.join("sweep_nodes.csv"), &rows)?;
    finish(run, "sweep-nodes", cfg, vec!["sweep_nodes.csv".into()], None)
}

pub fn sweep_samples_cmd(cfg: &SweepSamplesConfig, run: &Run) -> Result<Vec<String>, CliError> {
    let protocol = cfg.protocol.to_protocol()?;
    let rows = sweep_samples(&cfg.n_values, cfg.m, cfg.repeats, run.seed, &protocol)?;
    report_failures(rows.iter().filter(|r| r.failed()).count(), rows.len());
    io::ensure_dir(run.out)?;
    io::write_table(&run.out.join("sweep_samples.csv"), &rows)?;
    finish(run, "sweep-samples", cfg, vec!["sweep_samples.csv".into()], None)
}

pub fn diagnose(cfg: &DiagnoseConfig, run: &Run) -> Result<Vec<String>, CliError> {
    let protocol = cfg.protocol.to_protocol()?;
    let rows = diagnose_bayes(&cfg.m_values, cfg.n, cfg.repeats, run.seed, &protocol)?;
    report_failures(rows.iter().filter(|r| r.corr_c.is_nan()).count(), rows.len());
    io::ensure_dir(run.out)?;
    io::write_table(&run.out.join("diagnose.csv"), &rows)?;
    finish(run, "diagnose", cfg, vec!["diagnose.csv".into()], None)
}

#[derive(Serialize)]
struct SplitRow {
    repetition: usize,
    accuracy: f64,
}

pub fn classify(cfg: &ClassifyConfig, run: &Run) -> Result<Vec<String>, CliError> {
    let protocol = cfg.protocol.to_protocol()?;
    let cohort_cfg = cfg.cohort(run.seed)?;
    let logreg = cfg.logreg();
    let methods = cfg.methods()?;
    io::ensure_dir(run.out)?;
    let mut outputs = Vec::new();
    let table = |accs: Vec<f64>| -> Vec<SplitRow> {
        accs.into_iter().enumerate().map(|(repetition, accuracy)| SplitRow { repetition, accuracy }).collect()
    };
    for method in methods {
        let cohort = gen_cohort(&cohort_cfg, method, &protocol)?;
        let accs = split_accuracies(&cohort, &cohort_cfg, &logreg)?;
        log::info!("{method}: mean test accuracy {:.3}", nan_mean(accs.iter().copied()));
        let name = format!("classify_{method}.csv");
        io::write_table(&run.out.join(&name), &table(accs))?;
        outputs.push(name);
        if cfg.permutation_null {
            let null = permutation_null(&cohort, &cohort_cfg, &logreg)?;
            let name = format!("classify_null_{method}.csv");
            io::write_table(&run.out.join(&name), &table(null))?;
            outputs.push(name);
        }
    }
    finish(run, "classify", cfg, outputs, None)
}

fn report_failures(failed: usize, total: usize) {
    if failed > 0 {
        log::warn!("{failed} of {total} rows failed and were written as NaN");
    }
}
