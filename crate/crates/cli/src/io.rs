//! File formats: time-series and matrix CSVs, result tables and run manifests.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::DMatrix;
use mou_core::synth::TimeSeries;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const MANIFEST: &str = "manifest.toml";
pub const VERSION: &str = env!("MOU_VERSION");

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::io(path, e))
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Read a series written by `mou simulate` (or any CSV with a `node_i`
/// header). The sample interval comes from `dt`, else from a `manifest.toml`
/// next to the file.
pub fn load_timeseries(path: &Path, dt: Option<f64>) -> Result<TimeSeries, CliError> {
    let dt = match dt {
        Some(dt) => dt,
        None => sidecar_interval(path)?,
    };
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(CliError::Config(format!("sample interval must be > 0, got {dt}")));
    }
    TimeSeries::read_csv(open(path)?, dt).map_err(|e| CliError::file(path, e))
}

fn sidecar_interval(path: &Path) -> Result<f64, CliError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let manifest = dir.join(MANIFEST);
    if !manifest.exists() {
        return Err(CliError::Config(format!(
            "{}: no sample interval; pass --dt or keep the simulate manifest.toml next to it",
            path.display()
        )));
    }
    let m = Manifest::read(&manifest)?;
    m.sample_interval
        .ok_or_else(|| CliError::Config(format!("{}: no `sample_interval` key; pass --dt", manifest.display())))
}

/// Square matrix as CSV: header `node_0..`, row i holds entries (i, j).
pub fn write_matrix(path: &Path, a: &DMatrix<f64>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record((0..a.ncols()).map(|j| format!("node_{j}")))?;
    for i in 0..a.nrows() {
        w.write_record(a.row(i).iter().map(|v| format!("{v:?}")))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>, CliError> {
    // Same layout as a time series with rows read as samples, so reuse its parser.
    let ts = TimeSeries::read_csv(open(path)?, 1.0).map_err(|e| CliError::file(path, e))?;
    let a = ts.data().transpose();
    if !a.is_square() {
        return Err(CliError::Config(format!(
            "{}: expected a square matrix, found {}x{}",
            path.display(),
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(a)
}

#[derive(Serialize, Deserialize)]
struct SigmaRow {
    node: usize,
    sigma_sq: f64,
}

pub fn write_sigma(path: &Path, sigma: &[f64]) -> Result<(), CliError> {
    let rows: Vec<SigmaRow> = sigma.iter().enumerate().map(|(node, &s)| SigmaRow { node, sigma_sq: s }).collect();
    write_table(path, &rows)
}

pub fn read_sigma(path: &Path) -> Result<Vec<f64>, CliError> {
    let mut r = csv::Reader::from_reader(open(path)?);
    let mut out = Vec::new();
    for (idx, row) in r.deserialize::<SigmaRow>().enumerate() {
        let row = row.map_err(|e| CliError::Config(format!("{}: line {}: {e}", path.display(), idx + 2)))?;
        if row.node != idx {
            return Err(CliError::Config(format!("{}: line {}: expected node {idx}", path.display(), idx + 2)));
        }
        out.push(row.sigma_sq);
    }
    Ok(out)
}

pub fn write_table<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = create(path)?;
    mou_core::experiments::write_csv(&mut w, rows).map_err(|e| CliError::file(path, e))?;
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Provenance record written next to every output set. `mou replay` reruns it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub workers: usize,
    pub created_unix: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_interval: Option<f64>,
    pub outputs: Vec<String>,
    pub config: toml::Table,
}

impl Manifest {
    pub fn new<C: Serialize>(command: &str, seed: u64, workers: usize, config: &C) -> Result<Self, CliError> {
        let config = toml::Table::try_from(config).map_err(|e| CliError::Config(format!("config: {e}")))?;
        let created_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Ok(Manifest {
            command: command.into(),
            version: VERSION.into(),
            seed,
            workers,
            created_unix,
            sample_interval: None,
            outputs: Vec::new(),
            config,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join(MANIFEST);
        let text = toml::to_string(self).map_err(|e| CliError::Config(format!("manifest: {e}")))?;
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_and_sigma_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 0.1 + 0.2, -1e-300, 0.0]);
        let p = dir.path().join("a.csv");
        write_matrix(&p, &a).unwrap();
        assert_eq!(read_matrix(&p).unwrap(), a);
        let s = vec![0.5, 1.0 / 3.0];
        let p = dir.path().join("s.csv");
        write_sigma(&p, &s).unwrap();
        assert_eq!(read_sigma(&p).unwrap(), s);
    }

    #[test]
    fn interval_comes_from_flag_or_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ts.csv");
        std::fs::write(&p, "node_0,node_1\n1.0,2.0\n3.0,4.0\n").unwrap();
        assert!(matches!(load_timeseries(&p, None), Err(CliError::Config(_))));
        assert_eq!(load_timeseries(&p, Some(0.5)).unwrap().sample_interval(), 0.5);
        let mut m = Manifest::new("simulate", 1, 1, &toml::Table::new()).unwrap();
        m.sample_interval = Some(2.0);
        m.write(dir.path()).unwrap();
        let ts = load_timeseries(&p, None).unwrap();
        assert_eq!((ts.node_count(), ts.sample_count(), ts.sample_interval()), (2, 2, 2.0));
    }

    #[test]
    fn malformed_series_names_the_cell() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ts.csv");
        std::fs::write(&p, "node_0,node_1\n1.0,2.0\n3.0,NaN\n").unwrap();
        let err = load_timeseries(&p, Some(1.0)).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let msg = err.to_string();
        assert!(msg.contains("line 3") && msg.contains("column 2"), "{msg}");
    }
}
