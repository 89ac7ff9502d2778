//! Flat TOML configuration files, one schema per subcommand (see docs/config/).
//!
//! Every key is optional and falls back to the documented default; unknown
//! keys are rejected so typos do not silently run the default experiment.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use mou_core::estimators::{FitInit, LyapunovFitConfig, Method, UpdateRule};
use mou_core::experiments::{CohortConfig, FeatureMask, LogRegConfig, Protocol};

use crate::error::CliError;

/// Simulation and Lyapunov-fit keys shared by every subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolKeys {
    pub tau_x: f64,
    pub euler_dt: f64,
    pub sample_interval: f64,
    pub density: f64,
    pub lag_steps: usize,
    pub fit_update: String,
    pub fit_init: String,
    pub max_iters: usize,
    pub stop_patience: usize,
    pub min_rel_improvement: f64,
    pub learning_rate_j: f64,
    pub learning_rate_sigma: f64,
    pub nonnegative: bool,
    pub cg_iters: usize,
    pub record_timing: bool,
}

impl Default for ProtocolKeys {
    fn default() -> Self {
        let p = Protocol::default();
        ProtocolKeys {
            tau_x: p.tau_x,
            euler_dt: p.euler_dt,
            sample_interval: p.sample_interval,
            density: p.density,
            lag_steps: p.lag_steps,
            fit_update: "levenberg-marquardt".into(),
            fit_init: "moments".into(),
            max_iters: p.fit.max_iters,
            stop_patience: p.fit.stop_patience,
            min_rel_improvement: p.fit.min_rel_improvement,
            learning_rate_j: p.fit.learning_rate_j,
            learning_rate_sigma: p.fit.learning_rate_sigma,
            nonnegative: p.fit.nonnegative,
            cg_iters: p.fit.cg_iters,
            record_timing: p.record_timing,
        }
    }
}

impl ProtocolKeys {
    pub fn to_protocol(&self) -> Result<Protocol, CliError> {
        let update = match self.fit_update.as_str() {
            "levenberg-marquardt" => UpdateRule::LevenbergMarquardt,
            "gradient" => UpdateRule::Gradient,
            "moment-matching" => UpdateRule::MomentMatching,
            other => {
                return Err(CliError::Config(format!(
                    "fit_update: unknown rule `{other}` (levenberg-marquardt, gradient, moment-matching)"
                )))
            }
        };
        let init = match self.fit_init.as_str() {
            "moments" => FitInit::Moments,
            "zero" => FitInit::Zero,
            other => return Err(CliError::Config(format!("fit_init: unknown start `{other}` (moments, zero)"))),
        };
        let fit = LyapunovFitConfig {
            init,
            update,
            learning_rate_j: self.learning_rate_j,
            learning_rate_sigma: self.learning_rate_sigma,
            max_iters: self.max_iters,
            stop_patience: self.stop_patience,
            min_rel_improvement: self.min_rel_improvement,
            tau_x_init: self.tau_x,
            nonnegative: self.nonnegative,
            cg_iters: self.cg_iters,
            ..LyapunovFitConfig::default()
        };
        let p = Protocol {
            tau_x: self.tau_x,
            euler_dt: self.euler_dt,
            sample_interval: self.sample_interval,
            density: self.density,
            lag_steps: self.lag_steps,
            fit,
            record_timing: self.record_timing,
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateConfig {
    pub seed: Option<u64>,
    pub m: usize,
    pub n: usize,
    #[serde(flatten)]
    pub protocol: ProtocolKeys,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig { seed: None, m: 10, n: 500, protocol: ProtocolKeys::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimateConfig {
    pub seed: Option<u64>,
    pub method: String,
    pub input: Option<PathBuf>,
    pub dt: Option<f64>,
    pub truth: Option<PathBuf>,
    #[serde(flatten)]
    pub protocol: ProtocolKeys,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig {
            seed: None,
            method: "bayesian".into(),
            input: None,
            dt: None,
            truth: None,
            protocol: ProtocolKeys::default(),
        }
    }
}

impl EstimateConfig {
    pub fn method(&self) -> Result<Method, CliError> {
        Ok(self.method.parse::<Method>()?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepNodesConfig {
    pub seed: Option<u64>,
    pub m_values: Vec<usize>,
    pub n: usize,
    pub repeats: usize,
    #[serde(flatten)]
    pub protocol: ProtocolKeys,
}

impl Default for SweepNodesConfig {
    fn default() -> Self {
        SweepNodesConfig {
            seed: None,
            m_values: (1..=10).map(|k| 10 * k).collect(),
            n: 500,
            repeats: 100,
            protocol: ProtocolKeys::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSamplesConfig {
    pub seed: Option<u64>,
    pub n_values: Vec<usize>,
    pub m: usize,
    pub repeats: usize,
    #[serde(flatten)]
    pub protocol: ProtocolKeys,
}

impl Default for SweepSamplesConfig {
    fn default() -> Self {
        SweepSamplesConfig {
            seed: None,
            n_values: vec![250, 500, 1000, 2000, 4000],
            m: 50,
            repeats: 100,
            protocol: ProtocolKeys::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnoseConfig {
    pub seed: Option<u64>,
    pub m_values: Vec<usize>,
    pub n: usize,
    pub repeats: usize,
    #[serde(flatten)]
    pub protocol: ProtocolKeys,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        DiagnoseConfig {
            seed: None,
            m_values: vec![10, 25, 50, 75, 100],
            n: 500,
            repeats: 100,
            protocol: ProtocolKeys::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifyConfig {
    pub seed: Option<u64>,
    pub subjects: usize,
    pub sessions: usize,
    pub m: usize,
    pub n: usize,
    pub feature_mask: String,
    pub train_fraction: f64,
    pub repetitions: usize,
    pub methods: Vec<String>,
    pub permutation_null: bool,
    pub l2_penalty: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub tolerance: f64,
    #[serde(flatten)]
    pub protocol: ProtocolKeys,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        let c = CohortConfig::default();
        let l = LogRegConfig::default();
        ClassifyConfig {
            seed: None,
            subjects: c.subjects,
            sessions: c.sessions,
            m: c.m,
            n: c.n,
            feature_mask: "true-adjacency".into(),
            train_fraction: c.train_fraction,
            repetitions: c.repetitions,
            methods: vec!["bayesian".into(), "lyapunov".into()],
            permutation_null: false,
            l2_penalty: l.l2_penalty,
            learning_rate: l.learning_rate,
            max_epochs: l.max_epochs,
            tolerance: l.tolerance,
            protocol: ProtocolKeys::default(),
        }
    }
}

impl ClassifyConfig {
    pub fn cohort(&self, seed: u64) -> Result<CohortConfig, CliError> {
        let cfg = CohortConfig {
            subjects: self.subjects,
            sessions: self.sessions,
            m: self.m,
            n: self.n,
            density: self.protocol.density,
            feature_mask: self.feature_mask.parse::<FeatureMask>()?,
            train_fraction: self.train_fraction,
            repetitions: self.repetitions,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn logreg(&self) -> LogRegConfig {
        LogRegConfig {
            l2_penalty: self.l2_penalty,
            learning_rate: self.learning_rate,
            max_epochs: self.max_epochs,
            tolerance: self.tolerance,
        }
    }

    pub fn methods(&self) -> Result<Vec<Method>, CliError> {
        if self.methods.is_empty() {
            return Err(CliError::Config("methods: list is empty".into()));
        }
        self.methods.iter().map(|m| Ok(m.parse::<Method>()?)).collect()
    }
}

/// A config file schema. `OPTIONAL` lists the Option keys, which are absent
/// from the serialized default but accepted.
pub trait ConfigFile: Serialize + DeserializeOwned + Default {
    const OPTIONAL: &'static [&'static str] = &["seed"];
}

impl ConfigFile for SimulateConfig {}
impl ConfigFile for SweepNodesConfig {}
impl ConfigFile for SweepSamplesConfig {}
impl ConfigFile for DiagnoseConfig {}
impl ConfigFile for ClassifyConfig {}
impl ConfigFile for EstimateConfig {
    const OPTIONAL: &'static [&'static str] = &["seed", "input", "dt", "truth"];
}

/// Parse a config table, rejecting unknown keys.
pub fn from_table<T: ConfigFile>(table: toml::Table, origin: &str) -> Result<T, CliError> {
    let defaults = toml::Table::try_from(T::default()).expect("default config serializes");
    for key in table.keys() {
        if !defaults.contains_key(key) && !T::OPTIONAL.contains(&key.as_str()) {
            return Err(CliError::Config(format!("{origin}: unknown key `{key}`")));
        }
    }
    table.try_into().map_err(|e: toml::de::Error| CliError::Config(format!("{origin}: {}", e.message())))
}

pub fn load<T: ConfigFile>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::Config(format!("{}: {}", path.display(), e.message())))?;
    from_table(table, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn protocol_defaults() {
        let p = ProtocolKeys::default().to_protocol().unwrap();
        assert_eq!((p.tau_x, p.euler_dt, p.sample_interval, p.lag_steps), (1.0, 0.05, 1.0, 1));
        let s = SweepNodesConfig::default();
        assert_eq!((s.n, s.repeats), (500, 100));
    }

    #[test]
    fn unknown_and_mistyped_keys_are_rejected() {
        let t: toml::Table = "m = 5\nbogus = 1".parse().unwrap();
        assert!(matches!(from_table::<SimulateConfig>(t, "t"), Err(CliError::Config(_))));
        let t: toml::Table = "m = \"five\"".parse().unwrap();
        assert!(matches!(from_table::<SimulateConfig>(t, "t"), Err(CliError::Config(_))));
        // `input` belongs to estimate, not simulate.
        let t: toml::Table = "input = \"x.csv\"".parse().unwrap();
        assert!(matches!(from_table::<SimulateConfig>(t, "t"), Err(CliError::Config(_))));
    }

    #[test]
    fn optional_and_flattened_keys_parse() {
        let t: toml::Table = "seed = 3\nm = 7\nmax_iters = 20\ndensity = 0.3".parse().unwrap();
        let c: SimulateConfig = from_table(t, "t").unwrap();
        assert_eq!((c.seed, c.m, c.protocol.max_iters, c.protocol.density), (Some(3), 7, 20, 0.3));
        let t: toml::Table = "input = \"a.csv\"\ndt = 0.5\nmethod = \"lyapunov\"".parse().unwrap();
        let c: EstimateConfig = from_table(t, "t").unwrap();
        assert_eq!(c.dt, Some(0.5));
        assert_eq!(c.method().unwrap(), Method::Lyapunov);
    }

    #[test]
    fn bad_enumerations_are_config_errors() {
        let keys = ProtocolKeys { fit_update: "adam".into(), ..Default::default() };
        assert!(keys.to_protocol().is_err());
        let c = ClassifyConfig { feature_mask: "dti".into(), ..Default::default() };
        assert!(c.cohort(0).is_err());
        let c = ClassifyConfig { methods: vec!["ols".into()], ..Default::default() };
        assert!(c.methods().is_err());
    }
}
