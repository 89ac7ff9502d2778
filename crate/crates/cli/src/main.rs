//! `mou`: simulate mOU networks, estimate connectivity and run the benchmark
//! sweeps from the command line.

mod commands;
mod config;
mod error;
mod io;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Run;
use crate::config::{
    ClassifyConfig, ConfigFile, DiagnoseConfig, EstimateConfig, SimulateConfig, SweepNodesConfig, SweepSamplesConfig,
};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "mou", version = io::VERSION, about = "Connectivity estimation for multivariate Ornstein-Uhlenbeck networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Output directory (created if missing).
    #[arg(long, env = "MOU_OUT_DIR")]
    out: PathBuf,
    /// Base seed; overrides `seed` in the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    workers: u64,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a stable network and simulate one series from it.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Estimate connectivity from a series CSV.
    Estimate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Series CSV with header node_0,...,node_{M-1}.
        #[arg(long)]
        input: Option<PathBuf>,
        /// moments, bayesian or lyapunov.
        #[arg(long)]
        method: Option<String>,
        /// Sample interval; defaults to the one in the manifest next to the input.
        #[arg(long)]
        dt: Option<f64>,
        /// Directory holding connectivity.csv and sigma.csv to score against.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Accuracy against network size.
    SweepNodes {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Accuracy against sample count.
    SweepSamples {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Intermediate-quantity similarity of the Bayesian estimate.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Subject identification from estimated connectivity.
    Classify {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Rerun the command recorded in a manifest.toml.
    Replay {
        manifest: PathBuf,
        #[arg(long, env = "MOU_OUT_DIR")]
        out: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        workers: Option<u64>,
    },
}

fn resolve_seed(flag: Option<u64>, file: &mut Option<u64>) -> u64 {
    let seed = flag.or(*file).unwrap_or(0);
    *file = Some(seed);
    seed
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {workers} worker threads: {e}")))?;
    Ok(pool.install(f))
}

fn dispatch<C: ConfigFile + Sync>(
    mut cfg: C,
    seed_flag: Option<u64>,
    out: &Path,
    workers: usize,
    seed_of: fn(&mut C) -> &mut Option<u64>,
    run: fn(&C, &Run) -> Result<Vec<String>, CliError>,
) -> Result<Vec<String>, CliError> {
    let seed = resolve_seed(seed_flag, seed_of(&mut cfg));
    let r = Run { out, seed, workers };
    with_pool(workers, || run(&cfg, &r))?
}

fn execute(cli: Cli) -> Result<Vec<String>, CliError> {
    match cli.command {
        Command::Simulate { config, common } => dispatch(
            config::load::<SimulateConfig>(config.as_deref())?,
            common.seed,
            &common.out,
            common.workers as usize,
            |c| &mut c.seed,
            commands::simulate,
        ),
        Command::Estimate { config, input, method, dt, truth, common } => {
            let mut cfg = config::load::<EstimateConfig>(config.as_deref())?;
            cfg.input = input.or(cfg.input);
            cfg.dt = dt.or(cfg.dt);
            cfg.truth = truth.or(cfg.truth);
            if let Some(m) = method {
                cfg.method = m;
            }
            dispatch(cfg, common.seed, &common.out, common.workers as usize, |c| &mut c.seed, commands::estimate)
        }
        Command::SweepNodes { config, common } => dispatch(
            config::load::<SweepNodesConfig>(Some(&config))?,
            common.seed,
            &common.out,
            common.workers as usize,
            |c| &mut c.seed,
            commands::sweep_nodes_cmd,
        ),
        Command::SweepSamples { config, common } => dispatch(
            config::load::<SweepSamplesConfig>(Some(&config))?,
            common.seed,
            &common.out,
            common.workers as usize,
            |c| &mut c.seed,
            commands::sweep_samples_cmd,
        ),
        Command::Diagnose { config, common } => dispatch(
            config::load::<DiagnoseConfig>(Some(&config))?,
            common.seed,
            &common.out,
            common.workers as usize,
            |c| &mut c.seed,
            commands::diagnose,
        ),
        Command::Classify { config, common } => dispatch(
            config::load::<ClassifyConfig>(Some(&config))?,
            common.seed,
            &common.out,
            common.workers as usize,
            |c| &mut c.seed,
            commands::classify,
        ),
        Command::Replay { manifest, out, workers } => replay(&manifest, &out, workers),
    }
}

fn replay(path: &Path, out: &Path, workers: Option<u64>) -> Result<Vec<String>, CliError> {
    let m = io::Manifest::read(path)?;
    let workers = workers.map(|w| w as usize).unwrap_or(m.workers).max(1);
    let origin = path.display().to_string();
    let seed = Some(m.seed);
    let table = m.config;
    match m.command.as_str() {
        "simulate" => dispatch(config::from_table::<SimulateConfig>(table, &origin)?, seed, out, workers, |c| &mut c.seed, commands::simulate),
        "estimate" => dispatch(config::from_table::<EstimateConfig>(table, &origin)?, seed, out, workers, |c| &mut c.seed, commands::estimate),
        "sweep-nodes" => dispatch(config::from_table::<SweepNodesConfig>(table, &origin)?, seed, out, workers, |c| &mut c.seed, commands::sweep_nodes_cmd),
        "sweep-samples" => dispatch(config::from_table::<SweepSamplesConfig>(table, &origin)?, seed, out, workers, |c| &mut c.seed, commands::sweep_samples_cmd),
        "diagnose" => dispatch(config::from_table::<DiagnoseConfig>(table, &origin)?, seed, out, workers, |c| &mut c.seed, commands::diagnose),
        "classify" => dispatch(config::from_table::<ClassifyConfig>(table, &origin)?, seed, out, workers, |c| &mut c.seed, commands::classify),
        other => Err(CliError::Config(format!("{origin}: cannot replay command `{other}`"))),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version go to stdout with status 0; usage errors exit 2.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(outputs) => {
            for o in outputs {
                println!("{o}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("mou").chain(args.iter().copied()))
    }

    #[test]
    fn sweeps_require_a_config() {
        assert!(parse(&["sweep-nodes", "--out", "x"]).is_err());
        assert!(parse(&["sweep-nodes", "--out", "x", "--config", "c.toml"]).is_ok());
    }

    #[test]
    fn workers_must_be_positive() {
        assert!(parse(&["simulate", "--out", "x", "--workers", "0"]).is_err());
        let cli = parse(&["simulate", "--out", "x", "--workers", "3", "--seed", "7"]).unwrap();
        match cli.command {
            Command::Simulate { common, .. } => assert_eq!((common.workers, common.seed), (3, Some(7))),
            _ => unreachable!(),
        }
    }

    #[test]
    fn seed_flag_beats_config() {
        let mut file = Some(5);
        assert_eq!(resolve_seed(Some(9), &mut file), 9);
        assert_eq!(file, Some(9));
        let mut file = None;
        assert_eq!(resolve_seed(None, &mut file), 0);
        assert_eq!(file, Some(0));
    }

    #[test]
    fn unreadable_config_is_an_io_error() {
        let cli = parse(&["sweep-nodes", "--out", "x", "--config", "/nonexistent/c.toml"]).unwrap();
        assert_eq!(execute(cli).unwrap_err().exit_code(), 4);
    }
}
