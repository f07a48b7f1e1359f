//! Command-line front end: `run`, `sweep`, `flops` and `gen-data`.
//!
//! Exit status is 0 on success, 2 for configuration errors, 3 when training
//! aborts and 1 for I/O failures.

mod config;
mod csv;
mod runner;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{parse_config, parse_config_with, parse_seeds, Method, RunConfig, SweepAxis, CONFIG_HELP, DEFAULT_MRM_ALPHA};
pub use csv::{fmt_g, mean_std, metrics_csv, MetricsRow, METRICS_COLUMNS};
pub use runner::{
    checkpoint_path, flops_report, flops_report_counts, gen_data, mask_path, partial_marker, preflight, run, run_id, sweep, sweep_csv,
    sweep_runs_path, train_seed, RunError, SweepRow, SWEEP_COLUMNS,
};

#[derive(Debug, Parser)]
#[command(name = "rest", version, about = "Reweighted sparse training experiments", after_help = CONFIG_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output path; overrides `out` in the config.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Comma-separated seeds; overrides `seeds` in the config.
    #[arg(long, value_name = "a,b,c")]
    seeds: Option<String>,
    /// Reject unknown config keys instead of warning about them.
    #[arg(long)]
    strict: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train once per seed and write the metrics CSV plus checkpoints.
    Run(Common),
    /// Repeat `run` over values of one axis and aggregate over seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// density | ratio; overrides `sweep_axis`.
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated values; overrides `sweep_values`.
        #[arg(long, value_name = "v1,v2,...")]
        values: Option<String>,
    },
    /// Print parameter and FLOP counts for the configured model.
    Flops(Common),
    /// Write the configured train and test splits to the `--out` directory.
    GenData(Common),
}

fn load(common: &Common) -> Result<(RunConfig, Vec<u64>), crate::error::Error> {
    let text = std::fs::read_to_string(&common.config)?;
    let (mut config, warnings) = parse_config_with(&text, common.strict)?;
    for w in warnings {
        eprintln!("warning: {}: {w}", common.config.display());
    }
    if let Some(out) = &common.out {
        config.out = Some(out.clone());
    }
    let seeds = match &common.seeds {
        Some(raw) => parse_seeds(raw)?,
        None => config.seeds.clone(),
    };
    Ok((config, seeds))
}

fn out_path(config: &RunConfig, default: &str) -> PathBuf {
    config.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn config_error(e: impl std::fmt::Display) -> i32 {
    eprintln!("error: {e}");
    2
}

/// Parses `args` (program name first) and executes the verb. Returns the
/// process exit status.
pub fn main_with<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match cli.command {
        Command::Run(common) => {
            let (config, seeds) = match load(&common) {
                Ok(v) => v,
                Err(e) => return config_error(e),
            };
            let out = out_path(&config, "results.csv");
            match run(&config, &seeds, &out) {
                Ok(rows) => {
                    eprintln!("wrote {} rows to {}", rows.len(), out.display());
                    0
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    e.exit_code()
                }
            }
        }
        Command::Sweep { common, axis, values } => {
            let (config, seeds) = match load(&common) {
                Ok(v) => v,
                Err(e) => return config_error(e),
            };
            let axis = match axis.as_deref().map(str::parse::<SweepAxis>).transpose() {
                Ok(a) => a.or(config.sweep_axis),
                Err(e) => return config_error(e),
            };
            let Some(axis) = axis else {
                return config_error("sweep needs an axis (--axis or `sweep_axis`)");
            };
            let values = match values.as_deref().map(parse_values).transpose() {
                Ok(v) => v.unwrap_or_else(|| config.sweep_values.clone()),
                Err(e) => return config_error(e),
            };
            let out = out_path(&config, "sweep.csv");
            match sweep(&config, axis, &values, &seeds, &out) {
                Ok(rows) => {
                    eprintln!("wrote {} aggregate rows to {}", rows.len(), out.display());
                    0
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    e.exit_code()
                }
            }
        }
        Command::Flops(common) => {
            let (config, _) = match load(&common) {
                Ok(v) => v,
                Err(e) => return config_error(e),
            };
            let report = match flops_report(&config) {
                Ok(r) => r,
                Err(e) => return config_error(e),
            };
            match &config.out {
                Some(path) => match std::fs::write(path, report) {
                    Ok(()) => 0,
                    Err(e) => {
                        eprintln!("error: {e}");
                        1
                    }
                },
                None => {
                    print!("{report}");
                    0
                }
            }
        }
        Command::GenData(common) => {
            let (config, _) = match load(&common) {
                Ok(v) => v,
                Err(e) => return config_error(e),
            };
            let dir = out_path(&config, "data");
            match gen_data(&config, &dir) {
                Ok((train, test)) => {
                    eprintln!("wrote {} and {}", train.display(), test.display());
                    0
                }
                Err(crate::error::Error::Io(e)) => {
                    eprintln!("error: {e}");
                    1
                }
                Err(e) => config_error(e),
            }
        }
    }
}

fn parse_values(raw: &str) -> Result<Vec<f64>, String> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("bad sweep value {s:?}")))
        .collect()
}

/// Entry point of the `rest` binary.
pub fn main() -> i32 {
    main_with(std::env::args_os())
}
