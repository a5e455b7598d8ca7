//! Command-line front end: runs simulation campaigns from a config file,
//! validates configs, and exposes the built-in sanity checks.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cellfree_sim::harness::{
    default_pmax_sweep_dbm, run_campaign, write_results, CampaignOptions, ModeTemplate,
};
use cellfree_sim::scenario::load_config;
use cellfree_sim::{selftest, SimError};

#[derive(Parser)]
#[command(
    name = "cellfree-sim",
    about = "Downlink cell-free mmWave network simulator with energy-aware power control",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation campaign and write CSV results
    Run {
        /// Path to a `key = value` config file
        #[arg(long)]
        config: PathBuf,
        /// Output directory for results.csv, summary.csv, and friends
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated transmit power budgets in dBm (default: -10..30 in 5 dB steps)
        #[arg(long, value_name = "LIST", allow_hyphen_values = true)]
        pmax_dbm: Option<String>,
        /// Comma-separated mode templates, e.g. `uc-fd-perfect-opt_gee,cf-hybrid-estimated-uni`
        #[arg(long, value_name = "LIST")]
        modes: Option<String>,
        /// Override the number of drops in the config
        #[arg(long)]
        drops: Option<usize>,
        /// Override the master seed in the config
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (0 = one per core); falls back to CELLFREE_SIM_THREADS
        #[arg(long)]
        threads: Option<usize>,
        /// Write per-row optimizer convergence traces (trace_<row>.csv)
        #[arg(long)]
        traces: bool,
        /// Report wall_ms as 0 so repeated runs are byte-identical
        #[arg(long)]
        no_wall_time: bool,
    },
    /// Parse and validate a config file without running anything
    Validate {
        /// Path to a `key = value` config file
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the built-in sanity checks
    Selftest,
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn read_config(path: &PathBuf) -> Result<String, SimError> {
    std::fs::read_to_string(path).map_err(|source| SimError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse_pmax_list(list: &str) -> Result<Vec<f64>, SimError> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>().map_err(|_| {
                SimError::InvalidArgument(format!("--pmax-dbm: `{s}` is not a number"))
            })
        })
        .collect()
}

fn parse_mode_list(list: &str) -> Result<Vec<ModeTemplate>, SimError> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

fn resolve_threads(flag: Option<usize>) -> Result<usize, SimError> {
    if let Some(n) = flag {
        return Ok(n);
    }
    match std::env::var("CELLFREE_SIM_THREADS") {
        Ok(v) => v.parse().map_err(|_| {
            SimError::InvalidArgument(format!(
                "CELLFREE_SIM_THREADS: `{v}` is not a non-negative integer"
            ))
        }),
        Err(_) => Ok(0),
    }
}

fn run() -> Result<ExitCode, SimError> {
    match Cli::parse().cmd {
        Command::Run {
            config,
            out,
            pmax_dbm,
            modes,
            drops,
            seed,
            threads,
            traces,
            no_wall_time,
        } => {
            let mut cfg = load_config(&read_config(&config)?)?;
            if let Some(d) = drops {
                cfg.drops = d;
            }
            if let Some(s) = seed {
                cfg.master_seed = s;
            }
            cfg.validate()?;

            let options = CampaignOptions {
                templates: match &modes {
                    Some(list) => parse_mode_list(list)?,
                    None => CampaignOptions::default().templates,
                },
                pmax_dbm: match &pmax_dbm {
                    Some(list) => parse_pmax_list(list)?,
                    None => default_pmax_sweep_dbm(),
                },
                threads: resolve_threads(threads)?,
                record_traces: traces,
                measure_time: !no_wall_time,
            };

            let results = run_campaign(&cfg, &options)?;
            let written = write_results(&results, &out)?;
            println!(
                "wrote {written} result rows ({} failures) to {}",
                results.failures.len(),
                out.display()
            );
            if results.failures.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("error: {} campaign cells failed; see errors.csv", results.failures.len());
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Validate { config } => {
            let cfg = load_config(&read_config(&config)?)?;
            println!(
                "config ok: {} APs, {} users, {} drops, mode {}",
                cfg.num_aps,
                cfg.num_ms,
                cfg.drops,
                cfg.mode.as_str()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Selftest => {
            let mut failures = 0usize;
            for (name, outcome) in selftest::run_all() {
                match outcome {
                    Ok(()) => println!("[selftest] {name}: PASS"),
                    Err(msg) => {
                        failures += 1;
                        println!("[selftest] {name}: FAIL ({msg})");
                    }
                }
            }
            if failures == 0 {
                println!("[selftest] all checks passed");
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("error: {failures} selftest checks failed");
                Ok(ExitCode::FAILURE)
            }
        }
    }
}
