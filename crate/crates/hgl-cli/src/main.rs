//! `hgl`: experiment runner for the random conductance model.
//!
//! Exit status: 0 success, 2 configuration or input error, 3 solver
//! failure (partial outputs kept), 4 failed self-check, 1 other errors.

mod artifacts;
mod commands;
mod config;
mod plotdata;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use artifacts::Artifacts;
use commands::RunError;
use plotdata::Series;

#[derive(Parser)]
#[command(name = "hgl", version, about = "Stochastic homogenization experiments on Z^d")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment pipeline.
    Run {
        /// sample-env, solve, corrector, estimate-k, kernel, fluctuate, verify-bounds, gff or residual.
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(commands::SUBCOMMANDS))]
        subcommand: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Base seed; overrides the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to the config `out` key, then `out/<subcommand>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; overrides HGL_THREADS.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Extract a plottable CSV series from a JSON report.
    Plotdata {
        report: PathBuf,
        /// variance, residual or moments; chosen from the report kind by default.
        #[arg(long)]
        series: Option<String>,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_SOLVER: u8 = 3;
const EXIT_INVARIANT: u8 = 4;

fn threads(flag: Option<usize>) -> Result<Option<usize>, String> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var("HGL_THREADS") {
        Ok(s) => s.trim().parse::<usize>().map(Some).map_err(|_| format!("HGL_THREADS: `{s}` is not a count")),
        Err(_) => Ok(None),
    }
}

fn run(subcommand: &str, config: Option<PathBuf>, seed: Option<u64>, out: Option<PathBuf>, threads_flag: Option<usize>) -> ExitCode {
    let cfg = match config::load(config.as_deref(), seed) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let n_threads = match threads(threads_flag) {
        Ok(n) => n,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(n) = n_threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(EXIT_OTHER);
        }
    }
    let dir = out.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out").join(subcommand));
    let mut arts = match Artifacts::new(&dir) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {}: {e}", dir.display());
            return ExitCode::from(EXIT_OTHER);
        }
    };
    let result = commands::dispatch(subcommand, &cfg, &mut arts);
    let (status, code, error, data) = match result {
        Ok(data) if arts.violations().is_empty() => ("ok", 0, None, data),
        Ok(data) => ("invariant-violation", EXIT_INVARIANT, None, data),
        Err(RunError::Config(msg)) => ("config-error", EXIT_CONFIG, Some(msg), serde_json::Value::Null),
        Err(RunError::Core(e)) if e.is_solver_failure() => ("solver-failure", EXIT_SOLVER, Some(e.to_string()), serde_json::Value::Null),
        Err(RunError::Core(e)) => ("error", EXIT_OTHER, Some(e.to_string()), serde_json::Value::Null),
    };
    let report = json!({
        "kind": subcommand,
        "version": env!("CARGO_PKG_VERSION"),
        "status": status,
        "error": error,
        "violations": arts.violations(),
        "data": data,
    });
    let written = arts.json("report.json", &report).and_then(|_| arts.text("config.toml", &cfg.to_toml()));
    let manifest = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "schema": config::SCHEMA,
        "subcommand": subcommand,
        "config_hash": cfg.hash(),
        "seeds": arts.seeds(),
        "threads": n_threads.unwrap_or_else(rayon::current_num_threads),
        "timings": arts.timings(),
        "files": arts.files(),
        "status": status,
    });
    let written = written.and_then(|_| arts.json("manifest.json", &manifest));
    if let Err(e) = written {
        eprintln!("error: writing outputs: {e}");
        return ExitCode::from(EXIT_OTHER);
    }
    if let Some(msg) = &error {
        eprintln!("error: {msg}");
    }
    for v in arts.violations() {
        eprintln!("self-check failed: {v}");
    }
    eprintln!("{subcommand}: {status}, outputs in {}", dir.display());
    ExitCode::from(code)
}

fn plot(report: PathBuf, series: Option<String>, out: Option<PathBuf>) -> ExitCode {
    let text = match std::fs::read_to_string(&report) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {}: {e}", report.display());
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let value: serde_json::Value = if text.trim().is_empty() {
        json!({})
    } else {
        match serde_json::from_str(&text) {
            Ok(v) => v,
            Err(e) => {
                eprintln!("error: {}: {e}", report.display());
                return ExitCode::from(EXIT_CONFIG);
            }
        }
    };
    let series = match series.as_deref() {
        None => Series::for_kind(value.get("kind").and_then(|k| k.as_str())),
        Some(s) => match Series::parse(s) {
            Some(s) => s,
            None => {
                eprintln!("error: unknown series `{s}`");
                return ExitCode::from(EXIT_CONFIG);
            }
        },
    };
    let csv = plotdata::to_csv(&value, series);
    match out {
        Some(p) => {
            if let Err(e) = std::fs::write(&p, csv) {
                eprintln!("error: {}: {e}", p.display());
                return ExitCode::from(EXIT_OTHER);
            }
        }
        None => print!("{csv}"),
    }
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { subcommand, config, seed, out, threads } => run(&subcommand, config, seed, out, threads),
        Command::Plotdata { report, series, out } => plot(report, series, out),
    }
}
