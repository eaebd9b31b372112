//! Command-line driver for the exposure and mortality pipeline.
//!
//! Each subcommand runs one stage against an output directory; stages
//! communicate only through the artifacts they write there. Progress goes
//! to stderr as JSON lines; failures print one machine-readable JSON
//! object to stdout and exit nonzero.

mod artifacts;
mod config;
mod logging;
mod pipeline;
mod qq;
mod synth;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use heatmort::error::{CoreError, Result};

use crate::artifacts::Artifacts;
use crate::config::PipelineConfig;

#[derive(Parser)]
#[command(name = "heatmort", version, about = "Daily-maximum temperature exposure surfaces and summer mortality analysis")]
struct Cli {
    /// TOML configuration file; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root random seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; artifacts land in per-stage subdirectories.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for stage fan-out (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Show the effective configuration.
    Config {
        /// Print the built-in defaults instead of the loaded file.
        #[arg(long)]
        print_defaults: bool,
    },
    /// Generate the bundled synthetic scenario with known ground truth.
    Simulate,
    /// Select stations, fill gaps, and fix the projection and altitude
    /// standardization.
    Prep,
    /// Sample the station-level quantile regression chains.
    FitGqrm {
        /// Fit only this quantile level.
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Fit the per-year spatio-temporal mean-field model.
    FitGgpm {
        /// Fit only this study year (1-based).
        #[arg(long)]
        year: Option<u32>,
    },
    /// Interpolate a fitted model onto municipality centres.
    Surface {
        /// Source model: "gqrm" or "ggpm".
        #[arg(long)]
        method: String,
        /// Quantile level, for the gqrm method.
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Area-weight the gridded product onto municipalities.
    Aggregate {
        /// Input has one daily maximum per cell instead of hourly values.
        #[arg(long)]
        pre_aggregated: bool,
    },
    /// Flag heatwave days on an exposure surface under every configured
    /// definition.
    Heatwave {
        /// Surface to flag (default: the configured one).
        #[arg(long)]
        method: Option<String>,
    },
    /// Build the time-stratified referent table with lagged exposures.
    BuildCco,
    /// Fit the conditional Poisson health model for one exposure method.
    FitEpi {
        /// Exposure method: "reanalysis", "ggpm", "gqrm" (with --tau), or a
        /// full tag like "gqrm-0.5".
        #[arg(long)]
        method: String,
        /// Quantile level, for the gqrm method.
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Compare raw station records against the nearest gridded cell,
    /// percentile by percentile.
    DiagnoseQq,
}

fn error_kind(e: &CoreError) -> &'static str {
    match e {
        CoreError::Calendar(_) => "calendar",
        CoreError::Geometry(_) => "geometry",
        CoreError::EmptySelection { .. } => "empty-selection",
        CoreError::TooSparseToImpute { .. } => "too-sparse-to-impute",
        CoreError::IncompleteHours(_) => "incomplete-hours",
        CoreError::LengthMismatch { .. } => "length-mismatch",
        CoreError::NoCellOverlap { .. } => "no-cell-overlap",
        CoreError::CellsOverlap { .. } => "cells-overlap",
        CoreError::NotPositiveDefinite { .. } => "not-positive-definite",
        CoreError::NonFinite { .. } => "non-finite",
        CoreError::SolveTooLarge { .. } => "solve-too-large",
        CoreError::NoConvergence { .. } => "no-convergence",
        CoreError::InvalidConfig(_) => "invalid-config",
        CoreError::MissingExposure(_) => "missing-exposure",
        CoreError::Unsupported(_) => "unsupported",
        CoreError::Checkpoint(_) => "checkpoint",
        CoreError::Io(_) => "io",
        CoreError::Csv(_) => "csv",
        CoreError::Json(_) => "json",
    }
}

fn effective_config(cli: &Cli) -> Result<PipelineConfig> {
    match &cli.config {
        Some(path) => PipelineConfig::load(path, cli.seed, cli.out.clone()),
        None => {
            let mut cfg = PipelineConfig::default();
            cfg.seed = cli.seed;
            if let Some(o) = &cli.out {
                cfg.out = o.clone();
            }
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

#[cfg(feature = "parallel")]
fn size_pool(workers: Option<usize>) -> Result<()> {
    if let Some(n) = workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CoreError::InvalidConfig(format!("worker pool: {e}")))?;
    }
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn size_pool(_workers: Option<usize>) -> Result<()> {
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::Config { print_defaults } = &cli.command {
        if *print_defaults {
            print!("{}", PipelineConfig::print_defaults());
            return Ok(());
        }
    }
    size_pool(cli.workers)?;
    let cfg = effective_config(cli)?;
    let arts = Artifacts::new(&cfg.out);
    match &cli.command {
        Command::Config { .. } => {
            let text = toml::to_string_pretty(&cfg)
                .map_err(|e| CoreError::InvalidConfig(format!("config serialization: {e}")))?;
            print!("{text}");
            Ok(())
        }
        Command::Simulate => synth::simulate(&cfg, &arts),
        Command::Prep => pipeline::prep(&cfg, &arts),
        Command::FitGqrm { tau } => pipeline::fit_gqrm(&cfg, &arts, *tau),
        Command::FitGgpm { year } => pipeline::fit_ggpm(&cfg, &arts, *year),
        Command::Surface { method, tau } => pipeline::surface(&cfg, &arts, method, *tau),
        Command::Aggregate { pre_aggregated } => pipeline::aggregate(&cfg, &arts, *pre_aggregated),
        Command::Heatwave { method } => pipeline::heatwave(&cfg, &arts, method.as_deref()),
        Command::BuildCco => pipeline::build_cco(&cfg, &arts),
        Command::FitEpi { method, tau } => pipeline::fit_epi(&cfg, &arts, method, *tau),
        Command::DiagnoseQq => qq::diagnose_qq(&cfg, &arts),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        let body = serde_json::json!({
            "error": { "kind": error_kind(&e), "message": e.to_string() }
        });
        println!("{body}");
        std::process::exit(1);
    }
}
