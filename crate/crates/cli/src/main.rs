//! Experiment runner for noise-robust heterogeneous graph learning.
//!
//! Exit codes: 0 success, 2 configuration error, 3 training divergence.

mod commands;
mod config;
mod runner;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use config::ExperimentConfig;
use hetsim_core::training::{Ablation, TrainError};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "hetsim", about = "Noise-robust heterogeneous graph learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for machine-readable reports.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override run seeds (comma-separated).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Override the corruption ratio.
    #[arg(long)]
    noise_ratio: Option<f64>,
    /// Override the ablation arm (full | no_synthesizer | no_meta_target).
    #[arg(long)]
    ablation: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate over all run seeds.
    Train(CommonArgs),
    /// Cross noise ratios with ablation arms, pairing corruption per seed.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Ratios to sweep (comma-separated).
        #[arg(long, value_delimiter = ',')]
        ratios: Vec<f64>,
    },
    /// Run the full / no-synthesizer / no-meta-target arms with shared seeds.
    Ablate(CommonArgs),
    /// Homogeneity scores of metapath graphs vs. the synthesized target graph.
    Homogeneity(CommonArgs),
    /// Generate the configured synthetic graph as a JSON manifest.
    GenSynthetic {
        #[command(flatten)]
        common: CommonArgs,
        /// Manifest file to write.
        #[arg(long)]
        out_file: PathBuf,
    },
    /// Load and validate the configured dataset.
    ValidateData(CommonArgs),
}

fn parse_ablation(s: &str) -> Result<Ablation> {
    match s {
        "full" => Ok(Ablation::Full),
        "no_synthesizer" => Ok(Ablation::NoSynthesizer),
        "no_meta_target" => Ok(Ablation::NoMetaTarget),
        other => anyhow::bail!("unknown ablation {other:?}"),
    }
}

/// Loads the config and applies flag overrides (flags win over file keys).
fn load_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(&common.config)?;
    if let Some(seeds) = &common.seeds {
        cfg.run.seeds = seeds.clone();
    }
    if let Some(ratio) = common.noise_ratio {
        cfg.noise.ratio = ratio;
    }
    if let Some(ablation) = &common.ablation {
        cfg.train.ablation = parse_ablation(ablation)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &CommonArgs, cfg: &ExperimentConfig) -> Option<PathBuf> {
    common.out.clone().or_else(|| cfg.run.out_dir.as_ref().map(PathBuf::from))
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Train(common) => {
            let cfg = load_config(common)?;
            commands::cmd_train(&cfg, &out_dir(common, &cfg))
        }
        Command::Sweep { common, ratios } => {
            let cfg = load_config(common)?;
            commands::cmd_sweep(&cfg, ratios, &out_dir(common, &cfg))
        }
        Command::Ablate(common) => {
            let cfg = load_config(common)?;
            commands::cmd_ablate(&cfg, &out_dir(common, &cfg))
        }
        Command::Homogeneity(common) => {
            let cfg = load_config(common)?;
            commands::cmd_homogeneity(&cfg, &out_dir(common, &cfg))
        }
        Command::GenSynthetic { common, out_file } => {
            let cfg = load_config(common)?;
            commands::cmd_gen_synthetic(&cfg, out_file)
        }
        Command::ValidateData(common) => {
            let cfg = load_config(common)?;
            commands::cmd_validate_data(&cfg)
        }
    }
}

fn classify_error(err: &anyhow::Error) -> u8 {
    // Training divergence gets its own exit code.
    for cause in err.chain() {
        if let Some(TrainError::NonFinite { .. }) = cause.downcast_ref::<TrainError>() {
            return 3;
        }
    }
    // Everything surfaced before a run starts is a configuration problem.
    for cause in err.chain() {
        if cause.is::<toml::de::Error>()
            || cause.downcast_ref::<TrainError>().map_or(false, |e| matches!(e, TrainError::Config(_)))
        {
            return 2;
        }
    }
    if err.to_string().contains("config") {
        return 2;
    }
    1
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify_error(&err))
        }
    }
}
