//! Shared run machinery: dataset loading, paired corruption, training, and
//! report assembly.

use crate::config::{DatasetSource, ExperimentConfig};
use anyhow::{Context, Result};
use hetsim_core::graph::{FeatureRegime, HeteroGraph};
use hetsim_core::noise::{inject_error_links, NoiseConfig, NoiseReport};
use hetsim_core::training::{
    evaluate, infer_probs, train, Ablation, ModelParams, TrainContext, TrainReport,
};
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Loads the configured dataset and applies any feature-regime override.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<HeteroGraph<f64>> {
    let mut g = match cfg.dataset.source {
        DatasetSource::Synthetic => {
            let spec = cfg.dataset.synthetic.as_ref().expect("validated");
            hetsim_core::synthetic::generate(spec)
        }
        DatasetSource::Hgb => {
            let path = cfg.dataset.path.as_ref().expect("validated");
            hetsim_core::hgb::load_hgb(path).with_context(|| format!("loading HGB data from {path}"))?
        }
        DatasetSource::Manifest => {
            let path = cfg.dataset.path.as_ref().expect("validated");
            hetsim_core::manifest::load_manifest(path)
                .with_context(|| format!("loading manifest {path}"))?
        }
    };
    if let Some(r) = cfg.dataset.regime {
        g.apply_regime(FeatureRegime::from_u8(r).expect("validated"));
    }
    Ok(g)
}

/// Corruption for one run seed; shared verbatim across paired arms.
pub fn corrupt(
    clean: &HeteroGraph<f64>,
    cfg: &ExperimentConfig,
    ratio: f64,
    run_seed: u64,
) -> Result<(HeteroGraph<f64>, NoiseReport)> {
    let mut g = clean.clone();
    g.resplit_train_val(cfg.train.train_ratio, run_seed);
    let (noised, report) = inject_error_links(
        &g,
        &NoiseConfig { ratio, seed: cfg.run.noise_seed.wrapping_add(run_seed) },
    )?;
    Ok((noised, report))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSummary {
    pub ratio: f64,
    pub requested: usize,
    pub rewired: usize,
    pub shortfall: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub ablation: Ablation,
    pub noise: NoiseSummary,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub val_macro_f1: f64,
    pub test_macro_f1: f64,
    pub test_micro_f1: f64,
    pub wall_time_s: f64,
    pub history: Vec<hetsim_core::training::EpochRecord>,
}

/// One full train/evaluate cycle for (ratio, ablation, run seed).
pub fn execute_run(
    clean: &HeteroGraph<f64>,
    cfg: &ExperimentConfig,
    ratio: f64,
    ablation: Ablation,
    run_seed: u64,
) -> Result<RunResult> {
    let start = Instant::now();
    let (noised, noise_report) = corrupt(clean, cfg, ratio, run_seed)?;
    let kind = cfg.synthesizer_kind(clean);
    let mut model = ModelParams::init(
        &noised,
        cfg.synthesizer.feature_size,
        kind,
        cfg.synthesizer.k,
        cfg.encoder_config(),
        cfg.run.init_seed.wrapping_add(run_seed),
    )?;
    let train_cfg = cfg.to_train_config(ablation, run_seed);
    let report: TrainReport = train(&noised, &train_cfg, &mut model)?;

    let ctx = TrainContext::new(&noised, &train_cfg, kind)?;
    let probs = infer_probs(&ctx, &model)?;
    let test = evaluate(&probs, &noised.labels, &noised.splits.test, "test")?;

    Ok(RunResult {
        seed: run_seed,
        ablation,
        noise: NoiseSummary {
            ratio,
            requested: noise_report.requested,
            rewired: noise_report.rewired.len(),
            shortfall: noise_report.shortfall,
        },
        best_epoch: report.best_epoch,
        epochs_run: report.epochs_run,
        val_macro_f1: report.best_val_macro_f1,
        test_macro_f1: test.macro_f1,
        test_micro_f1: test.micro_f1,
        wall_time_s: start.elapsed().as_secs_f64(),
        history: report.history,
    })
}

/// Mean and sample standard deviation; std absent below two samples.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: Option<f64>,
}

pub fn aggregate(values: &[f64]) -> Aggregate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() >= 2 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Some(var.sqrt())
    } else {
        None
    };
    Aggregate { mean, std }
}

pub fn format_aggregate(a: &Aggregate) -> String {
    match a.std {
        Some(std) => format!("{:.4} +/- {:.4}", a.mean, std),
        None => format!("{:.4}", a.mean),
    }
}
