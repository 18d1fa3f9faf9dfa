//! Declarative experiment configuration (TOML).
//!
//! A run is reproducible from its config plus the three named seed bases:
//! noise (corruption), mask (augmentation), and init (parameters). Per run
//! seed `r`, each base is offset by `r`, so paired arms share corruption
//! while sweeping initialization.

use anyhow::{bail, Context, Result};
use hetsim_core::encoder::{AugmentConfig, EncoderConfig};
use hetsim_core::graph::{FeatureRegime, HeteroGraph, MetapathSpec};
use hetsim_core::synthesizer::{KnnSelection, SynthesizerKind};
use hetsim_core::synthetic::SyntheticConfig;
use hetsim_core::training::{Ablation, ContrastiveMode, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic,
    Hgb,
    Manifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// HGB directory or manifest file, depending on `source`.
    pub path: Option<String>,
    /// Optional feature-regime override (0, 1, or 2).
    pub regime: Option<u8>,
    pub synthetic: Option<SyntheticConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSection {
    pub ratio: f64,
}

fn default_feature_size() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesizerSection {
    /// Defaults to the regime-appropriate choice when absent.
    pub kind: Option<SynthesizerKind>,
    pub k: usize,
    #[serde(default = "default_feature_size")]
    pub feature_size: usize,
    /// When > 0, neighbor selection runs batched at this batch size.
    #[serde(default)]
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSection {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub p_noised: f64,
    pub p_synth: f64,
    #[serde(default = "default_true")]
    pub residual: bool,
    #[serde(default = "default_true")]
    pub attention_residual: bool,
    #[serde(default = "default_slope")]
    pub slope: f64,
}

fn default_true() -> bool {
    true
}

fn default_slope() -> f64 {
    0.01
}

fn default_train_ratio() -> f64 {
    0.8
}

fn default_contrastive() -> ContrastiveMode {
    ContrastiveMode::RowWise
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub patience: usize,
    pub gamma: f64,
    /// Metapaths as edge-type chains.
    pub metapaths: Vec<Vec<usize>>,
    #[serde(default = "default_ablation")]
    pub ablation: Ablation,
    #[serde(default = "default_contrastive")]
    pub contrastive: ContrastiveMode,
    /// Train fraction of the labeled pool (rest is validation).
    #[serde(default = "default_train_ratio")]
    pub train_ratio: f64,
}

fn default_ablation() -> Ablation {
    Ablation::Full
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub noise_seed: u64,
    #[serde(default)]
    pub mask_seed: u64,
    #[serde(default)]
    pub init_seed: u64,
    pub out_dir: Option<String>,
    /// Arms crossed with ratios by the sweep command.
    #[serde(default)]
    pub sweep_ablations: Vec<Ablation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub noise: NoiseSection,
    pub synthesizer: SynthesizerSection,
    pub encoder: EncoderSection,
    pub train: TrainSection,
    pub run: RunSection,
}

impl ExperimentConfig {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig = toml::from_str(&raw)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.noise.ratio) {
            bail!("noise.ratio {} outside [0, 1]", self.noise.ratio);
        }
        if self.run.seeds.is_empty() {
            bail!("run.seeds must list at least one seed");
        }
        if self.synthesizer.k == 0 {
            bail!("synthesizer.k must be at least 1");
        }
        if self.synthesizer.batch_size > 0 && self.synthesizer.batch_size < self.synthesizer.k + 1 {
            bail!(
                "synthesizer.batch_size {} must be at least k + 1 = {}",
                self.synthesizer.batch_size,
                self.synthesizer.k + 1
            );
        }
        if !(0.0..1.0).contains(&self.train.train_ratio) && self.train.train_ratio != 0.0 {
            bail!("train.train_ratio {} outside (0, 1)", self.train.train_ratio);
        }
        match self.dataset.source {
            DatasetSource::Synthetic => {
                if self.dataset.synthetic.is_none() {
                    bail!("dataset.synthetic section required for source = \"synthetic\"");
                }
            }
            DatasetSource::Hgb | DatasetSource::Manifest => {
                if self.dataset.path.is_none() {
                    bail!("dataset.path required for source = \"hgb\" or \"manifest\"");
                }
            }
        }
        if let Some(r) = self.dataset.regime {
            if FeatureRegime::from_u8(r).is_none() {
                bail!("dataset.regime {r} must be 0, 1, or 2");
            }
        }
        self.to_train_config(self.train.ablation, 0)
            .validate()
            .map_err(|e| anyhow::anyhow!("train section: {e}"))?;
        Ok(())
    }

    /// Effective synthesizer kind, defaulting by the graph's feature regime.
    pub fn synthesizer_kind(&self, g: &HeteroGraph<f64>) -> SynthesizerKind {
        self.synthesizer.kind.unwrap_or_else(|| SynthesizerKind::for_regime(g.feature_regime))
    }

    pub fn selection(&self, run_seed: u64) -> KnnSelection {
        if self.synthesizer.batch_size > 0 {
            KnnSelection::Batched {
                batch_size: self.synthesizer.batch_size,
                seed: self.run.mask_seed.wrapping_add(run_seed).wrapping_mul(31).wrapping_add(17),
            }
        } else {
            KnnSelection::Exact
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            layers: self.encoder.layers,
            heads: self.encoder.heads,
            hidden: self.encoder.hidden,
            residual: self.encoder.residual,
            attention_residual: self.encoder.attention_residual,
            slope: self.encoder.slope,
        }
    }

    pub fn to_train_config(&self, ablation: Ablation, run_seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            weight_decay: self.train.weight_decay,
            epochs: self.train.epochs,
            patience: self.train.patience,
            gamma: self.train.gamma,
            metapaths: self.train.metapaths.iter().cloned().map(MetapathSpec::new).collect(),
            ablation,
            contrastive: self.train.contrastive,
            augment: AugmentConfig {
                p_noised: self.encoder.p_noised,
                p_synth: self.encoder.p_synth,
                seed: self.run.mask_seed.wrapping_add(run_seed),
            },
            selection: self.selection(run_seed),
        }
    }
}
