//! Classification heads, losses, the joint training loop, and evaluation.
//!
//! One epoch (full model): re-synthesize the similarity graph, resample both
//! edge masks, run the shared encoder over the noised and synthesized views,
//! compute the two classification losses plus the metapath/target contrastive
//! loss, and take one optimizer step. Early stopping tracks validation
//! Macro-F1 on the noised view with unmasked graphs, matching test-time
//! inference; the best epoch's parameters are restored at the end.

use crate::encoder::{
    forward, AugmentConfig, EdgeSet, EncoderError, EncoderParams, GraphView,
    mask_edges, with_self_loops,
};
use crate::graph::{GraphError, HeteroGraph, Labels, MetapathSpec};
use crate::metrics::{self, Metrics};
use crate::optim::{Adam, AdamConfig, OptimError};
use crate::scalar::Scalar;
use crate::synthesizer::{
    gcn_propagation_matrix, project_nodes, synthesize, FeatureProjection, GraphSynthesizer,
    KnnSelection, SynthError, SynthesizerKind, NORM_EPS,
};
use crate::tape::{NodeId, Tape, TapeError};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand::{self, Rng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("loss component {component} is non-finite at epoch {epoch}")]
    NonFinite { component: &'static str, epoch: usize },
    #[error("{split} split contains unlabeled target node {index}")]
    UnlabeledInSplit { split: &'static str, index: usize },
    #[error("{split} split is empty")]
    EmptySplit { split: &'static str },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Which parts of the model are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Both views, all three losses.
    Full,
    /// Drops the synthesized view entirely (plain masked attention network).
    NoSynthesizer,
    /// Keeps both views but drops the contrastive loss.
    NoMetaTarget,
}

/// Reduction used by the contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveMode {
    /// Mean over target rows of `(1 - cos(row_a, row_b))^gamma` (default).
    RowWise,
    /// Single whole-matrix cosine.
    Frobenius,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub patience: usize,
    /// Sharpening exponent of the contrastive loss, >= 1.
    pub gamma: f64,
    pub metapaths: Vec<MetapathSpec>,
    pub ablation: Ablation,
    pub contrastive: ContrastiveMode,
    pub augment: AugmentConfig,
    pub selection: KnnSelection,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.gamma < 1.0 {
            return Err(TrainError::Config(format!("gamma {} must be >= 1", self.gamma)));
        }
        if self.patience > self.epochs {
            return Err(TrainError::Config(format!(
                "patience {} exceeds epochs {}",
                self.patience, self.epochs
            )));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be positive".into()));
        }
        self.augment.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        if self.ablation == Ablation::Full && self.metapaths.is_empty() {
            return Err(TrainError::Config("full model needs at least one metapath".into()));
        }
        Ok(())
    }
}

/// Shared linear classification head; softmax for single-label data,
/// per-class sigmoid for multi-label data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

pub struct ClassifierHeadIds {
    pub weight: NodeId,
    pub bias: NodeId,
}

impl<S: Scalar> ClassifierHead<S> {
    pub fn init<R: Rng>(input_dim: usize, classes: usize, rng: &mut R) -> Self {
        Self { weight: Tensor::glorot(input_dim, classes, rng), bias: Tensor::zeros(1, classes) }
    }

    pub fn register(&self, tape: &mut Tape<S>) -> ClassifierHeadIds {
        ClassifierHeadIds { weight: tape.param(&self.weight), bias: tape.param(&self.bias) }
    }
}

/// All learnable state of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S> {
    pub projection: FeatureProjection<S>,
    pub synthesizer: GraphSynthesizer<S>,
    pub encoder: EncoderParams<S>,
    pub head: ClassifierHead<S>,
}

pub struct ModelIds {
    pub projection: crate::synthesizer::FeatureProjectionIds,
    pub synthesizer: Option<crate::synthesizer::GraphSynthesizerIds>,
    pub encoder: crate::encoder::EncoderIds,
    pub head: ClassifierHeadIds,
}

impl<S: Scalar> ModelParams<S> {
    /// Glorot initialization of every component, deterministic under `seed`.
    pub fn init(
        g: &HeteroGraph<S>,
        unified_dim: usize,
        kind: SynthesizerKind,
        k: usize,
        encoder_config: crate::encoder::EncoderConfig,
        seed: u64,
    ) -> Result<Self, TrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = FeatureProjection::init(g, unified_dim, &mut rng);
        let synthesizer = GraphSynthesizer::init(kind, k, unified_dim, &mut rng);
        let encoder = EncoderParams::init(unified_dim, encoder_config, &mut rng)
            .map_err(|e| TrainError::Config(e.to_string()))?;
        let head = ClassifierHead::init(encoder.output_dim(), g.labels.classes(), &mut rng);
        Ok(Self { projection, synthesizer, encoder, head })
    }

    /// Parameters that train under the given ablation, in registration order.
    pub fn active_named_params(&self, ablation: Ablation) -> Vec<(String, &Tensor<S>)> {
        let mut out = self.projection.named_params();
        if ablation != Ablation::NoSynthesizer {
            out.extend(self.synthesizer.named_params());
        }
        out.extend(self.encoder.named_params());
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn active_named_params_mut(&mut self, ablation: Ablation) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = self.projection.named_params_mut();
        if ablation != Ablation::NoSynthesizer {
            out.extend(self.synthesizer.named_params_mut());
        }
        out.extend(self.encoder.named_params_mut());
        out.push(("head.weight".into(), &mut self.head.weight));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }

    /// Registers the active parameters; the flat id list is aligned with
    /// [`ModelParams::active_named_params`].
    pub fn register(&self, tape: &mut Tape<S>, ablation: Ablation) -> (ModelIds, Vec<NodeId>) {
        let projection = self.projection.register(tape);
        let synthesizer = (ablation != Ablation::NoSynthesizer)
            .then(|| self.synthesizer.register(tape));
        let encoder = self.encoder.register(tape);
        let head = self.head.register(tape);

        let mut flat = Vec::new();
        for &(w, b) in &projection.per_type {
            flat.push(w);
            flat.push(b);
        }
        if let Some(s) = &synthesizer {
            flat.push(s.weight);
            flat.push(s.bias);
        }
        for layer in &encoder.layers {
            for h in &layer.heads {
                flat.push(h.weight);
                flat.push(h.attn_self);
                flat.push(h.attn_neighbor);
                flat.push(h.agg_weight);
            }
            if let Some(s) = layer.shortcut {
                flat.push(s);
            }
        }
        flat.push(head.weight);
        flat.push(head.bias);

        (ModelIds { projection, synthesizer, encoder, head }, flat)
    }
}

/// Per-view class probabilities over target nodes.
pub struct Predictions {
    pub noised: NodeId,
    pub synth: Option<NodeId>,
}

/// Numerically shifted row softmax (the shift is a detached constant, which
/// leaves both values and gradients unchanged).
pub fn row_softmax<S: Scalar>(tape: &mut Tape<S>, logits: NodeId) -> Result<NodeId, TapeError> {
    let v = tape.value(logits);
    let rows = v.rows();
    let mut maxes = Tensor::zeros(rows, 1);
    for r in 0..rows {
        maxes.values_mut()[r] = v.row(r).iter().copied().fold(S::neg_infinity(), S::max);
    }
    let shift = tape.constant(maxes);
    let shifted = tape.sub(logits, shift)?;
    let exp = tape.exp(shifted);
    let sums = tape.row_sums(exp);
    tape.div(exp, sums)
}

/// Shared head over both views: embeddings are restricted to target nodes
/// before the linear map; softmax or sigmoid by label mode.
pub fn predict_heads<S: Scalar>(
    tape: &mut Tape<S>,
    h_noised: NodeId,
    h_synth: Option<NodeId>,
    head: &ClassifierHeadIds,
    target_nodes: &[usize],
    multi_label: bool,
) -> Result<Predictions, TrainError> {
    let apply = |tape: &mut Tape<S>, h: NodeId| -> Result<NodeId, TrainError> {
        let targets = tape.gather_rows(h, target_nodes)?;
        let wx = tape.matmul(targets, head.weight)?;
        let logits = tape.add(wx, head.bias)?;
        Ok(if multi_label { tape.sigmoid(logits) } else { row_softmax(tape, logits)? })
    };
    let noised = apply(tape, h_noised)?;
    let synth = h_synth.map(|h| apply(tape, h)).transpose()?;
    Ok(Predictions { noised, synth })
}

/// Mean cross-entropy (single-label) or mean binary cross-entropy over
/// classes (multi-label) on the given split. Probabilities are clamped away
/// from 0 and 1 before the log.
pub fn classification_loss<S: Scalar>(
    tape: &mut Tape<S>,
    probs: NodeId,
    labels: &Labels,
    split: &[usize],
    split_name: &'static str,
) -> Result<NodeId, TrainError> {
    if split.is_empty() {
        return Err(TrainError::EmptySplit { split: split_name });
    }
    let lo = S::from_f64_lossy(PROB_CLAMP);
    let hi = S::from_f64_lossy(1.0 - PROB_CLAMP);
    match labels {
        Labels::Single { of, .. } => {
            let positions: Vec<(usize, usize)> = split
                .iter()
                .map(|&i| {
                    of[i].map(|c| (i, c)).ok_or(TrainError::UnlabeledInSplit { split: split_name, index: i })
                })
                .collect::<Result<_, _>>()?;
            let picked = tape.gather_entries(probs, &positions)?;
            let low = tape.clamp_min(picked, lo);
            let clamped = tape.clamp_max(low, hi);
            let logs = tape.ln(clamped)?;
            let mean = tape.mean_all(logs);
            Ok(tape.scale(mean, -S::one()))
        }
        Labels::Multi { classes, of } => {
            let rows = tape.gather_rows(probs, split)?;
            let mut truth = Tensor::zeros(split.len(), *classes);
            for (r, &i) in split.iter().enumerate() {
                let hot = of[i]
                    .as_ref()
                    .ok_or(TrainError::UnlabeledInSplit { split: split_name, index: i })?;
                for (c, &on) in hot.iter().enumerate() {
                    if on {
                        truth.set(r, c, S::one());
                    }
                }
            }
            let ones = tape.constant(Tensor::ones(split.len(), *classes));
            let y = tape.constant(truth.clone());
            let y_inv = tape.constant(truth.map(|v| S::one() - v));

            let p_low = tape.clamp_min(rows, lo);
            let p = tape.clamp_max(p_low, hi);
            let log_p = tape.ln(p)?;
            let q_raw = tape.sub(ones, rows)?;
            let q_low = tape.clamp_min(q_raw, lo);
            let q = tape.clamp_max(q_low, hi);
            let log_q = tape.ln(q)?;

            let pos = tape.mul(y, log_p)?;
            let neg = tape.mul(y_inv, log_q)?;
            let sum = tape.add(pos, neg)?;
            let mean = tape.mean_all(sum);
            Ok(tape.scale(mean, -S::one()))
        }
    }
}

/// Scaled cosine error between the metapath graph (a constant) and the taped
/// target block of the synthesized graph.
///
/// Row-wise mode: mean over target rows of `(1 - cos)^gamma`, where rows that
/// are all-zero on both sides contribute 0 and rows zero on exactly one side
/// contribute 1 (the guarded cosine collapses to 0). Frobenius mode applies
/// the same formula once to the flattened matrices.
pub fn contrastive_loss<S: Scalar>(
    tape: &mut Tape<S>,
    a_phi: &Tensor<S>,
    a_hat_theta: NodeId,
    gamma: f64,
    mode: ContrastiveMode,
) -> Result<NodeId, TapeError> {
    let eps = S::from_f64_lossy(NORM_EPS);
    let gamma = S::from_f64_lossy(gamma);
    let n = a_phi.rows();
    let a_phi_id = tape.constant(a_phi.clone());
    let prod = tape.mul(a_hat_theta, a_phi_id)?;
    let sq = tape.mul(a_hat_theta, a_hat_theta)?;

    let finish = |tape: &mut Tape<S>, num: NodeId, norm_sq: NodeId, phi_norm: Tensor<S>, both_zero: Tensor<S>| -> Result<NodeId, TapeError> {
        let phi_id = tape.constant(phi_norm);
        let guarded = tape.clamp_min(norm_sq, eps * eps);
        let norm = tape.power(guarded, S::from_f64_lossy(0.5));
        let by_phi = tape.div(num, phi_id)?;
        let cos = tape.div(by_phi, norm)?;
        let shape = tape.value(cos).shape();
        let ones = tape.constant(Tensor::ones(shape.0, shape.1));
        let raw = tape.sub(ones, cos)?;
        let low = tape.clamp_min(raw, S::zero());
        let base = tape.clamp_max(low, S::from_f64_lossy(2.0));
        let powed = tape.power(base, gamma);
        let mask = tape.constant(both_zero);
        let masked = tape.mul(powed, mask)?;
        let total = tape.sum_all(masked);
        Ok(tape.scale(total, S::one() / S::from_usize(shape.0 * shape.1).unwrap()))
    };

    match mode {
        ContrastiveMode::RowWise => {
            let num = tape.row_sums(prod);
            let norm_sq = tape.row_sums(sq);
            let mut phi_norm = Tensor::zeros(n, 1);
            let mut mask = Tensor::ones(n, 1);
            let hat = tape.value(a_hat_theta).clone();
            for i in 0..n {
                let norm: S = a_phi.row(i).iter().map(|&v| v * v).sum::<S>().sqrt();
                phi_norm.values_mut()[i] = norm.max(eps);
                let phi_zero = a_phi.row(i).iter().all(|&v| v == S::zero());
                let hat_zero = hat.row(i).iter().all(|&v| v == S::zero());
                if phi_zero && hat_zero {
                    mask.values_mut()[i] = S::zero();
                }
            }
            finish(tape, num, norm_sq, phi_norm, mask)
        }
        ContrastiveMode::Frobenius => {
            let num = tape.sum_all(prod);
            let norm_sq = tape.sum_all(sq);
            let norm: S = a_phi.values().iter().map(|&v| v * v).sum::<S>().sqrt();
            let phi_norm = Tensor::scalar(norm.max(eps));
            let phi_zero = a_phi.values().iter().all(|&v| v == S::zero());
            let hat_zero = tape.value(a_hat_theta).values().iter().all(|&v| v == S::zero());
            let mask = Tensor::scalar(if phi_zero && hat_zero { S::zero() } else { S::one() });
            finish(tape, num, norm_sq, phi_norm, mask)
        }
    }
}

/// Unweighted loss sum with a finiteness check per component.
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    l_o: NodeId,
    l_s: Option<NodeId>,
    l_g: Option<NodeId>,
    epoch: usize,
) -> Result<NodeId, TrainError> {
    for (component, id) in [("classification (noised)", Some(l_o)), ("classification (synthesized)", l_s), ("contrastive", l_g)] {
        if let Some(id) = id {
            if !tape.item(id).is_finite() {
                return Err(TrainError::NonFinite { component, epoch });
            }
        }
    }
    let mut total = l_o;
    if let Some(l_s) = l_s {
        total = tape.add(total, l_s)?;
    }
    if let Some(l_g) = l_g {
        total = tape.add(total, l_g)?;
    }
    Ok(total)
}

/// Immutable per-run inputs derived from the corrupted graph.
pub struct TrainContext<'g, S> {
    pub graph: &'g HeteroGraph<S>,
    /// Symmetric binary structural adjacency of the corrupted graph.
    pub adjacency: Tensor<S>,
    /// GCN propagation matrix, present when the synthesizer needs it.
    pub propagation: Option<Tensor<S>>,
    /// Metapath graphs extracted from the corrupted structure (constants).
    pub metapath_graphs: Vec<Tensor<S>>,
    /// Unmasked weights and edges for validation/test inference.
    pub infer_weights: Tensor<S>,
    pub infer_edges: EdgeSet,
    pub target_nodes: Vec<usize>,
}

impl<'g, S: Scalar> TrainContext<'g, S> {
    pub fn new(
        graph: &'g HeteroGraph<S>,
        cfg: &TrainConfig,
        synthesizer_kind: SynthesizerKind,
    ) -> Result<Self, TrainError> {
        let adjacency = graph.build_full_adjacency(true);
        let propagation = (cfg.ablation != Ablation::NoSynthesizer
            && synthesizer_kind == SynthesizerKind::Gcn)
            .then(|| gcn_propagation_matrix(&adjacency));
        let metapath_graphs = if cfg.ablation == Ablation::Full {
            cfg.metapaths
                .iter()
                .map(|spec| crate::graph::metapath_graph(graph, spec))
                .collect::<Result<Vec<_>, _>>()?
        } else {
            Vec::new()
        };
        let infer_weights = with_self_loops(&adjacency);
        let infer_edges = EdgeSet::from_adjacency(&infer_weights);
        Ok(Self {
            graph,
            adjacency,
            propagation,
            metapath_graphs,
            infer_weights,
            infer_edges,
            target_nodes: graph.target_range().collect(),
        })
    }
}

/// Frozen stochastic choices of one epoch. Training samples these fresh per
/// epoch; gradient checks replay one plan to keep the loss differentiable at
/// the evaluation point.
pub struct EpochPlan<S> {
    /// Masked structural adjacency (binary).
    pub masked_noised: Tensor<S>,
    /// Full Bernoulli keep-mask for the synthesized view.
    pub synth_keep: Option<Tensor<S>>,
    /// Replayed top-k selection; `None` reselects from current similarities.
    pub topk_override: Option<Tensor<S>>,
}

impl<S: Scalar> EpochPlan<S> {
    pub fn sample(ctx: &TrainContext<'_, S>, cfg: &TrainConfig, epoch: usize) -> Self {
        let noised_seed = cfg.augment.seed.wrapping_add(2 * epoch as u64);
        let synth_seed = cfg.augment.seed.wrapping_add(2 * epoch as u64 + 1);
        let masked_noised = mask_edges(&ctx.adjacency, cfg.augment.p_noised, noised_seed);
        let synth_keep = (cfg.ablation != Ablation::NoSynthesizer).then(|| {
            let n = ctx.graph.n_nodes();
            if cfg.augment.p_synth == 0.0 {
                Tensor::ones(n, n)
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(synth_seed);
                let mut keep = Tensor::ones(n, n);
                for v in keep.values_mut() {
                    if rng.gen::<f64>() < cfg.augment.p_synth {
                        *v = S::zero();
                    }
                }
                keep
            }
        });
        Self { masked_noised, synth_keep, topk_override: None }
    }
}

/// Taped loss graph of one epoch.
pub struct EpochOutputs<S> {
    pub total: NodeId,
    pub l_o: NodeId,
    pub l_s: Option<NodeId>,
    pub l_g: Option<NodeId>,
    pub predictions: Predictions,
    /// Selection mask actually used by the synthesized view this epoch.
    pub topk_mask: Option<Tensor<S>>,
}

/// Builds the full loss of one epoch on `tape`. Exposed so gradient checks
/// can drive the exact training computation with a frozen [`EpochPlan`].
pub fn build_epoch_loss<S: Scalar>(
    tape: &mut Tape<S>,
    ctx: &TrainContext<'_, S>,
    cfg: &TrainConfig,
    model: &ModelParams<S>,
    ids: &ModelIds,
    plan: &EpochPlan<S>,
    epoch: usize,
) -> Result<EpochOutputs<S>, TrainError> {
    let g = ctx.graph;
    let slope = S::from_f64_lossy(model.encoder.config.slope);
    let multi = g.labels.is_multi();

    // Noised structural view.
    let noised_weights = with_self_loops(&plan.masked_noised);
    let noised_edges = EdgeSet::from_adjacency(&noised_weights);
    let noised_wid = tape.constant(noised_weights);

    // Synthesized view (unless ablated).
    let (z, synth_parts) = if cfg.ablation == Ablation::NoSynthesizer {
        (project_nodes(tape, g, &model.projection, &ids.projection)?, None)
    } else {
        let synth_ids = ids.synthesizer.as_ref().expect("synthesizer registered");
        let synthesized = synthesize(
            tape,
            g,
            &model.projection,
            &ids.projection,
            &model.synthesizer,
            synth_ids,
            ctx.propagation.as_ref(),
            slope,
            cfg.selection,
            plan.topk_override.as_ref(),
        )?;
        let keep = plan.synth_keep.as_ref().expect("synth keep mask");
        // Pattern of surviving synthesized edges: top-k kept AND not masked.
        let mut pattern = synthesized.mask.clone();
        for (p, k) in pattern.values_mut().iter_mut().zip(keep.values()) {
            *p = *p * *k;
        }
        let keep_id = tape.constant(keep.clone());
        let masked_synth = tape.mul(synthesized.a_theta, keep_id)?;
        let eye = tape.constant(Tensor::eye(g.n_nodes()));
        let synth_wid = tape.add(masked_synth, eye)?;
        let synth_edges = EdgeSet::from_adjacency(&pattern);
        (synthesized.z, Some((synthesized, synth_wid, synth_edges)))
    };

    let noised_view = GraphView { weight_matrix: noised_wid, edges: &noised_edges };
    let synth_view = synth_parts
        .as_ref()
        .map(|(_, wid, edges)| GraphView { weight_matrix: *wid, edges });

    let (h_noised, h_synth) =
        forward(tape, z, &noised_view, synth_view.as_ref(), &model.encoder, &ids.encoder)?;

    let predictions =
        predict_heads(tape, h_noised, h_synth, &ids.head, &ctx.target_nodes, multi)?;

    let l_o = classification_loss(
        tape,
        predictions.noised,
        &g.labels,
        &g.splits.train,
        "train",
    )?;
    let l_s = predictions
        .synth
        .map(|p| classification_loss(tape, p, &g.labels, &g.splits.train, "train"))
        .transpose()?;

    let l_g = if cfg.ablation == Ablation::Full {
        let (synthesized, _, _) = synth_parts.as_ref().expect("full model has synthesizer");
        let range = g.target_range();
        let a_hat = tape.block(synthesized.a_theta, range.clone(), range)?;
        let mut acc: Option<NodeId> = None;
        for a_phi in &ctx.metapath_graphs {
            let term = contrastive_loss(tape, a_phi, a_hat, cfg.gamma, cfg.contrastive)?;
            acc = Some(match acc {
                None => term,
                Some(prev) => tape.add(prev, term)?,
            });
        }
        acc.map(|sum| tape.scale(sum, S::one() / S::from_usize(ctx.metapath_graphs.len()).unwrap()))
    } else {
        None
    };

    let total = total_loss(tape, l_o, l_s, l_g, epoch)?;
    let topk_mask = synth_parts.as_ref().map(|(s, _, _)| s.mask.clone());
    Ok(EpochOutputs { total, l_o, l_s, l_g, predictions, topk_mask })
}

/// Unmasked noised-view inference: class probabilities over target nodes.
pub fn infer_probs<S: Scalar>(
    ctx: &TrainContext<'_, S>,
    model: &ModelParams<S>,
) -> Result<Tensor<S>, TrainError> {
    let mut tape = Tape::new();
    let proj_ids = model.projection.register(&mut tape);
    let encoder_ids = model.encoder.register(&mut tape);
    let head_ids = model.head.register(&mut tape);
    let z = project_nodes(&mut tape, ctx.graph, &model.projection, &proj_ids)?;
    let wid = tape.constant(ctx.infer_weights.clone());
    let view = GraphView { weight_matrix: wid, edges: &ctx.infer_edges };
    let (h, _) = forward(&mut tape, z, &view, None, &model.encoder, &encoder_ids)?;
    let predictions = predict_heads(
        &mut tape,
        h,
        None,
        &head_ids,
        &ctx.target_nodes,
        ctx.graph.labels.is_multi(),
    )?;
    Ok(tape.value(predictions.noised).clone())
}

/// Metrics of target-node probabilities against labels on a split.
pub fn evaluate<S: Scalar>(
    probs: &Tensor<S>,
    labels: &Labels,
    split: &[usize],
    split_name: &'static str,
) -> Result<Metrics, TrainError> {
    if split.is_empty() {
        return Err(TrainError::EmptySplit { split: split_name });
    }
    match labels {
        Labels::Single { classes, of } => {
            let mut predicted = Vec::with_capacity(split.len());
            let mut truth = Vec::with_capacity(split.len());
            for &i in split {
                let t = of[i].ok_or(TrainError::UnlabeledInSplit { split: split_name, index: i })?;
                let row = probs.row(i);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                predicted.push(best);
                truth.push(t);
            }
            Ok(metrics::single_label(&predicted, &truth, *classes))
        }
        Labels::Multi { classes, of } => {
            let half = S::from_f64_lossy(0.5);
            let mut predicted = Vec::with_capacity(split.len());
            let mut truth = Vec::with_capacity(split.len());
            for &i in split {
                let t = of[i]
                    .as_ref()
                    .ok_or(TrainError::UnlabeledInSplit { split: split_name, index: i })?;
                predicted.push(probs.row(i).iter().map(|&v| v >= half).collect::<Vec<bool>>());
                truth.push(t.clone());
            }
            Ok(metrics::multi_label(&predicted, &truth, *classes))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_o: f64,
    pub l_s: Option<f64>,
    pub l_g: Option<f64>,
    pub total: f64,
    pub val_macro_f1: f64,
    pub val_micro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_macro_f1: f64,
    pub epochs_run: usize,
}

/// Joint training loop. The graph must already be corrupted and split; the
/// model is updated in place and left at the best validation epoch.
pub fn train<S: Scalar>(
    g: &HeteroGraph<S>,
    cfg: &TrainConfig,
    model: &mut ModelParams<S>,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    let ctx = TrainContext::new(g, cfg, model.synthesizer.kind)?;
    if g.splits.val.is_empty() {
        return Err(TrainError::EmptySplit { split: "val" });
    }

    let shapes: Vec<(usize, usize)> = model
        .active_named_params(cfg.ablation)
        .iter()
        .map(|(_, t)| t.shape())
        .collect();
    let mut adam = Adam::new(AdamConfig::new(cfg.lr, cfg.weight_decay), &shapes);

    let mut history = Vec::new();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_snapshot: Option<Vec<Tensor<S>>> = None;
    let mut stale = 0usize;

    for epoch in 0..cfg.epochs {
        let plan = EpochPlan::sample(&ctx, cfg, epoch);
        let mut tape = Tape::new();
        let (ids, flat_ids) = model.register(&mut tape, cfg.ablation);
        let outputs = build_epoch_loss(&mut tape, &ctx, cfg, model, &ids, &plan, epoch)?;

        let record_losses = (
            tape.item(outputs.l_o).to_f64_lossy(),
            outputs.l_s.map(|id| tape.item(id).to_f64_lossy()),
            outputs.l_g.map(|id| tape.item(id).to_f64_lossy()),
            tape.item(outputs.total).to_f64_lossy(),
        );

        let grads = tape.backward(outputs.total)?;
        {
            let mut params = model.active_named_params_mut(cfg.ablation);
            let mut param_refs: Vec<&mut Tensor<S>> =
                params.iter_mut().map(|(_, t)| &mut **t).collect();
            let grad_refs: Vec<Option<&Tensor<S>>> =
                flat_ids.iter().map(|&id| grads.get(id)).collect();
            adam.step(&mut param_refs, &grad_refs)?;
        }

        let probs = infer_probs(&ctx, model)?;
        let val = evaluate(&probs, &g.labels, &g.splits.val, "val")?;
        history.push(EpochRecord {
            epoch,
            l_o: record_losses.0,
            l_s: record_losses.1,
            l_g: record_losses.2,
            total: record_losses.3,
            val_macro_f1: val.macro_f1,
            val_micro_f1: val.micro_f1,
        });

        // Strict improvement; ties keep the earlier epoch.
        if val.macro_f1 > best_val {
            best_val = val.macro_f1;
            best_epoch = epoch;
            best_snapshot = Some(
                model
                    .active_named_params(cfg.ablation)
                    .iter()
                    .map(|(_, t)| (*t).clone())
                    .collect(),
            );
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience && cfg.patience > 0 {
                break;
            }
        }
    }

    if let Some(snapshot) = best_snapshot {
        for ((_, param), saved) in
            model.active_named_params_mut(cfg.ablation).into_iter().zip(snapshot)
        {
            *param = saved;
        }
    }
    let epochs_run = history.len();
    Ok(TrainReport { history, best_epoch, best_val_macro_f1: best_val, epochs_run })
}

// ── checkpoints ─────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    version: u32,
    params: Vec<CheckpointEntry>,
}

const CHECKPOINT_VERSION: u32 = 1;

/// Writes every parameter (all ablation arms) as a flat named table.
pub fn save_checkpoint<S: Scalar>(
    model: &ModelParams<S>,
    path: impl AsRef<Path>,
) -> Result<(), TrainError> {
    let path = path.as_ref();
    let params = model
        .active_named_params(Ablation::Full)
        .into_iter()
        .map(|(name, t)| CheckpointEntry {
            name,
            rows: t.rows(),
            cols: t.cols(),
            values: t.to_f64_vec(),
        })
        .collect();
    let doc = CheckpointDoc { version: CHECKPOINT_VERSION, params };
    let json = serde_json::to_string(&doc).expect("checkpoint serialization");
    std::fs::write(path, json)
        .map_err(|source| TrainError::Io { path: path.display().to_string(), source })
}

/// Loads a checkpoint into a structurally matching model.
pub fn load_checkpoint<S: Scalar>(
    model: &mut ModelParams<S>,
    path: impl AsRef<Path>,
) -> Result<(), TrainError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let raw = std::fs::read_to_string(path)
        .map_err(|source| TrainError::Io { path: display.clone(), source })?;
    let doc: CheckpointDoc = serde_json::from_str(&raw)
        .map_err(|e| TrainError::Checkpoint { path: display.clone(), message: e.to_string() })?;
    if doc.version != CHECKPOINT_VERSION {
        return Err(TrainError::Checkpoint {
            path: display,
            message: format!("unsupported version {}", doc.version),
        });
    }
    let mut params = model.active_named_params_mut(Ablation::Full);
    if params.len() != doc.params.len() {
        return Err(TrainError::Checkpoint {
            path: display,
            message: format!("expected {} parameters, found {}", params.len(), doc.params.len()),
        });
    }
    for ((name, param), entry) in params.iter_mut().zip(doc.params) {
        if *name != entry.name || param.shape() != (entry.rows, entry.cols) {
            return Err(TrainError::Checkpoint {
                path: display,
                message: format!("parameter mismatch at {name} vs {}", entry.name),
            });
        }
        **param = Tensor::from_f64_slice(entry.rows, entry.cols, &entry.values)
            .map_err(|e| TrainError::Checkpoint { path: display.clone(), message: e.to_string() })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::MetapathSpec;
    use crate::synthetic::{generate, metapath_via_aux, SyntheticConfig};

    fn fixture_graph(seed: u64) -> HeteroGraph<f64> {
        generate(&SyntheticConfig {
            n_target: 24,
            n_aux: vec![12],
            classes: 3,
            intra_class_link_prob: 0.5,
            inter_class_link_prob: 0.05,
            feature_dim: 6,
            feature_noise: 0.4,
            seed,
            train_frac: 0.5,
            val_frac: 0.2,
        })
    }

    fn fixture_config(ablation: Ablation, epochs: usize, patience: usize) -> TrainConfig {
        TrainConfig {
            lr: 5e-3,
            weight_decay: 1e-5,
            epochs,
            patience,
            gamma: 2.0,
            metapaths: vec![metapath_via_aux(0)],
            ablation,
            contrastive: ContrastiveMode::RowWise,
            augment: AugmentConfig { p_noised: 0.2, p_synth: 0.2, seed: 11 },
            selection: KnnSelection::Exact,
        }
    }

    fn fixture_model(g: &HeteroGraph<f64>, seed: u64) -> ModelParams<f64> {
        ModelParams::init(
            g,
            8,
            SynthesizerKind::Mlp,
            4,
            crate::encoder::EncoderConfig {
                layers: 2,
                heads: 2,
                hidden: 8,
                ..crate::encoder::EncoderConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn zero_head_weights_give_uniform_and_half() {
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(Tensor::from_values(3, 2, &[0.4, -0.2, 1.0, 0.3, -0.6, 0.8]));
        let head = ClassifierHead { weight: Tensor::zeros(2, 4), bias: Tensor::zeros(1, 4) };
        let ids = head.register(&mut tape);
        let single = predict_heads(&mut tape, h, None, &ids, &[0, 1, 2], false).unwrap();
        for &v in tape.value(single.noised).values() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let multi = predict_heads(&mut tape, h, None, &ids, &[0, 1, 2], true).unwrap();
        for &v in tape.value(multi.noised).values() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn head_probabilities_match_softmax_oracle() {
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(Tensor::from_values(2, 2, &[0.5, -1.0, 2.0, 0.25]));
        let head = ClassifierHead { weight: Tensor::eye(2), bias: Tensor::zeros(1, 2) };
        let ids = head.register(&mut tape);
        let preds = predict_heads(&mut tape, h, None, &ids, &[0, 1], false).unwrap();
        let probs = tape.value(preds.noised);
        for r in 0..2 {
            let logits = [h_val(&tape, h, r, 0), h_val(&tape, h, r, 1)];
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for c in 0..2 {
                assert!((probs.get(r, c) - logits[c].exp() / z).abs() < 1e-12);
            }
            let row_sum: f64 = probs.row(r).iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-12);
        }
    }

    fn h_val(tape: &Tape<f64>, id: NodeId, r: usize, c: usize) -> f64 {
        tape.value(id).get(r, c)
    }

    #[test]
    fn uniform_prediction_loss_is_ln_c() {
        let mut tape = Tape::<f64>::new();
        let probs = tape.constant(Tensor::filled(5, 4, 0.25));
        let labels = Labels::Single { classes: 4, of: vec![Some(0), Some(1), Some(2), Some(3), Some(0)] };
        let loss = classification_loss(&mut tape, probs, &labels, &[0, 1, 2, 3, 4], "train").unwrap();
        assert!((tape.item(loss) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_loss_is_near_zero() {
        let mut tape = Tape::<f64>::new();
        let mut p = Tensor::<f64>::zeros(3, 3);
        for i in 0..3 {
            p.set(i, i, 1.0);
        }
        let probs = tape.constant(p);
        let labels = Labels::Single { classes: 3, of: vec![Some(0), Some(1), Some(2)] };
        let loss = classification_loss(&mut tape, probs, &labels, &[0, 1, 2], "train").unwrap();
        assert!(tape.item(loss).abs() < 1e-10);
    }

    #[test]
    fn mixed_fixture_matches_per_node_oracle() {
        let mut tape = Tape::<f64>::new();
        let p = Tensor::from_values(3, 2, &[0.9, 0.1, 0.3, 0.7, 0.6, 0.4]);
        let probs = tape.constant(p.clone());
        let labels = Labels::Single { classes: 2, of: vec![Some(0), Some(1), Some(1)] };
        let loss = classification_loss(&mut tape, probs, &labels, &[0, 1, 2], "train").unwrap();
        let expect = -(p.get(0, 0).ln() + p.get(1, 1).ln() + p.get(2, 1).ln()) / 3.0;
        assert!((tape.item(loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn multi_label_loss_matches_bce_oracle() {
        let mut tape = Tape::<f64>::new();
        let p = Tensor::from_values(2, 2, &[0.8, 0.4, 0.1, 0.9]);
        let probs = tape.constant(p.clone());
        let labels = Labels::Multi {
            classes: 2,
            of: vec![Some(vec![true, false]), Some(vec![false, true])],
        };
        let loss = classification_loss(&mut tape, probs, &labels, &[0, 1], "train").unwrap();
        let terms = [
            (0.8f64).ln(),
            (1.0 - 0.4f64).ln(),
            (1.0 - 0.1f64).ln(),
            (0.9f64).ln(),
        ];
        let expect = -terms.iter().sum::<f64>() / 4.0;
        assert!((tape.item(loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn contrastive_identical_and_orthogonal_rows() {
        let mut tape = Tape::<f64>::new();
        let a = Tensor::from_values(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        let hat = tape.constant(a.clone());
        let loss = contrastive_loss(&mut tape, &a, hat, 2.0, ContrastiveMode::RowWise).unwrap();
        assert!(tape.item(loss).abs() < 1e-12);

        // Row-wise orthogonal: value 1 for any gamma.
        let phi = Tensor::from_values(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let hat2 = tape.constant(Tensor::from_values(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        for gamma in [1.0, 2.0, 3.5] {
            let l = contrastive_loss(&mut tape, &phi, hat2, gamma, ContrastiveMode::RowWise).unwrap();
            assert!((tape.item(l) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn contrastive_half_cosine_squares_to_quarter() {
        // Rows with cosine exactly 0.5 and gamma 2 contribute 0.25.
        let mut tape = Tape::<f64>::new();
        let phi = Tensor::from_values(1, 4, &[1.0, 1.0, 0.0, 0.0]);
        let hat = tape.constant(Tensor::from_values(1, 4, &[1.0, 0.0, 1.0, 0.0]));
        let l = contrastive_loss(&mut tape, &phi, hat, 2.0, ContrastiveMode::RowWise).unwrap();
        assert!((tape.item(l) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn contrastive_zero_rows_follow_stated_policy() {
        let mut tape = Tape::<f64>::new();
        // Row 0: both zero -> 0. Row 1: zero in exactly one -> 1.
        let phi = Tensor::from_values(2, 2, &[0.0, 0.0, 1.0, 0.0]);
        let hat = tape.constant(Tensor::<f64>::zeros(2, 2));
        let l = contrastive_loss(&mut tape, &phi, hat, 2.0, ContrastiveMode::RowWise).unwrap();
        assert!((tape.item(l) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn total_loss_sums_and_respects_ablation() {
        let mut tape = Tape::<f64>::new();
        let l_o = tape.constant(Tensor::scalar(1.0));
        let l_s = tape.constant(Tensor::scalar(2.0));
        let l_g = tape.constant(Tensor::scalar(0.5));
        let total = total_loss(&mut tape, l_o, Some(l_s), Some(l_g), 0).unwrap();
        assert!((tape.item(total) - 3.5).abs() < 1e-15);
        // Dropping the contrastive term mirrors the no-meta-target arm.
        let without = total_loss(&mut tape, l_o, Some(l_s), None, 0).unwrap();
        assert!((tape.item(without) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_component_is_named() {
        let mut tape = Tape::<f64>::new();
        let l_o = tape.constant(Tensor::scalar(1.0));
        let l_g = tape.constant(Tensor::scalar(f64::NAN));
        let err = total_loss(&mut tape, l_o, None, Some(l_g), 7).unwrap_err();
        match err {
            TrainError::NonFinite { component, epoch } => {
                assert_eq!(component, "contrastive");
                assert_eq!(epoch, 7);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn training_loss_decreases_on_fixture() {
        let g = fixture_graph(1);
        let cfg = fixture_config(Ablation::Full, 10, 10);
        let mut model = fixture_model(&g, 5);
        let report = train(&g, &cfg, &mut model).unwrap();
        assert_eq!(report.epochs_run, 10);
        assert!(
            report.history[9].total < report.history[0].total,
            "loss did not decrease: {} -> {}",
            report.history[0].total,
            report.history[9].total
        );
    }

    #[test]
    fn same_seeds_give_identical_curves() {
        let g = fixture_graph(2);
        let cfg = fixture_config(Ablation::Full, 5, 5);
        let mut m1 = fixture_model(&g, 9);
        let mut m2 = fixture_model(&g, 9);
        let r1 = train(&g, &cfg, &mut m1).unwrap();
        let r2 = train(&g, &cfg, &mut m2).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn frozen_lr_stops_after_patience() {
        let g = fixture_graph(3);
        let mut cfg = fixture_config(Ablation::Full, 50, 1);
        cfg.lr = 0.0;
        cfg.weight_decay = 0.0;
        let mut model = fixture_model(&g, 2);
        let report = train(&g, &cfg, &mut model).unwrap();
        // Epoch 0 sets the best; epoch 1 cannot improve and exhausts patience.
        assert_eq!(report.epochs_run, 2);
        assert_eq!(report.best_epoch, 0);
    }

    #[test]
    fn no_synthesizer_leaves_synth_params_untouched() {
        let g = fixture_graph(4);
        let cfg = fixture_config(Ablation::NoSynthesizer, 3, 3);
        let mut model = fixture_model(&g, 7);
        let before = model.synthesizer.clone();
        let report = train(&g, &cfg, &mut model).unwrap();
        assert_eq!(model.synthesizer, before);
        for rec in &report.history {
            assert!(rec.l_s.is_none() && rec.l_g.is_none());
        }
    }

    #[test]
    fn no_meta_target_drops_only_contrastive() {
        let g = fixture_graph(5);
        let cfg = fixture_config(Ablation::NoMetaTarget, 2, 2);
        let mut model = fixture_model(&g, 7);
        let report = train(&g, &cfg, &mut model).unwrap();
        for rec in &report.history {
            assert!(rec.l_s.is_some() && rec.l_g.is_none());
        }
    }

    #[test]
    fn evaluate_is_permutation_invariant() {
        let probs = Tensor::from_values(4, 2, &[0.9, 0.1, 0.2, 0.8, 0.6, 0.4, 0.3, 0.7]);
        let labels = Labels::Single { classes: 2, of: vec![Some(0), Some(1), Some(1), Some(1)] };
        let a = evaluate(&probs, &labels, &[0, 1, 2, 3], "test").unwrap();
        let b = evaluate(&probs, &labels, &[3, 1, 0, 2], "test").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn micro_f1_equals_accuracy_for_single_label() {
        let probs = Tensor::from_values(5, 3, &[
            0.7, 0.2, 0.1, //
            0.1, 0.8, 0.1, //
            0.3, 0.3, 0.4, //
            0.5, 0.4, 0.1, //
            0.2, 0.3, 0.5,
        ]);
        let truth = [0usize, 1, 1, 2, 2];
        let labels = Labels::Single { classes: 3, of: truth.iter().map(|&t| Some(t)).collect() };
        let m = evaluate(&probs, &labels, &[0, 1, 2, 3, 4], "test").unwrap();
        let pred = [0usize, 1, 2, 0, 2];
        let accuracy =
            pred.iter().zip(&truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64;
        assert!((m.micro_f1 - accuracy).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip_restores_params() {
        let g = fixture_graph(6);
        let model = fixture_model(&g, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&model, &path).unwrap();
        let mut other = fixture_model(&g, 4);
        assert_ne!(model, other);
        load_checkpoint(&mut other, &path).unwrap();
        assert_eq!(model, other);
    }

    #[test]
    fn config_validation_catches_bad_settings() {
        let mut cfg = fixture_config(Ablation::Full, 10, 20);
        assert!(cfg.validate().is_err()); // patience > epochs
        cfg.patience = 5;
        cfg.gamma = 0.5;
        assert!(cfg.validate().is_err());
        cfg.gamma = 1.0;
        cfg.metapaths = vec![];
        assert!(cfg.validate().is_err());
        cfg.metapaths = vec![MetapathSpec::new(vec![0, 1])];
        assert!(cfg.validate().is_ok());
    }
}
