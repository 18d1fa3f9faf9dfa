//! Similarity graph synthesis from node features.
//!
//! Pipeline per training epoch: type-specific projection into a unified
//! feature space, graph-dependent projection (plain affine or one GCN
//! propagation step), cosine similarity of all node pairs, and row-wise
//! top-k sparsification. The result pairs the unified features `Z` with a
//! weighted kNN adjacency whose retained entries stay differentiable.

use crate::graph::HeteroGraph;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape, TapeError};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Norm guard for cosine similarity on (near-)zero rows.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("no projection weights for node type {node_type}")]
    MissingTypeWeights { node_type: usize },
    #[error("projection for type {node_type} expects input dim {expected}, features have {actual}")]
    FeatureDimMismatch { node_type: usize, expected: usize, actual: usize },
    #[error("GCN synthesizer requires an adjacency matrix")]
    AdjacencyRequired,
    #[error("batch size {batch_size} must be at least k + 1 = {min}")]
    BatchTooSmall { batch_size: usize, min: usize },
    #[error("k must be at least 1")]
    KTooSmall,
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Graph feature projection variant: a plain affine map when node features
/// already carry semantics, one GCN propagation step when they do not
/// (target-only or one-hot regimes).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthesizerKind {
    Mlp,
    Gcn,
}

impl SynthesizerKind {
    /// Default kind for a feature regime: affine for fully featured graphs,
    /// GCN otherwise.
    pub fn for_regime(regime: crate::graph::FeatureRegime) -> Self {
        match regime {
            crate::graph::FeatureRegime::AllGiven => SynthesizerKind::Mlp,
            _ => SynthesizerKind::Gcn,
        }
    }
}

/// Per-type affine projection into the unified feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct TypeProjection<S> {
    /// `d0 x d'`
    pub weight: Tensor<S>,
    /// `1 x d'`
    pub bias: Tensor<S>,
}

/// One [`TypeProjection`] per node type, in type order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureProjection<S> {
    pub per_type: Vec<TypeProjection<S>>,
    pub unified_dim: usize,
}

pub struct FeatureProjectionIds {
    pub per_type: Vec<(NodeId, NodeId)>,
}

impl<S: Scalar> FeatureProjection<S> {
    pub fn init<R: rand::Rng>(g: &HeteroGraph<S>, unified_dim: usize, rng: &mut R) -> Self {
        let per_type = g
            .features
            .iter()
            .map(|f| TypeProjection {
                weight: Tensor::glorot(f.cols(), unified_dim, rng),
                bias: Tensor::zeros(1, unified_dim),
            })
            .collect();
        Self { per_type, unified_dim }
    }

    pub fn register(&self, tape: &mut Tape<S>) -> FeatureProjectionIds {
        FeatureProjectionIds {
            per_type: self
                .per_type
                .iter()
                .map(|p| (tape.param(&p.weight), tape.param(&p.bias)))
                .collect(),
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (t, p) in self.per_type.iter().enumerate() {
            out.push((format!("projection.{t}.weight"), &p.weight));
            out.push((format!("projection.{t}.bias"), &p.bias));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = Vec::new();
        for (t, p) in self.per_type.iter_mut().enumerate() {
            out.push((format!("projection.{t}.weight"), &mut p.weight));
            out.push((format!("projection.{t}.bias"), &mut p.bias));
        }
        out
    }
}

/// Graph-projection weights plus the sparsification settings.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSynthesizer<S> {
    pub kind: SynthesizerKind,
    pub k: usize,
    /// `d' x d'`
    pub weight: Tensor<S>,
    /// `1 x d'`, used by the affine variant only.
    pub bias: Tensor<S>,
}

pub struct GraphSynthesizerIds {
    pub weight: NodeId,
    pub bias: NodeId,
}

impl<S: Scalar> GraphSynthesizer<S> {
    pub fn init<R: rand::Rng>(
        kind: SynthesizerKind,
        k: usize,
        unified_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            kind,
            k,
            weight: Tensor::glorot(unified_dim, unified_dim, rng),
            bias: Tensor::zeros(1, unified_dim),
        }
    }

    pub fn register(&self, tape: &mut Tape<S>) -> GraphSynthesizerIds {
        GraphSynthesizerIds { weight: tape.param(&self.weight), bias: tape.param(&self.bias) }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<S>)> {
        vec![("synthesizer.weight".into(), &self.weight), ("synthesizer.bias".into(), &self.bias)]
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        vec![
            ("synthesizer.weight".into(), &mut self.weight),
            ("synthesizer.bias".into(), &mut self.bias),
        ]
    }
}

/// Stacks per-type affine projections `X W + b` in global id order.
pub fn project_nodes<S: Scalar>(
    tape: &mut Tape<S>,
    g: &HeteroGraph<S>,
    proj: &FeatureProjection<S>,
    ids: &FeatureProjectionIds,
) -> Result<NodeId, SynthError> {
    let mut parts = Vec::with_capacity(g.n_types());
    for t in 0..g.n_types() {
        let p = proj.per_type.get(t).ok_or(SynthError::MissingTypeWeights { node_type: t })?;
        if p.weight.rows() != g.features[t].cols() {
            return Err(SynthError::FeatureDimMismatch {
                node_type: t,
                expected: p.weight.rows(),
                actual: g.features[t].cols(),
            });
        }
        let (w, b) = ids.per_type[t];
        let x = tape.constant(g.features[t].clone());
        let xw = tape.matmul(x, w)?;
        parts.push(tape.add(xw, b)?);
    }
    Ok(tape.concat_rows(&parts)?)
}

/// Symmetric GCN propagation matrix `D^-1/2 (A + I) D^-1/2` as plain values.
pub fn gcn_propagation_matrix<S: Scalar>(adjacency: &Tensor<S>) -> Tensor<S> {
    let n = adjacency.rows();
    let mut with_loops = adjacency.clone();
    for i in 0..n {
        let v = with_loops.get(i, i);
        with_loops.set(i, i, v + S::one());
    }
    let inv_sqrt_deg: Vec<S> = (0..n)
        .map(|i| {
            let d: S = with_loops.row(i).iter().copied().sum();
            S::one() / d.sqrt().max(S::from_f64_lossy(NORM_EPS))
        })
        .collect();
    let mut out = with_loops;
    for r in 0..n {
        for c in 0..n {
            let v = out.get(r, c) * inv_sqrt_deg[r] * inv_sqrt_deg[c];
            out.set(r, c, v);
        }
    }
    out
}

/// Graph feature projection: affine `sigma(Z W + b)` for the MLP variant,
/// `sigma(P Z W)` with a constant propagation matrix for the GCN variant.
pub fn graph_project<S: Scalar>(
    tape: &mut Tape<S>,
    z: NodeId,
    synth: &GraphSynthesizer<S>,
    ids: &GraphSynthesizerIds,
    propagation: Option<&Tensor<S>>,
    slope: S,
) -> Result<NodeId, SynthError> {
    let pre = match synth.kind {
        SynthesizerKind::Mlp => {
            let zw = tape.matmul(z, ids.weight)?;
            tape.add(zw, ids.bias)?
        }
        SynthesizerKind::Gcn => {
            let prop = propagation.ok_or(SynthError::AdjacencyRequired)?;
            let p = tape.constant(prop.clone());
            let zw = tape.matmul(z, ids.weight)?;
            tape.matmul(p, zw)?
        }
    };
    Ok(tape.leaky_relu(pre, slope))
}

/// Pairwise cosine similarity of rows, with zero-norm rows guarded so their
/// similarities collapse to ~0 instead of dividing by zero.
pub fn cosine_similarity_matrix<S: Scalar>(
    tape: &mut Tape<S>,
    zbar: NodeId,
) -> Result<NodeId, TapeError> {
    let eps = S::from_f64_lossy(NORM_EPS);
    let sq = tape.mul(zbar, zbar)?;
    let row_sq = tape.row_sums(sq);
    let guarded = tape.clamp_min(row_sq, eps * eps);
    let norm = tape.power(guarded, S::from_f64_lossy(0.5));
    let normalized = tape.div(zbar, norm)?;
    let normalized_t = tape.transpose(normalized);
    tape.matmul(normalized, normalized_t)
}

/// 0/1 mask of the row-wise top-k entries of `s`, self-similarity excluded.
/// Ties at the k-th value break toward the lower column id, so the selection
/// is deterministic.
pub fn topk_selection_mask<S: Scalar>(s: &Tensor<S>, k: usize) -> Tensor<S> {
    let n = s.rows();
    let mut mask = Tensor::zeros(n, s.cols());
    if n <= 1 {
        return mask;
    }
    let keep = k.min(n - 1);
    for i in 0..n {
        let mut candidates: Vec<(S, usize)> = s
            .row(i)
            .iter()
            .copied()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(j, v)| (v, j))
            .collect();
        let by_rank = |a: &(S, usize), b: &(S, usize)| {
            b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1))
        };
        if candidates.len() > keep {
            candidates.select_nth_unstable_by(keep - 1, by_rank);
            candidates.truncate(keep);
        }
        for (_, j) in candidates {
            mask.set(i, j, S::one());
        }
    }
    mask
}

/// Row-wise top-k sparsification of a taped similarity matrix. The selection
/// is computed from the forward values and frozen: gradients flow only
/// through the retained entries.
pub fn topk_sparsify<S: Scalar>(
    tape: &mut Tape<S>,
    s: NodeId,
    k: usize,
) -> Result<(NodeId, Tensor<S>), SynthError> {
    if k == 0 {
        return Err(SynthError::KTooSmall);
    }
    let mask = topk_selection_mask(tape.value(s), k);
    let mask_id = tape.constant(mask.clone());
    let a_theta = tape.mul(s, mask_id)?;
    Ok((a_theta, mask))
}

/// Locality-sensitive approximate kNN over cosine similarities: nodes are
/// shuffled into batches of `batch_size` and each node picks its top-k
/// neighbors within its own batch. Works on plain values, holding one batch
/// block at a time. With `batch_size >= n` this equals the exact variant.
pub fn batched_knn<S: Scalar>(
    zbar: &Tensor<S>,
    k: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Tensor<S>, SynthError> {
    if k == 0 {
        return Err(SynthError::KTooSmall);
    }
    if batch_size < k + 1 {
        return Err(SynthError::BatchTooSmall { batch_size, min: k + 1 });
    }
    let n = zbar.rows();
    let d = zbar.cols();
    let eps = S::from_f64_lossy(NORM_EPS);

    // Row-normalize once.
    let mut normalized = zbar.clone();
    for i in 0..n {
        let norm: S = zbar.row(i).iter().map(|&v| v * v).sum::<S>().sqrt().max(eps);
        for c in 0..d {
            let v = normalized.get(i, c) / norm;
            normalized.set(i, c, v);
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut out = Tensor::zeros(n, n);
    let mut start = 0;
    while start < n {
        let mut end = (start + batch_size).min(n);
        // Fold a too-small tail into the final batch.
        if n - end < k + 1 && end < n {
            end = n;
        }
        let batch = &order[start..end];
        for &i in batch {
            let mut candidates: Vec<(S, usize)> = batch
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| {
                    let dot: S =
                        normalized.row(i).iter().zip(normalized.row(j)).map(|(&a, &b)| a * b).sum();
                    (dot, j)
                })
                .collect();
            let by_rank = |a: &(S, usize), b: &(S, usize)| {
                b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1))
            };
            let keep = k.min(candidates.len());
            if candidates.len() > keep {
                candidates.select_nth_unstable_by(keep - 1, by_rank);
                candidates.truncate(keep);
            }
            for (v, j) in candidates {
                out.set(i, j, v);
            }
        }
        start = end;
    }
    Ok(out)
}

/// How the top-k neighbor selection is performed during synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KnnSelection {
    Exact,
    /// Locality-sensitive batched selection with the given batch size.
    Batched { batch_size: usize, seed: u64 },
}

/// Taped outputs of one synthesis pass.
pub struct Synthesized<S> {
    /// Unified node features `Z` (graph-independent).
    pub z: NodeId,
    /// Graph-dependent features used for similarity.
    pub zbar: NodeId,
    /// Dense similarity matrix.
    pub similarity: NodeId,
    /// Sparsified weighted adjacency (similarity values at kept entries).
    pub a_theta: NodeId,
    /// The frozen selection mask that produced `a_theta`.
    pub mask: Tensor<S>,
}

/// Full synthesis pipeline. `mask_override` replays a previously frozen
/// selection (used by gradient checks); training passes `None` so each epoch
/// reselects from the current similarities.
#[allow(clippy::too_many_arguments)]
pub fn synthesize<S: Scalar>(
    tape: &mut Tape<S>,
    g: &HeteroGraph<S>,
    proj: &FeatureProjection<S>,
    proj_ids: &FeatureProjectionIds,
    synth: &GraphSynthesizer<S>,
    synth_ids: &GraphSynthesizerIds,
    propagation: Option<&Tensor<S>>,
    slope: S,
    selection: KnnSelection,
    mask_override: Option<&Tensor<S>>,
) -> Result<Synthesized<S>, SynthError> {
    let z = project_nodes(tape, g, proj, proj_ids)?;
    let zbar = graph_project(tape, z, synth, synth_ids, propagation, slope)?;
    let similarity = cosine_similarity_matrix(tape, zbar)?;
    let mask = match (mask_override, selection) {
        (Some(m), _) => m.clone(),
        (None, KnnSelection::Exact) => topk_selection_mask(tape.value(similarity), synth.k),
        (None, KnnSelection::Batched { batch_size, seed }) => {
            let weighted = batched_knn(tape.value(zbar), synth.k, batch_size, seed)?;
            weighted.map(|v| if v != S::zero() { S::one() } else { S::zero() })
        }
    };
    let mask_id = tape.constant(mask.clone());
    let a_theta = tape.mul(similarity, mask_id)?;
    Ok(Synthesized { z, zbar, similarity, a_theta, mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate, SyntheticConfig};
    use rand::SeedableRng;

    fn small_graph() -> HeteroGraph<f64> {
        generate(&SyntheticConfig {
            n_target: 12,
            n_aux: vec![6],
            intra_class_link_prob: 0.4,
            seed: 3,
            feature_dim: 5,
            ..SyntheticConfig::default()
        })
    }

    #[test]
    fn zero_weights_project_to_zero() {
        let g = small_graph();
        let mut proj = FeatureProjection::init(&g, 4, &mut ChaCha8Rng::seed_from_u64(0));
        for p in &mut proj.per_type {
            p.weight = Tensor::zeros(p.weight.rows(), p.weight.cols());
            p.bias = Tensor::zeros(1, 4);
        }
        let mut tape = Tape::<f64>::new();
        let ids = proj.register(&mut tape);
        let z = project_nodes(&mut tape, &g, &proj, &ids).unwrap();
        assert!(tape.value(z).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_projection_reproduces_features() {
        let mut g = small_graph();
        g.node_type_names.truncate(1);
        g.type_counts.truncate(1);
        g.features.truncate(1);
        g.edges.clear();
        g.edge_signatures.clear();
        g.edge_type_names.clear();
        let d = g.features[0].cols();
        let proj = FeatureProjection {
            per_type: vec![TypeProjection { weight: Tensor::eye(d), bias: Tensor::zeros(1, d) }],
            unified_dim: d,
        };
        let mut tape = Tape::<f64>::new();
        let ids = proj.register(&mut tape);
        let z = project_nodes(&mut tape, &g, &proj, &ids).unwrap();
        assert_eq!(tape.value(z).values(), g.features[0].values());
    }

    #[test]
    fn projection_rows_match_per_type_affine_oracle() {
        let g = small_graph();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let proj = FeatureProjection::init(&g, 3, &mut rng);
        let mut tape = Tape::<f64>::new();
        let ids = proj.register(&mut tape);
        let z = project_nodes(&mut tape, &g, &proj, &ids).unwrap();
        let zv = tape.value(z);
        for t in 0..g.n_types() {
            let range = g.type_range(t);
            for (local, global) in range.enumerate() {
                for c in 0..3 {
                    let mut expect = proj.per_type[t].bias.get(0, c);
                    for d in 0..g.features[t].cols() {
                        expect += g.features[t].get(local, d) * proj.per_type[t].weight.get(d, c);
                    }
                    assert!((zv.get(global, c) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn mlp_identity_on_nonnegative_is_identity() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::from_values(2, 2, &[0.5, 0.0, 1.5, 2.0]));
        let synth = GraphSynthesizer {
            kind: SynthesizerKind::Mlp,
            k: 1,
            weight: Tensor::eye(2),
            bias: Tensor::zeros(1, 2),
        };
        let ids = synth.register(&mut tape);
        let zbar = graph_project(&mut tape, z, &synth, &ids, None, 0.01).unwrap();
        assert_eq!(tape.value(zbar).values(), &[0.5, 0.0, 1.5, 2.0]);
    }

    #[test]
    fn gcn_single_isolated_node_is_self_loop_only() {
        // One node: propagation matrix is exactly 1, so zbar = sigma(z W).
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::from_values(1, 2, &[2.0, -4.0]));
        let synth = GraphSynthesizer {
            kind: SynthesizerKind::Gcn,
            k: 1,
            weight: Tensor::eye(2),
            bias: Tensor::zeros(1, 2),
        };
        let ids = synth.register(&mut tape);
        let prop = gcn_propagation_matrix(&Tensor::<f64>::zeros(1, 1));
        assert_eq!(prop.values(), &[1.0]);
        let zbar = graph_project(&mut tape, z, &synth, &ids, Some(&prop), 0.01).unwrap();
        assert_eq!(tape.value(zbar).values(), &[2.0, -0.04]);
    }

    #[test]
    fn gcn_path_graph_matches_hand_normalized_propagation() {
        // 4-node path 0-1-2-3, symmetric. Degrees with self loops: 2,3,3,2.
        let mut adj = Tensor::<f64>::zeros(4, 4);
        for (a, b) in [(0, 1), (1, 2), (2, 3)] {
            adj.set(a, b, 1.0);
            adj.set(b, a, 1.0);
        }
        let prop = gcn_propagation_matrix(&adj);
        let deg = [2.0f64, 3.0, 3.0, 2.0];
        for r in 0..4 {
            for c in 0..4 {
                let a_tilde = if r == c {
                    1.0
                } else if adj.get(r, c) != 0.0 {
                    1.0
                } else {
                    0.0
                };
                let expect = a_tilde / (deg[r].sqrt() * deg[c].sqrt());
                assert!((prop.get(r, c) - expect).abs() < 1e-12);
            }
        }

        // Propagate a feature column and compare to the explicit product.
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::from_values(4, 1, &[1.0, 2.0, 3.0, 4.0]));
        let synth = GraphSynthesizer {
            kind: SynthesizerKind::Gcn,
            k: 1,
            weight: Tensor::eye(1),
            bias: Tensor::zeros(1, 1),
        };
        let ids = synth.register(&mut tape);
        let zbar = graph_project(&mut tape, z, &synth, &ids, Some(&prop), 0.01).unwrap();
        for r in 0..4 {
            let expect: f64 = (0..4).map(|c| prop.get(r, c) * (c as f64 + 1.0)).sum();
            let got = tape.value(zbar).get(r, 0);
            let expect = if expect >= 0.0 { expect } else { 0.01 * expect };
            assert!((got - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn gcn_without_adjacency_errors() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::<f64>::ones(2, 2));
        let synth = GraphSynthesizer {
            kind: SynthesizerKind::Gcn,
            k: 1,
            weight: Tensor::eye(2),
            bias: Tensor::zeros(1, 2),
        };
        let ids = synth.register(&mut tape);
        assert!(matches!(
            graph_project(&mut tape, z, &synth, &ids, None, 0.01),
            Err(SynthError::AdjacencyRequired)
        ));
    }

    #[test]
    fn cosine_similarity_basics() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::from_values(3, 2, &[1.0, 0.0, 1.0, 1.0, 0.0, 2.0]));
        let s = cosine_similarity_matrix(&mut tape, z).unwrap();
        let sv = tape.value(s);
        // Identical direction rows.
        assert!((sv.get(0, 0) - 1.0).abs() < 1e-12);
        // Orthogonal rows.
        assert!(sv.get(0, 2).abs() < 1e-12);
        // (1,0) vs (1,1) -> 1/sqrt(2).
        assert!((sv.get(0, 1) - 1.0 / 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn topk_keeps_stated_positions() {
        let s = Tensor::from_values(4, 4, &[
            0.0, 0.9, 0.1, 0.7, //
            0.9, 0.0, 0.5, 0.7, //
            0.1, 0.5, 0.0, 0.2, //
            0.7, 0.7, 0.2, 0.0,
        ]);
        let mask = topk_selection_mask(&s, 2);
        // Row 1: values [0.9, _, 0.5, 0.7] -> keep 0.9 (col 0) and 0.7 (col 3).
        assert_eq!(mask.row(1), &[1.0, 0.0, 0.0, 1.0]);
        // Self always excluded.
        for i in 0..4 {
            assert_eq!(mask.get(i, i), 0.0);
        }
        // k >= N-1 keeps all off-diagonal entries.
        let full = topk_selection_mask(&s, 10);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(full.get(i, j), if i == j { 0.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn topk_ties_break_to_lower_id() {
        let s = Tensor::from_values(3, 3, &[0.0, 0.5, 0.5, 0.5, 0.0, 0.5, 0.5, 0.5, 0.0]);
        let mask = topk_selection_mask(&s, 1);
        assert_eq!(mask.row(0), &[0.0, 1.0, 0.0]);
        assert_eq!(mask.row(1), &[1.0, 0.0, 0.0]);
        assert_eq!(mask.row(2), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn batched_knn_with_full_batch_equals_exact() {
        let g = small_graph();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let zbar = Tensor::glorot(g.n_nodes(), 6, &mut rng);
        let n = zbar.rows();

        let batched = batched_knn(&zbar, 3, n, 123).unwrap();

        let mut tape = Tape::<f64>::new();
        let z = tape.constant(zbar.clone());
        let s = cosine_similarity_matrix(&mut tape, z).unwrap();
        let mask = topk_selection_mask(tape.value(s), 3);
        for i in 0..n {
            for j in 0..n {
                let expect = mask.get(i, j) * tape.value(s).get(i, j);
                assert!((batched.get(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batched_knn_row_counts_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let zbar = Tensor::<f64>::glorot(30, 5, &mut rng);
        let k = 4;
        let a = batched_knn(&zbar, k, 10, 9).unwrap();
        for i in 0..30 {
            let nnz = a.row(i).iter().filter(|&&v| v != 0.0).count();
            assert_eq!(nnz, k);
        }
        assert!(matches!(
            batched_knn(&zbar, 4, 4, 0),
            Err(SynthError::BatchTooSmall { batch_size: 4, min: 5 })
        ));
    }

    #[test]
    fn identical_features_select_each_other() {
        // Two identical rows, the rest far away; with k = 1 they pick each other.
        let mut values = vec![0.0; 6 * 2];
        values[0] = 1.0;
        values[1] = 1.0;
        values[2] = 1.0;
        values[3] = 1.0;
        for (i, v) in values.iter_mut().enumerate().skip(4) {
            *v = -((i % 3) as f64 + 1.0) * (i as f64);
        }
        let zbar = Tensor::from_values(6, 2, &values);
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(zbar);
        let s = cosine_similarity_matrix(&mut tape, z).unwrap();
        let mask = topk_selection_mask(tape.value(s), 1);
        assert_eq!(mask.get(0, 1), 1.0);
        assert_eq!(mask.get(1, 0), 1.0);
    }
}
