//! Edge-mask augmentation and the similarity-aware attention encoder.
//!
//! Both graph views (noised structural graph, synthesized similarity graph)
//! run through the same multi-layer, multi-head attention stack with one
//! shared parameter set. Attention is a per-neighborhood softmax over edge
//! scores, multiplied by the view's adjacency entry: on the binary structural
//! view that is plain masked softmax, on the weighted similarity view it
//! rescales attention by similarity so dissimilar pairs pass no message.
//!
//! Self-loops (weight 1) are appended to every neighborhood before attention
//! so isolated nodes still see their own features.

use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape, TapeError};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("mask probability {0} outside [0, 1)")]
    BadMaskProbability(f64),
    #[error("encoder needs at least one layer and one head")]
    EmptyArchitecture,
    #[error("edge set is for {edges} nodes, features have {nodes} rows")]
    NodeCountMismatch { edges: usize, nodes: usize },
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Per-epoch edge-mask augmentation settings. The two views use different
/// drop probabilities to produce different contexts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Drop probability for the noised structural view.
    pub p_noised: f64,
    /// Drop probability for the synthesized similarity view.
    pub p_synth: f64,
    pub seed: u64,
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        for p in [self.p_noised, self.p_synth] {
            if !(0.0..1.0).contains(&p) {
                return Err(EncoderError::BadMaskProbability(p));
            }
        }
        Ok(())
    }
}

/// Zeroes each nonzero entry independently with probability `p`; kept
/// entries retain their weight. Deterministic under `seed`.
pub fn mask_edges<S: Scalar>(a: &Tensor<S>, p: f64, seed: u64) -> Tensor<S> {
    if p == 0.0 {
        return a.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = a.clone();
    for v in out.values_mut() {
        if *v != S::zero() && rng.gen::<f64>() < p {
            *v = S::zero();
        }
    }
    out
}

/// Architecture settings shared by both views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    /// Residual connections between layers (learned shortcut on dim change).
    pub residual: bool,
    /// Add the previous layer's edge scores before the softmax.
    pub attention_residual: bool,
    /// Negative slope shared by every leaky-relu in the model.
    pub slope: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { layers: 2, heads: 8, hidden: 64, residual: true, attention_residual: true, slope: 0.01 }
    }
}

/// One attention head: score weights plus the aggregation weight.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead<S> {
    /// `d_in x hidden`, feeds the edge scores.
    pub weight: Tensor<S>,
    /// `hidden x 1`, score contribution of the aggregating node.
    pub attn_self: Tensor<S>,
    /// `hidden x 1`, score contribution of the neighbor.
    pub attn_neighbor: Tensor<S>,
    /// `d_in x hidden`, transforms the aggregated neighbor features.
    pub agg_weight: Tensor<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<S> {
    pub heads: Vec<AttentionHead<S>>,
    /// Learned linear shortcut when input and output dims differ.
    pub shortcut: Option<Tensor<S>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<S> {
    pub config: EncoderConfig,
    pub layers: Vec<EncoderLayer<S>>,
}

pub struct AttentionHeadIds {
    pub weight: NodeId,
    pub attn_self: NodeId,
    pub attn_neighbor: NodeId,
    pub agg_weight: NodeId,
}

pub struct EncoderLayerIds {
    pub heads: Vec<AttentionHeadIds>,
    pub shortcut: Option<NodeId>,
}

pub struct EncoderIds {
    pub layers: Vec<EncoderLayerIds>,
}

impl<S: Scalar> EncoderParams<S> {
    /// Layer `l` maps `d_in -> heads * hidden` (hidden layers, heads
    /// concatenated) or `d_in -> hidden` (final layer, heads averaged).
    pub fn init<R: Rng>(
        input_dim: usize,
        config: EncoderConfig,
        rng: &mut R,
    ) -> Result<Self, EncoderError> {
        if config.layers == 0 || config.heads == 0 || config.hidden == 0 {
            return Err(EncoderError::EmptyArchitecture);
        }
        let mut layers = Vec::with_capacity(config.layers);
        let mut d_in = input_dim;
        for l in 0..config.layers {
            let last = l + 1 == config.layers;
            let d_out = if last { config.hidden } else { config.heads * config.hidden };
            let heads = (0..config.heads)
                .map(|_| AttentionHead {
                    weight: Tensor::glorot(d_in, config.hidden, rng),
                    attn_self: Tensor::glorot(config.hidden, 1, rng),
                    attn_neighbor: Tensor::glorot(config.hidden, 1, rng),
                    agg_weight: Tensor::glorot(d_in, config.hidden, rng),
                })
                .collect();
            let shortcut = if config.residual && d_in != d_out {
                Some(Tensor::glorot(d_in, d_out, rng))
            } else {
                None
            };
            layers.push(EncoderLayer { heads, shortcut });
            d_in = d_out;
        }
        Ok(Self { config, layers })
    }

    pub fn output_dim(&self) -> usize {
        self.config.hidden
    }

    pub fn register(&self, tape: &mut Tape<S>) -> EncoderIds {
        EncoderIds {
            layers: self
                .layers
                .iter()
                .map(|layer| EncoderLayerIds {
                    heads: layer
                        .heads
                        .iter()
                        .map(|h| AttentionHeadIds {
                            weight: tape.param(&h.weight),
                            attn_self: tape.param(&h.attn_self),
                            attn_neighbor: tape.param(&h.attn_neighbor),
                            agg_weight: tape.param(&h.agg_weight),
                        })
                        .collect(),
                    shortcut: layer.shortcut.as_ref().map(|s| tape.param(s)),
                })
                .collect(),
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                out.push((format!("encoder.{l}.{h}.weight"), &head.weight));
                out.push((format!("encoder.{l}.{h}.attn_self"), &head.attn_self));
                out.push((format!("encoder.{l}.{h}.attn_neighbor"), &head.attn_neighbor));
                out.push((format!("encoder.{l}.{h}.agg_weight"), &head.agg_weight));
            }
            if let Some(s) = &layer.shortcut {
                out.push((format!("encoder.{l}.shortcut"), s));
            }
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (h, head) in layer.heads.iter_mut().enumerate() {
                out.push((format!("encoder.{l}.{h}.weight"), &mut head.weight));
                out.push((format!("encoder.{l}.{h}.attn_self"), &mut head.attn_self));
                out.push((format!("encoder.{l}.{h}.attn_neighbor"), &mut head.attn_neighbor));
                out.push((format!("encoder.{l}.{h}.agg_weight"), &mut head.agg_weight));
            }
            if let Some(s) = &mut layer.shortcut {
                out.push((format!("encoder.{l}.shortcut"), s));
            }
        }
        out
    }
}

/// Flattened neighborhoods of one graph view: edge `e` means node
/// `aggregators[e]` attends to `neighbors[e]`. Edges are sorted by
/// aggregator, so `segments[i]` is node i's contiguous run. `positions`
/// index the view's weight matrix (adjacency plus self-loops).
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSet {
    pub n_nodes: usize,
    pub aggregators: Vec<usize>,
    pub neighbors: Vec<usize>,
    pub segments: Vec<Range<usize>>,
    pub positions: Vec<(usize, usize)>,
}

impl EdgeSet {
    /// Builds neighborhoods from the nonzero pattern of a masked adjacency,
    /// appending a self-loop to every node.
    pub fn from_adjacency<S: Scalar>(masked: &Tensor<S>) -> Self {
        let n = masked.rows();
        let mut aggregators = Vec::new();
        let mut neighbors = Vec::new();
        let mut segments = Vec::with_capacity(n);
        for i in 0..n {
            let start = neighbors.len();
            let row = masked.row(i);
            let mut self_seen = false;
            for (j, &v) in row.iter().enumerate() {
                if v != S::zero() || j == i {
                    aggregators.push(i);
                    neighbors.push(j);
                    if j == i {
                        self_seen = true;
                    }
                }
            }
            debug_assert!(self_seen);
            segments.push(start..neighbors.len());
        }
        let positions = aggregators.iter().copied().zip(neighbors.iter().copied()).collect();
        Self { n_nodes: n, aggregators, neighbors, segments, positions }
    }

    pub fn n_edges(&self) -> usize {
        self.neighbors.len()
    }
}

/// Adds unit self-loops to an adjacency (overwriting the diagonal).
pub fn with_self_loops<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    let mut out = a.clone();
    let n = out.rows();
    for i in 0..n {
        out.set(i, i, S::one());
    }
    out
}

/// One graph view for the encoder: the taped weight matrix (masked adjacency
/// with self-loops) and its edge set.
pub struct GraphView<'a> {
    pub weight_matrix: NodeId,
    pub edges: &'a EdgeSet,
}

/// Edge correlation scores `e_ij = a([W z_i || W z_j])` for every edge of a
/// view, realized as the sum of two linear score halves.
pub fn attention_coefficients<S: Scalar>(
    tape: &mut Tape<S>,
    z: NodeId,
    head: &AttentionHeadIds,
    edges: &EdgeSet,
) -> Result<NodeId, EncoderError> {
    if tape.value(z).rows() != edges.n_nodes {
        return Err(EncoderError::NodeCountMismatch {
            edges: edges.n_nodes,
            nodes: tape.value(z).rows(),
        });
    }
    let zw = tape.matmul(z, head.weight)?;
    let self_score = tape.matmul(zw, head.attn_self)?;
    let neighbor_score = tape.matmul(zw, head.attn_neighbor)?;
    let per_edge_self = tape.gather_rows(self_score, &edges.aggregators)?;
    let per_edge_neighbor = tape.gather_rows(neighbor_score, &edges.neighbors)?;
    let linear = tape.add(per_edge_self, per_edge_neighbor)?;
    // The projection squashes scores into (0, 1), keeping the per-neighborhood
    // softmax temperate regardless of embedding scale.
    Ok(tape.sigmoid(linear))
}

/// Similarity-aware attention: per-neighborhood softmax of the leaky-relu'd
/// scores, multiplied by the view's adjacency entry. Binary entries leave
/// the softmax untouched; similarity weights rescale it, zeroing attention
/// wherever the view's adjacency is zero.
pub fn similarity_aware_attention<S: Scalar>(
    tape: &mut Tape<S>,
    scores: NodeId,
    view_weights: NodeId,
    edges: &EdgeSet,
    slope: S,
) -> Result<NodeId, EncoderError> {
    let activated = tape.leaky_relu(scores, slope);
    let softmax = tape.segment_softmax(activated, &edges.segments)?;
    let weights = tape.gather_entries(view_weights, &edges.positions)?;
    Ok(tape.mul(softmax, weights)?)
}

/// Attention-weighted aggregation `sigma(sum_j alpha_ij W z_j)` per node.
pub fn aggregate<S: Scalar>(
    tape: &mut Tape<S>,
    alpha: NodeId,
    z: NodeId,
    agg_weight: NodeId,
    edges: &EdgeSet,
    slope: S,
) -> Result<NodeId, EncoderError> {
    let zw = tape.matmul(z, agg_weight)?;
    let messages = tape.gather_rows(zw, &edges.neighbors)?;
    let weighted = tape.mul(messages, alpha)?;
    let summed = tape.scatter_add_rows(weighted, &edges.aggregators, edges.n_nodes)?;
    Ok(tape.leaky_relu(summed, slope))
}

fn forward_view<S: Scalar>(
    tape: &mut Tape<S>,
    z: NodeId,
    view: &GraphView<'_>,
    params: &EncoderParams<S>,
    ids: &EncoderIds,
) -> Result<NodeId, EncoderError> {
    let slope = S::from_f64_lossy(params.config.slope);
    let n_layers = params.layers.len();
    let mut x = z;
    let mut prev_scores: Vec<NodeId> = Vec::new();
    for (l, (layer, layer_ids)) in params.layers.iter().zip(&ids.layers).enumerate() {
        let last = l + 1 == n_layers;
        let mut head_outputs = Vec::with_capacity(layer.heads.len());
        let mut scores_this_layer = Vec::with_capacity(layer.heads.len());
        for (h, head_ids) in layer_ids.heads.iter().enumerate() {
            let mut scores = attention_coefficients(tape, x, head_ids, view.edges)?;
            if params.config.attention_residual {
                if let Some(&prev) = prev_scores.get(h) {
                    scores = tape.add(scores, prev)?;
                }
            }
            scores_this_layer.push(scores);
            let alpha =
                similarity_aware_attention(tape, scores, view.weight_matrix, view.edges, slope)?;
            head_outputs.push(aggregate(tape, alpha, x, head_ids.agg_weight, view.edges, slope)?);
        }
        prev_scores = scores_this_layer;

        let combined = if last {
            let mut acc = head_outputs[0];
            for &h in &head_outputs[1..] {
                acc = tape.add(acc, h)?;
            }
            tape.scale(acc, S::one() / S::from_usize(head_outputs.len()).unwrap())
        } else {
            tape.concat_cols(&head_outputs)?
        };

        x = if params.config.residual {
            let shortcut = match layer_ids.shortcut {
                Some(w) => tape.matmul(x, w)?,
                None => x,
            };
            tape.add(combined, shortcut)?
        } else {
            combined
        };
    }
    Ok(x)
}

/// Dual forward pass: both views share `z` and the full parameter set.
/// Returns the node representations per view.
pub fn forward<S: Scalar>(
    tape: &mut Tape<S>,
    z: NodeId,
    noised: &GraphView<'_>,
    synthesized: Option<&GraphView<'_>>,
    params: &EncoderParams<S>,
    ids: &EncoderIds,
) -> Result<(NodeId, Option<NodeId>), EncoderError> {
    let h_noised = forward_view(tape, z, noised, params, ids)?;
    let h_synth = match synthesized {
        Some(view) => Some(forward_view(tape, z, view, params, ids)?),
        None => None,
    };
    Ok((h_noised, h_synth))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head_ids<S: Scalar>(tape: &mut Tape<S>, head: &AttentionHead<S>) -> AttentionHeadIds {
        AttentionHeadIds {
            weight: tape.param(&head.weight),
            attn_self: tape.param(&head.attn_self),
            attn_neighbor: tape.param(&head.attn_neighbor),
            agg_weight: tape.param(&head.agg_weight),
        }
    }

    #[test]
    fn mask_with_p_zero_is_identity() {
        let a = Tensor::from_values(2, 2, &[1.0, 0.5, 0.0, 0.25]);
        assert_eq!(mask_edges(&a, 0.0, 3), a);
    }

    #[test]
    fn mask_is_deterministic_and_only_drops() {
        let a = Tensor::<f64>::ones(20, 20);
        let m1 = mask_edges(&a, 0.4, 7);
        let m2 = mask_edges(&a, 0.4, 7);
        assert_eq!(m1, m2);
        let survivors = m1.values().iter().filter(|&&v| v != 0.0).count();
        assert!(survivors < 400);
        for (&orig, &kept) in a.values().iter().zip(m1.values()) {
            assert!(kept == 0.0 || kept == orig);
        }
    }

    #[test]
    fn surviving_edges_within_three_sigma_over_seeds() {
        // Aggregate survivor count over many seeds against Binomial(M, 1-p).
        let a = Tensor::<f64>::ones(10, 10);
        let p = 0.3;
        let seeds = 200;
        let mut survivors = 0usize;
        for seed in 0..seeds {
            survivors +=
                mask_edges(&a, p, seed).values().iter().filter(|&&v| v != 0.0).count();
        }
        let trials = (a.len() * seeds as usize) as f64;
        let mean = trials * (1.0 - p);
        let sigma = (trials * p * (1.0 - p)).sqrt();
        assert!(
            (survivors as f64 - mean).abs() <= 3.0 * sigma,
            "survivors {survivors}, expected {mean} +/- {}",
            3.0 * sigma
        );
    }

    #[test]
    fn augment_config_validation() {
        assert!(AugmentConfig { p_noised: 0.3, p_synth: 0.5, seed: 0 }.validate().is_ok());
        // Both views unmasked is a legitimate setting.
        assert!(AugmentConfig { p_noised: 0.0, p_synth: 0.0, seed: 0 }.validate().is_ok());
        assert!(AugmentConfig { p_noised: 1.0, p_synth: 0.0, seed: 0 }.validate().is_err());
    }

    #[test]
    fn zero_attention_vector_gives_zero_scores() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::from_values(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let head = AttentionHead {
            weight: Tensor::eye(2),
            attn_self: Tensor::zeros(2, 1),
            attn_neighbor: Tensor::zeros(2, 1),
            agg_weight: Tensor::eye(2),
        };
        let ids = head_ids(&mut tape, &head);
        let adj = with_self_loops(&Tensor::<f64>::ones(3, 3));
        let edges = EdgeSet::from_adjacency(&adj);
        let e = attention_coefficients(&mut tape, z, &ids, &edges).unwrap();
        assert!(tape.value(e).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn symmetric_attention_on_equal_features() {
        // With z_i = z_j, e_ij = e_ji regardless of the attention vectors.
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::from_values(2, 2, &[0.7, -0.3, 0.7, -0.3]));
        let head = AttentionHead {
            weight: Tensor::from_values(2, 2, &[0.5, 0.1, -0.2, 0.8]),
            attn_self: Tensor::from_values(2, 1, &[1.0, -1.0]),
            attn_neighbor: Tensor::from_values(2, 1, &[0.3, 0.9]),
            agg_weight: Tensor::eye(2),
        };
        let ids = head_ids(&mut tape, &head);
        let adj = with_self_loops(&Tensor::<f64>::ones(2, 2));
        let edges = EdgeSet::from_adjacency(&adj);
        let e_id = attention_coefficients(&mut tape, z, &ids, &edges).unwrap();
        let e = tape.value(e_id).clone();
        // Edges in row-major order: (0,0), (0,1), (1,0), (1,1).
        assert!((e.get(1, 0) - e.get(2, 0)).abs() < 1e-14);
    }

    #[test]
    fn three_edge_fixture_matches_scalar_oracle() {
        let zv = Tensor::from_values(3, 2, &[0.2, -0.4, 1.0, 0.5, -0.6, 0.9]);
        let head = AttentionHead {
            weight: Tensor::from_values(2, 2, &[0.3, -0.1, 0.7, 0.2]),
            attn_self: Tensor::from_values(2, 1, &[0.4, -0.6]),
            attn_neighbor: Tensor::from_values(2, 1, &[-0.2, 0.5]),
            agg_weight: Tensor::eye(2),
        };
        let mut adj = Tensor::<f64>::zeros(3, 3);
        adj.set(0, 1, 1.0);
        adj.set(1, 2, 1.0);
        adj.set(2, 0, 1.0);
        let adj = with_self_loops(&adj);
        let edges = EdgeSet::from_adjacency(&adj);

        let mut tape = Tape::<f64>::new();
        let z = tape.constant(zv.clone());
        let ids = head_ids(&mut tape, &head);
        let e = attention_coefficients(&mut tape, z, &ids, &edges).unwrap();

        // Per-edge oracle: e_ij = a_self . (W^T z_i) + a_neighbor . (W^T z_j).
        let zw_row = |i: usize| -> [f64; 2] {
            let mut out = [0.0; 2];
            for (c, o) in out.iter_mut().enumerate() {
                *o = (0..2).map(|d| zv.get(i, d) * head.weight.get(d, c)).sum();
            }
            out
        };
        let score = |i: usize, j: usize| -> f64 {
            let zi = zw_row(i);
            let zj = zw_row(j);
            let s: f64 = (0..2).map(|c| zi[c] * head.attn_self.get(c, 0)).sum();
            let n: f64 = (0..2).map(|c| zj[c] * head.attn_neighbor.get(c, 0)).sum();
            s + n
        };
        for (idx, (&i, &j)) in edges.aggregators.iter().zip(&edges.neighbors).enumerate() {
            assert!((tape.value(e).get(idx, 0) - score(i, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_values_on_small_neighborhoods() {
        // Node 0: single neighbor with weight 1 -> alpha = 1.
        // Node 1: two neighbors with equal scores, binary weights -> 0.5 each.
        // Node 2: single neighbor with weight 0.8 -> alpha = 0.8.
        let mut tape = Tape::<f64>::new();
        let scores = tape.constant(Tensor::from_values(4, 1, &[0.3, 1.7, 1.7, -0.2]));
        let mut weights = Tensor::<f64>::zeros(3, 3);
        weights.set(0, 1, 1.0);
        weights.set(1, 0, 1.0);
        weights.set(1, 2, 1.0);
        weights.set(2, 0, 0.8);
        let wid = tape.constant(weights);
        let edges = EdgeSet {
            n_nodes: 3,
            aggregators: vec![0, 1, 1, 2],
            neighbors: vec![1, 0, 2, 0],
            segments: vec![0..1, 1..3, 3..4],
            positions: vec![(0, 1), (1, 0), (1, 2), (2, 0)],
        };
        let alpha = similarity_aware_attention(&mut tape, scores, wid, &edges, 0.01).unwrap();
        let a = tape.value(alpha).values();
        assert!((a[0] - 1.0).abs() < 1e-15);
        assert!((a[1] - 0.5).abs() < 1e-15 && (a[2] - 0.5).abs() < 1e-15);
        assert!((a[3] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn aggregate_one_hot_attention_copies_neighbor() {
        // alpha one-hot on neighbor j with identity weights and nonnegative
        // features: h_i = z_j.
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::from_values(2, 2, &[0.0, 0.0, 0.6, 0.9]));
        let w = tape.constant(Tensor::eye(2));
        let alpha = tape.constant(Tensor::from_values(2, 1, &[1.0, 0.0]));
        let edges = EdgeSet {
            n_nodes: 2,
            aggregators: vec![0, 1],
            neighbors: vec![1, 1],
            segments: vec![0..1, 1..2],
            positions: vec![(0, 1), (1, 1)],
        };
        let h = aggregate(&mut tape, alpha, z, w, &edges, 0.01).unwrap();
        assert_eq!(tape.value(h).row(0), &[0.6, 0.9]);
        assert_eq!(tape.value(h).row(1), &[0.0, 0.0]);
    }

    #[test]
    fn identical_views_produce_identical_outputs() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let n = 7;
        let zv = Tensor::<f64>::glorot(n, 4, &mut rng);
        let mut adj = Tensor::<f64>::zeros(n, n);
        for _ in 0..12 {
            let i = rng.gen_range(0..n);
            let j = rng.gen_range(0..n);
            adj.set(i, j, 1.0);
        }
        let adj = with_self_loops(&adj);
        let edges = EdgeSet::from_adjacency(&adj);
        let params = EncoderParams::init(
            4,
            EncoderConfig { layers: 2, heads: 2, hidden: 3, ..EncoderConfig::default() },
            &mut rng,
        )
        .unwrap();

        let mut tape = Tape::<f64>::new();
        let z = tape.constant(zv);
        let ids = params.register(&mut tape);
        let wid = tape.constant(adj.clone());
        let view_a = GraphView { weight_matrix: wid, edges: &edges };
        let wid2 = tape.constant(adj);
        let view_b = GraphView { weight_matrix: wid2, edges: &edges };
        let (ha, hb) = forward(&mut tape, z, &view_a, Some(&view_b), &params, &ids).unwrap();
        let hb = hb.unwrap();
        assert_eq!(tape.value(ha), tape.value(hb));
    }

    #[test]
    fn permuting_nodes_permutes_rows() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(33);
        let n = 6;
        let zv = Tensor::<f64>::glorot(n, 3, &mut rng);
        let mut adj = Tensor::<f64>::zeros(n, n);
        for (i, j) in [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0), (1, 4)] {
            adj.set(i, j, 1.0);
            adj.set(j, i, 1.0);
        }
        let params = EncoderParams::init(
            3,
            EncoderConfig { layers: 2, heads: 2, hidden: 3, ..EncoderConfig::default() },
            &mut rng,
        )
        .unwrap();

        let run = |zv: &Tensor<f64>, adj: &Tensor<f64>| -> Tensor<f64> {
            let adj = with_self_loops(adj);
            let edges = EdgeSet::from_adjacency(&adj);
            let mut tape = Tape::<f64>::new();
            let z = tape.constant(zv.clone());
            let ids = params.register(&mut tape);
            let wid = tape.constant(adj);
            let view = GraphView { weight_matrix: wid, edges: &edges };
            let (h, _) = forward(&mut tape, z, &view, None, &params, &ids).unwrap();
            tape.value(h).clone()
        };

        let base = run(&zv, &adj);

        // Rotate node ids by one.
        let perm: Vec<usize> = (0..n).map(|i| (i + 1) % n).collect();
        let mut zp = Tensor::zeros(n, 3);
        let mut ap = Tensor::zeros(n, n);
        for i in 0..n {
            for c in 0..3 {
                zp.set(perm[i], c, zv.get(i, c));
            }
            for j in 0..n {
                if adj.get(i, j) != 0.0 {
                    ap.set(perm[i], perm[j], 1.0);
                }
            }
        }
        let permuted = run(&zp, &ap);
        for i in 0..n {
            for c in 0..base.cols() {
                assert!(
                    (base.get(i, c) - permuted.get(perm[i], c)).abs() < 1e-12,
                    "row {i} col {c}"
                );
            }
        }
    }
}
