//! Heterogeneous graph data model and structural operations.
//!
//! Global node ids are contiguous and partitioned by type in the declared
//! type order, so per-type blocks of any `N x N` matrix can be addressed by
//! index ranges.

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::ops::Range;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("edge {index} ({src} -> {dst}, type {edge_type}) violates signature ({expect_src} -> {expect_dst})")]
    SignatureViolation {
        index: usize,
        src: usize,
        dst: usize,
        edge_type: usize,
        expect_src: String,
        expect_dst: String,
    },
    #[error("node id {id} out of range for {n} nodes")]
    BadNodeId { id: usize, n: usize },
    #[error("edge type {edge_type} out of range for {n} edge types")]
    BadEdgeType { edge_type: usize, n: usize },
    #[error("feature matrix for type {node_type} has {rows} rows but the type has {count} nodes")]
    FeatureCountMismatch { node_type: String, rows: usize, count: usize },
    #[error("label count {labels} does not match target count {targets}")]
    LabelCountMismatch { labels: usize, targets: usize },
    #[error("split sets overlap or index past the {targets} target nodes")]
    BadSplits { targets: usize },
    #[error("metapath step {step}: type {edge_type} does not compose with the previous step")]
    NonComposingMetapath { step: usize, edge_type: usize },
    #[error("metapath must start and end at the target type")]
    MetapathEndpoints,
    #[error("metapath spec is empty")]
    EmptyMetapath,
    #[error("matrix is {rows}x{cols}, expected {expect}x{expect}")]
    NotSquareOverNodes { rows: usize, cols: usize, expect: usize },
    #[error("labels cover {labels} nodes but the adjacency has {nodes}")]
    HomogeneityShape { labels: usize, nodes: usize },
    #[error("operation requires single-label classes")]
    NeedsSingleLabel,
}

/// Directed typed edge between global node ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub edge_type: usize,
}

/// (source node type, destination node type) for one edge type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeSignature {
    pub src_type: usize,
    pub dst_type: usize,
}

/// Which nodes come with usable input features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureRegime {
    /// All node types have given features.
    AllGiven,
    /// Only the target type has given features.
    TargetOnly,
    /// All nodes use one-hot features.
    OneHot,
}

impl FeatureRegime {
    pub fn as_u8(self) -> u8 {
        match self {
            FeatureRegime::AllGiven => 0,
            FeatureRegime::TargetOnly => 1,
            FeatureRegime::OneHot => 2,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(FeatureRegime::AllGiven),
            1 => Some(FeatureRegime::TargetOnly),
            2 => Some(FeatureRegime::OneHot),
            _ => None,
        }
    }
}

/// Per-target-node labels; `None` marks unlabeled nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Labels {
    Single { classes: usize, of: Vec<Option<usize>> },
    Multi { classes: usize, of: Vec<Option<Vec<bool>>> },
}

impl Labels {
    pub fn classes(&self) -> usize {
        match self {
            Labels::Single { classes, .. } | Labels::Multi { classes, .. } => *classes,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Labels::Single { of, .. } => of.len(),
            Labels::Multi { of, .. } => of.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_multi(&self) -> bool {
        matches!(self, Labels::Multi { .. })
    }

    pub fn is_labeled(&self, local: usize) -> bool {
        match self {
            Labels::Single { of, .. } => of[local].is_some(),
            Labels::Multi { of, .. } => of[local].is_some(),
        }
    }

    /// Single-label class ids, erroring on multi-label data.
    pub fn single(&self) -> Result<&[Option<usize>], GraphError> {
        match self {
            Labels::Single { of, .. } => Ok(of),
            Labels::Multi { .. } => Err(GraphError::NeedsSingleLabel),
        }
    }
}

/// Train/validation/test index sets over target-local node indices.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Typed multigraph with per-type features, a labeled target type, and splits.
#[derive(Debug, Clone, PartialEq)]
pub struct HeteroGraph<S> {
    pub node_type_names: Vec<String>,
    pub type_counts: Vec<usize>,
    pub edges: Vec<Edge>,
    pub edge_signatures: Vec<EdgeSignature>,
    pub edge_type_names: Vec<String>,
    /// One `count x d0` matrix per node type, in type order.
    pub features: Vec<Tensor<S>>,
    pub target_type: usize,
    pub labels: Labels,
    pub splits: Splits,
    pub feature_regime: FeatureRegime,
}

impl<S: Scalar> HeteroGraph<S> {
    pub fn n_nodes(&self) -> usize {
        self.type_counts.iter().sum()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn n_types(&self) -> usize {
        self.type_counts.len()
    }

    pub fn type_offset(&self, node_type: usize) -> usize {
        self.type_counts[..node_type].iter().sum()
    }

    pub fn type_range(&self, node_type: usize) -> Range<usize> {
        let start = self.type_offset(node_type);
        start..start + self.type_counts[node_type]
    }

    pub fn node_type_of(&self, id: usize) -> usize {
        let mut acc = 0;
        for (t, &c) in self.type_counts.iter().enumerate() {
            acc += c;
            if id < acc {
                return t;
            }
        }
        panic!("node id {id} out of range");
    }

    pub fn target_range(&self) -> Range<usize> {
        self.type_range(self.target_type)
    }

    pub fn n_target(&self) -> usize {
        self.type_counts[self.target_type]
    }

    /// Structural validation of every declared invariant.
    pub fn validate(&self) -> Result<(), GraphError> {
        let n = self.n_nodes();
        for (index, e) in self.edges.iter().enumerate() {
            if e.src >= n {
                return Err(GraphError::BadNodeId { id: e.src, n });
            }
            if e.dst >= n {
                return Err(GraphError::BadNodeId { id: e.dst, n });
            }
            let sig = self
                .edge_signatures
                .get(e.edge_type)
                .ok_or(GraphError::BadEdgeType { edge_type: e.edge_type, n: self.edge_signatures.len() })?;
            if self.node_type_of(e.src) != sig.src_type || self.node_type_of(e.dst) != sig.dst_type {
                return Err(GraphError::SignatureViolation {
                    index,
                    src: e.src,
                    dst: e.dst,
                    edge_type: e.edge_type,
                    expect_src: self.node_type_names[sig.src_type].clone(),
                    expect_dst: self.node_type_names[sig.dst_type].clone(),
                });
            }
        }
        for (t, f) in self.features.iter().enumerate() {
            if f.rows() != self.type_counts[t] {
                return Err(GraphError::FeatureCountMismatch {
                    node_type: self.node_type_names[t].clone(),
                    rows: f.rows(),
                    count: self.type_counts[t],
                });
            }
        }
        let n_target = self.n_target();
        if self.labels.len() != n_target {
            return Err(GraphError::LabelCountMismatch { labels: self.labels.len(), targets: n_target });
        }
        let mut seen = vec![false; n_target];
        for idx in self.splits.train.iter().chain(&self.splits.val).chain(&self.splits.test) {
            if *idx >= n_target || seen[*idx] {
                return Err(GraphError::BadSplits { targets: n_target });
            }
            seen[*idx] = true;
        }
        Ok(())
    }

    /// `N x N` binary adjacency over all nodes; with `symmetric`, the matrix
    /// is `max(A, A^T)`.
    pub fn build_full_adjacency(&self, symmetric: bool) -> Tensor<S> {
        let n = self.n_nodes();
        let mut adj = Tensor::zeros(n, n);
        for e in &self.edges {
            adj.set(e.src, e.dst, S::one());
            if symmetric {
                adj.set(e.dst, e.src, S::one());
            }
        }
        adj
    }

    /// Re-pools train and validation labeled nodes and re-splits them at
    /// `train_ratio`, deterministically under `seed`. The test set is fixed.
    pub fn resplit_train_val(&mut self, train_ratio: f64, seed: u64) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut pool: Vec<usize> =
            self.splits.train.iter().chain(&self.splits.val).copied().collect();
        pool.sort_unstable();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        pool.shuffle(&mut rng);
        let n_train = ((pool.len() as f64) * train_ratio).round() as usize;
        let n_train = n_train.min(pool.len());
        self.splits.train = pool[..n_train].to_vec();
        self.splits.val = pool[n_train..].to_vec();
    }

    /// Replaces features with one-hot identities: all types under
    /// [`FeatureRegime::OneHot`], non-target types under
    /// [`FeatureRegime::TargetOnly`].
    pub fn apply_regime(&mut self, regime: FeatureRegime) {
        match regime {
            FeatureRegime::AllGiven => {}
            FeatureRegime::TargetOnly => {
                for t in 0..self.n_types() {
                    if t != self.target_type {
                        self.features[t] = Tensor::eye(self.type_counts[t]);
                    }
                }
            }
            FeatureRegime::OneHot => {
                for t in 0..self.n_types() {
                    self.features[t] = Tensor::eye(self.type_counts[t]);
                }
            }
        }
        self.feature_regime = regime;
    }
}

/// Ordered chain of edge types whose signatures compose, starting and ending
/// at the target type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetapathSpec {
    pub steps: Vec<usize>,
}

impl MetapathSpec {
    pub fn new(steps: Vec<usize>) -> Self {
        Self { steps }
    }

    pub fn validate<S: Scalar>(&self, g: &HeteroGraph<S>) -> Result<(), GraphError> {
        if self.steps.is_empty() {
            return Err(GraphError::EmptyMetapath);
        }
        let mut current = g.target_type;
        for (i, &ty) in self.steps.iter().enumerate() {
            let sig = g
                .edge_signatures
                .get(ty)
                .ok_or(GraphError::BadEdgeType { edge_type: ty, n: g.edge_signatures.len() })?;
            if sig.src_type != current {
                return Err(GraphError::NonComposingMetapath { step: i, edge_type: ty });
            }
            current = sig.dst_type;
        }
        if current != g.target_type {
            return Err(GraphError::MetapathEndpoints);
        }
        Ok(())
    }
}

/// Row-major bit matrix for boolean adjacency chains.
struct BitMatrix {
    rows: usize,
    cols: usize,
    words_per_row: usize,
    bits: Vec<u64>,
}

impl BitMatrix {
    fn zeros(rows: usize, cols: usize) -> Self {
        let words_per_row = cols.div_ceil(64);
        Self { rows, cols, words_per_row, bits: vec![0; rows * words_per_row] }
    }

    #[inline]
    fn set(&mut self, r: usize, c: usize) {
        self.bits[r * self.words_per_row + c / 64] |= 1u64 << (c % 64);
    }

    #[inline]
    fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.words_per_row + c / 64] & (1u64 << (c % 64)) != 0
    }

    /// Boolean matrix product: out[i][j] = OR_k (self[i][k] AND other[k][j]).
    fn multiply(&self, other: &BitMatrix) -> BitMatrix {
        debug_assert_eq!(self.cols, other.rows);
        let mut out = BitMatrix::zeros(self.rows, other.cols);
        let wpr = out.words_per_row;
        for i in 0..self.rows {
            let out_row = &mut out.bits[i * wpr..(i + 1) * wpr];
            for k in 0..self.cols {
                if self.get(i, k) {
                    let other_row = &other.bits[k * other.words_per_row..(k + 1) * other.words_per_row];
                    for (o, &w) in out_row.iter_mut().zip(other_row) {
                        *o |= w;
                    }
                }
            }
        }
        out
    }
}

/// Metapath graph over target nodes: entry (u, v) is 1 iff at least one path
/// instance follows `spec` from u to v. Computed as a boolean chain of
/// per-step adjacency products; the diagonal is zeroed, since any node
/// trivially reaches itself along a there-and-back metapath.
pub fn metapath_graph<S: Scalar>(
    g: &HeteroGraph<S>,
    spec: &MetapathSpec,
) -> Result<Tensor<S>, GraphError> {
    spec.validate(g)?;
    let mut chain: Option<BitMatrix> = None;
    for &ty in &spec.steps {
        let sig = g.edge_signatures[ty];
        let src_range = g.type_range(sig.src_type);
        let dst_range = g.type_range(sig.dst_type);
        let mut step = BitMatrix::zeros(src_range.len(), dst_range.len());
        for e in &g.edges {
            if e.edge_type == ty {
                step.set(e.src - src_range.start, e.dst - dst_range.start);
            }
        }
        chain = Some(match chain {
            None => step,
            Some(prev) => prev.multiply(&step),
        });
    }
    let chain = chain.expect("non-empty spec");
    let n_t = g.n_target();
    let mut out = Tensor::zeros(n_t, n_t);
    for u in 0..n_t {
        for v in 0..n_t {
            if u != v && chain.get(u, v) {
                out.set(u, v, S::one());
            }
        }
    }
    Ok(out)
}

/// Restriction of an `N x N` matrix to the target-type rows and columns,
/// order preserved.
pub fn target_subgraph<S: Scalar>(
    a: &Tensor<S>,
    g: &HeteroGraph<S>,
) -> Result<Tensor<S>, GraphError> {
    let n = g.n_nodes();
    if a.shape() != (n, n) {
        return Err(GraphError::NotSquareOverNodes { rows: a.rows(), cols: a.cols(), expect: n });
    }
    let range = g.target_range();
    let n_t = range.len();
    let mut out = Tensor::zeros(n_t, n_t);
    for (ro, ri) in range.clone().enumerate() {
        for (co, ci) in range.clone().enumerate() {
            out.set(ro, co, a.get(ri, ci));
        }
    }
    Ok(out)
}

/// Homogeneity score: the mean, over nodes with at least one neighbor, of
/// the fraction of neighbors sharing the node's label. Neighbors of `v` are
/// the nonzero entries of column `v`; isolated nodes are excluded from the
/// average.
pub fn homogeneity_score<S: Scalar>(
    adj: &Tensor<S>,
    labels: &[usize],
) -> Result<f64, GraphError> {
    let n = labels.len();
    if adj.shape() != (n, n) {
        return Err(GraphError::HomogeneityShape { labels: n, nodes: adj.rows() });
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for v in 0..n {
        let mut neighbors = 0usize;
        let mut same = 0usize;
        for u in 0..n {
            if adj.get(u, v) != S::zero() {
                neighbors += 1;
                if labels[u] == labels[v] {
                    same += 1;
                }
            }
        }
        if neighbors > 0 {
            total += same as f64 / neighbors as f64;
            counted += 1;
        }
    }
    Ok(if counted == 0 { 0.0 } else { total / counted as f64 })
}
