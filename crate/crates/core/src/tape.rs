//! Recorded reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] is an append-only computation record: every operation is
//! evaluated eagerly and pushed as a node holding its tag, parent handles,
//! and cached forward value. Parents always precede children, so the append
//! order is already topological and [`Tape::backward`] is a single reverse
//! sweep applying each op's vector-Jacobian product.
//!
//! The record is single-threaded by design. Parameters are snapshotted when
//! inserted, so mutating the original [`Tensor`] afterwards cannot corrupt a
//! pass in flight.

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::ops::Range;
use thiserror::Error;

/// Handle to a node in the active computation record. Invalidated by
/// [`Tape::reset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("dimension mismatch in {op}: lhs is {lhs_rows}x{lhs_cols}, rhs is {rhs_rows}x{rhs_cols}")]
    ShapeMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },
    #[error("domain error in {op}: entry {index} is {value}")]
    Domain { op: &'static str, index: usize, value: f64 },
    #[error("index {index} out of bounds for {what} of size {size}")]
    IndexOutOfBounds { what: &'static str, index: usize, size: usize },
    #[error("segment {segment} is empty: node has no neighbors")]
    IsolatedSegment { segment: usize },
    #[error("segments do not partition a vector of length {len}")]
    BadSegments { len: usize },
    #[error("backward requires a scalar loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("backward already ran on this record; reset before reuse")]
    AlreadyConsumed,
    #[error("concat requires at least one operand")]
    EmptyConcat,
}

/// How the second operand of a binary op is expanded to the first's shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rhs is 1 x cols, repeated down the rows.
    Row,
    /// rhs is rows x 1, repeated across the columns.
    Col,
    /// rhs is 1 x 1.
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    Binary { kind: BinKind, a: NodeId, b: NodeId, broadcast: Broadcast },
    Scale { x: NodeId, factor: S },
    AddScalar { x: NodeId },
    LeakyRelu { x: NodeId, slope: S },
    Sigmoid { x: NodeId },
    Exp { x: NodeId },
    Ln { x: NodeId },
    Power { x: NodeId, exponent: S },
    ClampMin { x: NodeId, bound: S },
    ClampMax { x: NodeId, bound: S },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
    RowSums { x: NodeId },
    GatherRows { x: NodeId, indices: Vec<usize> },
    ScatterAddRows { x: NodeId, indices: Vec<usize> },
    GatherEntries { x: NodeId, positions: Vec<(usize, usize)> },
    SegmentSoftmax { x: NodeId, segments: Vec<Range<usize>> },
    ConcatRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    Block { x: NodeId, rows: Range<usize>, cols: Range<usize> },
}

struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
    requires_grad: bool,
}

/// Gradient map produced by [`Tape::backward`]: one slot per tape node,
/// filled for every node on a differentiable path to the loss.
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<S>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

/// Append-only record of tensor operations with cached forward values.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    consumed: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears the record. All previously issued [`NodeId`]s become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    /// Inserts a leaf; it becomes a gradient target iff `t.grad_enabled()`.
    pub fn insert(&mut self, t: Tensor<S>) -> NodeId {
        let requires = t.grad_enabled();
        self.push(Op::Leaf, t, requires)
    }

    /// Inserts a non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor<S>) -> NodeId {
        self.push(Op::Leaf, t, false)
    }

    /// Snapshots a parameter as a grad-enabled leaf.
    pub fn param(&mut self, t: &Tensor<S>) -> NodeId {
        self.push(Op::Leaf, t.clone(), true)
    }

    pub fn scalar_const(&mut self, v: S) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    /// Forward value of a 1x1 node.
    pub fn item(&self, id: NodeId) -> S {
        self.value(id).item()
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ── op builders ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let (m, ka) = self.value(a).shape();
        let (kb, n) = self.value(b).shape();
        if ka != kb {
            return Err(TapeError::ShapeMismatch {
                op: "matmul",
                lhs_rows: m,
                lhs_cols: ka,
                rhs_rows: kb,
                rhs_cols: n,
            });
        }
        let out = matmul_nn(self.value(a), self.value(b));
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::MatMul { a, b }, out, req))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).transposed();
        let req = self.requires(x);
        self.push(Op::Transpose { x }, out, req)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.binary(BinKind::Div, a, b)
    }

    fn binary(&mut self, kind: BinKind, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        let broadcast = if (ar, ac) == (br, bc) {
            Broadcast::Same
        } else if (br, bc) == (1, 1) {
            Broadcast::Scalar
        } else if br == 1 && bc == ac {
            Broadcast::Row
        } else if bc == 1 && br == ar {
            Broadcast::Col
        } else {
            return Err(TapeError::ShapeMismatch {
                op: binop_name(kind),
                lhs_rows: ar,
                lhs_cols: ac,
                rhs_rows: br,
                rhs_cols: bc,
            });
        };
        let out = binary_forward(kind, self.value(a), self.value(b), broadcast);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Binary { kind, a, b, broadcast }, out, req))
    }

    pub fn scale(&mut self, x: NodeId, factor: S) -> NodeId {
        let out = self.value(x).map(|v| v * factor);
        let req = self.requires(x);
        self.push(Op::Scale { x, factor }, out, req)
    }

    pub fn add_scalar(&mut self, x: NodeId, offset: S) -> NodeId {
        let out = self.value(x).map(|v| v + offset);
        let req = self.requires(x);
        self.push(Op::AddScalar { x }, out, req)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: S) -> NodeId {
        let out = self.value(x).map(|v| if v >= S::zero() { v } else { v * slope });
        let req = self.requires(x);
        self.push(Op::LeakyRelu { x, slope }, out, req)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| S::one() / (S::one() + (-v).exp()));
        let req = self.requires(x);
        self.push(Op::Sigmoid { x }, out, req)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v.exp());
        let req = self.requires(x);
        self.push(Op::Exp { x }, out, req)
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        if let Some((i, &v)) =
            self.value(x).values().iter().enumerate().find(|(_, &v)| v <= S::zero())
        {
            return Err(TapeError::Domain { op: "ln", index: i, value: v.to_f64_lossy() });
        }
        let out = self.value(x).map(|v| v.ln());
        let req = self.requires(x);
        Ok(self.push(Op::Ln { x }, out, req))
    }

    pub fn power(&mut self, x: NodeId, exponent: S) -> NodeId {
        let out = self.value(x).map(|v| v.powf(exponent));
        let req = self.requires(x);
        self.push(Op::Power { x, exponent }, out, req)
    }

    pub fn clamp_min(&mut self, x: NodeId, bound: S) -> NodeId {
        let out = self.value(x).map(|v| v.max(bound));
        let req = self.requires(x);
        self.push(Op::ClampMin { x, bound }, out, req)
    }

    pub fn clamp_max(&mut self, x: NodeId, bound: S) -> NodeId {
        let out = self.value(x).map(|v| v.min(bound));
        let req = self.requires(x);
        self.push(Op::ClampMax { x, bound }, out, req)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).values().iter().copied().sum();
        let req = self.requires(x);
        self.push(Op::SumAll { x }, Tensor::scalar(s), req)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = S::from_usize(self.value(x).len().max(1)).unwrap();
        let s: S = self.value(x).values().iter().copied().sum();
        let req = self.requires(x);
        self.push(Op::MeanAll { x }, Tensor::scalar(s / n), req)
    }

    /// Row-wise sum: `rows x cols` -> `rows x 1`.
    pub fn row_sums(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let rows = v.rows();
        let mut out = Tensor::zeros(rows, 1);
        for r in 0..rows {
            out.values_mut()[r] = v.row(r).iter().copied().sum();
        }
        let req = self.requires(x);
        self.push(Op::RowSums { x }, out, req)
    }

    /// Selects rows by index (duplicates allowed); backward scatter-adds.
    pub fn gather_rows(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId, TapeError> {
        let v = self.value(x);
        let (rows, cols) = (v.rows(), v.cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TapeError::IndexOutOfBounds { what: "row", index: bad, size: rows });
        }
        let mut out = Tensor::zeros(indices.len(), cols);
        for (r, &src) in indices.iter().enumerate() {
            out.values_mut()[r * cols..(r + 1) * cols].copy_from_slice(v.row(src));
        }
        let req = self.requires(x);
        Ok(self.push(Op::GatherRows { x, indices: indices.to_vec() }, out, req))
    }

    /// Adds row `r` of `x` into output row `indices[r]`; backward gathers.
    pub fn scatter_add_rows(
        &mut self,
        x: NodeId,
        indices: &[usize],
        out_rows: usize,
    ) -> Result<NodeId, TapeError> {
        let v = self.value(x);
        let (rows, cols) = v.shape();
        if rows != indices.len() {
            return Err(TapeError::IndexOutOfBounds {
                what: "scatter index list",
                index: indices.len(),
                size: rows,
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= out_rows) {
            return Err(TapeError::IndexOutOfBounds { what: "row", index: bad, size: out_rows });
        }
        let mut out = Tensor::zeros(out_rows, cols);
        for (r, &dst) in indices.iter().enumerate() {
            let src = v.row(r);
            let tgt = &mut out.values_mut()[dst * cols..(dst + 1) * cols];
            for (t, &s) in tgt.iter_mut().zip(src) {
                *t += s;
            }
        }
        let req = self.requires(x);
        Ok(self.push(Op::ScatterAddRows { x, indices: indices.to_vec() }, out, req))
    }

    /// Reads individual entries into a `positions.len() x 1` column.
    pub fn gather_entries(
        &mut self,
        x: NodeId,
        positions: &[(usize, usize)],
    ) -> Result<NodeId, TapeError> {
        let v = self.value(x);
        let (rows, cols) = v.shape();
        for &(r, c) in positions {
            if r >= rows {
                return Err(TapeError::IndexOutOfBounds { what: "row", index: r, size: rows });
            }
            if c >= cols {
                return Err(TapeError::IndexOutOfBounds { what: "column", index: c, size: cols });
            }
        }
        let values: Vec<S> = positions.iter().map(|&(r, c)| v.get(r, c)).collect();
        let out = Tensor::new(positions.len(), 1, values).expect("gather shape");
        let req = self.requires(x);
        Ok(self.push(Op::GatherEntries { x, positions: positions.to_vec() }, out, req))
    }

    /// Softmax within each contiguous segment of a `k x 1` score column.
    ///
    /// Segments must partition `0..k` in order; an empty segment means an
    /// isolated node and is reported as [`TapeError::IsolatedSegment`] so the
    /// caller can decide policy.
    pub fn segment_softmax(
        &mut self,
        x: NodeId,
        segments: &[Range<usize>],
    ) -> Result<NodeId, TapeError> {
        let v = self.value(x);
        let len = v.rows();
        if v.cols() != 1 {
            return Err(TapeError::ShapeMismatch {
                op: "segment_softmax",
                lhs_rows: v.rows(),
                lhs_cols: v.cols(),
                rhs_rows: len,
                rhs_cols: 1,
            });
        }
        let mut cursor = 0;
        for (i, seg) in segments.iter().enumerate() {
            if seg.is_empty() {
                return Err(TapeError::IsolatedSegment { segment: i });
            }
            if seg.start != cursor || seg.end > len {
                return Err(TapeError::BadSegments { len });
            }
            cursor = seg.end;
        }
        if cursor != len {
            return Err(TapeError::BadSegments { len });
        }

        let mut out = vec![S::zero(); len];
        let scores = v.values();
        for seg in segments {
            let max = scores[seg.clone()].iter().copied().fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for i in seg.clone() {
                let e = (scores[i] - max).exp();
                out[i] = e;
                total += e;
            }
            for i in seg.clone() {
                out[i] /= total;
            }
        }
        let out = Tensor::new(len, 1, out).expect("softmax shape");
        let req = self.requires(x);
        Ok(self.push(Op::SegmentSoftmax { x, segments: segments.to_vec() }, out, req))
    }

    /// Vertical stack; all parts must share a column count.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, TapeError> {
        let (&first, rest) = parts.split_first().ok_or(TapeError::EmptyConcat)?;
        let cols = self.value(first).cols();
        let mut rows = self.value(first).rows();
        for &p in rest {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(TapeError::ShapeMismatch {
                    op: "concat_rows",
                    lhs_rows: rows,
                    lhs_cols: cols,
                    rhs_rows: v.rows(),
                    rhs_cols: v.cols(),
                });
            }
            rows += v.rows();
        }
        let mut values = Vec::with_capacity(rows * cols);
        for &p in parts {
            values.extend_from_slice(self.value(p).values());
        }
        let out = Tensor::new(rows, cols, values).expect("concat shape");
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(Op::ConcatRows { parts: parts.to_vec() }, out, req))
    }

    /// Horizontal stack; all parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TapeError> {
        let (&first, rest) = parts.split_first().ok_or(TapeError::EmptyConcat)?;
        let rows = self.value(first).rows();
        let mut cols = self.value(first).cols();
        for &p in rest {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(TapeError::ShapeMismatch {
                    op: "concat_cols",
                    lhs_rows: rows,
                    lhs_cols: cols,
                    rhs_rows: v.rows(),
                    rhs_cols: v.cols(),
                });
            }
            cols += v.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            for r in 0..rows {
                out.values_mut()[r * cols + offset..r * cols + offset + v.cols()]
                    .copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(Op::ConcatCols { parts: parts.to_vec() }, out, req))
    }

    /// Contiguous sub-matrix `x[rows, cols]`.
    pub fn block(
        &mut self,
        x: NodeId,
        rows: Range<usize>,
        cols: Range<usize>,
    ) -> Result<NodeId, TapeError> {
        let v = self.value(x);
        if rows.end > v.rows() {
            return Err(TapeError::IndexOutOfBounds { what: "row", index: rows.end, size: v.rows() });
        }
        if cols.end > v.cols() {
            return Err(TapeError::IndexOutOfBounds {
                what: "column",
                index: cols.end,
                size: v.cols(),
            });
        }
        let mut out = Tensor::zeros(rows.len(), cols.len());
        for (ro, ri) in rows.clone().enumerate() {
            out.values_mut()[ro * cols.len()..(ro + 1) * cols.len()]
                .copy_from_slice(&v.row(ri)[cols.clone()]);
        }
        let req = self.requires(x);
        Ok(self.push(Op::Block { x, rows, cols }, out, req))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Every grad-enabled leaf on a path
    /// to the loss ends up with a gradient of its own shape. Consumes the
    /// record: a second call errors until [`Tape::reset`].
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<S>, TapeError> {
        if self.consumed {
            return Err(TapeError::AlreadyConsumed);
        }
        let (lr, lc) = self.value(loss).shape();
        if (lr, lc) != (1, 1) {
            return Err(TapeError::NonScalarLoss { rows: lr, cols: lc });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(S::one()));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                grads[id] = None;
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g, &mut grads);
            // Leaves keep their gradient; interior nodes release it.
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], target: NodeId, contrib: Tensor<S>) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, c) in existing.values_mut().iter_mut().zip(contrib.values()) {
                    *e += *c;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    fn propagate(&self, id: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                if self.requires(a) {
                    self.accumulate(grads, a, matmul_nt(g, self.value(b)));
                }
                if self.requires(b) {
                    self.accumulate(grads, b, matmul_tn(self.value(a), g));
                }
            }
            Op::Transpose { x } => {
                self.accumulate(grads, x, g.transposed());
            }
            Op::Binary { kind, a, b, broadcast } => {
                let av = self.value(a);
                let bv = self.value(b);
                if self.requires(a) {
                    let da = match kind {
                        BinKind::Add | BinKind::Sub => g.clone(),
                        BinKind::Mul => zip_broadcast(g, bv, broadcast, |gi, bi| gi * bi),
                        BinKind::Div => zip_broadcast(g, bv, broadcast, |gi, bi| gi / bi),
                    };
                    self.accumulate(grads, a, da);
                }
                if self.requires(b) {
                    let full = match kind {
                        BinKind::Add => g.clone(),
                        BinKind::Sub => g.map(|v| -v),
                        BinKind::Mul => {
                            let mut out = g.clone();
                            for (o, &x) in out.values_mut().iter_mut().zip(av.values()) {
                                *o *= x;
                            }
                            out
                        }
                        BinKind::Div => {
                            // d/db (a / b) = -a / b^2
                            let mut out = g.clone();
                            let (rows, cols) = av.shape();
                            for r in 0..rows {
                                for c in 0..cols {
                                    let bi = broadcast_get(bv, broadcast, r, c);
                                    let o = &mut out.values_mut()[r * cols + c];
                                    *o = -*o * av.get(r, c) / (bi * bi);
                                }
                            }
                            out
                        }
                    };
                    self.accumulate(grads, b, reduce_broadcast(&full, bv.shape(), broadcast));
                }
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, x, g.map(|v| v * factor));
            }
            Op::AddScalar { x } => {
                self.accumulate(grads, x, g.clone());
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(x);
                let mut out = g.clone();
                for (o, &v) in out.values_mut().iter_mut().zip(xv.values()) {
                    if v < S::zero() {
                        *o *= slope;
                    }
                }
                self.accumulate(grads, x, out);
            }
            Op::Sigmoid { x } => {
                let yv = &self.nodes[id].value;
                let mut out = g.clone();
                for (o, &y) in out.values_mut().iter_mut().zip(yv.values()) {
                    *o *= y * (S::one() - y);
                }
                self.accumulate(grads, x, out);
            }
            Op::Exp { x } => {
                let yv = &self.nodes[id].value;
                let mut out = g.clone();
                for (o, &y) in out.values_mut().iter_mut().zip(yv.values()) {
                    *o *= y;
                }
                self.accumulate(grads, x, out);
            }
            Op::Ln { x } => {
                let xv = self.value(x);
                let mut out = g.clone();
                for (o, &v) in out.values_mut().iter_mut().zip(xv.values()) {
                    *o /= v;
                }
                self.accumulate(grads, x, out);
            }
            Op::Power { x, exponent } => {
                let xv = self.value(x);
                let mut out = g.clone();
                for (o, &v) in out.values_mut().iter_mut().zip(xv.values()) {
                    *o *= exponent * v.powf(exponent - S::one());
                }
                self.accumulate(grads, x, out);
            }
            Op::ClampMin { x, bound } => {
                let xv = self.value(x);
                let mut out = g.clone();
                for (o, &v) in out.values_mut().iter_mut().zip(xv.values()) {
                    if v < bound {
                        *o = S::zero();
                    }
                }
                self.accumulate(grads, x, out);
            }
            Op::ClampMax { x, bound } => {
                let xv = self.value(x);
                let mut out = g.clone();
                for (o, &v) in out.values_mut().iter_mut().zip(xv.values()) {
                    if v > bound {
                        *o = S::zero();
                    }
                }
                self.accumulate(grads, x, out);
            }
            Op::SumAll { x } => {
                let (rows, cols) = self.value(x).shape();
                self.accumulate(grads, x, Tensor::filled(rows, cols, g.item()));
            }
            Op::MeanAll { x } => {
                let (rows, cols) = self.value(x).shape();
                let n = S::from_usize((rows * cols).max(1)).unwrap();
                self.accumulate(grads, x, Tensor::filled(rows, cols, g.item() / n));
            }
            Op::RowSums { x } => {
                let (rows, cols) = self.value(x).shape();
                let mut out = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    let gr = g.get(r, 0);
                    for c in 0..cols {
                        out.values_mut()[r * cols + c] = gr;
                    }
                }
                self.accumulate(grads, x, out);
            }
            Op::GatherRows { x, indices } => {
                let (rows, cols) = self.value(x).shape();
                let mut out = Tensor::zeros(rows, cols);
                for (r, &src) in indices.iter().enumerate() {
                    let tgt = &mut out.values_mut()[src * cols..(src + 1) * cols];
                    for (t, &gv) in tgt.iter_mut().zip(g.row(r)) {
                        *t += gv;
                    }
                }
                self.accumulate(grads, x, out);
            }
            Op::ScatterAddRows { x, indices } => {
                let (rows, cols) = self.value(x).shape();
                let mut out = Tensor::zeros(rows, cols);
                for (r, &dst) in indices.iter().enumerate() {
                    out.values_mut()[r * cols..(r + 1) * cols].copy_from_slice(g.row(dst));
                }
                self.accumulate(grads, x, out);
            }
            Op::GatherEntries { x, positions } => {
                let (rows, cols) = self.value(x).shape();
                let mut out = Tensor::zeros(rows, cols);
                for (i, &(r, c)) in positions.iter().enumerate() {
                    out.values_mut()[r * cols + c] += g.values()[i];
                }
                self.accumulate(grads, x, out);
            }
            Op::SegmentSoftmax { x, segments } => {
                let y = self.nodes[id].value.values();
                let gv = g.values();
                let mut out = vec![S::zero(); y.len()];
                for seg in &segments {
                    let mut dot = S::zero();
                    for i in seg.clone() {
                        dot += gv[i] * y[i];
                    }
                    for i in seg.clone() {
                        out[i] = y[i] * (gv[i] - dot);
                    }
                }
                let out = Tensor::new(y.len(), 1, out).expect("softmax grad shape");
                self.accumulate(grads, x, out);
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in &parts {
                    let (rows, cols) = self.value(p).shape();
                    if self.requires(p) {
                        let mut part = Tensor::zeros(rows, cols);
                        part.values_mut()
                            .copy_from_slice(&g.values()[offset * cols..(offset + rows) * cols]);
                        self.accumulate(grads, p, part);
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols { parts } => {
                let total_cols = self.nodes[id].value.cols();
                let mut offset = 0;
                for &p in &parts {
                    let (rows, cols) = self.value(p).shape();
                    if self.requires(p) {
                        let mut part = Tensor::zeros(rows, cols);
                        for r in 0..rows {
                            part.values_mut()[r * cols..(r + 1) * cols].copy_from_slice(
                                &g.values()[r * total_cols + offset..r * total_cols + offset + cols],
                            );
                        }
                        self.accumulate(grads, p, part);
                    }
                    offset += cols;
                }
            }
            Op::Block { x, rows, cols } => {
                let (xr, xc) = self.value(x).shape();
                let mut out = Tensor::zeros(xr, xc);
                for (ro, ri) in rows.clone().enumerate() {
                    out.values_mut()[ri * xc + cols.start..ri * xc + cols.end]
                        .copy_from_slice(g.row(ro));
                }
                self.accumulate(grads, x, out);
            }
        }
    }
}

fn binop_name(kind: BinKind) -> &'static str {
    match kind {
        BinKind::Add => "add",
        BinKind::Sub => "sub",
        BinKind::Mul => "mul",
        BinKind::Div => "div",
    }
}

#[inline]
fn broadcast_get<S: Scalar>(b: &Tensor<S>, broadcast: Broadcast, r: usize, c: usize) -> S {
    match broadcast {
        Broadcast::Same => b.get(r, c),
        Broadcast::Row => b.get(0, c),
        Broadcast::Col => b.get(r, 0),
        Broadcast::Scalar => b.get(0, 0),
    }
}

fn binary_forward<S: Scalar>(
    kind: BinKind,
    a: &Tensor<S>,
    b: &Tensor<S>,
    broadcast: Broadcast,
) -> Tensor<S> {
    let (rows, cols) = a.shape();
    let mut out = a.clone();
    for r in 0..rows {
        for c in 0..cols {
            let bi = broadcast_get(b, broadcast, r, c);
            let o = &mut out.values_mut()[r * cols + c];
            *o = match kind {
                BinKind::Add => *o + bi,
                BinKind::Sub => *o - bi,
                BinKind::Mul => *o * bi,
                BinKind::Div => *o / bi,
            };
        }
    }
    out
}

/// Applies `f(g, broadcast(b))` entry-wise at the lhs shape.
fn zip_broadcast<S: Scalar>(
    g: &Tensor<S>,
    b: &Tensor<S>,
    broadcast: Broadcast,
    f: impl Fn(S, S) -> S,
) -> Tensor<S> {
    let (rows, cols) = g.shape();
    let mut out = g.clone();
    for r in 0..rows {
        for c in 0..cols {
            let o = &mut out.values_mut()[r * cols + c];
            *o = f(*o, broadcast_get(b, broadcast, r, c));
        }
    }
    out
}

/// Sums a full-shape gradient down to the broadcast operand's shape.
fn reduce_broadcast<S: Scalar>(
    full: &Tensor<S>,
    target: (usize, usize),
    broadcast: Broadcast,
) -> Tensor<S> {
    let (rows, cols) = full.shape();
    match broadcast {
        Broadcast::Same => full.clone(),
        Broadcast::Scalar => Tensor::scalar(full.values().iter().copied().sum()),
        Broadcast::Row => {
            let mut out = Tensor::zeros(1, target.1);
            for r in 0..rows {
                for c in 0..cols {
                    out.values_mut()[c] += full.get(r, c);
                }
            }
            out
        }
        Broadcast::Col => {
            let mut out = Tensor::zeros(target.0, 1);
            for r in 0..rows {
                out.values_mut()[r] = full.row(r).iter().copied().sum();
            }
            out
        }
    }
}

fn matmul_nn<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, k) = a.shape();
    let n = b.cols();
    let mut out = Tensor::zeros(m, n);
    let av = a.values();
    let bv = b.values();
    let ov = out.values_mut();
    for i in 0..m {
        for kk in 0..k {
            let aik = av[i * k + kk];
            if aik == S::zero() {
                continue;
            }
            let brow = &bv[kk * n..(kk + 1) * n];
            let orow = &mut ov[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    out
}

/// `a @ b^T` without materializing the transpose.
fn matmul_nt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, k) = a.shape();
    let n = b.rows();
    debug_assert_eq!(b.cols(), k);
    let mut out = Tensor::zeros(m, n);
    let av = a.values();
    let bv = b.values();
    let ov = out.values_mut();
    for i in 0..m {
        let arow = &av[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bv[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            ov[i * n + j] = acc;
        }
    }
    out
}

/// `a^T @ b` without materializing the transpose.
fn matmul_tn<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, k) = a.shape();
    let n = b.cols();
    debug_assert_eq!(b.rows(), m);
    let mut out = Tensor::zeros(k, n);
    let av = a.values();
    let bv = b.values();
    let ov = out.values_mut();
    for r in 0..m {
        let brow = &bv[r * n..(r + 1) * n];
        for i in 0..k {
            let ari = av[r * k + i];
            if ari == S::zero() {
                continue;
            }
            let orow = &mut ov[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += ari * brow[j];
            }
        }
    }
    out
}
