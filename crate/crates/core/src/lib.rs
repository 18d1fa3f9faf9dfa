//! Noise-robust node classification on heterogeneous graphs.
//!
//! Real heterogeneous graphs accumulate error links: edges whose destination
//! points at the wrong node of the right type. This crate implements a full
//! training pipeline that is robust to such corruption:
//!
//! 1. [`synthesizer`] builds a weighted kNN *similarity graph* from node
//!    features alone, so its structure is untouched by link errors.
//! 2. [`encoder`] embeds both the noised graph and the similarity graph with
//!    a shared multi-head attention encoder; on the similarity branch the
//!    attention is rescaled by edge similarity, cutting message passing on
//!    dissimilar pairs.
//! 3. [`training`] jointly optimizes classification losses on both branches
//!    plus a contrastive loss between the metapath graph (extracted from the
//!    noised structure) and the target block of the similarity graph.
//!
//! Everything trains through the crate's own reverse-mode engine ([`tape`]),
//! which records dense-matrix ops and replays them backwards. Core math is
//! generic over the scalar type via [`scalar::Scalar`]; the aliases below fix
//! the common instantiations. Training defaults to `f64` so gradient checks
//! stay tight.

pub mod encoder;
pub mod gradcheck;
pub mod graph;
pub mod hgb;
pub mod manifest;
pub mod metrics;
pub mod noise;
pub mod optim;
pub mod scalar;
pub mod synthesizer;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod training;

pub use scalar::Scalar;
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;

/// Double-precision tensor, the default for training and gradient checks.
pub type Tensor64 = tensor::Tensor<f64>;
/// Single-precision tensor.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision computation record.
pub type Tape64 = tape::Tape<f64>;
/// Double-precision heterogeneous graph.
pub type HeteroGraph64 = graph::HeteroGraph<f64>;
