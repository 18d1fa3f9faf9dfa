//! Error-link injection: rewires edge destinations while preserving types.

use crate::graph::HeteroGraph;
use crate::scalar::Scalar;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("noise ratio {0} outside [0, 1]")]
    BadRatio(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Fraction of edges to corrupt.
    pub ratio: f64,
    pub seed: u64,
}

/// One rewired edge, for audit exports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewiredEdge {
    pub edge_index: usize,
    pub src: usize,
    pub old_dst: usize,
    pub new_dst: usize,
    pub edge_type: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub requested: usize,
    pub rewired: Vec<RewiredEdge>,
    /// How many of the requested corruptions could not be performed because
    /// every remaining edge had a single destination candidate.
    pub shortfall: usize,
}

/// Rewires the destination of exactly `floor(ratio * M)` edges, selected
/// uniformly without replacement. The new destination is drawn uniformly
/// from nodes of the edge type's destination type, excluding the current
/// destination, so every corrupted edge still satisfies its signature and
/// the source endpoints are untouched. Edges whose destination type has a
/// single node cannot be modified; they are skipped and another edge is
/// drawn. Deterministic under `cfg.seed`.
pub fn inject_error_links<S: Scalar>(
    g: &HeteroGraph<S>,
    cfg: &NoiseConfig,
) -> Result<(HeteroGraph<S>, NoiseReport), NoiseError> {
    if !(0.0..=1.0).contains(&cfg.ratio) {
        return Err(NoiseError::BadRatio(cfg.ratio));
    }
    let mut out = g.clone();
    let m = g.n_edges();
    let quota = ((cfg.ratio * m as f64).floor()) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng);

    let mut rewired = Vec::with_capacity(quota);
    for &edge_index in &order {
        if rewired.len() == quota {
            break;
        }
        let edge = out.edges[edge_index];
        let dst_type = g.edge_signatures[edge.edge_type].dst_type;
        let range = g.type_range(dst_type);
        if range.len() < 2 {
            continue;
        }
        // Uniform over the destination type minus the current destination:
        // draw from a range one short and shift past the excluded slot.
        let current_local = edge.dst - range.start;
        let mut pick = rng.gen_range(0..range.len() - 1);
        if pick >= current_local {
            pick += 1;
        }
        let new_dst = range.start + pick;
        out.edges[edge_index].dst = new_dst;
        rewired.push(RewiredEdge {
            edge_index,
            src: edge.src,
            old_dst: edge.dst,
            new_dst,
            edge_type: edge.edge_type,
        });
    }
    let shortfall = quota - rewired.len();
    Ok((out, NoiseReport { requested: quota, rewired, shortfall }))
}
