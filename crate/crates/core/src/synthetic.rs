//! Planted-class synthetic heterogeneous graphs for desk-scale experiments.

use crate::graph::{Edge, EdgeSignature, FeatureRegime, HeteroGraph, Labels, Splits};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

fn default_train_frac() -> f64 {
    0.3
}

fn default_val_frac() -> f64 {
    0.1
}

/// Configuration for [`generate`].
///
/// Targets get class-conditioned Gaussian features around random unit class
/// means. Each auxiliary node is assigned a dominant class and links to every
/// target node independently: with `intra_class_link_prob` when the target
/// shares its dominant class, with `inter_class_link_prob` otherwise. Each
/// link is realized as a directed edge pair (target->aux plus aux->target),
/// mirroring how benchmark datasets store relations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_target: usize,
    /// Node count per auxiliary type; the vector length sets the type count.
    pub n_aux: Vec<usize>,
    pub classes: usize,
    pub intra_class_link_prob: f64,
    pub inter_class_link_prob: f64,
    pub feature_dim: usize,
    /// Standard deviation of the Gaussian feature noise around class means.
    pub feature_noise: f64,
    pub seed: u64,
    #[serde(default = "default_train_frac")]
    pub train_frac: f64,
    #[serde(default = "default_val_frac")]
    pub val_frac: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_target: 200,
            n_aux: vec![100, 100],
            classes: 4,
            intra_class_link_prob: 0.05,
            inter_class_link_prob: 0.0,
            feature_dim: 16,
            feature_noise: 0.3,
            seed: 0,
            train_frac: default_train_frac(),
            val_frac: default_val_frac(),
        }
    }
}

/// Deterministic under `cfg.seed`: class means, features, links, and splits
/// all draw from one seeded stream in a fixed order.
pub fn generate<S: Scalar>(cfg: &SyntheticConfig) -> HeteroGraph<S> {
    assert!(cfg.classes > 0 && cfg.n_target > 0 && cfg.feature_dim > 0);
    assert!((0.0..=1.0).contains(&cfg.intra_class_link_prob));
    assert!((0.0..=1.0).contains(&cfg.inter_class_link_prob));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Random unit class means.
    let mut means = Vec::with_capacity(cfg.classes);
    for _ in 0..cfg.classes {
        let mut v: Vec<f64> = (0..cfg.feature_dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= norm);
        means.push(v);
    }

    let class_of_target: Vec<usize> = (0..cfg.n_target).map(|i| i % cfg.classes).collect();
    let gaussian_features = |rng: &mut ChaCha8Rng, classes: &[usize]| -> Tensor<S> {
        let mut values = Vec::with_capacity(classes.len() * cfg.feature_dim);
        for &c in classes {
            for d in 0..cfg.feature_dim {
                let noise: f64 = rng.sample(StandardNormal);
                values.push(S::from_f64_lossy(means[c][d] + cfg.feature_noise * noise));
            }
        }
        Tensor::new(classes.len(), cfg.feature_dim, values).expect("feature shape")
    };

    let target_features = gaussian_features(&mut rng, &class_of_target);

    let mut node_type_names = vec!["target".to_string()];
    let mut type_counts = vec![cfg.n_target];
    let mut features = vec![target_features];
    let mut edge_signatures = Vec::new();
    let mut edge_type_names = Vec::new();
    let mut aux_classes: Vec<Vec<usize>> = Vec::new();

    for (a, &count) in cfg.n_aux.iter().enumerate() {
        let type_idx = 1 + a;
        node_type_names.push(format!("aux{a}"));
        type_counts.push(count);
        let classes: Vec<usize> = (0..count).map(|j| j % cfg.classes).collect();
        features.push(gaussian_features(&mut rng, &classes));
        aux_classes.push(classes);
        edge_signatures.push(EdgeSignature { src_type: 0, dst_type: type_idx });
        edge_type_names.push(format!("target-aux{a}"));
        edge_signatures.push(EdgeSignature { src_type: type_idx, dst_type: 0 });
        edge_type_names.push(format!("aux{a}-target"));
    }

    let mut edges = Vec::new();
    let mut aux_offset = cfg.n_target;
    for (a, &count) in cfg.n_aux.iter().enumerate() {
        for j in 0..count {
            let dominant = aux_classes[a][j];
            for t in 0..cfg.n_target {
                let p = if class_of_target[t] == dominant {
                    cfg.intra_class_link_prob
                } else {
                    cfg.inter_class_link_prob
                };
                if rng.gen::<f64>() < p {
                    edges.push(Edge { src: t, dst: aux_offset + j, edge_type: 2 * a });
                    edges.push(Edge { src: aux_offset + j, dst: t, edge_type: 2 * a + 1 });
                }
            }
        }
        aux_offset += count;
    }

    let mut order: Vec<usize> = (0..cfg.n_target).collect();
    order.shuffle(&mut rng);
    let n_train = ((cfg.n_target as f64) * cfg.train_frac).round() as usize;
    let n_val = ((cfg.n_target as f64) * cfg.val_frac).round() as usize;
    let splits = Splits {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    };

    let g = HeteroGraph {
        node_type_names,
        type_counts,
        edges,
        edge_signatures,
        edge_type_names,
        features,
        target_type: 0,
        labels: Labels::Single {
            classes: cfg.classes,
            of: class_of_target.iter().map(|&c| Some(c)).collect(),
        },
        splits,
        feature_regime: FeatureRegime::AllGiven,
    };
    debug_assert!(g.validate().is_ok());
    g
}

/// Default metapath for synthetic graphs: target -> aux_a -> target.
pub fn metapath_via_aux(aux_type: usize) -> crate::graph::MetapathSpec {
    crate::graph::MetapathSpec::new(vec![2 * aux_type, 2 * aux_type + 1])
}
