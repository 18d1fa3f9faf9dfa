//! JSON graph manifest: a self-contained mirror of the HGB layout, used for
//! synthetic fixtures and reproducible experiment inputs.

use crate::graph::{
    Edge, EdgeSignature, FeatureRegime, HeteroGraph, Labels, Splits,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported manifest version {0}")]
    Version(u32),
    #[error("feature matrix for type {0} is ragged")]
    RaggedFeatures(usize),
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeTypeDoc {
    name: String,
    count: usize,
    /// Row-major `count x dim` features; absent means one-hot identity.
    features: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EdgeTypeDoc {
    name: String,
    src_type: usize,
    dst_type: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestDoc {
    version: u32,
    node_types: Vec<NodeTypeDoc>,
    edge_types: Vec<EdgeTypeDoc>,
    /// Triples (src, dst, edge_type).
    edges: Vec<(usize, usize, usize)>,
    target_type: usize,
    labels: Labels,
    splits: Splits,
    feature_regime: u8,
}

/// Serializes a graph (features converted to `f64`) to a JSON manifest.
pub fn save_manifest<S: Scalar>(
    g: &HeteroGraph<S>,
    path: impl AsRef<Path>,
) -> Result<(), ManifestError> {
    let path = path.as_ref();
    let doc = ManifestDoc {
        version: MANIFEST_VERSION,
        node_types: (0..g.n_types())
            .map(|t| NodeTypeDoc {
                name: g.node_type_names[t].clone(),
                count: g.type_counts[t],
                features: Some(
                    (0..g.features[t].rows())
                        .map(|r| g.features[t].row(r).iter().map(|v| v.to_f64_lossy()).collect())
                        .collect(),
                ),
            })
            .collect(),
        edge_types: g
            .edge_signatures
            .iter()
            .enumerate()
            .map(|(i, sig)| EdgeTypeDoc {
                name: g.edge_type_names[i].clone(),
                src_type: sig.src_type,
                dst_type: sig.dst_type,
            })
            .collect(),
        edges: g.edges.iter().map(|e| (e.src, e.dst, e.edge_type)).collect(),
        target_type: g.target_type,
        labels: g.labels.clone(),
        splits: g.splits.clone(),
        feature_regime: g.feature_regime.as_u8(),
    };
    let json = serde_json::to_string(&doc)
        .map_err(|source| ManifestError::Json { path: path.display().to_string(), source })?;
    std::fs::write(path, json)
        .map_err(|source| ManifestError::Io { path: path.display().to_string(), source })
}

/// Loads and validates a graph from a JSON manifest.
pub fn load_manifest<S: Scalar>(path: impl AsRef<Path>) -> Result<HeteroGraph<S>, ManifestError> {
    let path = path.as_ref();
    let raw = std::fs::read_to_string(path)
        .map_err(|source| ManifestError::Io { path: path.display().to_string(), source })?;
    let doc: ManifestDoc = serde_json::from_str(&raw)
        .map_err(|source| ManifestError::Json { path: path.display().to_string(), source })?;
    if doc.version != MANIFEST_VERSION {
        return Err(ManifestError::Version(doc.version));
    }

    let mut features = Vec::with_capacity(doc.node_types.len());
    for (t, nt) in doc.node_types.iter().enumerate() {
        match &nt.features {
            None => features.push(Tensor::eye(nt.count)),
            Some(rows) => {
                let dim = rows.first().map_or(0, Vec::len);
                if rows.len() != nt.count || rows.iter().any(|r| r.len() != dim) {
                    return Err(ManifestError::RaggedFeatures(t));
                }
                let mut values = Vec::with_capacity(nt.count * dim);
                for row in rows {
                    values.extend(row.iter().map(|&v| S::from_f64_lossy(v)));
                }
                features.push(Tensor::new(nt.count, dim, values).expect("manifest feature shape"));
            }
        }
    }

    let regime = FeatureRegime::from_u8(doc.feature_regime).unwrap_or(FeatureRegime::AllGiven);
    let graph = HeteroGraph {
        node_type_names: doc.node_types.iter().map(|nt| nt.name.clone()).collect(),
        type_counts: doc.node_types.iter().map(|nt| nt.count).collect(),
        edges: doc
            .edges
            .iter()
            .map(|&(src, dst, edge_type)| Edge { src, dst, edge_type })
            .collect(),
        edge_signatures: doc
            .edge_types
            .iter()
            .map(|et| EdgeSignature { src_type: et.src_type, dst_type: et.dst_type })
            .collect(),
        edge_type_names: doc.edge_types.iter().map(|et| et.name.clone()).collect(),
        features,
        target_type: doc.target_type,
        labels: doc.labels,
        splits: doc.splits,
        feature_regime: regime,
    };
    graph.validate()?;
    Ok(graph)
}
