//! Loader for the HGB text layout.
//!
//! Expected files in a dataset directory, all tab-separated:
//!
//! - `node.dat`:  `node_id  name  type [ features]` with features as a
//!   comma-separated list; a type either has features on every row or none.
//! - `link.dat`:  `src  dst  type  weight` (weights are parsed and ignored;
//!   the model treats structural edges as binary).
//! - `label.dat.train` / `label.dat.test`:  `node_id  name  type  classes`
//!   with comma-separated class ids; more than one class id anywhere makes
//!   the dataset multi-label.
//!
//! Node ids must be contiguous and partitioned by numeric type id. Types
//! without given features receive one-hot identity features.

use crate::graph::{
    Edge, EdgeSignature, FeatureRegime, HeteroGraph, Labels, Splits,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HgbError {
    #[error("{file}: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {message}")]
    Parse { file: String, line: usize, message: String },
    #[error("node ids are not contiguous and partitioned by type (type {node_type})")]
    NotPartitioned { node_type: usize },
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
}

fn parse_err(file: &str, line: usize, message: impl Into<String>) -> HgbError {
    HgbError::Parse { file: file.to_string(), line, message: message.into() }
}

struct NodeRow {
    id: usize,
    node_type: usize,
    features: Option<Vec<f64>>,
}

fn read_lines(path: &Path, file: &str) -> Result<Vec<String>, HgbError> {
    let f = File::open(path).map_err(|source| HgbError::Io { file: file.to_string(), source })?;
    BufReader::new(f)
        .lines()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|source| HgbError::Io { file: file.to_string(), source })
}

fn parse_usize(field: &str, file: &str, line: usize, what: &str) -> Result<usize, HgbError> {
    field
        .trim()
        .parse::<usize>()
        .map_err(|_| parse_err(file, line, format!("invalid {what}: {field:?}")))
}

/// Loads and validates a heterogeneous graph from an HGB-layout directory.
/// The labeled training pool is split 80/20 into train/validation with a
/// fixed seed; callers re-split per run seed.
pub fn load_hgb<S: Scalar>(dir: impl AsRef<Path>) -> Result<HeteroGraph<S>, HgbError> {
    let dir = dir.as_ref();

    // node.dat
    let file = "node.dat";
    let mut rows = Vec::new();
    for (i, raw) in read_lines(&dir.join(file), file)?.iter().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() < 3 {
            return Err(parse_err(file, line, "expected node_id, name, type[, features]"));
        }
        let id = parse_usize(fields[0], file, line, "node id")?;
        let node_type = parse_usize(fields[2], file, line, "node type")?;
        let features = if fields.len() > 3 && !fields[3].trim().is_empty() {
            let vals = fields[3]
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| parse_err(file, line, format!("invalid feature value {v:?}")))
                })
                .collect::<Result<Vec<f64>, _>>()?;
            Some(vals)
        } else {
            None
        };
        rows.push(NodeRow { id, node_type, features });
    }
    if rows.is_empty() {
        return Err(parse_err(file, 0, "no nodes"));
    }

    let n_types = rows.iter().map(|r| r.node_type).max().unwrap() + 1;
    let mut by_type: Vec<BTreeMap<usize, Option<Vec<f64>>>> = vec![BTreeMap::new(); n_types];
    for r in rows {
        by_type[r.node_type].insert(r.id, r.features);
    }

    // Ids must be contiguous and partitioned in type order.
    let mut type_counts = Vec::with_capacity(n_types);
    let mut offset = 0usize;
    let mut features: Vec<Tensor<S>> = Vec::with_capacity(n_types);
    let mut all_featured = true;
    let mut featured = vec![false; n_types];
    for (t, nodes) in by_type.iter().enumerate() {
        let count = nodes.len();
        for (expected, (&id, _)) in nodes.iter().enumerate() {
            if id != offset + expected {
                return Err(HgbError::NotPartitioned { node_type: t });
            }
        }
        let dims: Vec<Option<usize>> = nodes.values().map(|f| f.as_ref().map(Vec::len)).collect();
        let first_dim = dims.first().copied().flatten();
        if dims.iter().any(|d| *d != first_dim) {
            return Err(parse_err(
                file,
                0,
                format!("type {t} mixes featured and unfeatured nodes or feature dims differ"),
            ));
        }
        match first_dim {
            Some(d) if count > 0 => {
                let mut values = Vec::with_capacity(count * d);
                for f in nodes.values() {
                    values.extend(f.as_ref().unwrap().iter().map(|&v| S::from_f64_lossy(v)));
                }
                features.push(Tensor::new(count, d, values).expect("feature shape"));
                featured[t] = true;
            }
            _ => {
                features.push(Tensor::eye(count));
                all_featured = false;
            }
        }
        type_counts.push(count);
        offset += count;
    }
    let n_nodes = offset;

    // link.dat
    let file = "link.dat";
    let mut edges = Vec::new();
    let mut signatures: BTreeMap<usize, EdgeSignature> = BTreeMap::new();
    let type_of = |id: usize| -> usize {
        let mut acc = 0;
        for (t, &c) in type_counts.iter().enumerate() {
            acc += c;
            if id < acc {
                return t;
            }
        }
        unreachable!()
    };
    for (i, raw) in read_lines(&dir.join(file), file)?.iter().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() < 3 {
            return Err(parse_err(file, line, "expected src, dst, type[, weight]"));
        }
        let src = parse_usize(fields[0], file, line, "source id")?;
        let dst = parse_usize(fields[1], file, line, "destination id")?;
        let edge_type = parse_usize(fields[2], file, line, "edge type")?;
        if src >= n_nodes {
            return Err(parse_err(file, line, format!("source id {src} references unknown node")));
        }
        if dst >= n_nodes {
            return Err(parse_err(file, line, format!("destination id {dst} references unknown node")));
        }
        let sig = EdgeSignature { src_type: type_of(src), dst_type: type_of(dst) };
        match signatures.get(&edge_type) {
            None => {
                signatures.insert(edge_type, sig);
            }
            Some(existing) if *existing != sig => {
                return Err(parse_err(
                    file,
                    line,
                    format!("edge type {edge_type} endpoints conflict with earlier rows"),
                ));
            }
            _ => {}
        }
        edges.push(Edge { src, dst, edge_type });
    }
    let n_edge_types = signatures.keys().max().map_or(0, |&m| m + 1);
    let mut edge_signatures = Vec::with_capacity(n_edge_types);
    for ty in 0..n_edge_types {
        match signatures.get(&ty) {
            Some(&sig) => edge_signatures.push(sig),
            // Unused edge type id: give it a harmless self-signature.
            None => edge_signatures.push(EdgeSignature { src_type: 0, dst_type: 0 }),
        }
    }

    // label.dat.train / label.dat.test
    let mut target_type: Option<usize> = None;
    let mut max_class = 0usize;
    let mut multi = false;
    let mut read_labels = |file: &'static str| -> Result<Vec<(usize, Vec<usize>)>, HgbError> {
        let mut out = Vec::new();
        for (i, raw) in read_lines(&dir.join(file), file)?.iter().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = raw.split('\t').collect();
            if fields.len() < 4 {
                return Err(parse_err(file, line, "expected node_id, name, type, classes"));
            }
            let id = parse_usize(fields[0], file, line, "node id")?;
            if id >= n_nodes {
                return Err(parse_err(file, line, format!("label references unknown node {id}")));
            }
            let node_type = parse_usize(fields[2], file, line, "node type")?;
            match target_type {
                None => target_type = Some(node_type),
                Some(t) if t != node_type => {
                    return Err(parse_err(file, line, "labels span more than one node type"));
                }
                _ => {}
            }
            let classes = fields[3]
                .split(',')
                .map(|c| parse_usize(c, file, line, "class id"))
                .collect::<Result<Vec<usize>, _>>()?;
            if classes.is_empty() {
                return Err(parse_err(file, line, "empty class list"));
            }
            if classes.len() > 1 {
                multi = true;
            }
            max_class = max_class.max(*classes.iter().max().unwrap());
            out.push((id, classes));
        }
        Ok(out)
    };
    let train_rows = read_labels("label.dat.train")?;
    let test_rows = read_labels("label.dat.test")?;
    let target_type = target_type
        .ok_or_else(|| parse_err("label.dat.train", 0, "no labeled nodes"))?;
    let classes = max_class + 1;

    let target_offset: usize = type_counts[..target_type].iter().sum();
    let n_target = type_counts[target_type];
    let to_local = |id: usize, file: &str| -> Result<usize, HgbError> {
        if id < target_offset || id >= target_offset + n_target {
            return Err(parse_err(file, 0, format!("labeled node {id} is not of the target type")));
        }
        Ok(id - target_offset)
    };

    let labels = if multi {
        let mut of: Vec<Option<Vec<bool>>> = vec![None; n_target];
        for (id, cls) in train_rows.iter().chain(&test_rows) {
            let mut hot = vec![false; classes];
            for &c in cls {
                hot[c] = true;
            }
            of[to_local(*id, "label.dat")?] = Some(hot);
        }
        Labels::Multi { classes, of }
    } else {
        let mut of: Vec<Option<usize>> = vec![None; n_target];
        for (id, cls) in train_rows.iter().chain(&test_rows) {
            of[to_local(*id, "label.dat")?] = Some(cls[0]);
        }
        Labels::Single { classes, of }
    };

    let feature_regime = if all_featured {
        FeatureRegime::AllGiven
    } else if featured[target_type] {
        FeatureRegime::TargetOnly
    } else {
        FeatureRegime::OneHot
    };

    let mut graph = HeteroGraph {
        node_type_names: (0..n_types).map(|t| format!("type{t}")).collect(),
        type_counts,
        edges,
        edge_signatures,
        edge_type_names: (0..n_edge_types).map(|t| format!("edge{t}")).collect(),
        features,
        target_type,
        labels,
        splits: Splits {
            train: train_rows
                .iter()
                .map(|(id, _)| to_local(*id, "label.dat.train"))
                .collect::<Result<_, _>>()?,
            val: Vec::new(),
            test: test_rows
                .iter()
                .map(|(id, _)| to_local(*id, "label.dat.test"))
                .collect::<Result<_, _>>()?,
        },
        feature_regime,
    };
    graph.resplit_train_val(0.8, 0);
    graph.validate()?;
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write_fixture(dir: &Path, node: &str, link: &str, train: &str, test: &str) {
        fs::write(dir.join("node.dat"), node).unwrap();
        fs::write(dir.join("link.dat"), link).unwrap();
        fs::write(dir.join("label.dat.train"), train).unwrap();
        fs::write(dir.join("label.dat.test"), test).unwrap();
    }

    #[test]
    fn minimal_fixture_loads_as_written() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(
            dir.path(),
            "0\ta0\t0\t0.5,1.0\n1\ta1\t0\t0.25,0.75\n2\tp0\t1\n",
            "0\t2\t0\t1.0\n1\t2\t0\t1.0\n2\t0\t1\t1.0\n",
            "0\ta0\t0\t1\n",
            "1\ta1\t0\t0\n",
        );
        let g: HeteroGraph<f64> = load_hgb(dir.path()).unwrap();
        assert_eq!(g.n_nodes(), 3);
        assert_eq!(g.type_counts, vec![2, 1]);
        assert_eq!(g.n_edges(), 3);
        assert_eq!(g.edge_signatures.len(), 2);
        assert_eq!(g.edge_signatures[0], EdgeSignature { src_type: 0, dst_type: 1 });
        assert_eq!(g.edge_signatures[1], EdgeSignature { src_type: 1, dst_type: 0 });
        assert_eq!(g.target_type, 0);
        assert_eq!(g.labels.classes(), 2);
        // Paper node had no features: identity standin, regime TargetOnly.
        assert_eq!(g.feature_regime, FeatureRegime::TargetOnly);
        assert_eq!(g.features[1].shape(), (1, 1));
        assert_eq!(g.features[0].get(1, 1), 0.75);
        assert_eq!(g.splits.test, vec![1]);
    }

    #[test]
    fn dangling_edge_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(
            dir.path(),
            "0\ta0\t0\t1.0\n1\tp0\t1\t1.0\n",
            "0\t1\t0\t1.0\n0\t9\t0\t1.0\n",
            "0\ta0\t0\t0\n",
            "0\ta0\t0\t0\n",
        );
        let err = load_hgb::<f64>(dir.path()).unwrap_err();
        match err {
            HgbError::Parse { file, line, message } => {
                assert_eq!(file, "link.dat");
                assert_eq!(line, 2);
                assert!(message.contains('9'));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("node.dat"), "0\ta\t0\t1.0\n").unwrap();
        assert!(matches!(load_hgb::<f64>(dir.path()), Err(HgbError::Io { .. })));
    }

    #[test]
    fn multi_label_rows_yield_multi_hot() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(
            dir.path(),
            "0\tm0\t0\t1.0\n1\tm1\t0\t2.0\n2\td0\t1\t3.0\n",
            "0\t2\t0\t1.0\n",
            "0\tm0\t0\t0,2\n",
            "1\tm1\t0\t1\n",
        );
        let g: HeteroGraph<f64> = load_hgb(dir.path()).unwrap();
        match &g.labels {
            Labels::Multi { classes, of } => {
                assert_eq!(*classes, 3);
                assert_eq!(of[0], Some(vec![true, false, true]));
                assert_eq!(of[1], Some(vec![false, true, false]));
            }
            other => panic!("expected multi labels, got {other:?}"),
        }
    }
}
