//! Seeded synthetic graphs and toy datasets for tests, benchmarks and smoke
//! runs.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{FeatureMatrix, LabelVector, SparseGraph, SplitSpec};

/// Erdos-Renyi G(n, p), undirected, no self loops.
pub fn er_graph(n: usize, p: f64, seed: u64) -> SparseGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.random::<f64>() < p {
                edges.push((u, v, 1.0));
            }
        }
    }
    SparseGraph::from_edges(n, &edges).expect("synthetic edges are in range")
}

/// Two-block stochastic block model with dense intra-block and sparse
/// inter-block connectivity. Nodes < n/2 form block 0.
pub fn sbm_two_block(n: usize, p_in: f64, p_out: f64, seed: u64) -> SparseGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = n / 2;
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if (u < half) == (v < half) {
                p_in
            } else {
                p_out
            };
            if rng.random::<f64>() < p {
                edges.push((u, v, 1.0));
            }
        }
    }
    SparseGraph::from_edges(n, &edges).expect("synthetic edges are in range")
}

/// Block-informative features: block 0 leans on the first d/2 dimensions,
/// block 1 on the rest, plus uniform noise.
pub fn sbm_features(n: usize, d: usize, noise: f64, seed: u64) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = n / 2;
    let mut values = vec![0.0; n * d];
    for i in 0..n {
        let lo = if i < half { 0 } else { d / 2 };
        let hi = if i < half { d / 2 } else { d };
        for j in 0..d {
            let base = if j >= lo && j < hi { 1.0 } else { 0.0 };
            values[i * d + j] = base + noise * rng.random::<f64>();
        }
    }
    FeatureMatrix::new(n, d, values).expect("finite synthetic features")
}

/// Labels matching the two SBM blocks.
pub fn sbm_labels(n: usize) -> LabelVector {
    let half = n / 2;
    let labels = (0..n).map(|i| if i < half { 0 } else { 1 }).collect();
    LabelVector::new(labels, 2).expect("two classes")
}

/// Every-third-node split over labeled nodes: train, val, test interleaved.
pub fn interleaved_split(n: usize) -> SplitSpec {
    let mut split = SplitSpec {
        train_ids: Vec::new(),
        val_ids: Vec::new(),
        test_ids: Vec::new(),
    };
    for i in 0..n {
        match i % 3 {
            0 => split.train_ids.push(i),
            1 => split.val_ids.push(i),
            _ => split.test_ids.push(i),
        }
    }
    split
}

/// Writes a complete toy dataset (graph, features, labels, splits) under
/// `dir` and returns the file paths (graph, features, labels, splits dir).
pub fn write_toy_dataset(
    dir: &std::path::Path,
    n: usize,
    seed: u64,
) -> crate::error::Result<(
    std::path::PathBuf,
    std::path::PathBuf,
    std::path::PathBuf,
    std::path::PathBuf,
)> {
    use crate::error::Error;
    let write_err = |p: &std::path::Path, e: std::io::Error| Error::io(p.display().to_string(), e);

    let g = sbm_two_block(n, 0.4, 0.05, seed);
    let xs = sbm_features(n, 16, 0.3, seed.wrapping_add(1));
    let labels = sbm_labels(n);
    let split = interleaved_split(n);

    let graph_path = dir.join("graph.tsv");
    g.save_edge_list(&graph_path, &[])?;
    let feat_path = dir.join("features.bin");
    xs.save_binary(&feat_path)?;
    let labels_path = dir.join("labels.tsv");
    let mut text = String::new();
    for (i, &l) in labels.labels().iter().enumerate() {
        if l >= 0 {
            text.push_str(&format!("{i}\t{l}\n"));
        }
    }
    std::fs::write(&labels_path, text).map_err(|e| write_err(&labels_path, e))?;
    let splits_dir = dir.join("splits");
    std::fs::create_dir_all(&splits_dir).map_err(|e| write_err(&splits_dir, e))?;
    for (name, ids) in [
        ("train.txt", &split.train_ids),
        ("val.txt", &split.val_ids),
        ("test.txt", &split.test_ids),
    ] {
        let p = splits_dir.join(name);
        let body = ids
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join("\n");
        std::fs::write(&p, body + "\n").map_err(|e| write_err(&p, e))?;
    }
    Ok((graph_path, feat_path, labels_path, splits_dir))
}
