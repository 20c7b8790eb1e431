//! Neighborhood register, batch subgraph sampling and the stochastic
//! augmentations (edge dropout, feature dropout).

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::index::sample as index_sample;
use rand::Rng;

use crate::diffusion::ImportanceVector;
use crate::error::{Error, Result};
use crate::graph::{FeatureMatrix, SparseGraph};

/// Per-node table of the top-k most important neighbors, importance-sorted,
/// seed excluded, ties broken toward the lower id.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodRegister {
    n: usize,
    k: usize,
    entries: Vec<u32>,
}

impl NeighborhoodRegister {
    pub fn new(n: usize, k: usize, entries: Vec<u32>) -> Result<NeighborhoodRegister> {
        if entries.len() != n * k {
            return Err(Error::Validation(format!(
                "register entries length {} != n*k = {}",
                entries.len(),
                n * k
            )));
        }
        let reg = NeighborhoodRegister { n, k, entries };
        for i in 0..n {
            let row = reg.row(i);
            let mut seen = HashSet::with_capacity(k);
            for &id in row {
                if id as usize >= n {
                    return Err(Error::Validation(format!(
                        "register row {i} references node {id} >= n"
                    )));
                }
                if id as usize == i {
                    return Err(Error::Validation(format!(
                        "register row {i} contains its own seed"
                    )));
                }
                if !seen.insert(id) {
                    return Err(Error::Validation(format!(
                        "register row {i} repeats node {id}"
                    )));
                }
            }
        }
        Ok(reg)
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.entries[i * self.k..(i + 1) * self.k]
    }

    /// Binary format: magic "GZRG", u32 n, u32 k, then n*k u32 LE ids.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(12 + self.entries.len() * 4);
        buf.extend_from_slice(b"GZRG");
        buf.extend_from_slice(&(self.n as u32).to_le_bytes());
        buf.extend_from_slice(&(self.k as u32).to_le_bytes());
        for &id in &self.entries {
            buf.extend_from_slice(&id.to_le_bytes());
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<NeighborhoodRegister> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let path_str = path.display().to_string();
        if bytes.len() < 12 || &bytes[..4] != b"GZRG" {
            return Err(Error::Parse {
                path: path_str,
                line: 0,
                msg: "missing GZRG magic".into(),
            });
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let k = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() != 12 + 4 * n * k {
            return Err(Error::Parse {
                path: path_str,
                line: 0,
                msg: format!(
                    "register payload is {} bytes, expected {}",
                    bytes.len() - 12,
                    4 * n * k
                ),
            });
        }
        let entries = bytes[12..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        NeighborhoodRegister::new(n, k, entries)
    }
}

/// Builds the register from importance rows. Row i holds the k most important
/// nodes for seed i (seed excluded); equal importance resolves to the lower id.
pub fn build_register(rows: &[ImportanceVector], k: usize) -> Result<NeighborhoodRegister> {
    let n = rows.len();
    if n == 0 || k > n - 1 {
        return Err(Error::Validation(format!(
            "register needs k <= n-1, got k={k} with n={n}"
        )));
    }
    let mut entries = Vec::with_capacity(n * k);
    for (i, row) in rows.iter().enumerate() {
        if row.values.len() != n {
            return Err(Error::Validation(format!(
                "importance row {i} has length {}, expected {n}",
                row.values.len()
            )));
        }
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_unstable_by(|&a, &b| {
            row.values[b]
                .partial_cmp(&row.values[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        entries.extend(order[..k].iter().map(|&j| j as u32));
    }
    NeighborhoodRegister::new(n, k, entries)
}

/// Builds the register from a persisted (sparsified) diffused graph instead
/// of raw importance rows: per seed, stored neighbors rank by weight, and
/// rows shorter than k pad with the lowest-id remaining nodes (importance 0).
pub fn register_from_graph(g: &SparseGraph, k: usize) -> Result<NeighborhoodRegister> {
    let n = g.node_count();
    if n == 0 || k > n - 1 {
        return Err(Error::Validation(format!(
            "register needs k <= n-1, got k={k} with n={n}"
        )));
    }
    let mut entries = Vec::with_capacity(n * k);
    for i in 0..n {
        let (cols, ws) = g.neighbors(i);
        let mut ranked: Vec<(usize, f64)> = cols
            .iter()
            .zip(ws)
            .filter(|&(&v, _)| v != i)
            .map(|(&v, &w)| (v, w))
            .collect();
        ranked.sort_unstable_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        let mut row: Vec<u32> = ranked.iter().map(|&(v, _)| v as u32).collect();
        if row.len() < k {
            let mut used: HashSet<usize> = ranked.iter().map(|&(v, _)| v).collect();
            used.insert(i);
            for v in 0..n {
                if row.len() == k {
                    break;
                }
                if !used.contains(&v) {
                    row.push(v as u32);
                }
            }
        }
        entries.extend(row);
    }
    NeighborhoodRegister::new(n, k, entries)
}

/// Two congruent subgraph views over one sampled node set.
#[derive(Debug, Clone)]
pub struct BatchSample {
    /// Global ids of the B target nodes; their local indices are 0..B.
    pub targets: Vec<usize>,
    /// Global ids in local order: targets, then register neighbors, then fillers.
    pub node_set: Vec<usize>,
    /// Induced from the original graph.
    pub view1: SparseGraph,
    /// Induced from the sparsified diffused graph.
    pub view2: SparseGraph,
    /// Global id -> local position in `node_set`.
    pub local_index: HashMap<usize, usize>,
}

impl BatchSample {
    pub fn size(&self) -> usize {
        self.node_set.len()
    }
}

/// Uniform draw of `b` distinct targets; the same routine drives both batch
/// sampling and the coverage simulation.
pub fn draw_targets<R: Rng>(n: usize, b: usize, rng: &mut R) -> Vec<usize> {
    index_sample(rng, n, b).into_vec()
}

/// Draws B targets, pulls in their register rows, fills up to P nodes with
/// uniform non-core fillers, and induces both views over the shared node set.
pub fn sample_batch<R: Rng>(
    g: &SparseGraph,
    g_diff: &SparseGraph,
    register: &NeighborhoodRegister,
    b: usize,
    p: usize,
    rng: &mut R,
) -> Result<BatchSample> {
    let n = g.node_count();
    if g_diff.node_count() != n || register.node_count() != n {
        return Err(Error::Validation(format!(
            "node counts disagree: graph {n}, diffused {}, register {}",
            g_diff.node_count(),
            register.node_count()
        )));
    }
    if b == 0 || b > n {
        return Err(Error::Validation(format!(
            "need 1 <= B <= n, got B={b}, n={n}"
        )));
    }
    if p > n {
        return Err(Error::Validation(format!("need P <= n, got P={p}, n={n}")));
    }
    let targets = draw_targets(n, b, rng);

    let mut node_set = Vec::with_capacity(p);
    let mut in_set = vec![false; n];
    for &t in &targets {
        node_set.push(t);
        in_set[t] = true;
    }
    for &t in &targets {
        for &nb in register.row(t) {
            let nb = nb as usize;
            if !in_set[nb] {
                node_set.push(nb);
                in_set[nb] = true;
            }
        }
    }
    let core = node_set.len();
    if p < core {
        return Err(Error::Size(format!(
            "P={p} cannot hold the {core} targets-plus-neighbors of this batch; need P >= {core}"
        )));
    }
    let complement: Vec<usize> = (0..n).filter(|&v| !in_set[v]).collect();
    let fillers = index_sample(rng, complement.len(), p - core);
    for idx in fillers.iter() {
        node_set.push(complement[idx]);
    }

    let view1 = g.induced(&node_set)?;
    let view2 = g_diff.induced(&node_set)?;
    let local_index = node_set
        .iter()
        .enumerate()
        .map(|(li, &gi)| (gi, li))
        .collect();
    Ok(BatchSample {
        targets,
        node_set,
        view1,
        view2,
        local_index,
    })
}

/// Edge dropout outcome; `shortfall` flags a graph too dense to add back the
/// full removed count.
#[derive(Debug, Clone)]
pub struct EdgeDropout {
    pub graph: SparseGraph,
    pub removed: usize,
    pub added: usize,
    pub shortfall: bool,
}

/// Removes floor(p*E) undirected edges uniformly and adds the same number of
/// uniformly chosen new non-loop edges, keeping the edge count constant.
/// Added edges carry the mean weight of the removed ones.
pub fn edge_dropout<R: Rng>(view: &SparseGraph, p: f64, rng: &mut R) -> Result<EdgeDropout> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Validation(format!(
            "dropout fraction {p} outside [0,1]"
        )));
    }
    let n = view.node_count();
    let mut edges: Vec<(usize, usize, f64)> = Vec::new();
    for u in 0..n {
        let (cols, ws) = view.neighbors(u);
        for (&v, &w) in cols.iter().zip(ws) {
            if v >= u {
                edges.push((u, v, w));
            }
        }
    }
    let e_total = edges.len();
    let drop_count = (p * e_total as f64).floor() as usize;
    if drop_count == 0 {
        return Ok(EdgeDropout {
            graph: view.clone(),
            removed: 0,
            added: 0,
            shortfall: false,
        });
    }

    let drop_idx: HashSet<usize> = index_sample(rng, e_total, drop_count).into_iter().collect();
    let mut kept: Vec<(usize, usize, f64)> = Vec::with_capacity(e_total - drop_count);
    let mut removed_weight = 0.0;
    for (i, e) in edges.iter().enumerate() {
        if drop_idx.contains(&i) {
            removed_weight += e.2;
        } else {
            kept.push(*e);
        }
    }
    let new_weight = removed_weight / drop_count as f64;

    // Pairs never present in the input and not a self loop are eligible.
    let original_pairs: HashSet<(usize, usize)> = edges.iter().map(|&(u, v, _)| (u, v)).collect();
    let non_loop_originals = edges.iter().filter(|&&(u, v, _)| u != v).count();
    let complement_size = n * (n - 1) / 2 - non_loop_originals;
    let need = drop_count.min(complement_size);
    let shortfall = need < drop_count;

    let mut added = Vec::with_capacity(need);
    if need > 0 {
        if complement_size <= 2 * need {
            // Dense regime: enumerate the complement and sample from it.
            let mut pool = Vec::with_capacity(complement_size);
            for u in 0..n {
                for v in (u + 1)..n {
                    if !original_pairs.contains(&(u, v)) {
                        pool.push((u, v));
                    }
                }
            }
            for idx in index_sample(rng, pool.len(), need) {
                added.push(pool[idx]);
            }
        } else {
            let mut chosen = HashSet::with_capacity(need);
            while chosen.len() < need {
                let u = rng.random_range(0..n);
                let v = rng.random_range(0..n);
                if u == v {
                    continue;
                }
                let pair = (u.min(v), u.max(v));
                if original_pairs.contains(&pair) {
                    continue;
                }
                chosen.insert(pair);
            }
            let mut sorted: Vec<(usize, usize)> = chosen.into_iter().collect();
            sorted.sort_unstable();
            added = sorted;
        }
    }
    let added_count = added.len();
    for (u, v) in added {
        kept.push((u, v, new_weight));
    }
    let graph = SparseGraph::from_edges(n, &kept)?;
    Ok(EdgeDropout {
        graph,
        removed: drop_count,
        added: added_count,
        shortfall,
    })
}

/// Zeroes floor(p*d) uniformly chosen feature columns.
pub fn feature_dropout<R: Rng>(xs: &FeatureMatrix, p: f64, rng: &mut R) -> Result<FeatureMatrix> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Validation(format!(
            "dropout fraction {p} outside [0,1]"
        )));
    }
    let d = xs.dims();
    let count = (p * d as f64).floor() as usize;
    if count == 0 {
        return Ok(xs.clone());
    }
    let cols: HashSet<usize> = index_sample(rng, d, count).into_iter().collect();
    let mut out = xs.clone();
    let n = out.rows();
    for i in 0..n {
        let row = &mut out.values_mut()[i * d..(i + 1) * d];
        for &c in &cols {
            row[c] = 0.0;
        }
    }
    Ok(out)
}

/// Closed-form probability that a fixed node is never sampled as a target
/// across `epochs` epochs of `b` per-draw-uniform target picks: (1-1/n)^(b*e).
pub fn unsampled_probability(b: usize, epochs: usize, n: usize) -> f64 {
    assert!(b >= 1 && b <= n, "need 1 <= B <= n");
    (1.0 - 1.0 / n as f64).powi((b * epochs) as i32)
}
