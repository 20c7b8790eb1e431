//! Graph containers and loaders.
//!
//! Everything downstream consumes these types: a CSR-backed undirected
//! weighted graph, dense node features, labels, and train/val/test splits.
//! Graphs are immutable after construction and safe to share across workers.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Undirected weighted graph in compressed sparse row form.
///
/// Invariants: `row_offsets` is non-decreasing with `row_offsets[n]` equal to
/// the entry count; columns are sorted and unique within a row; the matrix is
/// symmetric; all weights are finite and positive.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGraph {
    n: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    weights: Vec<f64>,
}

impl SparseGraph {
    /// Build from an arbitrary edge list: symmetrizes, deduplicates (keeping
    /// the max weight of duplicates) and sorts. `n` must cover every id.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<SparseGraph> {
        let mut adj: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
        for &(u, v, w) in edges {
            if u >= n || v >= n {
                return Err(Error::Validation(format!(
                    "edge ({u},{v}) out of range for n={n}"
                )));
            }
            if !w.is_finite() || w <= 0.0 {
                return Err(Error::Validation(format!(
                    "edge ({u},{v}) has non-positive or non-finite weight {w}"
                )));
            }
            upsert_max(&mut adj[u], v, w);
            if u != v {
                upsert_max(&mut adj[v], u, w);
            }
        }
        let mut row_offsets = Vec::with_capacity(n + 1);
        let mut col_indices = Vec::new();
        let mut weights = Vec::new();
        row_offsets.push(0);
        for row in &adj {
            for (&v, &w) in row {
                col_indices.push(v);
                weights.push(w);
            }
            row_offsets.push(col_indices.len());
        }
        Ok(SparseGraph {
            n,
            row_offsets,
            col_indices,
            weights,
        })
    }

    /// Build directly from per-row sorted (col, weight) lists. Caller promises
    /// symmetry; `validate` is the check for that.
    pub(crate) fn from_sorted_rows(rows: Vec<Vec<(usize, f64)>>) -> SparseGraph {
        let n = rows.len();
        let mut row_offsets = Vec::with_capacity(n + 1);
        let mut col_indices = Vec::new();
        let mut weights = Vec::new();
        row_offsets.push(0);
        for row in rows {
            debug_assert!(row.windows(2).all(|w| w[0].0 < w[1].0));
            for (v, w) in row {
                col_indices.push(v);
                weights.push(w);
            }
            row_offsets.push(col_indices.len());
        }
        SparseGraph {
            n,
            row_offsets,
            col_indices,
            weights,
        }
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    /// Stored entry count (each undirected edge appears twice, self loops once).
    pub fn entry_count(&self) -> usize {
        self.col_indices.len()
    }

    /// Undirected edge count, self loops included once.
    pub fn edge_count(&self) -> usize {
        let self_loops = (0..self.n)
            .filter(|&u| self.neighbors(u).0.binary_search(&u).is_ok())
            .count();
        (self.entry_count() - self_loops) / 2 + self_loops
    }

    pub fn neighbors(&self, u: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_offsets[u], self.row_offsets[u + 1]);
        (&self.col_indices[a..b], &self.weights[a..b])
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).0.binary_search(&v).is_ok()
    }

    /// Weighted degree: row sum of the adjacency matrix.
    pub fn degree(&self, u: usize) -> f64 {
        self.neighbors(u).1.iter().sum()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Checks every CSR invariant; used by loaders and by tests on derived graphs.
    pub fn validate(&self) -> Result<()> {
        if self.row_offsets.len() != self.n + 1 {
            return Err(Error::Validation("row_offsets length != n+1".into()));
        }
        if self.row_offsets[0] != 0
            || self.row_offsets.windows(2).any(|w| w[0] > w[1])
            || *self.row_offsets.last().unwrap() != self.col_indices.len()
            || self.col_indices.len() != self.weights.len()
        {
            return Err(Error::Validation("inconsistent CSR offsets".into()));
        }
        for u in 0..self.n {
            let (cols, ws) = self.neighbors(u);
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Validation(format!(
                    "row {u} has unsorted or duplicate columns"
                )));
            }
            for (&v, &w) in cols.iter().zip(ws) {
                if v >= self.n {
                    return Err(Error::Validation(format!("column {v} out of range")));
                }
                if !w.is_finite() || w <= 0.0 {
                    return Err(Error::Validation(format!("weight at ({u},{v}) is {w}")));
                }
                match self.weight_of(v, u) {
                    Some(back) if back == w => {}
                    _ => return Err(Error::Validation(format!("asymmetric entry at ({u},{v})"))),
                }
            }
        }
        Ok(())
    }

    pub fn weight_of(&self, u: usize, v: usize) -> Option<f64> {
        let (cols, ws) = self.neighbors(u);
        cols.binary_search(&v).ok().map(|i| ws[i])
    }

    /// Vertex-induced subgraph over `nodes`; local ids follow `nodes` order.
    pub fn induced(&self, nodes: &[usize]) -> Result<SparseGraph> {
        let mut local: Vec<Option<usize>> = vec![None; self.n];
        for (li, &g) in nodes.iter().enumerate() {
            if g >= self.n {
                return Err(Error::Validation(format!("node {g} out of range")));
            }
            if local[g].is_some() {
                return Err(Error::Validation(format!("duplicate node {g} in set")));
            }
            local[g] = Some(li);
        }
        let mut rows = Vec::with_capacity(nodes.len());
        for &g in nodes {
            let (cols, ws) = self.neighbors(g);
            let mut row: Vec<(usize, f64)> = cols
                .iter()
                .zip(ws)
                .filter_map(|(&v, &w)| local[v].map(|lv| (lv, w)))
                .collect();
            row.sort_unstable_by_key(|&(v, _)| v);
            rows.push(row);
        }
        Ok(SparseGraph::from_sorted_rows(rows))
    }

    /// Writes the edge-list format: `#n=` header then one line per
    /// undirected edge (u <= v), weight column omitted when exactly 1.
    pub fn save_edge_list(&self, path: &Path, extra_comments: &[String]) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| Error::io(path.display().to_string(), e);
        for c in extra_comments {
            writeln!(w, "#{c}").map_err(io_err)?;
        }
        writeln!(w, "#n={}", self.n).map_err(io_err)?;
        for u in 0..self.n {
            let (cols, ws) = self.neighbors(u);
            for (&v, &wt) in cols.iter().zip(ws) {
                if v < u {
                    continue;
                }
                if wt == 1.0 {
                    writeln!(w, "{u}\t{v}").map_err(io_err)?;
                } else {
                    writeln!(w, "{u}\t{v}\t{wt}").map_err(io_err)?;
                }
            }
        }
        w.flush().map_err(io_err)?;
        Ok(())
    }
}

fn upsert_max(row: &mut BTreeMap<usize, f64>, v: usize, w: f64) {
    row.entry(v)
        .and_modify(|old| {
            if w > *old {
                *old = w;
            }
        })
        .or_insert(w);
}

/// Loads the edge-list format: `u v [w]` per line, `#` comments, optional
/// `#n=<count>` header. Ids are dense and 0-based; `n` is `1 + max id` unless
/// the header says more.
pub fn load_graph(path: &Path) -> Result<SparseGraph> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let path_str = path.display().to_string();
    let mut header_n: Option<usize> = None;
    let mut edges: Vec<(usize, usize, f64)> = Vec::new();
    let mut max_id: Option<usize> = None;
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(val) = rest.trim().strip_prefix("n=") {
                header_n = Some(val.trim().parse::<usize>().map_err(|e| Error::Parse {
                    path: path_str.clone(),
                    line: lineno,
                    msg: format!("bad node count '{val}': {e}"),
                })?);
            }
            continue;
        }
        let mut fields = line.split_whitespace();
        let u = parse_node_id(fields.next(), &path_str, lineno, "source id")?;
        let v = parse_node_id(fields.next(), &path_str, lineno, "target id")?;
        let w = match fields.next() {
            Some(tok) => tok.parse::<f64>().map_err(|e| Error::Parse {
                path: path_str.clone(),
                line: lineno,
                msg: format!("bad weight '{tok}': {e}"),
            })?,
            None => 1.0,
        };
        if !w.is_finite() || w <= 0.0 {
            return Err(Error::Validation(format!(
                "{path_str} line {lineno}: weight must be finite and > 0, got {w}"
            )));
        }
        if fields.next().is_some() {
            return Err(Error::Parse {
                path: path_str.clone(),
                line: lineno,
                msg: "expected at most 3 fields".into(),
            });
        }
        max_id = Some(max_id.map_or(u.max(v), |m| m.max(u).max(v)));
        edges.push((u, v, w));
    }
    let implied = max_id.map_or(0, |m| m + 1);
    let n = match header_n {
        Some(h) => {
            if h < implied {
                return Err(Error::Validation(format!(
                    "header n={h} smaller than 1 + max id = {implied}"
                )));
            }
            h
        }
        None => implied,
    };
    let g = SparseGraph::from_edges(n, &edges)?;
    debug_assert!(g.validate().is_ok());
    Ok(g)
}

fn parse_node_id(tok: Option<&str>, path: &str, line: usize, what: &str) -> Result<usize> {
    let tok = tok.ok_or_else(|| Error::Parse {
        path: path.to_string(),
        line,
        msg: format!("missing {what}"),
    })?;
    let signed: i64 = tok.parse().map_err(|e| Error::Parse {
        path: path.to_string(),
        line,
        msg: format!("bad {what} '{tok}': {e}"),
    })?;
    if signed < 0 {
        return Err(Error::Validation(format!(
            "{path} line {line}: negative node id {signed}"
        )));
    }
    Ok(signed as usize)
}

/// Dense n x d node attributes, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n: usize,
    d: usize,
    values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(n: usize, d: usize, values: Vec<f64>) -> Result<FeatureMatrix> {
        if values.len() != n * d {
            return Err(Error::Validation(format!(
                "feature buffer length {} != n*d = {}",
                values.len(),
                n * d
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite feature value".into()));
        }
        Ok(FeatureMatrix { n, d, values })
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn dims(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Rows rescaled to sum 1 (rows summing to 0 are left untouched).
    pub fn row_normalized(&self) -> FeatureMatrix {
        let mut out = self.clone();
        for i in 0..self.n {
            let row = &mut out.values[i * self.d..(i + 1) * self.d];
            let s: f64 = row.iter().sum();
            if s != 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        out
    }

    /// New matrix holding the given rows, in order. Indices may repeat.
    pub fn gather(&self, rows: &[usize]) -> FeatureMatrix {
        let mut values = Vec::with_capacity(rows.len() * self.d);
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        FeatureMatrix {
            n: rows.len(),
            d: self.d,
            values,
        }
    }

    /// Binary format: magic "GZFM", u32 n, u32 d, then n*d f32 LE row-major.
    pub fn save_binary(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(12 + self.values.len() * 4);
        buf.extend_from_slice(b"GZFM");
        buf.extend_from_slice(&(self.n as u32).to_le_bytes());
        buf.extend_from_slice(&(self.d as u32).to_le_bytes());
        for &v in &self.values {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Loads features from CSV (sniffed) or the "GZFM" binary format.
pub fn load_features(path: &Path) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.starts_with(b"GZFM") {
        return parse_features_binary(&bytes, &path.display().to_string());
    }
    parse_features_csv(&bytes, &path.display().to_string())
}

fn parse_features_binary(bytes: &[u8], path: &str) -> Result<FeatureMatrix> {
    if bytes.len() < 12 {
        return Err(Error::Parse {
            path: path.to_string(),
            line: 0,
            msg: "binary feature file shorter than its header".into(),
        });
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expect = 12 + 4 * n * d;
    if bytes.len() != expect {
        return Err(Error::Parse {
            path: path.to_string(),
            line: 0,
            msg: format!(
                "binary feature file is {} bytes, expected {expect} for n={n} d={d}",
                bytes.len()
            ),
        });
    }
    let mut values = Vec::with_capacity(n * d);
    for chunk in bytes[12..].chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    FeatureMatrix::new(n, d, values)
}

fn parse_features_csv(bytes: &[u8], path: &str) -> Result<FeatureMatrix> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::Parse {
        path: path.to_string(),
        line: 0,
        msg: "feature file is neither GZFM binary nor UTF-8 CSV".into(),
    })?;
    let mut values = Vec::new();
    let mut d: Option<usize> = None;
    let mut n = 0usize;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|tok| {
                tok.trim().parse::<f64>().map_err(|e| Error::Parse {
                    path: path.to_string(),
                    line: idx + 1,
                    msg: format!("bad value '{}': {e}", tok.trim()),
                })
            })
            .collect::<Result<_>>()?;
        match d {
            None => d = Some(row.len()),
            Some(d0) if d0 != row.len() => {
                return Err(Error::Parse {
                    path: path.to_string(),
                    line: idx + 1,
                    msg: format!("row has {} values, expected {d0}", row.len()),
                });
            }
            _ => {}
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "{path} line {}: non-finite feature value",
                idx + 1
            )));
        }
        values.extend(row);
        n += 1;
    }
    FeatureMatrix::new(n, d.unwrap_or(0), values)
}

/// Per-node class labels; -1 marks unlabeled nodes.
#[derive(Debug, Clone)]
pub struct LabelVector {
    labels: Vec<i64>,
    num_classes: usize,
}

impl LabelVector {
    pub fn new(labels: Vec<i64>, num_classes: usize) -> Result<LabelVector> {
        if num_classes < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        for (i, &l) in labels.iter().enumerate() {
            if l != -1 && (l < 0 || l >= num_classes as i64) {
                return Err(Error::Validation(format!(
                    "label {l} for node {i} outside [0,{num_classes})"
                )));
            }
        }
        Ok(LabelVector {
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, i: usize) -> i64 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }
}

/// Loads "node<TAB>label" text; n gives the vector length, missing nodes stay -1.
pub fn load_labels(path: &Path, n: usize) -> Result<LabelVector> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let path_str = path.display().to_string();
    let mut labels = vec![-1i64; n];
    let mut max_label = -1i64;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let node = parse_node_id(fields.next(), &path_str, idx + 1, "node id")?;
        let label: i64 = fields
            .next()
            .ok_or_else(|| Error::Parse {
                path: path_str.clone(),
                line: idx + 1,
                msg: "missing label".into(),
            })?
            .parse()
            .map_err(|e| Error::Parse {
                path: path_str.clone(),
                line: idx + 1,
                msg: format!("bad label: {e}"),
            })?;
        if node >= n {
            return Err(Error::Validation(format!(
                "{path_str} line {}: node {node} out of range for n={n}",
                idx + 1
            )));
        }
        labels[node] = label;
        max_label = max_label.max(label);
    }
    LabelVector::new(labels, (max_label + 1).max(2) as usize)
}

/// Disjoint train/val/test node index lists.
#[derive(Debug, Clone)]
pub struct SplitSpec {
    pub train_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

impl SplitSpec {
    pub fn validate(&self, labels: &LabelVector) -> Result<()> {
        let n = labels.len();
        let mut seen = vec![false; n];
        for (name, ids) in [
            ("train", &self.train_ids),
            ("val", &self.val_ids),
            ("test", &self.test_ids),
        ] {
            for &i in ids.iter() {
                if i >= n {
                    return Err(Error::Validation(format!(
                        "{name} index {i} out of range for n={n}"
                    )));
                }
                if seen[i] {
                    return Err(Error::Validation(format!(
                        "index {i} appears in more than one split"
                    )));
                }
                seen[i] = true;
                if labels.get(i) == -1 {
                    return Err(Error::Validation(format!("{name} index {i} has no label")));
                }
            }
        }
        Ok(())
    }
}

/// Loads three index files (one id per line) from `dir`:
/// train.txt, val.txt, test.txt.
pub fn load_splits(dir: &Path) -> Result<SplitSpec> {
    let read_ids = |name: &str| -> Result<Vec<usize>> {
        let path = dir.join(name);
        let text =
            fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut ids = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            ids.push(parse_node_id(
                Some(line),
                &path.display().to_string(),
                idx + 1,
                "split index",
            )?);
        }
        Ok(ids)
    };
    Ok(SplitSpec {
        train_ids: read_ids("train.txt")?,
        val_ids: read_ids("val.txt")?,
        test_ids: read_ids("test.txt")?,
    })
}

/// Returns D^{-1/2} (A + I) D^{-1/2}, or the same without added self loops.
/// Zero-degree nodes always receive a unit self loop first so the degree
/// powers stay defined.
pub fn symmetric_normalize(g: &SparseGraph, add_self_loops: bool) -> SparseGraph {
    let n = g.node_count();
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    for u in 0..n {
        let (cols, ws) = g.neighbors(u);
        let mut row: Vec<(usize, f64)> = cols.iter().copied().zip(ws.iter().copied()).collect();
        if add_self_loops {
            match row.binary_search_by_key(&u, |&(v, _)| v) {
                Ok(i) => row[i].1 += 1.0,
                Err(i) => row.insert(i, (u, 1.0)),
            }
        } else if row.is_empty() {
            row.push((u, 1.0));
        }
        rows.push(row);
    }
    let deg: Vec<f64> = rows
        .iter()
        .map(|row| row.iter().map(|&(_, w)| w).sum())
        .collect();
    let inv_sqrt: Vec<f64> = deg.iter().map(|&d| 1.0 / d.sqrt()).collect();
    for (u, row) in rows.iter_mut().enumerate() {
        for (v, w) in row.iter_mut() {
            *w *= inv_sqrt[u] * inv_sqrt[*v];
        }
    }
    SparseGraph::from_sorted_rows(rows)
}

/// Returns the column-stochastic A D^{-1}; isolated nodes get a unit self
/// loop first.
pub fn random_walk_normalize(g: &SparseGraph) -> SparseGraph {
    let n = g.node_count();
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    for u in 0..n {
        let (cols, ws) = g.neighbors(u);
        let mut row: Vec<(usize, f64)> = cols.iter().copied().zip(ws.iter().copied()).collect();
        if row.is_empty() {
            row.push((u, 1.0));
        }
        rows.push(row);
    }
    // Column sums, including any self loop just added.
    let mut deg = vec![0.0; n];
    for row in &rows {
        for &(v, w) in row {
            deg[v] += w;
        }
    }
    for row in rows.iter_mut() {
        for (v, w) in row.iter_mut() {
            *w /= deg[*v];
        }
    }
    SparseGraph::from_sorted_rows(rows)
}
