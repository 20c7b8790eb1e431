//! Downstream evaluation of frozen embeddings: linear-probe classification
//! and k-means clustering scored by normalized mutual information.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dense::Matrix;
use crate::error::{Error, Result};
use crate::graph::{FeatureMatrix, LabelVector, SplitSpec};

#[derive(Debug, Clone, Serialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    #[serde(skip)]
    pub weights: Matrix,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClusterResult {
    pub assignments: Vec<usize>,
    pub nmi: f64,
    pub inertia: f64,
}

/// Per-dimension standardization fitted on the train rows: zero mean, unit
/// variance, std floored at 1e-12.
struct Standardizer {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Standardizer {
    fn fit(emb: &FeatureMatrix, rows: &[usize]) -> Standardizer {
        let d = emb.dims();
        let m = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for &r in rows {
            for (acc, &v) in mean.iter_mut().zip(emb.row(r)) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        let mut var = vec![0.0; d];
        for &r in rows {
            for ((acc, &v), &mu) in var.iter_mut().zip(emb.row(r)).zip(&mean) {
                *acc += (v - mu) * (v - mu);
            }
        }
        let inv_std = var
            .iter()
            .map(|&v| 1.0 / (v / m).sqrt().max(1e-12))
            .collect();
        Standardizer { mean, inv_std }
    }

    fn apply(&self, emb: &FeatureMatrix, rows: &[usize]) -> Matrix {
        let d = emb.dims();
        let mut out = Matrix::zeros(rows.len(), d);
        for (i, &r) in rows.iter().enumerate() {
            for (j, &v) in emb.row(r).iter().enumerate() {
                out.set(i, j, (v - self.mean[j]) * self.inv_std[j]);
            }
        }
        out
    }
}

fn softmax_rows(logits: &mut Matrix) {
    for i in 0..logits.rows() {
        let row = logits.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

/// Multinomial logistic loss and gradient over standardized rows. The weight
/// block is (d+1) x C with the bias in the last row (unregularized).
fn logreg_loss_grad(x: &Matrix, labels: &[usize], w: &Matrix, l2: f64) -> (f64, Matrix) {
    let (m, d) = x.shape();
    let c = w.cols();
    let mut logits = x.matmul(&w_slice(w, d));
    for i in 0..m {
        for j in 0..c {
            let v = logits.get(i, j) + w.get(d, j);
            logits.set(i, j, v);
        }
    }
    softmax_rows(&mut logits);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss -= logits.get(i, y).max(1e-300).ln();
    }
    loss /= m as f64;
    // residual = softmax - onehot
    for (i, &y) in labels.iter().enumerate() {
        let v = logits.get(i, y) - 1.0;
        logits.set(i, y, v);
    }
    let mut grad = Matrix::zeros(d + 1, c);
    let gw = x.matmul_tn(&logits);
    for i in 0..d {
        for j in 0..c {
            grad.set(i, j, gw.get(i, j) / m as f64 + l2 * w.get(i, j));
        }
    }
    for j in 0..c {
        let gb: f64 = (0..m).map(|i| logits.get(i, j)).sum::<f64>() / m as f64;
        grad.set(d, j, gb);
    }
    for i in 0..d {
        for j in 0..c {
            let wij = w.get(i, j);
            loss += 0.5 * l2 * wij * wij;
        }
    }
    (loss, grad)
}

fn w_slice(w: &Matrix, d: usize) -> Matrix {
    let c = w.cols();
    let mut out = Matrix::zeros(d, c);
    for i in 0..d {
        for j in 0..c {
            out.set(i, j, w.get(i, j));
        }
    }
    out
}

fn grad_norm(g: &Matrix) -> f64 {
    g.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn predict(x: &Matrix, w: &Matrix) -> Vec<usize> {
    let (m, d) = x.shape();
    let c = w.cols();
    let logits = x.matmul(&w_slice(w, d));
    (0..m)
        .map(|i| {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for j in 0..c {
                let v = logits.get(i, j) + w.get(d, j);
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Trains a multinomial logistic probe on frozen embeddings with full-batch
/// gradient descent (backtracking step control) until the gradient norm
/// falls below 1e-5 or `max_iters` is spent. Accuracy is measured on the
/// test split; embeddings are standardized with train-split statistics.
pub fn linear_probe(
    emb: &FeatureMatrix,
    labels: &LabelVector,
    split: &SplitSpec,
    l2: f64,
    max_iters: usize,
) -> Result<ProbeResult> {
    split.validate(labels)?;
    if split.train_ids.is_empty() || split.test_ids.is_empty() {
        return Err(Error::Validation(
            "probe needs non-empty train and test splits".into(),
        ));
    }
    let c = labels.num_classes();
    let train_labels: Vec<usize> = split
        .train_ids
        .iter()
        .map(|&i| labels.get(i) as usize)
        .collect();
    for class in 0..c {
        if !train_labels.contains(&class) {
            return Err(Error::Validation(format!(
                "class {class} has no training examples"
            )));
        }
    }
    let standardizer = Standardizer::fit(emb, &split.train_ids);
    let x_train = standardizer.apply(emb, &split.train_ids);
    let d = emb.dims();

    let mut w = Matrix::zeros(d + 1, c);
    let mut lr = 1.0;
    let (mut loss, mut grad) = logreg_loss_grad(&x_train, &train_labels, &w, l2);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        iterations += 1;
        if grad_norm(&grad) < 1e-5 {
            converged = true;
            break;
        }
        // backtracking line step on the fixed descent direction
        let mut stepped = false;
        for _ in 0..40 {
            let mut cand = w.clone();
            cand.axpy(-lr, &grad);
            let (cand_loss, cand_grad) = logreg_loss_grad(&x_train, &train_labels, &cand, l2);
            if cand_loss <= loss {
                w = cand;
                loss = cand_loss;
                grad = cand_grad;
                lr *= 1.1;
                stepped = true;
                break;
            }
            lr *= 0.5;
        }
        if !stepped {
            break; // step size underflowed; gradient is numerically flat
        }
    }

    let x_test = standardizer.apply(emb, &split.test_ids);
    let preds = predict(&x_test, &w);
    let mut correct = 0usize;
    let mut class_total = vec![0usize; c];
    let mut class_correct = vec![0usize; c];
    for (i, &node) in split.test_ids.iter().enumerate() {
        let truth = labels.get(node) as usize;
        class_total[truth] += 1;
        if preds[i] == truth {
            correct += 1;
            class_correct[truth] += 1;
        }
    }
    let accuracy = correct as f64 / split.test_ids.len() as f64;
    let per_class = (0..c)
        .map(|j| class_correct[j] as f64 / class_total[j].max(1) as f64)
        .collect();
    Ok(ProbeResult {
        accuracy,
        per_class,
        weights: w,
        iterations,
        converged,
    })
}

/// Tunes the probe's L2 weight on the validation split over a small grid and
/// reports test accuracy at the winning setting. Ties keep the earlier grid
/// entry.
pub fn linear_probe_tuned(
    emb: &FeatureMatrix,
    labels: &LabelVector,
    split: &SplitSpec,
    max_iters: usize,
) -> Result<(f64, ProbeResult)> {
    const GRID: [f64; 4] = [1e-2, 1e-3, 1e-4, 0.0];
    if split.val_ids.is_empty() {
        return Ok((1e-4, linear_probe(emb, labels, split, 1e-4, max_iters)?));
    }
    let mut best: Option<(f64, f64)> = None; // (val acc, l2)
    for &l2 in &GRID {
        let val_split = SplitSpec {
            train_ids: split.train_ids.clone(),
            val_ids: Vec::new(),
            test_ids: split.val_ids.clone(),
        };
        let val = linear_probe(emb, labels, &val_split, l2, max_iters)?;
        if best.is_none_or(|(acc, _)| val.accuracy > acc) {
            best = Some((val.accuracy, l2));
        }
    }
    let (_, l2) = best.expect("grid is non-empty");
    Ok((l2, linear_probe(emb, labels, split, l2, max_iters)?))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

struct KmeansRun {
    assignments: Vec<usize>,
    inertia: f64,
}

fn kmeans_once(emb: &FeatureMatrix, c: usize, seed: u64, max_iters: usize) -> KmeansRun {
    let n = emb.rows();
    let d = emb.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(c);
    centroids.push(emb.row(rng.random_range(0..n)).to_vec());
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(emb.row(i), &centroids[0])).collect();
    while centroids.len() < c {
        let total: f64 = dist.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut draw = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if draw < w {
                    pick = i;
                    break;
                }
                draw -= w;
            }
            pick
        };
        centroids.push(emb.row(next).to_vec());
        for i in 0..n {
            let nd = sq_dist(emb.row(i), centroids.last().unwrap());
            if nd < dist[i] {
                dist[i] = nd;
            }
        }
    }

    let mut assignments = vec![0usize; n];
    let mut inertia = f64::INFINITY;
    let mut reseeded = false;
    for _ in 0..max_iters {
        // assignment step; ties go to the lower centroid index
        let mut new_inertia = 0.0;
        let mut changed = false;
        for i in 0..n {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (j, cen) in centroids.iter().enumerate() {
                let dij = sq_dist(emb.row(i), cen);
                if dij < best_d {
                    best_d = dij;
                    best = j;
                }
            }
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
            new_inertia += best_d;
        }
        // Lloyd steps never raise the objective; a reseed jump may.
        debug_assert!(
            reseeded || new_inertia <= inertia + 1e-9,
            "inertia rose in Lloyd step"
        );
        inertia = new_inertia;
        if !changed {
            break;
        }
        // update step
        let mut sums = vec![vec![0.0; d]; c];
        let mut counts = vec![0usize; c];
        for i in 0..n {
            counts[assignments[i]] += 1;
            for (s, &v) in sums[assignments[i]].iter_mut().zip(emb.row(i)) {
                *s += v;
            }
        }
        reseeded = false;
        for j in 0..c {
            if counts[j] == 0 {
                // reseed the empty cluster from the farthest point
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(emb.row(a), &centroids[assignments[a]]);
                        let db = sq_dist(emb.row(b), &centroids[assignments[b]]);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centroids[j] = emb.row(far).to_vec();
                reseeded = true;
            } else {
                for (cen, s) in centroids[j].iter_mut().zip(&sums[j]) {
                    *cen = s / counts[j] as f64;
                }
            }
        }
    }
    KmeansRun {
        assignments,
        inertia,
    }
}

/// Mutual information between two labelings normalized by the arithmetic
/// mean of their entropies; pairs with a negative first label are skipped.
pub fn nmi(a: &[i64], b: &[i64]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must align");
    let pairs: Vec<(i64, i64)> = a
        .iter()
        .zip(b)
        .filter(|(&x, &y)| x >= 0 && y >= 0)
        .map(|(&x, &y)| (x, y))
        .collect();
    let n = pairs.len();
    if n == 0 {
        return 0.0;
    }
    // BTreeMaps keep the summation order fixed across runs.
    use std::collections::BTreeMap;
    let mut joint: BTreeMap<(i64, i64), usize> = BTreeMap::new();
    let mut ca: BTreeMap<i64, usize> = BTreeMap::new();
    let mut cb: BTreeMap<i64, usize> = BTreeMap::new();
    for &(x, y) in &pairs {
        *joint.entry((x, y)).or_insert(0) += 1;
        *ca.entry(x).or_insert(0) += 1;
        *cb.entry(y).or_insert(0) += 1;
    }
    let nf = n as f64;
    let mut mi = 0.0;
    for (&(x, y), &nxy) in &joint {
        let pxy = nxy as f64 / nf;
        let px = ca[&x] as f64 / nf;
        let py = cb[&y] as f64 / nf;
        mi += pxy * (pxy / (px * py)).ln();
    }
    let entropy = |counts: &BTreeMap<i64, usize>| -> f64 {
        counts
            .values()
            .map(|&c| {
                let p = c as f64 / nf;
                -p * p.ln()
            })
            .sum()
    };
    let denom = 0.5 * (entropy(&ca) + entropy(&cb));
    if denom <= 0.0 {
        return 0.0;
    }
    (mi / denom).clamp(0.0, 1.0)
}

/// k-means with k-means++ seeding, best of `restarts` by inertia (restarts
/// run in parallel over per-restart rng streams), scored by NMI against the
/// ground-truth labels.
pub fn kmeans_nmi(
    emb: &FeatureMatrix,
    labels: &LabelVector,
    c: usize,
    restarts: usize,
    seed: u64,
) -> Result<ClusterResult> {
    if c < 2 {
        return Err(Error::Validation(format!(
            "need at least 2 clusters, got {c}"
        )));
    }
    if emb.rows() == 0 || restarts == 0 {
        return Err(Error::Validation(
            "need embeddings and at least one restart".into(),
        ));
    }
    let runs: Vec<KmeansRun> = (0..restarts)
        .into_par_iter()
        .map(|r| kmeans_once(emb, c, seed.wrapping_add(r as u64), 300))
        .collect();
    let best = runs
        .into_iter()
        .enumerate()
        .min_by(|(ia, a), (ib, b)| a.inertia.partial_cmp(&b.inertia).unwrap().then(ia.cmp(ib)))
        .map(|(_, run)| run)
        .expect("at least one restart");
    let pred: Vec<i64> = best.assignments.iter().map(|&x| x as i64).collect();
    let score = nmi(labels.labels(), &pred);
    Ok(ClusterResult {
        assignments: best.assignments,
        nmi: score,
        inertia: best.inertia,
    })
}
