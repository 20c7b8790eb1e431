//! Minimal reverse-mode gradient engine over dense matrices.
//!
//! A `Tape` records every forward op in creation order; `backward` walks the
//! records once in reverse. Graphs and feature blocks enter as sparse
//! constants through `spmm`, so only encoder and discriminator parameters are
//! differentiated. One tape is single-threaded; independent tapes may run
//! concurrently.

use std::cell::RefCell;
use std::rc::Rc;

use crate::dense::Matrix;
use crate::error::{Error, Result};
use crate::sparse::SpMat;

/// Handle to a tensor on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(usize);

enum Op {
    Leaf,
    Add(usize, usize),
    /// mul * x + add, elementwise; only the slope matters going backward
    Affine {
        x: usize,
        mul: f64,
    },
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    /// a * bᵀ
    MatMulBt(usize, usize),
    Spmm {
        s: Rc<SpMat>,
        x: usize,
    },
    Prelu {
        x: usize,
        slope: usize,
    },
    RowL2Normalize(usize),
    MeanRowsGroups {
        x: usize,
        groups: Rc<Vec<Vec<usize>>>,
    },
    GatherRows {
        x: usize,
        idx: Rc<Vec<usize>>,
    },
    Sigmoid(usize),
    LogSigmoid(usize),
    Exp(usize),
    Log(usize),
    Clamp {
        x: usize,
        lo: f64,
        hi: f64,
    },
    Sum(usize),
    Mean(usize),
    RowSums(usize),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
    grad: Option<Matrix>,
}

/// Floor applied to row norms before division (cosine gradients at a zeroed
/// row stay finite).
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Matrix, op: Op, requires_grad: bool) -> TensorRef {
        debug_assert!(value.is_finite(), "non-finite forward value");
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        TensorRef(nodes.len() - 1)
    }

    fn requires(&self, t: TensorRef) -> bool {
        self.nodes.borrow()[t.0].requires_grad
    }

    /// Registers a constant (no gradient flows into it).
    pub fn constant(&self, value: Matrix) -> TensorRef {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a trainable leaf.
    pub fn param(&self, value: Matrix) -> TensorRef {
        self.push(value, Op::Leaf, true)
    }

    pub fn shape(&self, t: TensorRef) -> (usize, usize) {
        self.nodes.borrow()[t.0].value.shape()
    }

    pub fn value(&self, t: TensorRef) -> Matrix {
        self.nodes.borrow()[t.0].value.clone()
    }

    /// Scalar payload of a 1x1 tensor.
    pub fn scalar(&self, t: TensorRef) -> Result<f64> {
        let nodes = self.nodes.borrow();
        let v = &nodes[t.0].value;
        if v.shape() != (1, 1) {
            return Err(Error::Shape {
                op: "scalar",
                detail: format!("expected 1x1, got {:?}", v.shape()),
            });
        }
        Ok(v.get(0, 0))
    }

    /// Accumulated gradient of a tensor, if any backward pass reached it.
    pub fn grad(&self, t: TensorRef) -> Option<Matrix> {
        self.nodes.borrow()[t.0].grad.clone()
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    fn binary_same_shape(&self, op: &'static str, a: TensorRef, b: TensorRef) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                detail: format!("{sa:?} vs {sb:?}"),
            });
        }
        Ok(())
    }

    pub fn add(&self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary_same_shape("add", a, b)?;
        let value = {
            let nodes = self.nodes.borrow();
            let mut v = nodes[a.0].value.clone();
            v.add_assign(&nodes[b.0].value);
            v
        };
        Ok(self.push(
            value,
            Op::Add(a.0, b.0),
            self.requires(a) || self.requires(b),
        ))
    }

    /// Elementwise mul*x + add.
    pub fn affine(&self, x: TensorRef, mul: f64, add: f64) -> TensorRef {
        let value = self.nodes.borrow()[x.0].value.map(|v| mul * v + add);
        self.push(value, Op::Affine { x: x.0, mul }, self.requires(x))
    }

    pub fn scale(&self, x: TensorRef, s: f64) -> TensorRef {
        self.affine(x, s, 0.0)
    }

    pub fn mul(&self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary_same_shape("mul", a, b)?;
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            let data = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(x, y)| x * y)
                .collect();
            Matrix::from_vec(va.rows(), va.cols(), data)
        };
        Ok(self.push(
            value,
            Op::Mul(a.0, b.0),
            self.requires(a) || self.requires(b),
        ))
    }

    pub fn div(&self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary_same_shape("div", a, b)?;
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            let data = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(x, y)| x / y)
                .collect();
            Matrix::from_vec(va.rows(), va.cols(), data)
        };
        Ok(self.push(
            value,
            Op::Div(a.0, b.0),
            self.requires(a) || self.requires(b),
        ))
    }

    pub fn matmul(&self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("{sa:?} x {sb:?}"),
            });
        }
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.matmul(&nodes[b.0].value)
        };
        Ok(self.push(
            value,
            Op::MatMul(a.0, b.0),
            self.requires(a) || self.requires(b),
        ))
    }

    /// a * bᵀ
    pub fn matmul_bt(&self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return Err(Error::Shape {
                op: "matmul_bt",
                detail: format!("{sa:?} x {sb:?}ᵀ"),
            });
        }
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.matmul_bt(&nodes[b.0].value)
        };
        Ok(self.push(
            value,
            Op::MatMulBt(a.0, b.0),
            self.requires(a) || self.requires(b),
        ))
    }

    /// Sparse-constant times dense tensor.
    pub fn spmm(&self, s: &Rc<SpMat>, x: TensorRef) -> Result<TensorRef> {
        let sx = self.shape(x);
        if s.cols() != sx.0 {
            return Err(Error::Shape {
                op: "spmm",
                detail: format!("({}, {}) x {sx:?}", s.rows(), s.cols()),
            });
        }
        let value = s.matmul(&self.nodes.borrow()[x.0].value);
        Ok(self.push(
            value,
            Op::Spmm {
                s: Rc::clone(s),
                x: x.0,
            },
            self.requires(x),
        ))
    }

    /// PReLU with a trainable 1x1 slope.
    pub fn prelu(&self, x: TensorRef, slope: TensorRef) -> Result<TensorRef> {
        if self.shape(slope) != (1, 1) {
            return Err(Error::Shape {
                op: "prelu",
                detail: format!("slope must be 1x1, got {:?}", self.shape(slope)),
            });
        }
        let value = {
            let nodes = self.nodes.borrow();
            let a = nodes[slope.0].value.get(0, 0);
            nodes[x.0].value.map(|v| if v >= 0.0 { v } else { a * v })
        };
        Ok(self.push(
            value,
            Op::Prelu {
                x: x.0,
                slope: slope.0,
            },
            self.requires(x) || self.requires(slope),
        ))
    }

    /// Rows scaled to unit L2 norm; norms are floored at `NORM_FLOOR`.
    pub fn row_l2_normalize(&self, x: TensorRef) -> TensorRef {
        let value = {
            let nodes = self.nodes.borrow();
            let v = &nodes[x.0].value;
            let mut out = v.clone();
            for i in 0..v.rows() {
                let norm = row_norm(v.row(i)).max(NORM_FLOOR);
                out.row_mut(i).iter_mut().for_each(|e| *e /= norm);
            }
            out
        };
        self.push(value, Op::RowL2Normalize(x.0), self.requires(x))
    }

    /// One output row per group: the mean of the selected input rows.
    pub fn mean_rows_groups(&self, x: TensorRef, groups: Rc<Vec<Vec<usize>>>) -> Result<TensorRef> {
        let (rows, cols) = self.shape(x);
        for (gi, group) in groups.iter().enumerate() {
            if group.is_empty() {
                return Err(Error::Shape {
                    op: "mean_rows",
                    detail: format!("group {gi} is empty"),
                });
            }
            if let Some(&bad) = group.iter().find(|&&r| r >= rows) {
                return Err(Error::Shape {
                    op: "mean_rows",
                    detail: format!("group {gi} selects row {bad} of a {rows}-row tensor"),
                });
            }
        }
        let value = {
            let nodes = self.nodes.borrow();
            let v = &nodes[x.0].value;
            let mut out = Matrix::zeros(groups.len(), cols);
            for (gi, group) in groups.iter().enumerate() {
                let orow = out.row_mut(gi);
                for &r in group {
                    for (o, &e) in orow.iter_mut().zip(v.row(r)) {
                        *o += e;
                    }
                }
                let inv = 1.0 / group.len() as f64;
                orow.iter_mut().for_each(|o| *o *= inv);
            }
            out
        };
        Ok(self.push(
            value,
            Op::MeanRowsGroups { x: x.0, groups },
            self.requires(x),
        ))
    }

    /// Mean over one row set, as a 1 x d tensor.
    pub fn mean_rows(&self, x: TensorRef, rows: &[usize]) -> Result<TensorRef> {
        self.mean_rows_groups(x, Rc::new(vec![rows.to_vec()]))
    }

    pub fn gather_rows(&self, x: TensorRef, idx: Rc<Vec<usize>>) -> Result<TensorRef> {
        let (rows, cols) = self.shape(x);
        if let Some(&bad) = idx.iter().find(|&&r| r >= rows) {
            return Err(Error::Shape {
                op: "gather_rows",
                detail: format!("index {bad} out of range for {rows} rows"),
            });
        }
        let value = {
            let nodes = self.nodes.borrow();
            let v = &nodes[x.0].value;
            let mut out = Matrix::zeros(idx.len(), cols);
            for (i, &r) in idx.iter().enumerate() {
                out.row_mut(i).copy_from_slice(v.row(r));
            }
            out
        };
        Ok(self.push(value, Op::GatherRows { x: x.0, idx }, self.requires(x)))
    }

    pub fn sigmoid(&self, x: TensorRef) -> TensorRef {
        let value = self.nodes.borrow()[x.0].value.map(sigmoid);
        self.push(value, Op::Sigmoid(x.0), self.requires(x))
    }

    pub fn log_sigmoid(&self, x: TensorRef) -> TensorRef {
        let value = self.nodes.borrow()[x.0].value.map(|v| {
            // -softplus(-v), computed stably
            if v >= 0.0 {
                -((-v).exp().ln_1p())
            } else {
                v - v.exp().ln_1p()
            }
        });
        self.push(value, Op::LogSigmoid(x.0), self.requires(x))
    }

    pub fn exp(&self, x: TensorRef) -> TensorRef {
        let value = self.nodes.borrow()[x.0].value.map(f64::exp);
        self.push(value, Op::Exp(x.0), self.requires(x))
    }

    pub fn log(&self, x: TensorRef) -> TensorRef {
        let value = self.nodes.borrow()[x.0].value.map(f64::ln);
        self.push(value, Op::Log(x.0), self.requires(x))
    }

    pub fn clamp(&self, x: TensorRef, lo: f64, hi: f64) -> TensorRef {
        let value = self.nodes.borrow()[x.0].value.map(|v| v.clamp(lo, hi));
        self.push(value, Op::Clamp { x: x.0, lo, hi }, self.requires(x))
    }

    pub fn sum(&self, x: TensorRef) -> TensorRef {
        let total: f64 = self.nodes.borrow()[x.0].value.data().iter().sum();
        self.push(
            Matrix::from_vec(1, 1, vec![total]),
            Op::Sum(x.0),
            self.requires(x),
        )
    }

    pub fn mean(&self, x: TensorRef) -> TensorRef {
        let nodes = self.nodes.borrow();
        let v = &nodes[x.0].value;
        let total: f64 = v.data().iter().sum();
        let len = v.data().len() as f64;
        drop(nodes);
        self.push(
            Matrix::from_vec(1, 1, vec![total / len]),
            Op::Mean(x.0),
            self.requires(x),
        )
    }

    /// n x m -> n x 1 row sums.
    pub fn row_sums(&self, x: TensorRef) -> TensorRef {
        let value = {
            let nodes = self.nodes.borrow();
            let v = &nodes[x.0].value;
            let data = (0..v.rows()).map(|i| v.row(i).iter().sum()).collect();
            Matrix::from_vec(v.rows(), 1, data)
        };
        self.push(value, Op::RowSums(x.0), self.requires(x))
    }

    /// Pairwise cosine similarities between rows of `a` and rows of `b`.
    pub fn cosine_similarity_matrix(&self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let na = self.row_l2_normalize(a);
        let nb = self.row_l2_normalize(b);
        self.matmul_bt(na, nb)
    }

    /// Row-paired bilinear scores: out[i] = h[i]ᵀ W x[i], as an n x 1 tensor.
    pub fn bilinear_rows(&self, h: TensorRef, w: TensorRef, x: TensorRef) -> Result<TensorRef> {
        let hw = self.matmul(h, w)?;
        let prod = self.mul(hw, x)?;
        Ok(self.row_sums(prod))
    }

    /// Bilinear scores of every row of `h` against one summary row `s` (1 x d).
    pub fn bilinear_vs_row(&self, h: TensorRef, w: TensorRef, s: TensorRef) -> Result<TensorRef> {
        if self.shape(s).0 != 1 {
            return Err(Error::Shape {
                op: "bilinear_vs_row",
                detail: format!("summary must be a single row, got {:?}", self.shape(s)),
            });
        }
        let hw = self.matmul(h, w)?;
        self.matmul_bt(hw, s)
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate additively
    /// until `zero_grad`.
    pub fn backward(&self, loss: TensorRef) -> Result<()> {
        {
            let nodes = self.nodes.borrow();
            let shape = nodes[loss.0].value.shape();
            if shape != (1, 1) {
                return Err(Error::Shape {
                    op: "backward",
                    detail: format!("loss must be 1x1, got {shape:?}"),
                });
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        // Transient adjoints for this sweep; merged into persistent grads at
        // the end so repeated backward calls accumulate.
        let count = loss.0 + 1;
        let mut adj: Vec<Option<Matrix>> = (0..count).map(|_| None).collect();
        adj[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0]));

        for i in (0..count).rev() {
            let Some(g) = adj[i].take() else { continue };
            if nodes[i].requires_grad {
                match &mut nodes[i].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
            let send = |adj: &mut Vec<Option<Matrix>>, target: usize, delta: Matrix| match &mut adj
                [target]
            {
                Some(acc) => acc.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            };
            // Skip propagation into subtrees that hold no parameters.
            let needs = |nodes: &Vec<Node>, idx: usize| nodes[idx].requires_grad;
            match &nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if needs(&nodes, a) {
                        send(&mut adj, a, g.clone());
                    }
                    if needs(&nodes, b) {
                        send(&mut adj, b, g);
                    }
                }
                Op::Affine { x, mul } => {
                    let (x, mul) = (*x, *mul);
                    if needs(&nodes, x) {
                        let mut d = g;
                        d.scale_assign(mul);
                        send(&mut adj, x, d);
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if needs(&nodes, a) {
                        let mut d = g.clone();
                        for (e, &v) in d.data_mut().iter_mut().zip(nodes[b].value.data()) {
                            *e *= v;
                        }
                        send(&mut adj, a, d);
                    }
                    if needs(&nodes, b) {
                        let mut d = g;
                        for (e, &v) in d.data_mut().iter_mut().zip(nodes[a].value.data()) {
                            *e *= v;
                        }
                        send(&mut adj, b, d);
                    }
                }
                Op::Div(a, b) => {
                    let (a, b) = (*a, *b);
                    if needs(&nodes, a) {
                        let mut d = g.clone();
                        for (e, &v) in d.data_mut().iter_mut().zip(nodes[b].value.data()) {
                            *e /= v;
                        }
                        send(&mut adj, a, d);
                    }
                    if needs(&nodes, b) {
                        let mut d = g;
                        for ((e, &x), &y) in d
                            .data_mut()
                            .iter_mut()
                            .zip(nodes[a].value.data())
                            .zip(nodes[b].value.data())
                        {
                            *e *= -x / (y * y);
                        }
                        send(&mut adj, b, d);
                    }
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    if needs(&nodes, a) {
                        send(&mut adj, a, g.matmul_bt(&nodes[b].value));
                    }
                    if needs(&nodes, b) {
                        send(&mut adj, b, nodes[a].value.matmul_tn(&g));
                    }
                }
                Op::MatMulBt(a, b) => {
                    let (a, b) = (*a, *b);
                    if needs(&nodes, a) {
                        send(&mut adj, a, g.matmul(&nodes[b].value));
                    }
                    if needs(&nodes, b) {
                        send(&mut adj, b, g.matmul_tn(&nodes[a].value));
                    }
                }
                Op::Spmm { s, x } => {
                    let x = *x;
                    if needs(&nodes, x) {
                        let d = s.matmul_t(&g);
                        send(&mut adj, x, d);
                    }
                }
                Op::Prelu { x, slope } => {
                    let (x, slope) = (*x, *slope);
                    let a = nodes[slope].value.get(0, 0);
                    if needs(&nodes, x) {
                        let mut d = g.clone();
                        for (e, &v) in d.data_mut().iter_mut().zip(nodes[x].value.data()) {
                            if v < 0.0 {
                                *e *= a;
                            }
                        }
                        send(&mut adj, x, d);
                    }
                    if needs(&nodes, slope) {
                        let mut acc = 0.0;
                        for (&ge, &v) in g.data().iter().zip(nodes[x].value.data()) {
                            if v < 0.0 {
                                acc += ge * v;
                            }
                        }
                        send(&mut adj, slope, Matrix::from_vec(1, 1, vec![acc]));
                    }
                }
                Op::RowL2Normalize(x) => {
                    let x = *x;
                    if needs(&nodes, x) {
                        let v = &nodes[x].value;
                        let y = &nodes[i].value;
                        let mut d = Matrix::zeros(v.rows(), v.cols());
                        for r in 0..v.rows() {
                            let norm = row_norm(v.row(r));
                            let gr = g.row(r);
                            let dr = d.row_mut(r);
                            if norm > NORM_FLOOR {
                                let yr = y.row(r);
                                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                                for ((e, &ge), &ye) in dr.iter_mut().zip(gr).zip(yr) {
                                    *e = (ge - dot * ye) / norm;
                                }
                            } else {
                                for (e, &ge) in dr.iter_mut().zip(gr) {
                                    *e = ge / NORM_FLOOR;
                                }
                            }
                        }
                        send(&mut adj, x, d);
                    }
                }
                Op::MeanRowsGroups { x, groups } => {
                    let x = *x;
                    if needs(&nodes, x) {
                        let v = &nodes[x].value;
                        let mut d = Matrix::zeros(v.rows(), v.cols());
                        for (gi, group) in groups.iter().enumerate() {
                            let inv = 1.0 / group.len() as f64;
                            let gr = g.row(gi);
                            for &r in group.iter() {
                                for (e, &ge) in d.row_mut(r).iter_mut().zip(gr) {
                                    *e += ge * inv;
                                }
                            }
                        }
                        send(&mut adj, x, d);
                    }
                }
                Op::GatherRows { x, idx } => {
                    let x = *x;
                    if needs(&nodes, x) {
                        let v = &nodes[x].value;
                        let mut d = Matrix::zeros(v.rows(), v.cols());
                        for (gi, &r) in idx.iter().enumerate() {
                            for (e, &ge) in d.row_mut(r).iter_mut().zip(g.row(gi)) {
                                *e += ge;
                            }
                        }
                        send(&mut adj, x, d);
                    }
                }
                Op::Sigmoid(x) => {
                    let x = *x;
                    if needs(&nodes, x) {
                        let mut d = g;
                        for (e, &s) in d.data_mut().iter_mut().zip(nodes[i].value.data()) {
                            *e *= s * (1.0 - s);
                        }
                        send(&mut adj, x, d);
                    }
                }
                Op::LogSigmoid(x) => {
                    let x = *x;
                    if needs(&nodes, x) {
                        let mut d = g;
                        // d/dx log sigmoid(x) = 1 - sigmoid(x) = 1 - e^y
                        for (e, &y) in d.data_mut().iter_mut().zip(nodes[i].value.data()) {
                            *e *= 1.0 - y.exp();
                        }
                        send(&mut adj, x, d);
                    }
                }
                Op::Exp(x) => {
                    let x = *x;
                    if needs(&nodes, x) {
                        let mut d = g;
                        for (e, &y) in d.data_mut().iter_mut().zip(nodes[i].value.data()) {
                            *e *= y;
                        }
                        send(&mut adj, x, d);
                    }
                }
                Op::Log(x) => {
                    let x = *x;
                    if needs(&nodes, x) {
                        let mut d = g;
                        for (e, &v) in d.data_mut().iter_mut().zip(nodes[x].value.data()) {
                            *e /= v;
                        }
                        send(&mut adj, x, d);
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    let (x, lo, hi) = (*x, *lo, *hi);
                    if needs(&nodes, x) {
                        let mut d = g;
                        for (e, &v) in d.data_mut().iter_mut().zip(nodes[x].value.data()) {
                            if v < lo || v > hi {
                                *e = 0.0;
                            }
                        }
                        send(&mut adj, x, d);
                    }
                }
                Op::Sum(x) => {
                    let x = *x;
                    if needs(&nodes, x) {
                        let (r, c) = nodes[x].value.shape();
                        let mut d = Matrix::zeros(r, c);
                        d.fill(g.get(0, 0));
                        send(&mut adj, x, d);
                    }
                }
                Op::Mean(x) => {
                    let x = *x;
                    if needs(&nodes, x) {
                        let (r, c) = nodes[x].value.shape();
                        let mut d = Matrix::zeros(r, c);
                        d.fill(g.get(0, 0) / (r * c) as f64);
                        send(&mut adj, x, d);
                    }
                }
                Op::RowSums(x) => {
                    let x = *x;
                    if needs(&nodes, x) {
                        let (r, c) = nodes[x].value.shape();
                        let mut d = Matrix::zeros(r, c);
                        for row in 0..r {
                            let ge = g.get(row, 0);
                            d.row_mut(row).iter_mut().for_each(|e| *e = ge);
                        }
                        send(&mut adj, x, d);
                    }
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Central-difference check of analytic gradients.
///
/// `f` evaluates the scalar objective at the given parameter values;
/// `analytic` are the reverse-mode gradients at `params`. Returns
/// max over coordinates of |g_ad - g_fd| / max(1, |g_fd|).
pub fn finite_diff_check(
    f: &dyn Fn(&[Matrix]) -> Result<f64>,
    params: &[Matrix],
    analytic: &[Matrix],
    eps: f64,
) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Validation(format!(
            "finite-difference eps must lie in [1e-6, 1e-3], got {eps}"
        )));
    }
    if params.len() != analytic.len() {
        return Err(Error::Validation(format!(
            "{} parameter blocks but {} gradient blocks",
            params.len(),
            analytic.len()
        )));
    }
    let mut work: Vec<Matrix> = params.to_vec();
    let mut max_rel = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        if grad.shape() != params[pi].shape() {
            return Err(Error::Validation(format!(
                "gradient block {pi} has shape {:?}, parameter has {:?}",
                grad.shape(),
                params[pi].shape()
            )));
        }
        for ci in 0..grad.data().len() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + eps;
            let up = f(&work)?;
            work[pi].data_mut()[ci] = orig - eps;
            let down = f(&work)?;
            work[pi].data_mut()[ci] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite objective while perturbing block {pi} coordinate {ci}"
                )));
            }
            let fd = (up - down) / (2.0 * eps);
            let ad = grad.data()[ci];
            let rel = (ad - fd).abs() / fd.abs().max(1.0);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
        let data = (0..rows * cols)
            .map(|_| rng.random::<f64>() * 2.0 - 1.0)
            .collect();
        Matrix::from_vec(rows, cols, data)
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let x = tape.constant(Matrix::from_vec(3, 2, vec![1., 2., 3., 4., 5., 6.]));
        let i3 = tape.constant(Matrix::identity(3));
        let y = tape.matmul(i3, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn row_l2_normalize_345() {
        let tape = Tape::new();
        let x = tape.constant(Matrix::from_vec(1, 2, vec![3.0, 4.0]));
        let y = tape.row_l2_normalize(x);
        let v = tape.value(y);
        assert!((v.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((v.get(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn mean_rows_of_identical_rows() {
        let tape = Tape::new();
        let x = tape.constant(Matrix::from_vec(
            3,
            2,
            vec![0.5, -1.0, 0.5, -1.0, 0.5, -1.0],
        ));
        let m = tape.mean_rows(x, &[0, 1, 2]).unwrap();
        let v = tape.value(m);
        assert!((v.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((v.get(0, 1) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn grad_of_sum_of_linear_map() {
        // loss = sum(X W) => dW = Xᵀ 1
        let tape = Tape::new();
        let xv = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let x = tape.constant(xv.clone());
        let w = tape.param(Matrix::from_vec(2, 2, vec![0.1, 0.2, 0.3, 0.4]));
        let loss = tape.sum(tape.matmul(x, w).unwrap());
        tape.backward(loss).unwrap();
        let g = tape.grad(w).unwrap();
        let ones = Matrix::from_vec(2, 2, vec![1.0; 4]);
        let expect = xv.matmul_tn(&ones);
        assert!(g.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn grad_of_sigmoid_at_zero() {
        let tape = Tape::new();
        let z = tape.param(Matrix::zeros(2, 3));
        let loss = tape.sum(tape.sigmoid(z));
        tape.backward(loss).unwrap();
        let g = tape.grad(z).unwrap();
        assert!(g.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.param(Matrix::zeros(2, 2));
        match tape.backward(x) {
            Err(Error::Shape { op, .. }) => assert_eq!(op, "backward"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::new();
        let x = tape.param(Matrix::from_vec(1, 1, vec![3.0]));
        let loss = tape.sum(tape.scale(x, 2.0));
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().get(0, 0), 4.0);
        tape.zero_grad();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().get(0, 0), 2.0);
    }

    #[test]
    fn reused_operand_accumulates() {
        // loss = sum(x ∘ x) => grad = 2x
        let tape = Tape::new();
        let x = tape.param(Matrix::from_vec(1, 3, vec![1.0, -2.0, 0.5]));
        let loss = tape.sum(tape.mul(x, x).unwrap());
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        assert!(g.max_abs_diff(&Matrix::from_vec(1, 3, vec![2.0, -4.0, 1.0])) < 1e-15);
    }

    #[test]
    fn backward_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xv = rand_matrix(4, 3, &mut rng);
        let grad_of = |a: f64, b: f64| -> Matrix {
            let tape = Tape::new();
            let x = tape.param(xv.clone());
            let f = tape.sum(tape.sigmoid(x));
            let g = tape.mean(tape.mul(x, x).unwrap());
            let fa = tape.scale(f, a);
            let gb = tape.scale(g, b);
            let loss = tape.add(fa, gb).unwrap();
            tape.backward(loss).unwrap();
            tape.grad(x).unwrap()
        };
        let gf = grad_of(1.0, 0.0);
        let gg = grad_of(0.0, 1.0);
        let combined = grad_of(2.5, -1.25);
        let mut expect = Matrix::zeros(4, 3);
        expect.axpy(2.5, &gf);
        expect.axpy(-1.25, &gg);
        assert!(combined.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn cosine_of_normalized_rows_equals_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let raw_a = rand_matrix(5, 4, &mut rng);
        let raw_b = rand_matrix(6, 4, &mut rng);
        let normalize = |m: &Matrix| {
            let mut out = m.clone();
            for i in 0..m.rows() {
                let n = row_norm(m.row(i));
                out.row_mut(i).iter_mut().for_each(|v| *v /= n);
            }
            out
        };
        let (na, nb) = (normalize(&raw_a), normalize(&raw_b));
        let tape = Tape::new();
        let a = tape.constant(na.clone());
        let b = tape.constant(nb.clone());
        let cos = tape.cosine_similarity_matrix(a, b).unwrap();
        assert!(tape.value(cos).max_abs_diff(&na.matmul_bt(&nb)) < 1e-12);
    }

    #[test]
    fn tape_replay_is_bit_identical() {
        let run = || -> Matrix {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let xv = rand_matrix(6, 5, &mut rng);
            let wv = rand_matrix(5, 4, &mut rng);
            let tape = Tape::new();
            let x = tape.constant(xv);
            let w = tape.param(wv);
            let h = tape.matmul(x, w).unwrap();
            let s = tape.sigmoid(h);
            let c = tape.cosine_similarity_matrix(s, s).unwrap();
            let loss = tape.mean(c);
            tape.backward(loss).unwrap();
            tape.grad(w).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn shape_errors_name_the_op() {
        let tape = Tape::new();
        let a = tape.constant(Matrix::zeros(2, 3));
        let b = tape.constant(Matrix::zeros(2, 3));
        match tape.matmul(a, b) {
            Err(Error::Shape { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("expected shape error, got {other:?}"),
        }
        match tape.mean_rows(a, &[]) {
            Err(Error::Shape { op, .. }) => assert_eq!(op, "mean_rows"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn finite_diff_eps_guard() {
        let f = |_: &[Matrix]| Ok(0.0);
        match finite_diff_check(&f, &[], &[], 1e-2) {
            Err(Error::Validation(msg)) => assert!(msg.contains("eps")),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn finite_diff_quadratic_is_tight() {
        // f(W) = sum(W ∘ W): central differences are exact on quadratics.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let wv = rand_matrix(3, 3, &mut rng);
        let f = |ps: &[Matrix]| -> Result<f64> { Ok(ps[0].data().iter().map(|v| v * v).sum()) };
        let tape = Tape::new();
        let w = tape.param(wv.clone());
        let loss = tape.sum(tape.mul(w, w).unwrap());
        tape.backward(loss).unwrap();
        let analytic = vec![tape.grad(w).unwrap()];
        let err = finite_diff_check(&f, &[wv], &analytic, 1e-4).unwrap();
        assert!(err <= 1e-9, "relative error {err}");
    }

    /// Randomized finite-difference agreement for every primitive.
    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        type Build = fn(&Tape, TensorRef, TensorRef) -> TensorRef;
        let builders: Vec<(&str, Build)> = vec![
            ("add", |t, a, b| t.add(a, b).unwrap()),
            ("affine", |t, a, _| t.affine(a, -1.5, 0.25)),
            ("mul", |t, a, b| t.mul(a, b).unwrap()),
            ("div", |t, a, b| {
                // keep the denominator away from zero
                let shifted = t.affine(b, 1.0, 3.0);
                t.div(a, shifted).unwrap()
            }),
            ("matmul", |t, a, b| {
                t.matmul(t.matmul_bt(a, b).unwrap(), b).unwrap()
            }),
            ("matmul_bt", |t, a, b| t.matmul_bt(a, b).unwrap()),
            ("prelu", |t, a, _| {
                let slope = t.param(Matrix::from_vec(1, 1, vec![0.25]));
                t.prelu(a, slope).unwrap()
            }),
            ("row_l2_normalize", |t, a, _| t.row_l2_normalize(a)),
            ("mean_rows", |t, a, _| t.mean_rows(a, &[0, 1]).unwrap()),
            ("gather_rows", |t, a, _| {
                t.gather_rows(a, Rc::new(vec![1, 0, 1])).unwrap()
            }),
            ("sigmoid", |t, a, _| t.sigmoid(a)),
            ("log_sigmoid", |t, a, _| t.log_sigmoid(a)),
            ("exp", |t, a, _| t.exp(a)),
            ("log", |t, a, _| {
                let pos = t.affine(t.sigmoid(a), 1.0, 0.5);
                t.log(pos)
            }),
            ("sum", |t, a, _| t.sum(a)),
            ("mean", |t, a, _| t.mean(a)),
            ("row_sums", |t, a, _| t.row_sums(a)),
            ("cosine", |t, a, b| {
                t.cosine_similarity_matrix(a, b).unwrap()
            }),
            ("clamp", |t, a, _| t.clamp(a, -0.5, 0.5)),
            ("bilinear_rows", |t, a, b| {
                let d = t.shape(a).1;
                let w = t.param(Matrix::identity(d));
                t.bilinear_rows(a, w, b).unwrap()
            }),
        ];
        for (name, build) in &builders {
            for trial in 0..30 {
                let rows = rng.random_range(2..6);
                let cols = rng.random_range(2..6);
                let av = rand_matrix(rows, cols, &mut rng);
                let bv = rand_matrix(rows, cols, &mut rng);
                let run = |pa: &Matrix, pb: &Matrix| -> (f64, Matrix, Matrix) {
                    let tape = Tape::new();
                    let a = tape.param(pa.clone());
                    let b = tape.param(pb.clone());
                    let out = build(&tape, a, b);
                    // mean-pool to a scalar through a sigmoid for curvature
                    let loss = tape.mean(tape.sigmoid(out));
                    tape.backward(loss).unwrap();
                    (
                        tape.scalar(loss).unwrap(),
                        tape.grad(a).unwrap_or_else(|| Matrix::zeros(rows, cols)),
                        tape.grad(b).unwrap_or_else(|| Matrix::zeros(rows, cols)),
                    )
                };
                let (_, ga, gb) = run(&av, &bv);
                let f = |ps: &[Matrix]| -> Result<f64> { Ok(run(&ps[0], &ps[1]).0) };
                let err =
                    finite_diff_check(&f, &[av.clone(), bv.clone()], &[ga, gb], 1e-5).unwrap();
                assert!(
                    err <= 1e-6,
                    "primitive {name} trial {trial}: relative error {err}"
                );
            }
        }
    }

    #[test]
    fn spmm_gradient_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let g = crate::synth::er_graph(6, 0.5, 3);
        let sp = Rc::new(SpMat::from_graph(&g));
        let xv = rand_matrix(6, 4, &mut rng);
        // dense adjacency for the oracle
        let mut dense = Matrix::zeros(6, 6);
        for u in 0..6 {
            let (cols, ws) = g.neighbors(u);
            for (&v, &w) in cols.iter().zip(ws) {
                dense.set(u, v, w);
            }
        }
        let run_sparse = |x: &Matrix| -> (f64, Matrix) {
            let tape = Tape::new();
            let xt = tape.param(x.clone());
            let y = tape.spmm(&sp, xt).unwrap();
            let loss = tape.mean(tape.sigmoid(y));
            tape.backward(loss).unwrap();
            (tape.scalar(loss).unwrap(), tape.grad(xt).unwrap())
        };
        let run_dense = |x: &Matrix| -> Matrix {
            let tape = Tape::new();
            let a = tape.constant(dense.clone());
            let xt = tape.param(x.clone());
            let y = tape.matmul(a, xt).unwrap();
            let loss = tape.mean(tape.sigmoid(y));
            tape.backward(loss).unwrap();
            tape.grad(xt).unwrap()
        };
        let (_, gs) = run_sparse(&xv);
        let gd = run_dense(&xv);
        assert!(gs.max_abs_diff(&gd) < 1e-12);
    }
}
