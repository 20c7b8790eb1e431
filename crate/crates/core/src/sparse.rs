//! CSR matrices that enter the autograd tape as constants.
//!
//! The transpose is materialized up front so the backward pass of
//! `spmm(S, D)` (which needs Sᵀ·grad) stays a plain CSR product.

use rayon::prelude::*;

use crate::dense::Matrix;
use crate::graph::{FeatureMatrix, SparseGraph};

#[derive(Debug, Clone)]
pub struct SpMat {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    vals: Vec<f64>,
    // Transposed copy; for symmetric matrices builders may alias the forward data.
    t_indptr: Vec<usize>,
    t_indices: Vec<usize>,
    t_vals: Vec<f64>,
}

impl SpMat {
    pub fn from_csr(
        rows: usize,
        cols: usize,
        indptr: Vec<usize>,
        indices: Vec<usize>,
        vals: Vec<f64>,
    ) -> SpMat {
        assert_eq!(indptr.len(), rows + 1);
        assert_eq!(indices.len(), vals.len());
        assert_eq!(*indptr.last().unwrap(), indices.len());
        let (t_indptr, t_indices, t_vals) = transpose_csr(rows, cols, &indptr, &indices, &vals);
        SpMat {
            rows,
            cols,
            indptr,
            indices,
            vals,
            t_indptr,
            t_indices,
            t_vals,
        }
    }

    pub fn from_graph(g: &SparseGraph) -> SpMat {
        SpMat::from_csr(
            g.node_count(),
            g.node_count(),
            g.row_offsets().to_vec(),
            g.col_indices().to_vec(),
            g.weights().to_vec(),
        )
    }

    /// Sparse view of a dense feature block; zeros are dropped.
    pub fn from_features(xs: &FeatureMatrix) -> SpMat {
        let (n, d) = (xs.rows(), xs.dims());
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        let mut vals = Vec::new();
        indptr.push(0);
        for i in 0..n {
            for (j, &v) in xs.row(i).iter().enumerate() {
                if v != 0.0 {
                    indices.push(j);
                    vals.push(v);
                }
            }
            indptr.push(indices.len());
        }
        SpMat::from_csr(n, d, indptr, indices, vals)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// self * dense, row-parallel with fixed per-row accumulation order.
    pub fn matmul(&self, dense: &Matrix) -> Matrix {
        assert_eq!(self.cols, dense.rows(), "spmm dims");
        spmm_raw(self.rows, &self.indptr, &self.indices, &self.vals, dense)
    }

    /// selfᵀ * dense using the prebuilt transpose.
    pub fn matmul_t(&self, dense: &Matrix) -> Matrix {
        assert_eq!(self.rows, dense.rows(), "spmm_t dims");
        spmm_raw(
            self.cols,
            &self.t_indptr,
            &self.t_indices,
            &self.t_vals,
            dense,
        )
    }

    /// Rows [lo, hi) of self * dense, for chunked inference. Chunk boundaries
    /// cannot change any output value: each row is computed independently.
    pub fn matmul_row_range(&self, lo: usize, hi: usize, dense: &Matrix) -> Matrix {
        assert!(lo <= hi && hi <= self.rows, "row range");
        assert_eq!(self.cols, dense.rows(), "spmm dims");
        let m = dense.cols();
        let mut out = vec![0.0; (hi - lo) * m];
        for (local, i) in (lo..hi).enumerate() {
            let orow = &mut out[local * m..(local + 1) * m];
            for k in self.indptr[i]..self.indptr[i + 1] {
                let w = self.vals[k];
                let drow = dense.row(self.indices[k]);
                for (o, &d) in orow.iter_mut().zip(drow) {
                    *o += w * d;
                }
            }
        }
        Matrix::from_vec(hi - lo, m, out)
    }

    /// self * v for a dense vector.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec dims");
        (0..self.rows)
            .map(|i| {
                let (a, b) = (self.indptr[i], self.indptr[i + 1]);
                self.indices[a..b]
                    .iter()
                    .zip(&self.vals[a..b])
                    .map(|(&j, &w)| w * v[j])
                    .sum()
            })
            .collect()
    }
}

fn transpose_csr(
    rows: usize,
    cols: usize,
    indptr: &[usize],
    indices: &[usize],
    vals: &[f64],
) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
    let nnz = vals.len();
    let mut count = vec![0usize; cols + 1];
    for &j in indices {
        count[j + 1] += 1;
    }
    for j in 0..cols {
        count[j + 1] += count[j];
    }
    let t_indptr = count.clone();
    let mut cursor = count;
    let mut t_indices = vec![0usize; nnz];
    let mut t_vals = vec![0.0; nnz];
    for i in 0..rows {
        for k in indptr[i]..indptr[i + 1] {
            let j = indices[k];
            let pos = cursor[j];
            t_indices[pos] = i;
            t_vals[pos] = vals[k];
            cursor[j] += 1;
        }
    }
    (t_indptr, t_indices, t_vals)
}

fn spmm_raw(
    out_rows: usize,
    indptr: &[usize],
    indices: &[usize],
    vals: &[f64],
    dense: &Matrix,
) -> Matrix {
    let m = dense.cols();
    let mut out = vec![0.0; out_rows * m];
    out.par_chunks_mut(m).enumerate().for_each(|(i, orow)| {
        for k in indptr[i]..indptr[i + 1] {
            let w = vals[k];
            let drow = dense.row(indices[k]);
            for (o, &d) in orow.iter_mut().zip(drow) {
                *o += w * d;
            }
        }
    });
    Matrix::from_vec(out_rows, m, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SparseGraph;

    #[test]
    fn spmm_matches_dense_product() {
        let g = SparseGraph::from_edges(3, &[(0, 1, 2.0), (1, 2, 0.5)]).unwrap();
        let s = SpMat::from_graph(&g);
        let x = Matrix::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let got = s.matmul(&x);
        // dense adjacency
        let mut a = Matrix::zeros(3, 3);
        a.set(0, 1, 2.0);
        a.set(1, 0, 2.0);
        a.set(1, 2, 0.5);
        a.set(2, 1, 0.5);
        assert!(got.max_abs_diff(&a.matmul(&x)) == 0.0);
        // transpose path equals the symmetric forward path
        assert!(s.matmul_t(&x).max_abs_diff(&got) == 0.0);
    }

    #[test]
    fn transpose_of_rectangular_features() {
        let xs = FeatureMatrix::new(2, 3, vec![1.0, 0.0, 2.0, 0.0, 3.0, 0.0]).unwrap();
        let s = SpMat::from_features(&xs);
        assert_eq!(s.nnz(), 3);
        let v = Matrix::from_vec(2, 1, vec![1.0, 1.0]);
        let t = s.matmul_t(&v); // Xᵀ·1 = column sums
        assert_eq!(t.data(), &[1.0, 3.0, 2.0]);
    }
}
