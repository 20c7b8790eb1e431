//! Dense row-major f64 matrices with the handful of kernels the engine needs.
//!
//! Matrix products parallelize over output rows; within a row the reduction
//! order is fixed, so results are bit-identical for any worker count.

use rayon::prelude::*;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must match rows*cols");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// self * other, row-parallel with i-k-j inner order.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul dims");
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        out.par_chunks_mut(m).enumerate().for_each(|(i, orow)| {
            let arow = &self.data[i * k..(i + 1) * k];
            for (kk, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[kk * m..(kk + 1) * m];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        });
        Matrix::from_vec(n, m, out)
    }

    /// self * otherᵀ: rows of both operands dotted pairwise.
    pub fn matmul_bt(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_bt dims");
        let (n, k, m) = (self.rows, self.cols, other.rows);
        let mut out = vec![0.0; n * m];
        out.par_chunks_mut(m).enumerate().for_each(|(i, orow)| {
            let arow = &self.data[i * k..(i + 1) * k];
            for (j, o) in orow.iter_mut().enumerate() {
                let brow = &other.data[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for (&a, &b) in arow.iter().zip(brow) {
                    acc += a * b;
                }
                *o = acc;
            }
        });
        Matrix::from_vec(n, m, out)
    }

    /// selfᵀ * other without materializing the transpose.
    pub fn matmul_tn(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "matmul_tn dims");
        let (k, n, m) = (self.rows, self.cols, other.cols);
        // Sequential over k so the accumulation order is fixed.
        let mut out = vec![0.0; n * m];
        for kk in 0..k {
            let arow = &self.data[kk * n..(kk + 1) * n];
            let brow = &other.data[kk * m..(kk + 1) * m];
            for (i, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out[i * m..(i + 1) * m];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Matrix::from_vec(n, m, out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync) -> Matrix {
        let data = self.data.iter().map(|&x| f(x)).collect();
        Matrix::from_vec(self.rows, self.cols, data)
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "add dims");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// self += scale * other
    pub fn axpy(&mut self, scale: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "axpy dims");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for a in self.data.iter_mut() {
            *a *= s;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|a| *a = v);
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "diff dims");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Solve M X = B for X with partial-pivot Gaussian elimination. M is consumed.
/// Returns None when a pivot degenerates below 1e-300.
pub fn solve_dense(mut m: Matrix, mut b: Matrix) -> Option<Matrix> {
    assert_eq!(m.rows(), m.cols(), "solve needs a square system");
    assert_eq!(m.rows(), b.rows(), "rhs row count");
    let n = m.rows();
    let bw = b.cols();
    for col in 0..n {
        let mut pivot = col;
        let mut best = m.get(col, col).abs();
        for r in col + 1..n {
            let v = m.get(r, col).abs();
            if v > best {
                best = v;
                pivot = r;
            }
        }
        if best < 1e-300 {
            return None;
        }
        if pivot != col {
            for j in 0..n {
                let tmp = m.get(col, j);
                m.set(col, j, m.get(pivot, j));
                m.set(pivot, j, tmp);
            }
            for j in 0..bw {
                let tmp = b.get(col, j);
                b.set(col, j, b.get(pivot, j));
                b.set(pivot, j, tmp);
            }
        }
        let inv = 1.0 / m.get(col, col);
        for r in 0..n {
            if r == col {
                continue;
            }
            let factor = m.get(r, col) * inv;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                let v = m.get(r, j) - factor * m.get(col, j);
                m.set(r, j, v);
            }
            for j in 0..bw {
                let v = b.get(r, j) - factor * b.get(col, j);
                b.set(r, j, v);
            }
        }
    }
    for i in 0..n {
        let inv = 1.0 / m.get(i, i);
        for j in 0..bw {
            b.set(i, j, b.get(i, j) * inv);
        }
    }
    Some(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_is_noop() {
        let x = Matrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let i3 = Matrix::identity(3);
        assert_eq!(i3.matmul(&x), x);
    }

    #[test]
    fn matmul_bt_matches_explicit_transpose() {
        let a = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Matrix::from_vec(4, 3, (0..12).map(|i| i as f64 * 0.5).collect());
        let direct = a.matmul_bt(&b);
        let via_t = a.matmul(&b.transpose());
        assert!(direct.max_abs_diff(&via_t) == 0.0);
    }

    #[test]
    fn matmul_tn_matches_explicit_transpose() {
        let a = Matrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Matrix::from_vec(3, 4, (0..12).map(|i| i as f64 - 3.0).collect());
        let direct = a.matmul_tn(&b);
        let via_t = a.transpose().matmul(&b);
        assert!(direct.max_abs_diff(&via_t) < 1e-12);
    }

    #[test]
    fn solve_recovers_inverse_action() {
        let m = Matrix::from_vec(2, 2, vec![4.0, 1.0, 2.0, 3.0]);
        let b = Matrix::from_vec(2, 1, vec![1.0, 5.0]);
        let x = solve_dense(m.clone(), b.clone()).unwrap();
        let back = m.matmul(&x);
        assert!(back.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn solve_singular_returns_none() {
        let m = Matrix::from_vec(2, 2, vec![1.0, 2.0, 2.0, 4.0]);
        let b = Matrix::from_vec(2, 1, vec![1.0, 1.0]);
        assert!(solve_dense(m, b).is_none());
    }
}
