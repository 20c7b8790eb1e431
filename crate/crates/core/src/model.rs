//! Shared 1-layer GCN encoder, feature corruption, pooling readout and the
//! bilinear discriminator.

use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autograd::{Tape, TensorRef};
use crate::dense::Matrix;
use crate::error::{Error, Result};
use crate::graph::FeatureMatrix;
use crate::sparse::SpMat;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    PRelu,
    Relu,
    Identity,
}

/// Encoder weight plus the trainable activation slope.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub w: Matrix,
    pub act_param: f64,
}

/// Bilinear discriminator weight.
#[derive(Debug, Clone)]
pub struct DiscriminatorParams {
    pub w_d: Matrix,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub discriminator: DiscriminatorParams,
    pub activation: Activation,
}

impl ModelParams {
    pub fn input_dim(&self) -> usize {
        self.encoder.w.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.encoder.w.cols()
    }

    /// Glorot-uniform initialization, seeded.
    pub fn init<R: Rng>(d: usize, d_hidden: usize, activation: Activation, rng: &mut R) -> Self {
        ModelParams {
            encoder: EncoderParams {
                w: glorot(d, d_hidden, rng),
                act_param: 0.25,
            },
            discriminator: DiscriminatorParams {
                w_d: glorot(d_hidden, d_hidden, rng),
            },
            activation,
        }
    }

    /// Checkpoint format: "GZMP", u32 d, u32 d', f64 act_param, then W and
    /// W_D as f64 LE row-major.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (d, dh) = (self.input_dim(), self.hidden_dim());
        let mut buf = Vec::with_capacity(20 + 8 * (d * dh + dh * dh));
        buf.extend_from_slice(b"GZMP");
        buf.extend_from_slice(&(d as u32).to_le_bytes());
        buf.extend_from_slice(&(dh as u32).to_le_bytes());
        buf.extend_from_slice(&self.encoder.act_param.to_le_bytes());
        for &v in self.encoder.w.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &v in self.discriminator.w_d.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path, activation: Activation) -> Result<ModelParams> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let path_str = path.display().to_string();
        if bytes.len() < 20 || &bytes[..4] != b"GZMP" {
            return Err(Error::Parse {
                path: path_str,
                line: 0,
                msg: "missing GZMP magic".into(),
            });
        }
        let d = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let dh = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let act_param = f64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let expect = 20 + 8 * (d * dh + dh * dh);
        if bytes.len() != expect {
            return Err(Error::Parse {
                path: path_str,
                line: 0,
                msg: format!("checkpoint is {} bytes, expected {expect}", bytes.len()),
            });
        }
        let mut floats = bytes[20..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let w = Matrix::from_vec(d, dh, floats.by_ref().take(d * dh).collect());
        let w_d = Matrix::from_vec(dh, dh, floats.collect());
        Ok(ModelParams {
            encoder: EncoderParams { w, act_param },
            discriminator: DiscriminatorParams { w_d },
            activation,
        })
    }
}

fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// Applies the configured activation on the tape. ReLU reuses the PReLU
/// kernel with a frozen zero slope.
pub fn activate(
    tape: &Tape,
    z: TensorRef,
    slope: TensorRef,
    kind: Activation,
) -> Result<TensorRef> {
    match kind {
        Activation::PRelu => tape.prelu(z, slope),
        Activation::Relu => {
            let zero = tape.constant(Matrix::zeros(1, 1));
            tape.prelu(z, zero)
        }
        Activation::Identity => Ok(z),
    }
}

/// One GCN layer on the tape: act(A_norm * (X * W)). `adj_norm` must already
/// be symmetric-normalized with self loops; `x` holds the view's features.
pub fn encode(
    tape: &Tape,
    adj_norm: &Rc<SpMat>,
    x: &Rc<SpMat>,
    w: TensorRef,
    slope: TensorRef,
    kind: Activation,
) -> Result<TensorRef> {
    let xw = tape.spmm(x, w)?;
    let z = tape.spmm(adj_norm, xw)?;
    activate(tape, z, slope, kind)
}

/// Plain-matrix encoder rows [lo, hi) for inference over frozen parameters.
/// `xw` is the precomputed X*W.
pub fn encode_rows_plain(
    adj_norm: &SpMat,
    xw: &Matrix,
    lo: usize,
    hi: usize,
    act_param: f64,
    kind: Activation,
) -> Matrix {
    let mut z = adj_norm.matmul_row_range(lo, hi, xw);
    let slope = match kind {
        Activation::PRelu => act_param,
        Activation::Relu => 0.0,
        Activation::Identity => {
            return z;
        }
    };
    for v in z.data_mut().iter_mut() {
        if *v < 0.0 {
            *v *= slope;
        }
    }
    z
}

/// Uniform row permutation of the features; the structure stays untouched.
/// A single-row matrix cannot be shuffled and comes back flagged degenerate.
pub fn corrupt<R: Rng>(xs: &FeatureMatrix, rng: &mut R) -> (FeatureMatrix, bool) {
    let n = xs.rows();
    if n < 2 {
        return (xs.clone(), true);
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    (xs.gather(&perm), false)
}

/// Mean-pool selected rows of an encoded tensor into a 1 x d' summary.
pub fn readout_mean(tape: &Tape, h: TensorRef, rows: &[usize]) -> Result<TensorRef> {
    tape.mean_rows(h, rows)
}

/// Bilinear agreement probability sigma(hᵀ W_D x) for one pair of d' rows.
pub fn discriminate(tape: &Tape, h: TensorRef, x: TensorRef, w_d: TensorRef) -> Result<TensorRef> {
    let score = tape.bilinear_rows(h, w_d, x)?;
    Ok(tape.sigmoid(score))
}
