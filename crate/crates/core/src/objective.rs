//! The three contrastive losses (node, neighborhood, subgraph level) and
//! their weighted combination.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, TensorRef};
use crate::dense::Matrix;
use crate::error::{Error, Result};

/// Probabilities are clamped to [PROB_FLOOR, 1 - PROB_FLOOR] before any log.
pub const PROB_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got ({}, {}, {})",
                self.alpha, self.beta, self.gamma
            )));
        }
        if self.alpha == 0.0 && self.beta == 0.0 && self.gamma == 0.0 {
            return Err(Error::Config(
                "at least one loss weight must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-epoch loss record, streamed as one JSON line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub micro: f64,
    pub meso: f64,
    #[serde(rename = "macro")]
    pub macro_level: f64,
    pub total: f64,
}

/// log of the clamped agreement probability for a score tensor; `positive`
/// selects log D versus log(1 - D).
fn log_prob(tape: &Tape, score: TensorRef, positive: bool) -> TensorRef {
    let p = tape.sigmoid(score);
    let p = if positive {
        p
    } else {
        tape.affine(p, -1.0, 1.0)
    };
    tape.log(tape.clamp(p, PROB_FLOOR, 1.0 - PROB_FLOOR))
}

/// Diagonal of a square tensor as a column, via an identity mask.
fn diag_column(tape: &Tape, square: TensorRef) -> Result<TensorRef> {
    let n = tape.shape(square).0;
    let mask = tape.constant(Matrix::identity(n));
    Ok(tape.row_sums(tape.mul(square, mask)?))
}

/// a - b elementwise.
fn sub(tape: &Tape, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
    tape.add(a, tape.scale(b, -1.0))
}

/// Node-level InfoNCE over cosine similarities. For each target the positive
/// pair is its own row in the other view; negatives are the other B-1
/// targets in both views. Both directions are averaged with weight 1/(2B).
pub fn micro_loss(
    tape: &Tape,
    h1: TensorRef,
    h2: TensorRef,
    target_locals: &[usize],
) -> Result<TensorRef> {
    let b = target_locals.len();
    if b == 0 {
        return Err(Error::Validation(
            "micro loss needs at least one target".into(),
        ));
    }
    let idx = Rc::new(target_locals.to_vec());
    let t1 = tape.gather_rows(h1, Rc::clone(&idx))?;
    let t2 = tape.gather_rows(h2, idx)?;

    let direction = |anchor: TensorRef, other: TensorRef| -> Result<TensorRef> {
        let cross = tape.exp(tape.cosine_similarity_matrix(anchor, other)?);
        let intra = tape.exp(tape.cosine_similarity_matrix(anchor, anchor)?);
        let pos = diag_column(tape, cross)?;
        let cross_neg = sub(tape, tape.row_sums(cross), diag_column(tape, cross)?)?;
        let intra_neg = sub(tape, tape.row_sums(intra), diag_column(tape, intra)?)?;
        let denom = tape.add(pos, tape.add(cross_neg, intra_neg)?)?;
        Ok(tape.log(tape.div(pos, denom)?))
    };
    let d12 = direction(t1, t2)?;
    let d21 = direction(t2, t1)?;
    let total = tape.sum(tape.add(d12, d21)?);
    Ok(tape.scale(total, -1.0 / (2.0 * b as f64)))
}

/// Neighborhood-level contrastiveness: each target's embedding against the
/// mean of its register neighbors in the other view, with the corrupted
/// embedding as the negative anchor.
///
/// `neighbor_groups[b]` holds the local row indices of target b's register
/// neighbors; resolving globals to locals is the sampler's contract, so an
/// out-of-range group is an internal invariant violation.
pub fn meso_loss(
    tape: &Tape,
    h1: TensorRef,
    h2: TensorRef,
    h_corrupt: TensorRef,
    w_d: TensorRef,
    neighbor_groups: Rc<Vec<Vec<usize>>>,
    target_locals: &[usize],
) -> Result<TensorRef> {
    let b = target_locals.len();
    if b == 0 || neighbor_groups.len() != b {
        return Err(Error::Validation(format!(
            "meso loss needs one neighbor group per target ({} groups, {b} targets)",
            neighbor_groups.len()
        )));
    }
    let idx = Rc::new(target_locals.to_vec());
    let t1 = tape.gather_rows(h1, Rc::clone(&idx))?;
    let t2 = tape.gather_rows(h2, Rc::clone(&idx))?;
    let tc = tape.gather_rows(h_corrupt, idx)?;
    let n1 = tape.mean_rows_groups(h1, Rc::clone(&neighbor_groups))?;
    let n2 = tape.mean_rows_groups(h2, neighbor_groups)?;

    let side = |anchor: TensorRef, summary: TensorRef| -> Result<TensorRef> {
        let pos = log_prob(tape, tape.bilinear_rows(anchor, w_d, summary)?, true);
        let neg = log_prob(tape, tape.bilinear_rows(tc, w_d, summary)?, false);
        tape.add(tape.sum(pos), tape.sum(neg))
    };
    let l1 = side(t1, n2)?;
    let l2 = side(t2, n1)?;
    let total = tape.add(l1, l2)?;
    Ok(tape.scale(total, -1.0 / (2.0 * b as f64)))
}

/// Subgraph-level contrastiveness: targets against the mean over all rows of
/// the other view, corrupted anchors as negatives.
pub fn macro_loss(
    tape: &Tape,
    h1: TensorRef,
    h2: TensorRef,
    h_corrupt: TensorRef,
    w_d: TensorRef,
    target_locals: &[usize],
) -> Result<TensorRef> {
    let b = target_locals.len();
    if b == 0 {
        return Err(Error::Validation(
            "macro loss needs at least one target".into(),
        ));
    }
    let idx = Rc::new(target_locals.to_vec());
    let t1 = tape.gather_rows(h1, Rc::clone(&idx))?;
    let t2 = tape.gather_rows(h2, Rc::clone(&idx))?;
    let tc = tape.gather_rows(h_corrupt, idx)?;
    let p1: Vec<usize> = (0..tape.shape(h1).0).collect();
    let p2: Vec<usize> = (0..tape.shape(h2).0).collect();
    let s1 = tape.mean_rows(h1, &p1)?;
    let s2 = tape.mean_rows(h2, &p2)?;

    let side = |anchor: TensorRef, summary: TensorRef| -> Result<TensorRef> {
        let pos = log_prob(tape, tape.bilinear_vs_row(anchor, w_d, summary)?, true);
        let neg = log_prob(tape, tape.bilinear_vs_row(tc, w_d, summary)?, false);
        tape.add(tape.sum(pos), tape.sum(neg))
    };
    let l1 = side(t1, s2)?;
    let l2 = side(t2, s1)?;
    let total = tape.add(l1, l2)?;
    Ok(tape.scale(total, -1.0 / (2.0 * b as f64)))
}

/// alpha*micro + beta*meso + gamma*macro on the tape.
pub fn total_loss(
    tape: &Tape,
    micro: TensorRef,
    meso: TensorRef,
    macro_level: TensorRef,
    weights: &LossWeights,
) -> Result<TensorRef> {
    weights.validate()?;
    let a = tape.scale(micro, weights.alpha);
    let b = tape.scale(meso, weights.beta);
    let c = tape.scale(macro_level, weights.gamma);
    tape.add(tape.add(a, b)?, c)
}
