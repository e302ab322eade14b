//! The individual self-supervised objectives. All contrastive terms are
//! temperature-scaled InfoNCE computed through a log-sum-exp, with the
//! positive included in the denominator. Inputs that act as targets
//! (EMA embeddings, queue entries, target codes) enter as plain tensors and
//! are therefore structurally detached.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Cross-batch InfoNCE: row i of `anchors` must match row i of `candidates`,
/// against all other rows as negatives. Both inputs are unit-row batches in
/// the same space; `candidates` may be differentiable.
pub fn loss_x_contrast<S: Scalar>(
    anchors: &Var<S>,
    candidates: &Var<S>,
    temperature: S,
) -> Result<Var<S>> {
    let b = anchors.shape()[0];
    if b < 2 {
        return Err(Error::domain("cross contrast needs a batch of at least 2"));
    }
    if candidates.shape() != anchors.shape() {
        return Err(Error::shape("anchor/candidate batches must align"));
    }
    let sims = anchors.matmul(&candidates.transpose()?)?;
    let logits = sims.scale(S::one() / temperature);
    let mask = Rc::new(vec![true; b * b]);
    let log_probs = logits.masked_log_softmax_rows(mask)?;
    let diag = Rc::new((0..b).collect::<Vec<_>>());
    Ok(log_probs.gather_rows(diag)?.mean().neg())
}

/// InfoNCE against a fixed negative set: the positive (row-aligned) plus
/// every negative row form the denominator. `positives` and `negatives` are
/// detached unit-row tensors in the anchor space.
pub fn loss_nce_with_negatives<S: Scalar>(
    anchors: &Var<S>,
    positives: &Tensor<S>,
    negatives: &Tensor<S>,
    temperature: S,
) -> Result<Var<S>> {
    let shape = anchors.shape();
    let (b, d) = (shape[0], shape[1]);
    if positives.shape() != [b, d] {
        return Err(Error::shape("positives must align with the anchor batch"));
    }
    if negatives.rows() == 0 {
        return Err(Error::domain("empty negative set"));
    }
    if negatives.cols() != d {
        return Err(Error::shape("negatives live in a different space"));
    }
    let tape = anchors.tape();
    let pos = tape.constant(positives.clone());
    let pos_sims = anchors.mul(&pos)?.sum_rows()?.reshape(vec![b, 1])?;
    let negs = tape.constant(negatives.transpose());
    let neg_sims = anchors.matmul(&negs)?;
    let logits = pos_sims.concat_cols(&neg_sims)?.scale(S::one() / temperature);
    let q = negatives.rows();
    let mask = Rc::new(vec![true; b * (q + 1)]);
    let log_probs = logits.masked_log_softmax_rows(mask)?;
    let first = Rc::new(vec![0usize; b]);
    Ok(log_probs.gather_rows(first)?.mean().neg())
}

/// Prototype distillation: cross-entropy between detached target codes and
/// the online softmax over message-prototype similarities. `prototypes` is
/// the trainable unit-row bank, `target_codes` the detached `[B, P]`
/// assignment distribution.
pub fn loss_proto<S: Scalar>(
    messages: &Var<S>,
    prototypes: &Var<S>,
    target_codes: &Tensor<S>,
    temperature: S,
) -> Result<Var<S>> {
    let b = messages.shape()[0];
    let p = prototypes.shape()[0];
    if p < 2 {
        return Err(Error::domain("prototype bank needs at least 2 prototypes"));
    }
    if target_codes.shape() != [b, p] {
        return Err(Error::shape("target codes must be [batch, prototypes]"));
    }
    let scores = messages.matmul(&prototypes.transpose()?)?.scale(S::one() / temperature);
    let mask = Rc::new(vec![true; b * p]);
    let log_probs = scores.masked_log_softmax_rows(mask)?;
    let codes = messages.tape().constant(target_codes.clone());
    Ok(codes.mul(&log_probs)?.sum().scale(-S::one() / S::of(b as f64)))
}

/// Mean squared Euclidean distance between online rows and detached targets.
pub fn loss_pred_alignment<S: Scalar>(online: &Var<S>, targets: &Tensor<S>) -> Result<Var<S>> {
    let b = online.shape()[0];
    if targets.shape() != online.shape().as_slice() {
        return Err(Error::shape("prediction targets must align with the online batch"));
    }
    let t = online.tape().constant(targets.clone());
    let diff = online.sub(&t)?;
    Ok(diff.mul(&diff)?.sum().scale(S::one() / S::of(b as f64)))
}

/// Mean (1 - cosine) between aligned rows of two differentiable batches.
pub fn loss_cosine_gap<S: Scalar>(a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("cosine gap needs aligned batches"));
    }
    let an = a.l2_normalize_rows_guarded();
    let bn = b.l2_normalize_rows_guarded();
    let cos = an.mul(&bn)?.sum_rows()?;
    Ok(cos.neg().add_scalar(S::one()).mean())
}

/// `1 - linear CKA` between the online batch and a detached target batch,
/// with the denominator floored to stay defined on degenerate batches.
pub fn loss_cka_alignment<S: Scalar>(online: &Var<S>, targets: &Tensor<S>) -> Result<Var<S>> {
    if online.shape()[0] != targets.rows() {
        return Err(Error::shape("CKA batches must share the row count"));
    }
    let xc = online.center_cols()?;
    let yc = online.tape().constant(targets.centered_cols());
    let cross = xc.transpose()?.matmul(&yc)?;
    let hsic = cross.mul(&cross)?.sum();
    let xx = xc.transpose()?.matmul(&xc)?;
    let sxx = xx.mul(&xx)?.sum().sqrt()?;
    let yyv = yc.value();
    let yy = yyv.transpose().matmul(&yyv).expect("square gram");
    let syy = yy.dot(&yy).expect("frobenius").sqrt();
    let denom = sxx.scale(syy).clamp(S::of(1e-30), S::infinity());
    let cka = hsic.div(&denom)?;
    Ok(cka.neg().add_scalar(S::one()))
}
