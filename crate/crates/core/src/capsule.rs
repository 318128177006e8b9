//! Capsule head: primary capsules, squash, dynamic routing, norm-based
//! classification, and margin loss.
//!
//! Capsules are vector units whose norm encodes presence confidence. The
//! head reshapes backbone features into primary capsules, predicts one
//! vote per (input capsule, class) through a learned transformation, and
//! iteratively routes votes to class capsules by agreement. Routing is
//! fully differentiable; the routing-logit initialization is a constant,
//! and the softmax stabilization subtracts a detached rowwise maximum,
//! which leaves values and gradients unchanged (softmax is shift
//! invariant).

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ReduceKind, Tape, Tensor};

/// Margin-loss defaults: target-class margin, off-class margin, off-class
/// down-weight.
pub const MARGIN_M_PLUS: f64 = 0.9;
pub const MARGIN_M_MINUS: f64 = 0.1;
pub const MARGIN_LAMBDA: f64 = 0.5;

/// Norm-bounding nonlinearity along the last axis: s maps to
/// (|s|^2/(1+|s|^2)) * (s/|s|), with squash(0) = 0. The norm inside is
/// guarded by a tiny additive constant so the gradient stays finite at
/// the zero vector; the guard is far below representable effect for any
/// non-zero input.
pub fn squash<T: Scalar>(tape: &mut Tape<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    if s.rank() == 0 {
        return Err(Error::shape("squash", "expected at least one axis".to_string()));
    }
    let last = s.rank() - 1;
    let sq = tape.mul(s, s)?;
    let nsq = tape.reduce(ReduceKind::Sum, &sq, &[last])?;
    let mut keep = nsq.shape().to_vec();
    keep.push(1);
    let nsq1 = tape.reshape(&nsq, keep)?;
    let guard = Tensor::scalar(T::NORM_GUARD);
    let guarded = tape.add(&nsq1, &guard)?;
    let norm = tape.sqrt(&guarded)?;
    let one = Tensor::scalar(T::ONE);
    let denom = tape.add(&nsq1, &one)?;
    let scale = tape.div(&norm, &denom)?;
    tape.mul(s, &scale)
}

/// Reshapes B x C x H x W features into B x M x P primary capsules with
/// M = H*W*(C/P), ordered by (y, x, capsule type), and squashes each.
/// Capsule type t at a location takes channels [t*P, (t+1)*P).
pub fn primary_capsules<T: Scalar>(
    tape: &mut Tape<T>,
    features: &Tensor<T>,
    caps_dim: usize,
) -> Result<Tensor<T>> {
    if features.rank() != 4 {
        return Err(Error::shape(
            "primary_capsules",
            format!("expected rank-4 features, got {:?}", features.shape()),
        ));
    }
    let (b, c, h, w) = (features.shape()[0], features.shape()[1], features.shape()[2], features.shape()[3]);
    if caps_dim == 0 || c % caps_dim != 0 {
        return Err(Error::Config(format!(
            "channel count {} is not divisible by the primary capsule dim {}",
            c, caps_dim
        )));
    }
    let m = h * w * (c / caps_dim);
    let p = tape.permute(features, &[0, 2, 3, 1])?;
    let u = tape.reshape(&p, vec![b, m, caps_dim])?;
    squash(tape, &u)
}

/// Couplings observed during routing, one (B, M, c) tensor per iteration.
pub struct RoutingTrace<T: Scalar> {
    pub couplings: Vec<Tensor<T>>,
}

fn rowwise_max_detached<T: Scalar>(b: &Tensor<T>) -> Tensor<T> {
    let (bb, m, c) = (b.shape()[0], b.shape()[1], b.shape()[2]);
    let data = b.data();
    let mut out = Vec::with_capacity(bb * m);
    for r in 0..bb * m {
        let row = &data[r * c..(r + 1) * c];
        let mut best = row[0];
        for &v in &row[1..] {
            if v > best {
                best = v;
            }
        }
        out.push(best);
    }
    Tensor::from_vec(vec![bb, m, 1], out).expect("max shape is consistent")
}

/// Routing by agreement over prediction votes u_hat (B, M, c, d).
/// Per iteration: couplings = softmax of the logits over the class axis,
/// per-class weighted vote sum, squash, then logit update by the
/// vote/output dot product. Returns the final class capsules (B, c, d)
/// and the per-iteration couplings.
pub fn dynamic_routing<T: Scalar>(
    tape: &mut Tape<T>,
    u_hat: &Tensor<T>,
    iterations: usize,
) -> Result<(Tensor<T>, RoutingTrace<T>)> {
    if iterations == 0 {
        return Err(Error::Config("routing iterations must be at least 1".to_string()));
    }
    if u_hat.rank() != 4 {
        return Err(Error::shape(
            "dynamic_routing",
            format!("expected (B, M, classes, d) votes, got {:?}", u_hat.shape()),
        ));
    }
    let (b, m, c, d) = (u_hat.shape()[0], u_hat.shape()[1], u_hat.shape()[2], u_hat.shape()[3]);
    let mut logits = Tensor::<T>::zeros(vec![b, m, c]);
    let mut trace = RoutingTrace { couplings: Vec::with_capacity(iterations) };
    let mut v = None;
    for _ in 0..iterations {
        let shift = rowwise_max_detached(&logits);
        let shifted = tape.sub(&logits, &shift)?;
        let e = tape.exp(&shifted)?;
        let denom = tape.reduce(ReduceKind::Sum, &e, &[2])?;
        let denom1 = tape.reshape(&denom, vec![b, m, 1])?;
        let couplings = tape.div(&e, &denom1)?;
        trace.couplings.push(couplings.clone());
        let c4 = tape.reshape(&couplings, vec![b, m, c, 1])?;
        let weighted = tape.mul(u_hat, &c4)?;
        let s = tape.reduce(ReduceKind::Sum, &weighted, &[1])?;
        let vr = squash(tape, &s)?;
        let v4 = tape.reshape(&vr, vec![b, 1, c, d])?;
        let agree = tape.mul(u_hat, &v4)?;
        let dots = tape.reduce(ReduceKind::Sum, &agree, &[3])?;
        logits = tape.add(&logits, &dots)?;
        v = Some(vr);
    }
    Ok((v.expect("at least one iteration"), trace))
}

/// Euclidean norm of each class capsule: (B, c, d) -> (B, c). The norm is
/// guarded like `squash` so its gradient is finite at zero capsules.
pub fn class_norms<T: Scalar>(tape: &mut Tape<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    if v.rank() < 2 {
        return Err(Error::shape("class_norms", format!("expected at least rank 2, got {:?}", v.shape())));
    }
    let last = v.rank() - 1;
    let sq = tape.mul(v, v)?;
    let nsq = tape.reduce(ReduceKind::Sum, &sq, &[last])?;
    let guard = Tensor::scalar(T::NORM_GUARD);
    let guarded = tape.add(&nsq, &guard)?;
    tape.sqrt(&guarded)
}

/// Predicted class per row of a (B, c) score matrix: argmax, ties toward
/// the lower index.
pub fn predict<T: Scalar>(scores: &Tensor<T>) -> Result<Vec<usize>> {
    if scores.rank() != 2 {
        return Err(Error::shape("predict", format!("expected (B, classes) scores, got {:?}", scores.shape())));
    }
    let (b, c) = (scores.shape()[0], scores.shape()[1]);
    if c == 0 {
        return Err(Error::contract("predict", "need at least one class"));
    }
    let data = scores.data();
    let mut out = Vec::with_capacity(b);
    for r in 0..b {
        let row = &data[r * c..(r + 1) * c];
        let mut best = 0usize;
        for (j, &vj) in row.iter().enumerate().skip(1) {
            if vj > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Margin loss over class-capsule norms (B, c): per class,
/// T*max(0, m_plus - n)^2 + lambda*(1-T)*max(0, n - m_minus)^2, summed
/// over classes and averaged over the batch.
pub fn margin_loss<T: Scalar>(
    tape: &mut Tape<T>,
    norms: &Tensor<T>,
    targets: &[usize],
    m_plus: f64,
    m_minus: f64,
    lambda: f64,
) -> Result<Tensor<T>> {
    if norms.rank() != 2 {
        return Err(Error::shape("margin_loss", format!("expected (B, classes) norms, got {:?}", norms.shape())));
    }
    let (b, c) = (norms.shape()[0], norms.shape()[1]);
    if targets.len() != b {
        return Err(Error::contract(
            "margin_loss",
            format!("{} targets for a batch of {}", targets.len(), b),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::contract("margin_loss", format!("target class {} out of range for {} classes", bad, c)));
    }
    let mut pos = vec![T::ZERO; b * c];
    let mut neg = vec![T::from_f64(lambda); b * c];
    for (i, &t) in targets.iter().enumerate() {
        pos[i * c + t] = T::ONE;
        neg[i * c + t] = T::ZERO;
    }
    let t_pos = Tensor::from_vec(vec![b, c], pos)?;
    let t_neg = Tensor::from_vec(vec![b, c], neg)?;

    let m_plus_t = Tensor::scalar(T::from_f64(m_plus));
    let neg_m_minus = Tensor::scalar(T::from_f64(-m_minus));
    let neg_norms = tape.negate(norms)?;
    let under = tape.add(&neg_norms, &m_plus_t)?;
    let under = tape.relu(&under)?;
    let under_sq = tape.mul(&under, &under)?;
    let hit = tape.mul(&under_sq, &t_pos)?;

    let over = tape.add(norms, &neg_m_minus)?;
    let over = tape.relu(&over)?;
    let over_sq = tape.mul(&over, &over)?;
    let miss = tape.mul(&over_sq, &t_neg)?;

    let per = tape.add(&hit, &miss)?;
    let inv_b = Tensor::scalar(T::from_f64(1.0 / b as f64));
    let scaled = tape.mul(&per, &inv_b)?;
    tape.sum_all(&scaled)
}
