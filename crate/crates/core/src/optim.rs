//! AdamW with decoupled weight decay, the warmup + cosine learning-rate
//! schedule, and the cross-entropy loss used by the pooling head.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{ReduceKind, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// First/second moment accumulators, one pair per trainable parameter,
/// in `ParamSet::trainable_ids` order, plus the global step counter.
#[derive(Debug, Clone)]
pub struct OptState<T: Scalar> {
    pub step: u64,
    pub slots: Vec<(ParamId, Vec<T>, Vec<T>)>,
}

impl<T: Scalar> OptState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let slots = params
            .trainable_ids()
            .into_iter()
            .map(|id| {
                let n = params.value(id).numel();
                (id, vec![T::ZERO; n], vec![T::ZERO; n])
            })
            .collect();
        OptState { step: 0, slots }
    }
}

/// One optimizer step. `grads` aligns with `ParamSet::trainable_ids`;
/// `None` means no gradient reached the parameter this step and is
/// treated as zero. Decay is decoupled: weights shrink by lr*wd before
/// the moment update touches them.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamSet<T>,
    state: &mut OptState<T>,
    grads: &[Option<Vec<T>>],
    lr: f64,
    cfg: &OptConfig,
) -> Result<()> {
    if grads.len() != state.slots.len() {
        return Err(Error::contract(
            "adamw",
            format!("{} gradients for {} trainable parameters", grads.len(), state.slots.len()),
        ));
    }
    state.step += 1;
    let t = state.step;
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one_minus_b1 = T::from_f64(1.0 - cfg.beta1);
    let one_minus_b2 = T::from_f64(1.0 - cfg.beta2);
    let c1 = T::from_f64(1.0 / (1.0 - cfg.beta1.powf(t as f64)));
    let c2 = T::from_f64(1.0 / (1.0 - cfg.beta2.powf(t as f64)));
    let eps = T::from_f64(cfg.eps);
    let lr_t = T::from_f64(lr);
    let decay = T::from_f64(1.0 - lr * cfg.weight_decay);

    let mut updates = Vec::with_capacity(state.slots.len());
    for ((id, m, v), grad) in state.slots.iter_mut().zip(grads) {
        let current = params.value(*id);
        let n = current.numel();
        if let Some(g) = grad {
            if g.len() != n {
                return Err(Error::contract(
                    "adamw",
                    format!("gradient length {} for parameter of {} scalars", g.len(), n),
                ));
            }
        }
        let mut w: Vec<T> = current.data().to_vec();
        for i in 0..n {
            let g = grad.as_ref().map_or(T::ZERO, |g| g[i]);
            w[i] = w[i] * decay;
            m[i] = b1 * m[i] + one_minus_b1 * g;
            v[i] = b2 * v[i] + one_minus_b2 * g * g;
            let m_hat = m[i] * c1;
            let v_hat = v[i] * c2;
            w[i] = w[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
        updates.push((*id, w));
    }
    params.apply_updates(updates)
}

/// Warmup + cosine schedule. Linear from `start_lr` to `peak_lr` over
/// `[0, warmup_epochs)`, then cosine from `peak_lr` back down to
/// `start_lr` at `total_epochs`, clamped beyond the end.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub start_lr: f64,
    pub peak_lr: f64,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
}

pub fn lr_at(epoch: f64, s: &LrSchedule) -> f64 {
    let span = s.peak_lr - s.start_lr;
    if epoch < s.warmup_epochs {
        return s.start_lr + span * (epoch / s.warmup_epochs);
    }
    let denom = s.total_epochs - s.warmup_epochs;
    let t = if denom > 0.0 { ((epoch - s.warmup_epochs) / denom).clamp(0.0, 1.0) } else { 0.0 };
    s.start_lr + span * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

fn rowwise_max_detached<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let data = x.data();
    let mut out = Vec::with_capacity(b);
    for r in 0..b {
        let row = &data[r * c..(r + 1) * c];
        let mut best = row[0];
        for &v in &row[1..] {
            if v > best {
                best = v;
            }
        }
        out.push(best);
    }
    Tensor::from_vec(vec![b, 1], out).expect("max shape is consistent")
}

/// Mean negative log-softmax of the target logit, stabilized by a
/// detached rowwise maximum shift (softmax is shift invariant, so values
/// and gradients are unaffected).
pub fn cross_entropy<T: Scalar>(
    tape: &mut Tape<T>,
    logits: &Tensor<T>,
    targets: &[usize],
) -> Result<Tensor<T>> {
    if logits.rank() != 2 {
        return Err(Error::shape("cross_entropy", format!("expected (B, classes) logits, got {:?}", logits.shape())));
    }
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    if targets.len() != b {
        return Err(Error::contract(
            "cross_entropy",
            format!("{} targets for a batch of {}", targets.len(), b),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::contract("cross_entropy", format!("target class {} out of range for {} classes", bad, c)));
    }
    let shift = rowwise_max_detached(logits);
    let shifted = tape.sub(logits, &shift)?;
    let e = tape.exp(&shifted)?;
    let denom = tape.reduce(ReduceKind::Sum, &e, &[1])?;
    let log_denom = tape.log(&denom)?;
    let mut hot = vec![T::ZERO; b * c];
    for (i, &t) in targets.iter().enumerate() {
        hot[i * c + t] = T::ONE;
    }
    let one_hot = Tensor::from_vec(vec![b, c], hot)?;
    let picked_mat = tape.mul(&shifted, &one_hot)?;
    let picked = tape.reduce(ReduceKind::Sum, &picked_mat, &[1])?;
    let per_row = tape.sub(&log_denom, &picked)?;
    let inv_b = Tensor::scalar(T::from_f64(1.0 / b as f64));
    let scaled = tape.mul(&per_row, &inv_b)?;
    tape.sum_all(&scaled)
}
