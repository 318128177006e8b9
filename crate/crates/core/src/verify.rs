//! Gradient verification at two levels: a sweep over every registered
//! op's randomized finite-difference check, and one end-to-end check of
//! the full model against the margin loss. Drives both the gradcheck
//! command and the acceptance suite.

use crate::backbone::{GraphPlan, Mode};
use crate::capsule::{margin_loss, MARGIN_LAMBDA, MARGIN_M_MINUS, MARGIN_M_PLUS};
use crate::data::synth::synth_dataset;
use crate::error::{Error, Result};
use crate::model::{HeadOut, Model, ModelConfig};
use crate::tensor::{grad_check_sampled, op_checks, run_op_check, run_op_check_skewed, Tensor, DEFAULT_GRAD_EPS};

/// Pass bar for single-op checks (f64, central differences).
pub const OP_GRAD_TOLERANCE: f64 = 1e-4;
/// Pass bar for the whole-model check; error accumulates through the
/// deep graph, so the bar is looser than the per-op one.
pub const MODEL_GRAD_TOLERANCE: f64 = 1e-3;

/// Runs every registered op check and reports (op name, max relative
/// error). `fault` corrupts the named op's analytic gradient by the
/// given factor so the failure path can be exercised on demand.
pub fn registry_sweep(instances: usize, seed: u64, fault: Option<(&str, f64)>) -> Result<Vec<(&'static str, f64)>> {
    let checks = op_checks();
    if let Some((op, _)) = fault {
        if !checks.iter().any(|c| c.name == op) {
            let known: Vec<_> = checks.iter().map(|c| c.name).collect();
            return Err(Error::Config(format!("unknown op {op:?} for fault injection; known ops: {}", known.join(", "))));
        }
    }
    checks
        .iter()
        .map(|check| {
            let err = match fault {
                Some((op, skew)) if op == check.name => run_op_check_skewed(check, instances, seed, skew)?,
                _ => run_op_check(check, instances, seed)?,
            };
            Ok((check.name, err))
        })
        .collect()
}

/// Finite-difference check of d(margin loss)/d(images and every
/// trainable parameter) through the full micro model, sampling at most
/// `max_coords` coordinates per tensor. The neighbor tables are
/// recorded once and replayed for every perturbed evaluation, so the
/// probed function stays piecewise-smooth while the graph is frozen.
pub fn end_to_end_margin_check(max_coords: usize, seed: u64) -> Result<f64> {
    let config = ModelConfig::micro();
    let model = Model::<f64>::new(config.clone(), seed)?;
    let data = synth_dataset::<f64>(config.classes, 1, config.image, seed ^ 0x5eed)?;

    let mut stacked = Vec::new();
    for i in 0..2 {
        stacked.extend_from_slice(data.fetch(i)?.data());
    }
    let images = Tensor::from_vec(vec![2, config.in_channels, config.image, config.image], stacked)?;
    let targets = [0usize, 1];

    let tables = {
        let mut tape = crate::tensor::Tape::disabled();
        let bound = model.params().bind(&mut tape);
        let mut plan = GraphPlan::record();
        model.forward(&mut tape, &bound, &images, Mode::Train, &mut plan)?;
        plan.into_tables()
    };

    let trainable = model.params().trainable_ids();
    let mut inputs = vec![images];
    inputs.extend(trainable.iter().map(|&id| model.params().value(id).clone()));

    let f = move |tape: &mut crate::tensor::Tape<f64>, vars: &[Tensor<f64>]| {
        let bound = model.params().bind_with(&vars[1..])?;
        let mut plan = GraphPlan::replay(tables.clone());
        let out = model.forward(tape, &bound, &vars[0], Mode::Train, &mut plan)?;
        match &out.head {
            HeadOut::Capsule { norms, .. } => {
                margin_loss(tape, norms, &targets, MARGIN_M_PLUS, MARGIN_M_MINUS, MARGIN_LAMBDA)
            }
            HeadOut::Pooling { .. } => Err(Error::contract("verify", "margin check needs the capsule head")),
        }
    };
    grad_check_sampled(&f, &inputs, DEFAULT_GRAD_EPS, max_coords, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_covers_every_op_once_and_passes() {
        let rows = registry_sweep(2, 11, None).unwrap();
        assert_eq!(rows.len(), op_checks().len());
        let mut names: Vec<_> = rows.iter().map(|r| r.0).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), rows.len(), "no op listed twice");
        for (name, err) in &rows {
            assert!(*err <= OP_GRAD_TOLERANCE, "{name}: {err}");
        }
    }

    #[test]
    fn injected_fault_is_caught() {
        let rows = registry_sweep(2, 11, Some(("matmul", 1.5))).unwrap();
        let bad = rows.iter().find(|r| r.0 == "matmul").unwrap();
        assert!(bad.1 > OP_GRAD_TOLERANCE, "skewed matmul must fail, got {}", bad.1);
        for (name, err) in rows.iter().filter(|r| r.0 != "matmul") {
            assert!(*err <= OP_GRAD_TOLERANCE, "{name}: {err}");
        }
    }

    #[test]
    fn unknown_fault_op_is_rejected() {
        let err = registry_sweep(1, 11, Some(("warp_drive", 2.0))).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err:?}");
    }

    #[test]
    fn whole_model_gradients_match_finite_differences() {
        let err = end_to_end_margin_check(2, 33).unwrap();
        assert!(err <= MODEL_GRAD_TOLERANCE, "max relative error {err}");
    }
}
