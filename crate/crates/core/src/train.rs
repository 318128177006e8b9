//! Epoch-driven training loop: shuffled mini-batches, AdamW with the
//! warmup + cosine schedule, per-epoch validation, and best-checkpoint
//! selection by validation accuracy.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::backbone::{GraphPlan, Mode};
use crate::capsule::{margin_loss, predict, MARGIN_LAMBDA, MARGIN_M_MINUS, MARGIN_M_PLUS};
use crate::data::augment::{augment, epoch_rng, sample_rng};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{metrics_from_pairs, MetricsReport};
use crate::model::{HeadKind, HeadOut, Model};
use crate::optim::{adamw_step, cross_entropy, lr_at, LrSchedule, OptConfig, OptState};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

/// Which objective drives the run. Margin loss reads capsule norms,
/// cross-entropy reads pooling logits; each is tied to its head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Margin,
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub start_lr: f64,
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub opt: OptConfig,
    pub loss: LossKind,
    pub seed: u64,
    /// Random crop + flip augmentation on training batches. Validation
    /// always sees clean images.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 75,
            batch_size: 32,
            start_lr: 1e-6,
            peak_lr: 2e-3,
            warmup_epochs: 20,
            opt: OptConfig::default(),
            loss: LossKind::Margin,
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".to_string()));
        }
        if !(self.start_lr > 0.0) || !(self.peak_lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rates must be positive, got start {} peak {}",
                self.start_lr, self.peak_lr
            )));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup ({}) must be shorter than the run ({} epochs)",
                self.warmup_epochs, self.epochs
            )));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            start_lr: self.start_lr,
            peak_lr: self.peak_lr,
            warmup_epochs: self.warmup_epochs as f64,
            total_epochs: self.epochs as f64,
        }
    }
}

/// One line of the training log. `epoch` is 1-based; losses are
/// per-sample means, accuracies are fractions in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// Result of a run. The model itself is left holding the final-epoch
/// parameters; the best-by-validation snapshot lives here. A zero-epoch
/// run yields an empty history, the initial parameters, `best_epoch` 0
/// and no validation report.
pub struct TrainOutcome<T: Scalar> {
    pub history: Vec<HistoryRow>,
    pub best_params: ParamSet<T>,
    pub best_opt: OptState<T>,
    pub best_epoch: usize,
    pub best_val: Option<MetricsReport>,
}

impl<T: Scalar> std::fmt::Debug for TrainOutcome<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrainOutcome")
            .field("history", &self.history)
            .field("best_epoch", &self.best_epoch)
            .field("best_val", &self.best_val)
            .finish_non_exhaustive()
    }
}

pub fn check_loss_head(loss: LossKind, head: HeadKind) -> Result<()> {
    match (loss, head) {
        (LossKind::Margin, HeadKind::Capsule) | (LossKind::CrossEntropy, HeadKind::Pooling) => Ok(()),
        (LossKind::Margin, HeadKind::Pooling) => {
            Err(Error::Config("margin loss needs the capsule head; the pooling head produces logits".to_string()))
        }
        (LossKind::CrossEntropy, HeadKind::Capsule) => {
            Err(Error::Config("cross-entropy needs the pooling head; the capsule head produces norms".to_string()))
        }
    }
}

fn loss_for<T: Scalar>(
    tape: &mut Tape<T>,
    head: &HeadOut<T>,
    targets: &[usize],
    kind: LossKind,
) -> Result<Tensor<T>> {
    match (kind, head) {
        (LossKind::Margin, HeadOut::Capsule { norms, .. }) => {
            margin_loss(tape, norms, targets, MARGIN_M_PLUS, MARGIN_M_MINUS, MARGIN_LAMBDA)
        }
        (LossKind::CrossEntropy, HeadOut::Pooling { logits }) => cross_entropy(tape, logits, targets),
        _ => Err(Error::contract("train", "loss kind does not match the model head")),
    }
}

fn check_labels<T: Scalar>(ds: &Dataset<T>, classes: usize, split: &str) -> Result<()> {
    for (i, &label) in ds.labels().iter().enumerate() {
        if label >= classes {
            return Err(Error::Data(format!(
                "{split} sample {} has label {label} but the model expects {classes} classes",
                ds.id(i)
            )));
        }
    }
    Ok(())
}

fn stack_images<T: Scalar>(items: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = items[0].shape().to_vec();
    if let Some(bad) = items.iter().find(|t| t.shape() != first.as_slice()) {
        return Err(Error::shape(
            "batch",
            format!("mixed image shapes in one batch: {:?} vs {:?}", first, bad.shape()),
        ));
    }
    let per = items[0].numel();
    let mut data = Vec::with_capacity(items.len() * per);
    for t in items {
        data.extend_from_slice(t.data());
    }
    let mut shape = Vec::with_capacity(first.len() + 1);
    shape.push(items.len());
    shape.extend_from_slice(&first);
    Tensor::from_vec(shape, data)
}

/// Fetch (and for training batches, augment) a batch. Per-sample rngs
/// are derived from (seed, epoch, sample id), so the result does not
/// depend on fetch order or batch composition.
fn assemble_batch<T: Scalar>(
    ds: &Dataset<T>,
    indices: &[usize],
    aug: Option<(u64, u64)>,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let images = indices
        .par_iter()
        .map(|&i| {
            let img = ds.fetch(i)?;
            match aug {
                Some((seed, epoch)) => {
                    let mut rng = sample_rng(seed, epoch, ds.id(i));
                    augment(&img, &mut rng)
                }
                None => Ok(img),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let targets = indices.iter().map(|&i| ds.label(i)).collect();
    Ok((stack_images(&images)?, targets))
}

struct StepOutput<T: Scalar> {
    loss: f64,
    correct: usize,
    grads: Vec<Option<Vec<T>>>,
    bn_updates: Vec<(crate::params::ParamId, Vec<T>)>,
}

fn run_batch<T: Scalar>(
    model: &Model<T>,
    images: &Tensor<T>,
    targets: &[usize],
    loss_kind: LossKind,
) -> Result<StepOutput<T>> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let mut plan = GraphPlan::record();
    let out = model.forward(&mut tape, &bound, images, Mode::Train, &mut plan)?;
    let loss_t = loss_for(&mut tape, &out.head, targets, loss_kind)?;
    let loss = loss_t.item()?.to_f64();
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    let preds = predict(out.head.scores())?;
    let correct = preds.iter().zip(targets).filter(|(p, t)| p == t).count();
    let mut store = tape.backward(&loss_t)?;
    let grads = model.params().trainable_ids().into_iter().map(|id| store.take(bound.get(id))).collect();
    Ok(StepOutput { loss, correct, grads, bn_updates: out.bn_updates })
}

/// Mean per-sample loss and a full metrics report over `ds`, in eval
/// mode (running batch-norm statistics, no augmentation).
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    ds: &Dataset<T>,
    loss_kind: LossKind,
    batch_size: usize,
) -> Result<(f64, MetricsReport)> {
    if ds.is_empty() {
        return Err(Error::contract("evaluate", "dataset is empty"));
    }
    if batch_size == 0 {
        return Err(Error::contract("evaluate", "batch size must be at least 1"));
    }
    check_loss_head(loss_kind, model.config().head)?;
    check_labels(ds, model.config().classes, "evaluation")?;
    let indices: Vec<usize> = (0..ds.len()).collect();
    let mut loss_sum = 0.0;
    let mut pairs = Vec::with_capacity(ds.len());
    for chunk in indices.chunks(batch_size) {
        let (images, targets) = assemble_batch(ds, chunk, None)?;
        let mut tape = Tape::disabled();
        let bound = model.params().bind(&mut tape);
        let mut plan = GraphPlan::record();
        let out = model.forward(&mut tape, &bound, &images, Mode::Eval, &mut plan)?;
        let loss_t = loss_for(&mut tape, &out.head, &targets, loss_kind)?;
        loss_sum += loss_t.item()?.to_f64() * chunk.len() as f64;
        let preds = predict(out.head.scores())?;
        pairs.extend(targets.into_iter().zip(preds));
    }
    let report = metrics_from_pairs(&pairs, model.config().classes)?;
    Ok((loss_sum / ds.len() as f64, report))
}

/// Run the full loop. Each epoch shuffles the training set with an rng
/// derived from (seed, epoch), steps AdamW once per batch at that
/// epoch's learning rate, then scores the validation split. The best
/// epoch is the first one reaching the highest validation accuracy.
/// A non-finite loss anywhere aborts with the 1-based epoch and batch.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_set: &Dataset<T>,
    val_set: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    check_loss_head(cfg.loss, model.config().head)?;
    let classes = model.config().classes;
    check_labels(train_set, classes, "training")?;
    check_labels(val_set, classes, "validation")?;
    if cfg.epochs > 0 {
        if train_set.is_empty() {
            return Err(Error::Data("training split is empty".to_string()));
        }
        if val_set.is_empty() {
            return Err(Error::Data("validation split is empty".to_string()));
        }
    }

    let schedule = cfg.schedule();
    let mut opt_state = OptState::new(model.params());
    let mut best_params = model.params().clone();
    let mut best_opt = opt_state.clone();
    let mut best_epoch = 0usize;
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_val = None;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch as f64, &schedule);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch as u64));

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let aug = cfg.augment.then_some((cfg.seed, epoch as u64));
            let step = (|| {
                let (images, targets) = assemble_batch(train_set, chunk, aug)?;
                run_batch(model, &images, &targets, cfg.loss)
            })()
            .map_err(|e| match e {
                Error::NonFinite { .. } => Error::Divergence { epoch: epoch + 1, batch: batch_idx + 1 },
                other => other,
            })?;
            adamw_step(model.params_mut(), &mut opt_state, &step.grads, lr, &cfg.opt)?;
            model.params_mut().apply_updates(step.bn_updates)?;
            loss_sum += step.loss * chunk.len() as f64;
            correct += step.correct;
        }

        let n = train_set.len() as f64;
        let (val_loss, val_report) = evaluate(model, val_set, cfg.loss, cfg.batch_size)?;
        history.push(HistoryRow {
            epoch: epoch + 1,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_loss,
            val_acc: val_report.accuracy,
        });
        if val_report.accuracy > best_acc {
            best_acc = val_report.accuracy;
            best_params = model.params().clone();
            best_opt = opt_state.clone();
            best_epoch = epoch + 1;
            best_val = Some(val_report);
        }
    }

    Ok(TrainOutcome { history, best_params, best_opt, best_epoch, best_val })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::synth_dataset;
    use crate::model::ModelConfig;

    fn tiny_setup(classes: usize, per_class: usize) -> (Model<f64>, Dataset<f64>, Dataset<f64>) {
        let mut config = ModelConfig::micro();
        config.classes = classes;
        let model = Model::new(config, 7).unwrap();
        let train = synth_dataset::<f64>(classes, per_class, 32, 11).unwrap();
        let val = synth_dataset::<f64>(classes, 2, 32, 13).unwrap();
        (model, train, val)
    }

    fn quick_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            start_lr: 1e-3,
            peak_lr: 2e-3,
            warmup_epochs: if epochs > 1 { 1 } else { 0 },
            loss: LossKind::Margin,
            seed: 3,
            augment: true,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_and_head_must_match() {
        let (mut model, train_set, val_set) = tiny_setup(2, 3);
        let mut cfg = quick_cfg(1);
        cfg.loss = LossKind::CrossEntropy;
        let err = train(&mut model, &train_set, &val_set, &cfg).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err:?}");

        let mut config = ModelConfig::micro();
        config.classes = 2;
        config.head = HeadKind::Pooling;
        let mut pooling = Model::new(config, 7).unwrap();
        let cfg = quick_cfg(1);
        let err = train(&mut pooling, &train_set, &val_set, &cfg).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err:?}");
    }

    #[test]
    fn validation_split_required_when_training() {
        let (mut model, train_set, val_set) = tiny_setup(2, 3);
        let empty = val_set.subset(&[]).unwrap();
        let err = train(&mut model, &train_set, &empty, &quick_cfg(1)).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "got {err:?}");
        let err = train(&mut model, &empty, &val_set, &quick_cfg(1)).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "got {err:?}");
    }

    #[test]
    fn label_out_of_range_is_a_data_error() {
        let (mut model, _, val_set) = tiny_setup(2, 3);
        let bad = synth_dataset::<f64>(3, 2, 32, 11).unwrap();
        let err = train(&mut model, &bad, &val_set, &quick_cfg(1)).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "got {err:?}");
    }

    #[test]
    fn zero_epoch_run_returns_initial_state() {
        let (mut model, train_set, val_set) = tiny_setup(2, 2);
        let before: Vec<Vec<f64>> =
            model.params().ids().map(|id| model.params().value(id).data().to_vec()).collect();
        let out = train(&mut model, &train_set, &val_set, &quick_cfg(0)).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.best_epoch, 0);
        assert!(out.best_val.is_none());
        let ids: Vec<_> = model.params().ids().collect();
        for (&id, want) in ids.iter().zip(&before) {
            assert_eq!(out.best_params.value(id).data(), want.as_slice());
        }
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let (mut model, train_set, val_set) = tiny_setup(2, 4);
        let mut cfg = quick_cfg(2);
        cfg.start_lr = 1e200;
        cfg.peak_lr = 1e200;
        cfg.augment = false;
        let err = train(&mut model, &train_set, &val_set, &cfg).unwrap_err();
        match err {
            Error::Divergence { epoch, batch } => {
                assert_eq!(epoch, 1, "weights blow past f64 range within the first epoch");
                assert!(batch >= 1);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let (mut model, train_set, val_set) = tiny_setup(2, 3);
            train(&mut model, &train_set, &val_set, &quick_cfg(2)).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.history, b.history);
        assert_eq!(a.best_epoch, b.best_epoch);
        let ids: Vec<_> = a.best_params.ids().collect();
        for id in ids {
            assert_eq!(a.best_params.value(id).data(), b.best_params.value(id).data());
        }
        assert_eq!(a.best_opt.step, b.best_opt.step);
    }

    #[test]
    fn history_and_best_selection_shape_up() {
        let (mut model, train_set, val_set) = tiny_setup(2, 3);
        let cfg = quick_cfg(3);
        let out = train(&mut model, &train_set, &val_set, &cfg).unwrap();
        assert_eq!(out.history.len(), 3);
        for (i, row) in out.history.iter().enumerate() {
            assert_eq!(row.epoch, i + 1);
            assert!(row.train_loss.is_finite() && row.val_loss.is_finite());
            assert!((0.0..=1.0).contains(&row.train_acc));
            assert!((0.0..=1.0).contains(&row.val_acc));
        }
        let best = out.best_val.as_ref().expect("trained run has a validation report");
        let top = out.history.iter().map(|r| r.val_acc).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(best.accuracy, top);
        let first_top = out.history.iter().position(|r| r.val_acc == top).unwrap() + 1;
        assert_eq!(out.best_epoch, first_top, "ties resolve to the earliest epoch");
    }

    #[test]
    fn evaluate_rejects_empty_input_and_scores_perfect_model() {
        let (model, train_set, _) = tiny_setup(2, 2);
        let empty = train_set.subset(&[]).unwrap();
        let err = evaluate(&model, &empty, LossKind::Margin, 4).unwrap_err();
        assert!(matches!(err, Error::Contract { .. }), "got {err:?}");

        let (loss, report) = evaluate(&model, &train_set, LossKind::Margin, 4).unwrap();
        assert!(loss.is_finite());
        assert_eq!(report.samples, train_set.len() as u64);
    }
}
