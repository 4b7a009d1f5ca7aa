//! Two-stage training: latent reconstruction against an EMA teacher, then
//! supervised fine-tuning with a frozen-backbone warm-up.
//!
//! A full batch is processed in micro-batches whose losses share the
//! full-batch denominator, so accumulated gradients equal the full-batch
//! gradient. Every random draw comes from a stream keyed by the seed and the
//! position in the schedule, never from shared state.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{apply_mask_plan, sample_mask_plan, Batch, EhrRecord, Label, MaskPlan, TaskKind};
use crate::metrics::{evaluate_scores, MetricsReport};
use crate::model::{dropout_rng, MartModel, Mode};
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::{Error, Gradients, ParamStore, Result, Tape, Tensor, Var};

const PRETRAIN: u64 = 0;
const FINETUNE: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    /// Fine-tuning epochs before the backbone is released.
    pub unfreeze_epoch: usize,
    /// Range of the per-record removal probability.
    pub mask_interval: (f64, f64),
    pub ema_decay: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    /// Records per forward pass; only memory use depends on it.
    pub micro_batch: usize,
    /// Use the plain sum over removed cells instead of the per-cell mean.
    pub raw_sum_loss: bool,
    pub f1_threshold: f64,
    /// Fail on the first non-finite intermediate.
    pub check_finite: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pretrain_epochs: 25,
            finetune_epochs: 25,
            unfreeze_epoch: 5,
            mask_interval: (0.0, 0.75),
            ema_decay: 0.996,
            adam: AdamConfig::default(),
            batch_size: 256,
            micro_batch: 32,
            raw_sum_loss: false,
            f1_threshold: 0.5,
            check_finite: false,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.unfreeze_epoch > self.finetune_epochs {
            return Err(Error::invalid("unfreeze_epoch exceeds finetune_epochs"));
        }
        if self.batch_size == 0 || self.micro_batch == 0 {
            return Err(Error::invalid("batch sizes must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::invalid("ema_decay must lie in [0, 1]"));
        }
        let (lo, hi) = self.mask_interval;
        if !(0.0..1.0).contains(&lo) || !(0.0..1.0).contains(&hi) || lo > hi {
            return Err(Error::invalid("mask_interval must satisfy 0 <= lo <= hi < 1"));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }

    fn tape(&self) -> Tape {
        if self.check_finite {
            Tape::validating()
        } else {
            Tape::new()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: Stage,
    pub epoch: usize,
    pub loss: f64,
    pub val_metric: Option<f64>,
}

/// `teacher <- decay * teacher + (1 - decay) * student`, over the teacher's
/// parameters, which must be a prefix of the student's.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, decay: f64) -> Result<()> {
    if teacher.len() > student.len() {
        return Err(Error::TreeMismatch(alloc::format!(
            "teacher has {} parameters, student {}",
            teacher.len(),
            student.len()
        )));
    }
    for id in teacher.ids().collect::<Vec<_>>() {
        let src = student.get(id);
        let dst = teacher.get_mut(id);
        if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
            return Err(Error::TreeMismatch(alloc::format!("`{}` vs `{}`", dst.name, src.name)));
        }
        for (t, &s) in dst.tensor.data_mut().iter_mut().zip(src.tensor.data()) {
            *t = decay * *t + (1.0 - decay) * s;
        }
    }
    Ok(())
}

/// Shuffled order of `0..n` for one epoch of one stage.
fn epoch_order(n: usize, seed: u64, stage: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::tags::SHUFFLE, stage, epoch as u64]));
    order
}

/// Removal plan of training record `index` for `epoch`.
pub fn epoch_mask_plan(record: &EhrRecord, index: usize, epoch: usize, config: &TrainConfig) -> Result<MaskPlan> {
    let mut r = rng::stream(config.seed, &[rng::tags::MASK_PLAN, index as u64, epoch as u64]);
    sample_mask_plan(&record.extended_mask(), record.vars(), config.mask_interval, &mut r)
}

/// Inputs of one pre-training forward pass.
#[derive(Debug, Clone)]
pub struct PretrainBatch {
    /// Original data, seen by the teacher.
    pub original: Batch,
    /// Data with the planned cells removed, seen by the student.
    pub augmented: Batch,
    /// `[batch, rows, vars]`, 1 at removed cells in hidden-state rows.
    pub weights: Tensor,
    /// `[batch, rows, vars, 1]` raw values of the removed cells.
    pub removed_values: Tensor,
    pub removed: usize,
}

impl PretrainBatch {
    /// `row_offset` is 1 when the hidden state carries the summary row.
    pub fn new(records: &[&EhrRecord], plans: &[MaskPlan], row_offset: usize) -> Result<Self> {
        if records.len() != plans.len() {
            return Err(Error::shape("pretrain batch", &[records.len()], &[plans.len()]));
        }
        let augmented_records = records
            .iter()
            .zip(plans)
            .map(|(r, p)| {
                let (x, m) = apply_mask_plan(r.values(), r.mask(), p)?;
                r.with_observations(x, m)
            })
            .collect::<Result<Vec<_>>>()?;
        let original = Batch::from_records(records.iter().copied())?;
        let augmented = Batch::from_records(&augmented_records)?;
        let (steps, vars) = (original.steps(), original.vars());
        let rows = steps + row_offset;
        let mut weights = vec![0.0; records.len() * rows * vars];
        let mut removed_values = vec![0.0; weights.len()];
        let mut removed = 0;
        for (b, (r, p)) in records.iter().zip(plans).enumerate() {
            for (cell, _) in p.data_rows().iter().enumerate().filter(|(_, &x)| x) {
                let (t, n) = (cell / vars, cell % vars);
                let at = (b * rows + t + row_offset) * vars + n;
                weights[at] = 1.0;
                removed_values[at] = r.value(t, n);
                removed += 1;
            }
        }
        Ok(PretrainBatch {
            original,
            augmented,
            weights: Tensor::new([records.len(), rows, vars], weights)?,
            removed_values: Tensor::new([records.len(), rows, vars, 1], removed_values)?,
            removed,
        })
    }
}

/// Reconstruction targets: teacher states of the original data, or the
/// removed raw values when imputing in input space.
pub fn teacher_targets(model: &MartModel, teacher: &ParamStore, batch: &PretrainBatch) -> Result<Tensor> {
    if model.ablation.impute_input_space {
        return Ok(batch.removed_values.clone());
    }
    let mut tape = Tape::new();
    let o = &batch.original;
    let rep = model.backbone(&mut tape, teacher, &o.values, &o.mask, &o.lengths, &mut Mode::Eval)?;
    Ok(tape.value(rep.s).clone())
}

/// Masked L1 between the student's reconstruction and `targets`, counted
/// only at removed cells.
pub fn reconstruction_loss(
    tape: &mut Tape,
    model: &MartModel,
    batch: &PretrainBatch,
    targets: &Tensor,
    denom: f64,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let a = &batch.augmented;
    let (pred, _) = model.reconstruct(tape, &a.values, &a.mask, &a.lengths, mode)?;
    tape.masked_l1(pred, targets, &batch.weights, denom)
}

/// Optimizer and teacher state carried across pre-training epochs.
#[derive(Debug, Clone)]
pub struct PretrainState {
    pub teacher: ParamStore,
    pub adam: Adam,
    pub epochs_done: usize,
}

impl PretrainState {
    /// Teacher starts as an exact copy of the student backbone.
    pub fn new(model: &MartModel, config: &TrainConfig) -> Self {
        PretrainState {
            teacher: model.teacher(),
            adam: Adam::new(config.adam, &model.store),
            epochs_done: 0,
        }
    }
}

fn check_finite(loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op: "training loss" })
    }
}

/// One pre-training epoch; returns the mean loss of the batches that took a
/// step (0 when none removed anything).
pub fn pretrain_epoch(
    model: &mut MartModel,
    state: &mut PretrainState,
    train: &[EhrRecord],
    config: &TrainConfig,
) -> Result<f64> {
    let epoch = state.epochs_done;
    let order = epoch_order(train.len(), config.seed, PRETRAIN, epoch);
    let row_offset = usize::from(model.encoder.cls.is_some());
    let out_dim = model.embedding_decoder.out_dim as f64;
    let (mut total, mut stepped) = (0.0, 0);
    for (step, batch_idx) in order.chunks(config.batch_size).enumerate() {
        let plans = batch_idx
            .iter()
            .map(|&i| epoch_mask_plan(&train[i], i, epoch, config))
            .collect::<Result<Vec<_>>>()?;
        let removed: usize = plans.iter().map(MaskPlan::removed_count).sum();
        if removed == 0 {
            continue;
        }
        let denom = if config.raw_sum_loss {
            1.0
        } else {
            removed as f64 * out_dim
        };
        let mut grads = Gradients::default();
        let mut loss = 0.0;
        for (chunk, (idx, chunk_plans)) in batch_idx
            .chunks(config.micro_batch)
            .zip(plans.chunks(config.micro_batch))
            .enumerate()
        {
            let records: Vec<&EhrRecord> = idx.iter().map(|&i| &train[i]).collect();
            let pb = PretrainBatch::new(&records, chunk_plans, row_offset)?;
            if pb.removed == 0 {
                continue;
            }
            let targets = teacher_targets(model, &state.teacher, &pb)?;
            let mut tape = config.tape();
            let mut r = dropout_rng(config.seed, PRETRAIN, epoch, step, chunk);
            let l = reconstruction_loss(&mut tape, model, &pb, &targets, denom, &mut Mode::Train(&mut r))?;
            loss += tape.value(l).data()[0];
            grads.accumulate(tape.backward(l)?);
        }
        check_finite(loss)?;
        state.adam.step(&mut model.store, &grads)?;
        ema_update(&mut state.teacher, &model.store, config.ema_decay)?;
        total += loss;
        stepped += 1;
    }
    state.epochs_done += 1;
    Ok(if stepped == 0 { 0.0 } else { total / stepped as f64 })
}

/// Run the remaining pre-training epochs of `state`.
pub fn pretrain(
    model: &mut MartModel,
    state: &mut PretrainState,
    train: &[EhrRecord],
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<()> {
    while state.epochs_done < config.pretrain_epochs {
        let epoch = state.epochs_done;
        let loss = pretrain_epoch(model, state, train, config)?;
        on_epoch(&EpochLog {
            stage: Stage::Pretrain,
            epoch,
            loss,
            val_metric: None,
        });
    }
    Ok(())
}

/// Supervised loss of one micro-batch with the full-batch denominator `rows`.
fn task_loss(tape: &mut Tape, model: &MartModel, logits: Var, labels: &[Label], rows: usize) -> Result<Var> {
    match model.task {
        TaskKind::MultiClass { .. } => {
            let classes: Vec<usize> = labels
                .iter()
                .map(|l| match l {
                    Label::Class(c) => Ok(*c),
                    _ => Err(Error::invalid("multi-class task needs class labels")),
                })
                .collect::<Result<_>>()?;
            tape.softmax_cross_entropy(logits, &classes, rows as f64)
        }
        task => {
            let width = task.outputs();
            let targets: Vec<f64> = labels.iter().flat_map(|l| l.to_targets(task)).collect();
            let targets = Tensor::new([labels.len(), width], targets)?;
            tape.bce_with_logits(logits, &targets, (rows * width) as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    /// Epoch whose parameters were kept, `None` if no epoch ran.
    pub best_epoch: Option<usize>,
    pub best_val: Option<f64>,
    pub history: Vec<EpochLog>,
}

/// Fine-tune `model` on `train`, keeping the parameters with the best
/// validation score.
///
/// With `pretrained`, encoder and blocks stay frozen for the first
/// `unfreeze_epoch` epochs. The optimizer starts fresh here and again when
/// the backbone is released.
pub fn finetune(
    model: &mut MartModel,
    train: &[EhrRecord],
    val: &[EhrRecord],
    config: &TrainConfig,
    pretrained: bool,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<FinetuneOutcome> {
    config.validate()?;
    let backbone: Vec<_> = model.backbone_ids().collect();
    let embedding = model.embedding_decoder.ids();
    model.store.set_trainable(embedding, false);
    let mut frozen = pretrained && config.unfreeze_epoch > 0;
    model.store.set_trainable(backbone.iter().copied(), !frozen);
    let mut adam = Adam::new(config.adam, &model.store);

    let mut outcome = FinetuneOutcome {
        best_epoch: None,
        best_val: None,
        history: Vec::new(),
    };
    let mut best: Option<(f64, ParamStore)> = None;
    for epoch in 0..config.finetune_epochs {
        if frozen && epoch >= config.unfreeze_epoch {
            model.store.set_trainable(backbone.iter().copied(), true);
            adam = Adam::new(config.adam, &model.store);
            frozen = false;
        }
        let order = epoch_order(train.len(), config.seed, FINETUNE, epoch);
        let (mut total, mut steps) = (0.0, 0);
        for (step, batch_idx) in order.chunks(config.batch_size).enumerate() {
            let mut grads = Gradients::default();
            let mut loss = 0.0;
            for (chunk, idx) in batch_idx.chunks(config.micro_batch).enumerate() {
                let batch = Batch::from_records(idx.iter().map(|&i| &train[i]))?;
                let mut tape = config.tape();
                let mut r = dropout_rng(config.seed, FINETUNE, epoch, step, chunk);
                let logits = model.classify_batch(&mut tape, &batch, &mut Mode::Train(&mut r))?;
                let l = task_loss(&mut tape, model, logits, &batch.labels, batch_idx.len())?;
                loss += tape.value(l).data()[0];
                grads.accumulate(tape.backward(l)?);
            }
            check_finite(loss)?;
            adam.step(&mut model.store, &grads)?;
            total += loss;
            steps += 1;
        }
        let val_metric = if val.is_empty() {
            None
        } else {
            evaluate(model, val, config)?.selection_metric()
        };
        let log = EpochLog {
            stage: Stage::Finetune,
            epoch,
            loss: if steps == 0 { 0.0 } else { total / steps as f64 },
            val_metric,
        };
        on_epoch(&log);
        outcome.history.push(log);
        // Without a usable validation score the latest epoch wins.
        let better = match (val_metric, &best) {
            (Some(v), Some((b, _))) => v > *b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if better {
            best = Some((val_metric.unwrap_or(f64::NEG_INFINITY), model.store.clone()));
            outcome.best_epoch = Some(epoch);
            outcome.best_val = val_metric;
        }
    }
    if let Some((_, store)) = best {
        model.store.load_from(&store)?;
    }
    let all: Vec<_> = model.store.ids().collect();
    model.store.set_trainable(all, true);
    Ok(outcome)
}

/// Eval-mode probabilities for `records`, in order.
pub fn predict(model: &MartModel, records: &[EhrRecord], micro_batch: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(micro_batch.max(1)) {
        out.extend(model.predict_batch(&Batch::from_records(chunk)?)?);
    }
    Ok(out)
}

pub fn evaluate(model: &MartModel, records: &[EhrRecord], config: &TrainConfig) -> Result<MetricsReport> {
    let scores = predict(model, records, config.micro_batch)?;
    let labels: Vec<Label> = records.iter().map(|r| r.label.clone()).collect();
    evaluate_scores(model.task, &labels, &scores, config.f1_threshold)
}
