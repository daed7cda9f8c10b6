//! Masked training with best-validation model selection.

use crate::datasets::Dataset;
use crate::metrics;
use crate::models::{Model, ModelError};
use crate::pruning::{apply_mask, mask_gradients, Mask, PruneError};
use crate::tensor::{LrSchedule, Optimizer, OptimizerKind, Tape, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mask(#[from] PruneError),
    #[error("cannot train on an empty dataset")]
    EmptyData,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerChoice {
    Sgd { momentum: f32 },
    Adam { beta1: f32, beta2: f32 },
}

impl OptimizerChoice {
    pub fn kind(self) -> OptimizerKind {
        match self {
            OptimizerChoice::Sgd { momentum } => OptimizerKind::Sgd { momentum },
            OptimizerChoice::Adam { beta1, beta2 } => OptimizerKind::Adam {
                beta1,
                beta2,
                eps: 1e-8,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Linear ramp from 0 to `lr` over the first epoch.
    pub warmup: bool,
    /// Epoch fractions at which the learning rate is divided by `anneal_factor`.
    pub anneal_at: Vec<f64>,
    pub anneal_factor: f32,
    pub optimizer: OptimizerChoice,
    pub weight_decay: f32,
    /// Fraction of each training set held out for model selection.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 64,
            lr: 1e-3,
            warmup: true,
            anneal_at: Vec::new(),
            anneal_factor: 5.0,
            optimizer: OptimizerChoice::Adam {
                beta1: 0.9,
                beta2: 0.999,
            },
            weight_decay: 1e-4,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self, steps_per_epoch: usize) -> LrSchedule {
        LrSchedule {
            base_lr: self.lr,
            warmup_steps: if self.warmup { steps_per_epoch } else { 0 },
            anneal_steps: self
                .anneal_at
                .iter()
                .map(|f| (f * self.epochs as f64).round() as usize * steps_per_epoch)
                .collect(),
            anneal_factor: self.anneal_factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

const EVAL_BATCH: usize = 256;

pub fn evaluate(model: &Model, data: &Dataset) -> Result<Evaluation, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let mut loss = 0.0f64;
    let mut predictions = Vec::with_capacity(data.len());
    for (x, y) in data.sequential(EVAL_BATCH) {
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let pass = model.forward(&mut tape, xv)?;
        let l = tape.softmax_cross_entropy(pass.logits, &y)?;
        loss += f64::from(tape.value(l)[0]) * y.len() as f64;
        let k = tape.shape(pass.logits)[1];
        predictions.extend(tape.value(pass.logits).chunks_exact(k).map(argmax));
    }
    let accuracy = metrics::accuracy(&predictions, data.labels()).expect("non-empty, equal lengths");
    Ok(Evaluation {
        loss: loss / data.len() as f64,
        accuracy,
        predictions,
    })
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub best_val: Option<Evaluation>,
    pub steps: usize,
}

/// One optimizer update on a batch. Gradients of pruned positions are
/// cleared before the update and the mask is reapplied after it, so pruned
/// weights stay exactly zero. Returns the batch loss.
pub fn masked_step(
    model: &mut Model,
    mask: &Mask,
    opt: &mut Optimizer,
    x: &Tensor,
    y: &[usize],
) -> Result<f32, TrainError> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let pass = model.forward(&mut tape, xv)?;
    let loss = tape.softmax_cross_entropy(pass.logits, y)?;
    tape.backward(loss)?;
    let params = model.params_mut();
    params.zero_grads();
    for (i, &v) in pass.params.iter().enumerate() {
        if let Some(g) = tape.grad(v) {
            params.value_mut(i).accumulate_grad(g)?;
        }
    }
    mask_gradients(params, mask)?;
    opt.step(params.named_tensors_mut())?;
    apply_mask(params, mask)?;
    Ok(tape.value(loss)[0])
}

/// Trains `model` with `mask` enforced and restores the weights of the epoch
/// with the lowest validation loss (the last epoch when `val` is `None`).
///
/// After every step, gradients at pruned positions are zeroed before the
/// update and pruned weights are reset to exactly zero after it.
pub fn train_masked(
    model: &mut Model,
    mask: &Mask,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyData);
    }
    mask.check_aligned(model.params())?;
    apply_mask(model.params_mut(), mask)?;
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut opt = Optimizer::new(cfg.optimizer.kind(), cfg.weight_decay, cfg.schedule(steps_per_epoch));
    let mut best: Option<(usize, Evaluation, Vec<Vec<f32>>)> = None;
    for epoch in 0..cfg.epochs {
        for (x, y) in train.batches(cfg.batch_size, seed, epoch as u64) {
            masked_step(model, mask, &mut opt, &x, &y)?;
        }
        if let Some(val) = val {
            let eval = evaluate(model, val)?;
            if best.as_ref().is_none_or(|(_, b, _)| eval.loss < b.loss) {
                let snapshot = model.params().iter().map(|p| p.value.data().to_vec()).collect();
                best = Some((epoch + 1, eval, snapshot));
            }
        }
    }
    model.params_mut().zero_grads();
    Ok(match best {
        Some((epoch, eval, snapshot)) => {
            for (i, data) in snapshot.into_iter().enumerate() {
                model.params_mut().value_mut(i).data_mut().copy_from_slice(&data);
            }
            TrainReport {
                best_epoch: epoch,
                best_val: Some(eval),
                steps: opt.steps_taken(),
            }
        }
        None => TrainReport {
            best_epoch: cfg.epochs,
            best_val: None,
            steps: opt.steps_taken(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{synthetic_blobs, BlobSpec};
    use crate::models::ModelSpec;
    use crate::pruning::{prune_params, Eligibility};

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 32,
            lr: 3e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn mlp_learns_blobs() {
        let data = synthetic_blobs(&BlobSpec::new(4, 60, [1, 6, 6], 1)).unwrap();
        let mut model = Model::build(&ModelSpec::mlp([1, 6, 6], 4), 0).unwrap();
        let mask = Mask::ones_for(model.params(), Eligibility::ConvOnly);
        let before = evaluate(&model, &data.test).unwrap().accuracy;
        train_masked(&mut model, &mask, &data.train, None, &quick(), 0).unwrap();
        let after = evaluate(&model, &data.test).unwrap().accuracy;
        assert!(after > before.max(60.0), "{before} -> {after}");
    }

    #[test]
    fn pruned_positions_stay_zero() {
        let data = synthetic_blobs(&BlobSpec::new(3, 30, [1, 8, 8], 2)).unwrap();
        let mut model = Model::build(&ModelSpec::conv3s([1, 8, 8], 3), 0).unwrap();
        let ones = Mask::ones_for(model.params(), Eligibility::ConvOnly);
        let mask = prune_params(model.params(), &ones, 0.5).unwrap().mask;
        train_masked(&mut model, &mask, &data.train, Some(&data.test), &quick(), 0).unwrap();
        for (p, e) in model.params().iter().zip(mask.entries()) {
            for (j, &v) in p.value.data().iter().enumerate() {
                if !e.bits().get(j) {
                    assert_eq!(v.to_bits(), 0.0f32.to_bits(), "{}[{j}]", p.name);
                }
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = synthetic_blobs(&BlobSpec::new(3, 20, [1, 8, 8], 2)).unwrap();
        let run = || {
            let mut model = Model::build(&ModelSpec::conv3s([1, 8, 8], 3), 5).unwrap();
            let mask = Mask::ones_for(model.params(), Eligibility::ConvOnly);
            train_masked(&mut model, &mask, &data.train, Some(&data.test), &quick(), 9).unwrap();
            model
        };
        assert_eq!(run(), run());
    }
}
