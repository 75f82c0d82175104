use serde::Serialize;

use super::config::FinetuneConfig;
use super::model::ToyTransformer;
use super::tasks::Example;
use crate::bilevel::{batch_indices, Optimizer};
use crate::error::{Error, Result};
use crate::numerics::Scalar;

const FINETUNE_STREAM: u64 = 3;
/// Fine-tuning aborts once a batch loss exceeds this multiple of the first.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

fn f<S: Scalar>(v: S) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// Mean answer-token cross-entropy of `batch`.
pub fn sft_loss<S: Scalar>(model: &ToyTransformer<S>, batch: &[Example]) -> Result<S> {
    let refs: Vec<&Example> = batch.iter().collect();
    Ok(model.loss(&refs)?.sft)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub sft: f64,
    pub bal: f64,
    /// Fraction of examples with every answer token correct.
    pub accuracy: f64,
    pub examples: usize,
}

/// Loss (weighted by answer count) and exact-match accuracy over `data`.
pub fn evaluate<S: Scalar>(model: &ToyTransformer<S>, data: &[Example], batch_size: usize) -> Result<EvalMetrics> {
    if data.is_empty() || batch_size == 0 {
        return Err(Error::InvalidArgument("evaluation needs examples and a positive batch size".into()));
    }
    let (mut sft, mut bal, mut weight, mut correct) = (0.0, 0.0, 0usize, 0usize);
    for chunk in data.chunks(batch_size) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let (loss, ok) = model.score(&refs)?;
        let w: usize = chunk.iter().map(|e| e.targets.len()).sum();
        sft += f(loss.sft) * w as f64;
        bal += f(loss.bal) * w as f64;
        weight += w;
        correct += ok;
    }
    Ok(EvalMetrics {
        sft: sft / weight as f64,
        bal: bal / weight as f64,
        accuracy: correct as f64 / data.len() as f64,
        examples: data.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_sft: f64,
    pub eval_accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinetuneReport {
    pub initial: EvalMetrics,
    pub epochs: Vec<EpochMetrics>,
    pub steps: usize,
}

impl FinetuneReport {
    pub fn final_accuracy(&self) -> f64 {
        self.epochs.last().map_or(self.initial.accuracy, |e| e.eval_accuracy)
    }
}

/// Trains every adapter parameter of `model` on `train` with the total
/// loss, evaluating on `eval` after each epoch. Frozen weights are never
/// touched. The learning-rate schedule always spans `cfg.epochs`, also when
/// training stops early.
pub fn finetune<S: Scalar>(
    model: &mut ToyTransformer<S>,
    train: &[Example],
    eval: &[Example],
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("fine-tuning needs training examples".into()));
    }
    let initial = evaluate(model, eval, cfg.batch_size)?;
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut opt = Optimizer::new(cfg.optimizer_mode, cfg.adam);
    let mut first_loss: Option<f64> = None;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        let mut lr = 0.0;
        for s in 0..per_epoch {
            let t = epoch * per_epoch + s;
            lr = cfg.schedule.lr(cfg.lr, t, total);
            let batch: Vec<&Example> = batch_indices(train.len(), cfg.batch_size, seed, FINETUNE_STREAM, t)
                .into_iter()
                .map(|i| &train[i])
                .collect();
            let (loss, grads) = model.param_gradients(&batch)?;
            let value = f(loss.total());
            let reference = *first_loss.get_or_insert(value);
            if !value.is_finite() || value > DIVERGENCE_FACTOR * reference {
                return Err(Error::Diverged(format!(
                    "epoch {epoch} step {s}: loss {value} against initial {reference} (lr {lr})"
                )));
            }
            opt.step(&mut model.params_mut(), &grads, lr)?;
            sum += value;
        }
        let m = evaluate(model, eval, cfg.batch_size)?;
        epochs.push(EpochMetrics {
            epoch,
            train_loss: sum / per_epoch as f64,
            eval_sft: m.sft,
            eval_accuracy: m.accuracy,
            lr,
        });
        if cfg.stop_at_accuracy.is_some_and(|target| m.accuracy >= target) {
            break;
        }
    }
    Ok(FinetuneReport {
        initial,
        steps: epochs.len() * per_epoch,
        epochs,
    })
}
