use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::metrics::{argmax, Confusion, Metrics};
use crate::autodiff::Tape;
use crate::data::TrialSet;
use crate::error::{Error, Result};
use crate::model::AbsoluteNet;
use crate::nn::{Forward, ParamId, ParamStore};
use crate::rng::{derived, Rng};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Epochs of the checkpoint-selection phase.
    pub epochs_select: usize,
    /// Epochs of continued training on train + validation.
    pub epochs_retrain: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Replace batch-norm moving statistics with training-split population
    /// statistics after every epoch.
    pub recalibrate_batch_norm: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 9e-4,
            epochs_select: 200,
            epochs_retrain: 100,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            recalibrate_batch_norm: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if self.epochs_select == 0 || self.epochs_retrain == 0 {
            return Err(Error::config("epochs", "need at least one epoch per phase"));
        }
        if self.batch_size < 2 {
            return Err(Error::config(
                "batch_size",
                "batch statistics need at least 2 trials per batch",
            ));
        }
        for (field, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field, "must be in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps", "must be positive"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean train-mode loss over the epoch's updates.
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch with the lowest validation loss (earliest on ties), or the last
    /// epoch when there is no validation set.
    pub selected_epoch: usize,
    pub best_val_loss: Option<f64>,
    pub wall_time_s: f64,
    pub seed: u64,
    pub config: TrainConfig,
}

pub struct FitOutcome {
    pub report: TrainReport,
    /// Parameters at the selected epoch.
    pub best: ParamStore<f32>,
    /// Sorted trial indices that contributed to any gradient update.
    pub updated: Vec<usize>,
}

/// Batches of `batch_size`; a trailing single trial joins the previous batch.
pub fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * batch_size;
        *out.last_mut().unwrap() = &order[start..];
    }
    out
}

fn correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    logits
        .data()
        .chunks(logits.last_dim())
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

fn train_step(
    model: &mut AbsoluteNet<f32>,
    set: &TrialSet,
    batch: &[usize],
    adam: &mut Adam<f32>,
    rng: &mut Rng,
) -> Result<(f64, usize)> {
    let labels = set.labels_of(batch);
    let mut tape = Tape::new();
    let x = tape.constant(set.batch::<f32>(batch)?);
    let mut f = Forward::train(&mut tape, model.params(), rng);
    let logits = model.logits(&mut f, x)?;
    let bound = f.finish();
    let loss = tape.softmax_cross_entropy(logits, &labels)?;
    let value = f64::from(tape.value(loss).item());
    if !value.is_finite() {
        return Err(Error::Numeric(format!("training loss became {value}")));
    }
    let hits = correct(tape.value(logits), &labels);
    let mut grads = tape.backward(loss)?;
    let grads: Vec<(ParamId, Tensor<f32>)> = bound
        .params
        .iter()
        .map(|&(id, v)| (id, grads.take(v).expect("bound parameter gradient")))
        .collect();
    adam.step(model.params_mut(), &grads)?;
    for u in bound.updates {
        *model.params_mut().value_mut(u.id) = u.value;
    }
    Ok((value, hits))
}

/// Sets every batch-norm moving mean and variance to the population
/// statistics of the trials at `indices` under the current weights.
pub fn recalibrate_batch_norm(model: &mut AbsoluteNet<f32>, set: &TrialSet, indices: &[usize]) -> Result<()> {
    if indices.len() < 2 {
        return Err(Error::Dataset(format!(
            "{} trials, need at least 2 for batch statistics",
            indices.len()
        )));
    }
    // Per statistic pair: (ids, Σ n·mean, Σ n·(var + mean²)).
    let mut acc: Vec<(ParamId, ParamId, Vec<f64>, Vec<f64>)> = Vec::new();
    let mut scratch = derived(0, 0);
    for chunk in batches(indices, 64) {
        let mut tape = Tape::new();
        let x = tape.constant(set.batch::<f32>(chunk)?);
        let mut f = Forward::train(&mut tape, model.params(), &mut scratch);
        model.logits(&mut f, x)?;
        let updates = f.finish().updates;
        if acc.is_empty() {
            acc = updates
                .chunks_exact(2)
                .map(|p| {
                    (
                        p[0].id,
                        p[1].id,
                        vec![0.0; p[0].batch.len()],
                        vec![0.0; p[0].batch.len()],
                    )
                })
                .collect();
        }
        let n = chunk.len() as f64;
        for (a, p) in acc.iter_mut().zip(updates.chunks_exact(2)) {
            for (j, (&m, &v)) in p[0].batch.data().iter().zip(p[1].batch.data()).enumerate() {
                let (m, v) = (f64::from(m), f64::from(v));
                a.2[j] += n * m;
                a.3[j] += n * (v + m * m);
            }
        }
    }
    let total = indices.len() as f64;
    for (mean_id, var_id, sum, sq) in acc {
        let mean: Vec<f32> = sum.iter().map(|s| (s / total) as f32).collect();
        let var: Vec<f32> = sum
            .iter()
            .zip(&sq)
            .map(|(s, q)| (q / total - (s / total).powi(2)).max(0.0) as f32)
            .collect();
        let shape = model.params().value(mean_id).shape().to_vec();
        *model.params_mut().value_mut(mean_id) = Tensor::new(shape.clone(), mean)?;
        *model.params_mut().value_mut(var_id) = Tensor::new(shape, var)?;
    }
    Ok(())
}

/// Infer-mode class probabilities for the trials at `indices`.
pub fn predict(model: &AbsoluteNet<f32>, set: &TrialSet, indices: &[usize]) -> Result<Vec<[f32; 2]>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(256) {
        let p = model.predict(&set.batch::<f32>(chunk)?)?;
        if p.last_dim() != 2 {
            return Err(Error::shape("predict", format!("{} classes, expected 2", p.last_dim())));
        }
        out.extend(p.data().chunks(2).map(|r| [r[0], r[1]]));
    }
    Ok(out)
}

/// Infer-mode mean cross-entropy and accuracy.
pub fn loss_and_accuracy(model: &AbsoluteNet<f32>, set: &TrialSet, indices: &[usize]) -> Result<(f64, f64)> {
    if indices.is_empty() {
        return Err(Error::Dataset("no trials to evaluate".into()));
    }
    let mut total = 0.0;
    let mut hits = 0;
    for chunk in indices.chunks(256) {
        let labels = set.labels_of(chunk);
        let mut tape = Tape::new();
        let x = tape.constant(set.batch::<f32>(chunk)?);
        let mut f = Forward::infer(&mut tape, model.params());
        let logits = model.logits(&mut f, x)?;
        drop(f);
        let loss = tape.softmax_cross_entropy(logits, &labels)?;
        total += f64::from(tape.value(loss).item()) * chunk.len() as f64;
        hits += correct(tape.value(logits), &labels);
    }
    Ok((total / indices.len() as f64, hits as f64 / indices.len() as f64))
}

/// Infer-mode confusion metrics, deviant positive.
pub fn evaluate(model: &AbsoluteNet<f32>, set: &TrialSet, indices: &[usize]) -> Result<Metrics> {
    if indices.is_empty() {
        return Err(Error::Dataset("empty evaluation set".into()));
    }
    let predicted: Vec<usize> = predict(model, set, indices)?.iter().map(|p| argmax(p)).collect();
    Ok(Confusion::from_predictions(&predicted, &set.labels_of(indices)).metrics())
}

/// Trains `model` in place for `epochs` epochs with a fresh optimizer.
/// With a validation set, the parameters after the epoch of lowest
/// validation loss are kept as `best`; the model itself ends at the last
/// epoch.
pub fn fit(
    model: &mut AbsoluteNet<f32>,
    set: &TrialSet,
    train: &[usize],
    val: Option<&[usize]>,
    epochs: usize,
    config: &TrainConfig,
    seed: u64,
) -> Result<FitOutcome> {
    config.validate()?;
    if train.len() < 2 {
        return Err(Error::Dataset(format!(
            "{} training trials, need at least 2",
            train.len()
        )));
    }
    if val.is_some_and(|v| v.is_empty()) {
        return Err(Error::Dataset("empty validation set".into()));
    }
    let start = Instant::now();
    let mut shuffle = derived(seed, 0);
    let mut dropout = derived(seed, 1);
    let mut adam = Adam::new(config.adam(), model.params());
    let mut order = train.to_vec();
    let mut updated = vec![false; set.len()];
    let mut records = Vec::with_capacity(epochs);
    let mut best = model.params().clone();
    let mut best_loss: Option<f64> = None;
    let mut selected = 0;

    for epoch in 1..=epochs {
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        let mut hits = 0;
        for batch in batches(&order, config.batch_size) {
            let (loss, h) = train_step(model, set, batch, &mut adam, &mut dropout)?;
            loss_sum += loss * batch.len() as f64;
            hits += h;
            for &i in batch {
                updated[i] = true;
            }
        }
        if !model.params().iter().all(|(_, p)| p.value.all_finite()) {
            return Err(Error::Numeric(format!("non-finite parameter after epoch {epoch}")));
        }
        if config.recalibrate_batch_norm && (val.is_some() || epoch == epochs) {
            recalibrate_batch_norm(model, set, train)?;
        }
        let (val_loss, val_accuracy) = match val {
            Some(v) => {
                let (l, a) = loss_and_accuracy(model, set, v)?;
                if !l.is_finite() {
                    return Err(Error::Numeric(format!("validation loss {l} at epoch {epoch}")));
                }
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        match val_loss {
            Some(l) if best_loss.is_none_or(|b| l < b) => {
                best_loss = Some(l);
                best = model.params().clone();
                selected = epoch;
            }
            None => {
                best = model.params().clone();
                selected = epoch;
            }
            _ => {}
        }
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: hits as f64 / train.len() as f64,
            val_loss,
            val_accuracy,
        });
    }
    Ok(FitOutcome {
        report: TrainReport {
            epochs: records,
            selected_epoch: selected,
            best_val_loss: best_loss,
            wall_time_s: start.elapsed().as_secs_f64(),
            seed,
            config: config.clone(),
        },
        best,
        updated: (0..set.len()).filter(|&i| updated[i]).collect(),
    })
}
