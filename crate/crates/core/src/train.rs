//! Minibatch training with Adam on the cross-entropy of a single logit.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use crate::autodiff::{bce_from_logit, bce_grad};
use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::gpdata::GpDataset;
use crate::models::BuiltModel;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 10,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.batch_size > 0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid training configuration {self:?}")))
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: ParamStore,
    v: ParamStore,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &ParamStore,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((name, p), (_, m)), (_, v)) in params
        .iter_mut()
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let g = grads.get(name)?;
        if g.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                expected: p.shape().to_vec(),
                actual: g.shape().to_vec(),
            });
        }
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (k, &gk) in g.data().iter().enumerate() {
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            p[k] -= config.learning_rate * (m[k] / c1) / ((v[k] / c2).sqrt() + config.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    pub records: Vec<EpochRecord>,
}

impl Metrics {
    pub const CSV_HEADER: &'static str = "epoch,split,loss,accuracy,seconds";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.3}",
                r.epoch,
                r.split.name(),
                r.loss,
                r.accuracy,
                r.seconds
            );
        }
        s
    }

    pub fn last(&self, split: Split) -> Option<&EpochRecord> {
        self.records.iter().rev().find(|r| r.split == split)
    }

    /// Per-epoch losses of one split.
    pub fn losses(&self, split: Split) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.loss)
            .collect()
    }
}

/// Class 1 when `σ(z) ≥ 1/2`, that is `z ≥ 0`.
pub fn predict(logit: f64) -> u8 {
    u8::from(logit >= 0.0)
}

/// Mean loss and accuracy over a labelled set.
pub fn evaluate(model: &BuiltModel, samples: &[(Tensor, u8)]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty set"));
    }
    let logits = samples
        .par_iter()
        .map(|(x, _)| model.logit(x))
        .collect::<Result<Vec<f64>>>()?;
    Ok(score(&logits, samples.iter().map(|(_, y)| *y)))
}

fn score(logits: &[f64], labels: impl Iterator<Item = u8>) -> (f64, f64) {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (&z, y) in logits.iter().zip(labels) {
        loss += bce_from_logit(z, f64::from(y));
        correct += usize::from(predict(z) == y);
    }
    let n = logits.len() as f64;
    (loss / n, correct as f64 / n)
}

/// Trains `model` in place and returns per-epoch metrics.
///
/// Each epoch visits the training set in an order drawn from ChaCha stream
/// `epoch` under `config.seed`. A batch's gradient is the mean of per-sample
/// gradients, summed in batch order so results do not depend on thread
/// scheduling. The last partial batch is kept. Training rows report the
/// loss and accuracy seen during the epoch; validation rows are evaluated
/// after it. With zero epochs a single evaluation pass is recorded as
/// epoch 0.
pub fn train_model(
    model: &mut BuiltModel,
    train: &GpDataset,
    val: &GpDataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Metrics> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut metrics = Metrics::default();
    let mut push = |r: EpochRecord, metrics: &mut Metrics| {
        on_epoch(&r);
        metrics.records.push(r);
    };
    if config.epochs == 0 {
        let start = Instant::now();
        let (loss, accuracy) = evaluate(model, &train.samples)?;
        let seconds = start.elapsed().as_secs_f64();
        push(EpochRecord { epoch: 0, split: Split::Train, loss, accuracy, seconds }, &mut metrics);
        if !val.is_empty() {
            let start = Instant::now();
            let (loss, accuracy) = evaluate(model, &val.samples)?;
            let seconds = start.elapsed().as_secs_f64();
            push(EpochRecord { epoch: 0, split: Split::Val, loss, accuracy, seconds }, &mut metrics);
        }
        return Ok(metrics);
    }

    let mut state = AdamState::new(&model.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let mut logits = Vec::with_capacity(order.len());
        for batch in order.chunks(config.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| {
                    let (x, y) = &train.samples[i];
                    model
                        .loss_and_grads(x, f64::from(*y))
                        .map_err(|e| Error::Diverged { epoch, sample: i, reason: e.to_string() })
                })
                .collect::<Result<Vec<_>>>()?;
            let mut total = model.params.zeros_like();
            for (&i, (loss, z, g)) in batch.iter().zip(&results) {
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, sample: i, reason: format!("loss {loss}") });
                }
                total.add_scaled(g, 1.0 / batch.len() as f64)?;
                logits.push((*z, train.samples[i].1));
            }
            adam_step(&mut model.params, &total, &mut state, config)?;
        }
        let (loss, accuracy) = {
            let zs: Vec<f64> = logits.iter().map(|(z, _)| *z).collect();
            score(&zs, logits.iter().map(|(_, y)| *y))
        };
        let seconds = start.elapsed().as_secs_f64();
        push(EpochRecord { epoch, split: Split::Train, loss, accuracy, seconds }, &mut metrics);
        if !val.is_empty() {
            let start = Instant::now();
            let (loss, accuracy) = evaluate(model, &val.samples)?;
            let seconds = start.elapsed().as_secs_f64();
            push(EpochRecord { epoch, split: Split::Val, loss, accuracy, seconds }, &mut metrics);
        }
    }
    Ok(metrics)
}
