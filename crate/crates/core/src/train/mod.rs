//! Desk-scale training: AdamW, warmup + cosine schedule, smoothed
//! cross-entropy, synthetic tasks, and a deterministic single-threaded loop.

mod data;
mod optim;

pub use data::{
    read_dataset, read_dataset_file, write_dataset, write_dataset_file, ChunkParity, DataSource,
    FileDataset, FrameOrder, Split,
};
pub use optim::{cosine_lr, decay_applies, AdamW, AdamWConfig, Schedule};

use crate::error::{Error, Result};
use crate::forward::Forward;
use crate::model::Model;
use crate::tensor::{Scalar, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::fmt::Write as _;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub adamw: AdamWConfig,
    pub label_smoothing: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub acc: f64,
}

impl StepRecord {
    /// One metrics-log line: `step=12 lr=0.001 loss=2.30259 acc=0.125`.
    /// Rust float formatting is locale-independent.
    pub fn format_line(&self) -> String {
        format!(
            "step={} lr={} loss={} acc={}",
            self.step, self.lr, self.loss, self.acc
        )
    }
}

pub fn format_metrics(records: &[StepRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(out, "{}", r.format_line());
    }
    out
}

/// One optimizer step over a batch. Returns (mean loss, batch accuracy).
fn train_step<T: Scalar>(
    model: &mut Model<T>,
    batch: &[(Tensor<T>, usize)],
    opt: &mut AdamW<T>,
    lr: f64,
    label_smoothing: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let (bindings, loss, correct) = {
        let mut fw = Forward::train(&mut tape, rng);
        let mut rows = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        let mut correct = 0usize;
        for (x, label) in batch {
            let xv = fw.tape.constant(x.clone());
            let logits = model.forward(&mut fw, xv)?;
            if argmax(fw.tape.value(logits).data()) == *label {
                correct += 1;
            }
            let k = fw.tape.value(logits).numel();
            rows.push(fw.tape.reshape(logits, &[1, k])?);
            labels.push(*label);
        }
        let stacked = fw.tape.concat(0, &rows)?;
        let loss = fw
            .tape
            .cross_entropy(stacked, &labels, T::from_f64(label_smoothing))?;
        let bindings: Vec<(String, crate::tensor::Var)> =
            fw.bindings().map(|(n, v)| (n.to_string(), v)).collect();
        (bindings, loss, correct)
    };
    let loss_val = tape.scalar_value(loss)?.to_f64();
    tape.backward(loss)?;
    let grads: HashMap<String, Tensor<T>> = bindings
        .into_iter()
        .filter_map(|(name, var)| tape.grad(var).map(|g| (name, g)))
        .collect();
    opt.begin_step(lr);
    model.for_each_param_mut(&mut |name, param| {
        opt.update(name, param, grads.get(name).map(|g| g.data()))
    })?;
    Ok((loss_val, correct as f64 / batch.len() as f64))
}

/// Deterministic training loop. Batches walk the dataset sequentially by
/// index; sample contents are already a pure function of the index, so the
/// full metrics log is reproducible bit for bit under a fixed seed.
pub fn train_loop<T: Scalar>(
    model: &mut Model<T>,
    dataset: &dyn DataSource<T>,
    cfg: &TrainConfig,
) -> Result<Vec<StepRecord>> {
    cfg.schedule.validate()?;
    if dataset.is_empty() {
        return Err(Error::Train("dataset is empty".into()));
    }
    let mut opt = AdamW::new(cfg.adamw.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<(Tensor<T>, usize)> = (0..cfg.batch_size)
            .map(|i| dataset.sample((step * cfg.batch_size + i) as u64 % dataset.len()))
            .collect();
        let lr = cosine_lr(step, &cfg.schedule);
        let (loss, acc) = train_step(model, &batch, &mut opt, lr, cfg.label_smoothing, &mut rng)?;
        if !loss.is_finite() {
            return Err(Error::Train(format!(
                "loss diverged to {loss} at step {step}"
            )));
        }
        records.push(StepRecord {
            step,
            lr,
            loss,
            acc,
        });
    }
    Ok(records)
}

/// Accuracy over `count` samples starting at `start` (eval mode, no grads).
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    dataset: &dyn DataSource<T>,
    start: u64,
    count: u64,
) -> Result<f64> {
    if count == 0 {
        return Err(Error::Train("evaluate needs at least one sample".into()));
    }
    let mut correct = 0u64;
    for i in 0..count {
        let (x, label) = dataset.sample(start + i);
        let logits = model.forward_tensor(&x)?;
        if argmax(logits.data()) == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / count as f64)
}

fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// Mean accuracy over the trailing `window` records.
pub fn trailing_accuracy(records: &[StepRecord], window: usize) -> f64 {
    let tail = &records[records.len().saturating_sub(window)..];
    if tail.is_empty() {
        return 0.0;
    }
    tail.iter().map(|r| r.acc).sum::<f64>() / tail.len() as f64
}

/// Median loss over a half-open step range.
pub fn median_loss(records: &[StepRecord], range: std::ops::Range<usize>) -> f64 {
    let mut losses: Vec<f64> = records
        .iter()
        .filter(|r| range.contains(&r.step))
        .map(|r| r.loss)
        .collect();
    losses.sort_by(|a, b| a.partial_cmp(b).expect("finite losses"));
    if losses.is_empty() {
        return f64::NAN;
    }
    losses[losses.len() / 2]
}
