//! SGD with momentum and weight decay, probe training on frozen features and
//! classifier pretraining.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageRecord;
use crate::encoders::{ClassifierHead, Encoder, NUM_TAPS};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::patterns::{generate, PatternKind, PositionMap};
use crate::probe::Probe;
use crate::tensor::{kernels, Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Multiply the learning rate by `gamma` every `every` epochs.
    pub lr_step: Option<LrStep>,
    /// Rescale the gradient so its global L2 norm is at most this.
    pub clip_grad_norm: Option<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrStep {
    pub every: usize,
    pub gamma: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 8,
            seed: 0,
            lr_step: None,
            clip_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be ≥ 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and ≥ 0, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("clip_grad_norm must be positive, got {c}")));
            }
        }
        if let Some(s) = self.lr_step {
            if s.every == 0 {
                return Err(Error::Config("lr_step.every must be ≥ 1".into()));
            }
        }
        Ok(())
    }

    /// Learning rate for 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f32 {
        match self.lr_step {
            Some(s) => self.lr * s.gamma.powi((epoch / s.every) as i32),
            None => self.lr,
        }
    }
}

/// One SGD update: `v ← m·v + (g + wd·w)`, then `w ← w − lr·v`.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    velocity: &mut [Tensor],
    lr: f32,
    momentum: f32,
    weight_decay: f32,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::dim(
            "sgd_step",
            "tensor count",
            params.len(),
            format!("{}/{}", grads.len(), velocity.len()),
        ));
    }
    for ((w, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        if w.dims() != g.dims() || w.dims() != v.dims() {
            return Err(Error::dim(
                "sgd_step",
                "shape",
                format!("{:?}", w.dims()),
                format!("{:?}", g.dims()),
            ));
        }
        for ((wi, gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = momentum * *vi + (gi + weight_decay * *wi);
            *wi -= lr * *vi;
        }
    }
    Ok(())
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f32) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| v as f64 * v as f64)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm as f64 {
        let scale = (max_norm as f64 / norm) as f32;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

fn zero_velocity<'a>(params: impl Iterator<Item = &'a Tensor>) -> Vec<Tensor> {
    params.map(|t| Tensor::zeros(t.dims())).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainHistory {
    /// Sample-weighted mean loss of each epoch.
    pub epoch_loss: Vec<f64>,
    /// Training accuracy per epoch (classifier pretraining only).
    pub epoch_accuracy: Vec<f64>,
    /// Evaluation after training, filled in by the caller.
    pub report: MetricReport,
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Aligned probe inputs for each record, computed once. With an encoder the
/// taps come from a frozen forward pass; standalone probes read the image.
pub fn aligned_features(encoder: Option<&Encoder>, probe: &Probe, records: &[ImageRecord]) -> Result<Vec<Tensor>> {
    const CHUNK: usize = 8;
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(CHUNK) {
        let images: Vec<&Tensor> = chunk.iter().map(|r| &r.image).collect();
        let batch = Tensor::stack_batch(&images)?;
        let inputs = match encoder {
            Some(enc) if !probe.spec().standalone => enc.forward_taps(&batch)?,
            None if !probe.spec().standalone => {
                return Err(Error::Contract("a non-standalone probe needs an encoder".into()));
            }
            _ => vec![batch],
        };
        let aligned = probe.align(&inputs)?;
        for i in 0..chunk.len() {
            out.push(aligned.batch_item(i)?);
        }
    }
    Ok(out)
}

/// Image side shared by every record.
fn common_side(records: &[ImageRecord]) -> Result<usize> {
    let first = records
        .first()
        .ok_or_else(|| Error::Config("empty dataset".into()))?
        .image
        .nchw()?;
    for r in records {
        let d = r.image.nchw()?;
        if d[2..] != first[2..] {
            return Err(Error::dim(
                "dataset",
                "image size",
                format!("{}×{}", first[2], first[3]),
                format!("{}×{}", d[2], d[3]),
            ));
        }
    }
    if first[2] != first[3] {
        return Err(Error::Config(format!(
            "images must be square, got {}×{}",
            first[2], first[3]
        )));
    }
    Ok(first[2])
}

/// Trains `probe` to regress `pattern` from frozen features.
///
/// `encoder` must be frozen when given; `None` is allowed for standalone probes.
/// Only probe parameters are updated.
pub fn train_probe(
    encoder: Option<&Encoder>,
    probe: &mut Probe,
    dataset: &[ImageRecord],
    pattern: PatternKind,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    config.validate()?;
    if let Some(enc) = encoder {
        if !enc.is_frozen() {
            return Err(Error::Contract("train_probe needs a frozen encoder".into()));
        }
    }
    let side = common_side(dataset)?;
    let features = aligned_features(encoder, probe, dataset)?;
    train_probe_on_features(probe, &features, side, pattern, config)
}

/// The training loop of [`train_probe`] on precomputed aligned features.
pub fn train_probe_on_features(
    probe: &mut Probe,
    features: &[Tensor],
    side: usize,
    pattern: PatternKind,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    config.validate()?;
    if features.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    probe.fit_input_scale(features)?;
    let target = generate(pattern, side, side).to_tensor();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut velocity = zero_velocity(probe.params().iter().map(|(_, t)| t));
    let mut history = TrainHistory::default();
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let mut total = 0.0f64;
        for batch in shuffled(features.len(), &mut rng).chunks(config.batch_size) {
            let items: Vec<&Tensor> = batch.iter().map(|&i| &features[i]).collect();
            let x = Tensor::stack_batch(&items)?;
            let n = batch.len();
            let mut g = Graph::new();
            let xv = g.input(x);
            let (pred, params) = probe.forward_aligned(&mut g, xv, side, side, true)?;
            let tv = g.input(Tensor::stack_batch(&vec![&target; n])?);
            let loss = g.mse_half(pred, tv)?;
            g.backward(loss)?;
            total += g.value(loss).data()[0] as f64 * n as f64;
            let mut grads: Vec<Tensor> = params.iter().map(|&p| g.grad_or_zeros(p)).collect();
            if let Some(c) = config.clip_grad_norm {
                clip_grad_norm(&mut grads, c);
            }
            let mut ps: Vec<&mut Tensor> = probe.params_mut().iter_mut().map(|(_, t)| t).collect();
            sgd_step(&mut ps, &grads, &mut velocity, lr, config.momentum, config.weight_decay)?;
        }
        let mean = total / features.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Contract(format!("probe loss diverged at epoch {}", epoch + 1)));
        }
        debug!("probe {pattern} epoch {} loss {mean:.6}", epoch + 1);
        history.epoch_loss.push(mean);
    }
    Ok(history)
}

/// Predictions of `probe` for precomputed aligned features.
pub fn predict_features(probe: &Probe, features: &[Tensor], side: usize) -> Result<Vec<PositionMap>> {
    let mut out = Vec::with_capacity(features.len());
    for chunk in features.chunks(16) {
        let items: Vec<&Tensor> = chunk.iter().collect();
        out.extend(probe.predict_aligned(&Tensor::stack_batch(&items)?, side, side)?);
    }
    Ok(out)
}

fn labels_of(dataset: &[ImageRecord]) -> Result<Vec<usize>> {
    dataset
        .iter()
        .map(|r| {
            r.label
                .ok_or_else(|| Error::Config(format!("image {} has no label", r.name())))
        })
        .collect()
}

/// Trains encoder and head jointly with softmax cross-entropy.
pub fn pretrain_classifier(
    encoder: &mut Encoder,
    head: &mut ClassifierHead,
    dataset: &[ImageRecord],
    config: &TrainConfig,
) -> Result<TrainHistory> {
    config.validate()?;
    if encoder.is_frozen() {
        return Err(Error::Contract("cannot pretrain a frozen encoder".into()));
    }
    let labels = labels_of(dataset)?;
    let classes = head.num_classes();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Config(format!("label {bad} out of range for {classes} classes")));
    }
    let mut distinct = labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Config(
            "pretraining needs at least two classes in the dataset".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut velocity = zero_velocity(
        encoder
            .params()
            .iter()
            .map(|(_, t)| t)
            .chain([&head.weight, &head.bias]),
    );
    let mut history = TrainHistory::default();
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let (mut total, mut correct) = (0.0f64, 0usize);
        for batch in shuffled(dataset.len(), &mut rng).chunks(config.batch_size) {
            let items: Vec<&Tensor> = batch.iter().map(|&i| &dataset[i].image).collect();
            let x = Tensor::stack_batch(&items)?;
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let vars = encoder.forward_graph(&mut g, &x, true)?;
            let (logits, hw, hb) = head.logits(&mut g, vars.taps[NUM_TAPS - 1])?;
            correct += argmax_rows(g.value(logits))
                .iter()
                .zip(&y)
                .filter(|(a, b)| a == b)
                .count();
            let loss = g.softmax_xent(logits, &y)?;
            g.backward(loss)?;
            total += g.value(loss).data()[0] as f64 * batch.len() as f64;

            let mut grads: Vec<Tensor> = vars
                .params
                .iter()
                .chain([&hw, &hb])
                .map(|&p| g.grad_or_zeros(p))
                .collect();
            if let Some(c) = config.clip_grad_norm {
                clip_grad_norm(&mut grads, c);
            }
            let mut ps: Vec<&mut Tensor> = encoder
                .params_mut()
                .iter_mut()
                .map(|(_, t)| t)
                .chain([&mut head.weight, &mut head.bias])
                .collect();
            sgd_step(&mut ps, &grads, &mut velocity, lr, config.momentum, config.weight_decay)?;
        }
        let mean = total / dataset.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Contract(format!(
                "pretraining loss diverged at epoch {}",
                epoch + 1
            )));
        }
        let acc = correct as f64 / dataset.len() as f64;
        info!(
            "pretrain {} epoch {} loss {mean:.4} acc {acc:.3}",
            encoder.spec().family,
            epoch + 1
        );
        history.epoch_loss.push(mean);
        history.epoch_accuracy.push(acc);
    }
    Ok(history)
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.dims()[1];
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Top-1 accuracy of encoder + head on a labelled dataset.
pub fn classifier_accuracy(encoder: &Encoder, head: &ClassifierHead, dataset: &[ImageRecord]) -> Result<f64> {
    let labels = labels_of(dataset)?;
    let mut correct = 0;
    for (chunk, ys) in dataset.chunks(16).zip(labels.chunks(16)) {
        let items: Vec<&Tensor> = chunk.iter().map(|r| &r.image).collect();
        let taps = encoder.forward_taps(&Tensor::stack_batch(&items)?)?;
        let [n, c, h, w] = taps[NUM_TAPS - 1].nchw()?;
        let pooled = kernels::global_avg_pool_forward([n, c, h, w], taps[NUM_TAPS - 1].data());
        let logits = kernels::affine_forward(n, c, head.num_classes(), &pooled, head.weight.data(), head.bias.data());
        let pred = argmax_rows(&Tensor::new(&[n, head.num_classes()], logits)?);
        correct += pred.iter().zip(ys).filter(|(a, b)| a == b).count();
    }
    Ok(correct as f64 / dataset.len() as f64)
}
