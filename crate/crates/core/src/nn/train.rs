use log::debug;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{backward, bce_loss, dot, sigmoid, BackwardScratch, Encoder, Head, TrainedModel, Workspace};
use crate::datagen::{GroupedDataset, Sample};
use crate::error::{Error, Result};
use crate::seed::{self, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Output channels of each conv stage; the last one is the feature dimension.
    pub widths: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 30,
            batch_size: 32,
            weight_decay: 1e-4,
            seed: 0,
            widths: super::DEFAULT_WIDTHS.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::spec("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::spec("momentum", "must lie in [0, 1)"));
        }
        if self.epochs == 0 {
            return Err(Error::spec("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::spec("batch_size", "must be at least 1"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::spec("weight_decay", "must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
}

/// Minibatch SGD with momentum on mean binary cross-entropy.
pub fn train_erm(dataset: &GroupedDataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    let train = &dataset.train;
    let first = train
        .first()
        .ok_or_else(|| Error::Argument("training split is empty".into()))?;

    let mut init_rng = seed::rng(cfg.seed, &[stream::INIT]);
    let encoder = Encoder::init(
        first.image.height,
        first.image.channels,
        &cfg.widths,
        &mut init_rng,
    )?;
    let head = Head::init(encoder.output_channels(), &mut init_rng);
    let mut model = TrainedModel::new(encoder, head)?;

    let mut velocity = model.zeros_like();
    let mut grad = model.zeros_like();
    let mut ws = Workspace::new(&model.encoder);
    let mut scratch = BackwardScratch::default();
    let mut shuffle_rng = seed::rng(cfg.seed, &[stream::SHUFFLE]);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            for (g, _) in grad.params_mut() {
                g.fill(0.0);
            }
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                let s = &train[i];
                ws.run(&model.encoder, &s.image)?;
                let p = sigmoid(dot(&model.head.weights, &ws.features) + model.head.bias);
                batch_loss += bce_loss(p, s.label);
                if (p >= 0.5) == (s.label == 1) {
                    correct += 1;
                }
                backward(&model, &ws, (p - s.label as f64) * scale, &mut grad, &mut scratch);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: batch_idx,
                });
            }
            loss_sum += batch_loss;
            sgd_step(&mut model, &grad, &mut velocity, cfg);
        }
        let entry = EpochLog {
            epoch,
            mean_loss: loss_sum / train.len() as f64,
            accuracy: correct as f64 / train.len() as f64,
        };
        if !entry.mean_loss.is_finite() || !model.head.bias.is_finite() {
            return Err(Error::Divergence {
                epoch,
                batch: order.len().div_ceil(cfg.batch_size),
            });
        }
        debug!(
            "epoch {:>3}: loss {:.5} train acc {:.4}",
            epoch, entry.mean_loss, entry.accuracy
        );
        model.log.push(entry);
    }
    Ok(model)
}

fn sgd_step(model: &mut TrainedModel, grad: &TrainedModel, velocity: &mut TrainedModel, cfg: &TrainConfig) {
    let params = model.params_mut();
    let grads = grad.params();
    let vels = velocity.params_mut();
    for (((p, is_weight), (g, _)), (v, _)) in params.into_iter().zip(grads).zip(vels) {
        let wd = if is_weight { cfg.weight_decay } else { 0.0 };
        for ((p, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *v = cfg.momentum * *v + g + wd * *p;
            *p -= cfg.learning_rate * *v;
        }
    }
}

/// Mean BCE over `batch` and its gradient with respect to every parameter.
pub(crate) fn loss_and_grad(model: &TrainedModel, batch: &[Sample]) -> Result<(f64, TrainedModel)> {
    let mut grad = model.zeros_like();
    let mut ws = Workspace::new(&model.encoder);
    let mut scratch = BackwardScratch::default();
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for s in batch {
        ws.run(&model.encoder, &s.image)?;
        let p = sigmoid(dot(&model.head.weights, &ws.features) + model.head.bias);
        loss += bce_loss(p, s.label);
        backward(model, &ws, (p - s.label as f64) * scale, &mut grad, &mut scratch);
    }
    Ok((loss * scale, grad))
}

/// Mean BCE over `batch`, also recording every sample's activation pattern.
pub(crate) fn mean_loss(model: &TrainedModel, batch: &[Sample], pattern: &mut Vec<u32>) -> Result<f64> {
    let mut ws = Workspace::new(&model.encoder);
    let mut loss = 0.0;
    pattern.clear();
    for s in batch {
        ws.run(&model.encoder, &s.image)?;
        ws.activation_pattern(pattern);
        let p = sigmoid(dot(&model.head.weights, &ws.features) + model.head.bias);
        loss += bce_loss(p, s.label);
    }
    Ok(loss / batch.len() as f64)
}
