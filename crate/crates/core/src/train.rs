//! Supervised classifier training shared by evaluation, the class-embedding
//! extractor, and the inner loop of condensation.

use gencond_tensor::{Graph, LinearDecay, Sgd, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{cls_loss, Targets};
use crate::nn::ImageClassifier;

/// Mini-batch SGD with momentum and a linear decay to zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Capped at the training set size.
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 256,
        }
    }
}

/// One classification step on a fixed batch. Returns the pre-update loss.
pub fn sgd_step<M: ImageClassifier>(
    model: &mut M,
    opt: &mut Sgd,
    images: &Tensor,
    labels: &[usize],
    lr: f64,
) -> Result<f64> {
    let g = Graph::new();
    let x = g.constant(images.clone());
    let loss = cls_loss(model.logits(&g, x)?, &Targets::Hard(labels.to_vec()))?;
    let value = loss.item();
    if !value.is_finite() {
        return Err(Error::Divergence {
            term: "L_cls".into(),
            value,
        });
    }
    let grads = g.backward(loss);
    opt.step(model.params_mut(), &grads, lr);
    Ok(value)
}

/// Trains `model` in place on `(images, labels)`. Returns the mean loss of
/// the final epoch.
pub fn train_classifier<M: ImageClassifier, R: Rng + ?Sized>(
    model: &mut M,
    images: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<f64> {
    let n = labels.len();
    if n == 0 || images.dim(0) != n {
        return Err(Error::Argument(format!(
            "training set has {} images and {n} labels",
            images.dim(0)
        )));
    }
    let batch = cfg.batch_size.clamp(1, n);
    let per_epoch = n.div_ceil(batch);
    let schedule = LinearDecay::new(cfg.lr, cfg.epochs * per_epoch);
    let mut opt = Sgd::new(cfg.momentum);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    let mut last = 0.0;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            total += sgd_step(model, &mut opt, &images.select_rows(chunk), &ys, schedule.at(step))?;
            step += 1;
        }
        last = total / per_epoch as f64;
    }
    Ok(last)
}

/// Argmax predictions, evaluated in chunks.
pub fn predict<M: ImageClassifier>(model: &M, images: &Tensor) -> Result<Vec<usize>> {
    let n = images.dim(0);
    let mut out = Vec::with_capacity(n);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(256) {
        let g = Graph::new();
        let logits = model.logits(&g, g.constant(images.select_rows(chunk)))?;
        out.extend(logits.value().argmax_rows());
    }
    Ok(out)
}

/// Top-1 accuracy in `[0, 1]`.
pub fn accuracy<M: ImageClassifier>(model: &M, images: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Argument("accuracy on an empty set".into()));
    }
    let pred = predict(model, images)?;
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}
