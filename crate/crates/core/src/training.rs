//! Training of the category head on top of a frozen backbone.
//!
//! Each example contributes the loss of its global view plus the mean loss of
//! its local views, where the local views are the crops proposed by the
//! current head. Only the head receives gradients; proposals are treated as
//! constants within a step.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::LabeledImage;
use crate::error::{DidError, Result};
use crate::pipeline::{local_view, predict_with_global, propose, view_logits, PipelineConfig, PredictionResult, ViewFeatures};
use crate::semantic::HeadKernel;
use crate::tensor::{average_pool_spatial, sigmoid, Tensor};
use crate::vit::BackboneWeights;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub warmup_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-5,
            batch_size: 32,
            total_steps: 2000,
            warmup_fraction: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr.is_nan() || self.base_lr <= 0.0 {
            return Err(DidError::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(DidError::Config(format!(
                "warmup_fraction must lie in [0, 1), got {}",
                self.warmup_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(DidError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy over classes, `softplus(z) - y z` per class.
pub fn bce_loss(logits: &[f64], labels: &[bool]) -> f64 {
    assert_eq!(logits.len(), labels.len());
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| softplus(z) - if y { z } else { 0.0 })
        .sum();
    total / logits.len() as f64
}

/// Gradient of [`bce_loss`] with respect to the head given the pooled token
/// features of one view.
fn pooled_gradient(pooled: &[f64], logits: &[f64], labels: &[bool]) -> Vec<f64> {
    let c = logits.len() as f64;
    let mut grad = Vec::with_capacity(logits.len() * pooled.len());
    for (&z, &y) in logits.iter().zip(labels) {
        let err = (sigmoid(z) - if y { 1.0 } else { 0.0 }) / c;
        grad.extend(pooled.iter().map(|x| err * x));
    }
    grad
}

/// `d loss / d k[c, d] = (sigmoid(B_c) - y_c) / C * mean(x'_d)`.
pub fn head_gradient(features: &Tensor, head: &HeadKernel, labels: &[bool]) -> Result<Tensor> {
    let logits = view_logits(features, head)?;
    let pooled = average_pool_spatial(features)?;
    Ok(Tensor::from_parts(
        vec![head.classes(), head.dim()],
        pooled_gradient(&pooled, &logits, labels),
    ))
}

/// Linear warmup over `ceil(warmup_fraction * total)` steps, then a half-cosine
/// from `base_lr` down to zero at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, warmup_fraction: f64, base_lr: f64) -> f64 {
    if step >= total_steps {
        return 0.0;
    }
    // the small offset keeps e.g. 0.05 * 1000 from rounding up to 51
    let warmup = (warmup_fraction * total_steps as f64 - 1e-9).ceil().max(0.0) as usize;
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    let t = (step - warmup) as f64 / (total_steps - warmup) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Momentum SGD with L2 weight decay folded into the velocity:
/// `v <- momentum v + grad + wd k`, `k <- k - lr v`.
pub fn sgd_step(
    weights: &Tensor,
    velocity: &Tensor,
    grad: &Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<(Tensor, Tensor)> {
    if weights.shape() != velocity.shape() || weights.shape() != grad.shape() {
        return Err(DidError::shape("sgd_step", weights.shape(), grad.shape()));
    }
    let v: Vec<f64> = velocity
        .data()
        .iter()
        .zip(grad.data())
        .zip(weights.data())
        .map(|((&v, &g), &k)| momentum * v + g + weight_decay * k)
        .collect();
    let k: Vec<f64> = weights.data().iter().zip(&v).map(|(&k, &v)| k - lr * v).collect();
    Ok((
        Tensor::from_parts(weights.shape().to_vec(), k),
        Tensor::from_parts(weights.shape().to_vec(), v),
    ))
}

/// Global-view features of every image, computed once since the backbone is frozen.
pub fn precompute_views(dataset: &[LabeledImage], weights: &BackboneWeights) -> Result<Vec<ViewFeatures>> {
    dataset
        .par_iter()
        .map(|item| ViewFeatures::compute(&item.image, weights))
        .collect()
}

/// Loss and head gradient of one example under the multi-view objective.
pub fn example_objective(
    item: &LabeledImage,
    view: &ViewFeatures,
    weights: &BackboneWeights,
    head: &HeadKernel,
    cfg: &PipelineConfig,
) -> Result<(f64, Vec<f64>)> {
    let logits = view_logits(&view.features, head)?;
    let pooled = view.pooled();
    let mut loss = bce_loss(&logits, &item.labels);
    let mut grad = pooled_gradient(&pooled, &logits, &item.labels);

    let proposals = propose(&item.image, view, &logits, head, cfg)?;
    if !proposals.is_empty() {
        let share = 1.0 / proposals.len() as f64;
        for p in &proposals {
            let local = local_view(&item.image, &p.bbox, weights)?;
            let local_logits = view_logits(&local, head)?;
            let local_pooled = average_pool_spatial(&local)?;
            loss += share * bce_loss(&local_logits, &item.labels);
            let g = pooled_gradient(&local_pooled, &local_logits, &item.labels);
            for (a, b) in grad.iter_mut().zip(g) {
                *a += share * b;
            }
        }
    }
    Ok((loss, grad))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub head: HeadKernel,
    /// Mean objective of each step's mini-batch, measured before the update.
    pub batch_losses: Vec<f64>,
}

/// Mini-batch momentum SGD on the head. Batches are drawn from a seeded
/// shuffle that is redrawn every epoch; examples of a batch are evaluated in
/// parallel and reduced in index order, so the result is deterministic.
pub fn train_head(
    dataset: &[LabeledImage],
    weights: &BackboneWeights,
    train: &TrainConfig,
    pipeline: &PipelineConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let views = precompute_views(dataset, weights)?;
    train_head_cached(dataset, &views, weights, train, pipeline, seed)
}

pub fn initial_head(weights: &BackboneWeights, seed: u64) -> HeadKernel {
    HeadKernel::init(weights.config.num_classes, weights.config.dim, seed)
}

pub fn train_head_cached(
    dataset: &[LabeledImage],
    views: &[ViewFeatures],
    weights: &BackboneWeights,
    train: &TrainConfig,
    pipeline: &PipelineConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    train.validate()?;
    pipeline.validate()?;
    if dataset.is_empty() {
        return Err(DidError::Config("training needs a non-empty dataset".into()));
    }
    if views.len() != dataset.len() {
        return Err(DidError::shape("train_head", &[dataset.len()], &[views.len()]));
    }
    let mut head = initial_head(weights, seed);
    let mut velocity = Tensor::zeros(head.weights().shape());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut batch_losses = Vec::with_capacity(train.total_steps);

    for step in 0..train.total_steps {
        let mut batch = Vec::with_capacity(train.batch_size);
        while batch.len() < train.batch_size.min(dataset.len()) {
            if cursor == order.len() {
                order = (0..dataset.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let results = batch
            .par_iter()
            .map(|&i| example_objective(&dataset[i], &views[i], weights, &head, pipeline))
            .collect::<Result<Vec<_>>>()?;
        let scale = 1.0 / batch.len() as f64;
        let mut grad = vec![0.0; head.weights().len()];
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l * scale;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b * scale;
            }
        }
        batch_losses.push(loss);

        let lr = cosine_lr(step, train.total_steps, train.warmup_fraction, train.base_lr);
        let grad = Tensor::from_parts(head.weights().shape().to_vec(), grad);
        let (k, v) = sgd_step(head.weights(), &velocity, &grad, lr, train.momentum, train.weight_decay)?;
        head = HeadKernel::new(k)?;
        velocity = v;
    }
    Ok(TrainOutcome { head, batch_losses })
}

/// Runs the full pipeline over a dataset, reusing precomputed global views
/// when given.
pub fn predict_dataset(
    dataset: &[LabeledImage],
    views: Option<&[ViewFeatures]>,
    weights: &BackboneWeights,
    head: &HeadKernel,
    cfg: &PipelineConfig,
) -> Result<Vec<PredictionResult>> {
    cfg.validate()?;
    dataset
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let owned;
            let view = match views {
                Some(v) => &v[i],
                None => {
                    owned = ViewFeatures::compute(&item.image, weights)?;
                    &owned
                }
            };
            predict_with_global(&item.image, view, weights, head, cfg)
        })
        .collect()
}
