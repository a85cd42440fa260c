//! Linear readout on frozen pixel embeddings.
//!
//! A 1×1 convolution — one weight row per class applied at every pixel — is
//! trained with softmax cross-entropy on the labeled pixels while the
//! embeddings stay fixed. Because the classifier is linear, its gradient has
//! a closed form and no tape is needed; the embedding inputs are read-only
//! throughout, which is the frozen-backbone contract.

use super::miou::standard_miou;
use super::EvalReport;
use crate::data::{LabelMap, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::tensor::{Scalar, Tensor};
use rand::seq::SliceRandom as _;
use rand::Rng as _;

/// Hyper-parameters of the probe run.
#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate for epochs before `drop_epoch`.
    pub base_lr: f64,
    /// Epoch index at which the rate switches to `drop_lr`.
    pub drop_epoch: usize,
    pub drop_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 60,
            batch_size: 16,
            base_lr: 0.1,
            drop_epoch: 40,
            drop_lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("probe epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("probe batch size must be at least 1".into()));
        }
        for (name, v) in [("base_lr", self.base_lr), ("drop_lr", self.drop_lr)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "probe {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "probe momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "probe weight decay must be finite and non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Trained probe and its score on the provided images.
#[derive(Debug, Clone)]
pub struct ProbeOutcome {
    /// `[num_classes, dim]` classifier weights.
    pub weights: Tensor<f64>,
    /// `[num_classes]` biases.
    pub bias: Tensor<f64>,
    /// Mean IoU of the argmax prediction, no matching step.
    pub miou: f64,
    /// Full score breakdown behind `miou`.
    pub report: EvalReport,
}

/// Trains the linear readout on `embeddings` (one `[dim, h, w]` map per
/// image) against per-pixel labels, then scores it on the same images with
/// the standard (non-matched) mIoU. The embedding tensors are never written.
pub fn linear_probe<S: Scalar>(
    embeddings: &[Tensor<S>],
    labels: &[&LabelMap],
    config: &ProbeConfig,
) -> Result<ProbeOutcome> {
    config.validate()?;
    if embeddings.is_empty() {
        return Err(Error::Data("probe needs at least one image".into()));
    }
    if embeddings.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} embedding maps but {} label maps",
            embeddings.len(),
            labels.len()
        )));
    }
    let dim = check_maps(embeddings, labels)?;
    let num_classes = count_classes(labels)?;

    // Layout matches the trunk convolutions: uniform(−s, s) with
    // s = sqrt(1/fan_in) for weights, zero biases, deterministic per seed.
    let mut init_rng = rng::stream_rng(config.seed, &[stream::PROBE]);
    let s = (1.0 / dim as f64).sqrt();
    let mut weights: Vec<f64> = (0..num_classes * dim)
        .map(|_| init_rng.gen_range(-s..s))
        .collect();
    let mut bias = vec![0.0f64; num_classes];
    let mut vel_w = vec![0.0f64; num_classes * dim];
    let mut vel_b = vec![0.0f64; num_classes];

    let per_image: Vec<Vec<(usize, usize)>> = labels
        .iter()
        .map(|l| labeled_pixels(l))
        .collect();

    for epoch in 0..config.epochs {
        let lr = if epoch < config.drop_epoch {
            config.base_lr
        } else {
            config.drop_lr
        };
        let mut order: Vec<usize> = (0..embeddings.len()).collect();
        order.shuffle(&mut rng::stream_rng(config.seed, &[stream::PROBE, epoch as u64]));

        for batch in order.chunks(config.batch_size) {
            let mut grad_w = vec![0.0f64; num_classes * dim];
            let mut grad_b = vec![0.0f64; num_classes];
            let mut pixel_count = 0usize;
            for &img in batch {
                pixel_count += per_image[img].len();
            }
            if pixel_count == 0 {
                continue;
            }
            let inv = 1.0 / pixel_count as f64;
            for &img in batch {
                let emb = &embeddings[img];
                let (h, w) = (emb.shape()[1], emb.shape()[2]);
                let data = emb.data();
                for &(flat, target) in &per_image[img] {
                    let x: Vec<f64> = (0..dim).map(|d| data[d * h * w + flat].to_f64()).collect();
                    let mut logits: Vec<f64> = (0..num_classes)
                        .map(|c| {
                            bias[c]
                                + weights[c * dim..(c + 1) * dim]
                                    .iter()
                                    .zip(&x)
                                    .map(|(wv, xv)| wv * xv)
                                    .sum::<f64>()
                        })
                        .collect();
                    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut denom = 0.0;
                    for l in logits.iter_mut() {
                        *l = (*l - max).exp();
                        denom += *l;
                    }
                    for c in 0..num_classes {
                        let p = logits[c] / denom;
                        let d = (p - if c == target { 1.0 } else { 0.0 }) * inv;
                        grad_b[c] += d;
                        for (gw, xv) in grad_w[c * dim..(c + 1) * dim].iter_mut().zip(&x) {
                            *gw += d * xv;
                        }
                    }
                }
            }
            for ((w, v), g) in weights.iter_mut().zip(&mut vel_w).zip(&grad_w) {
                *v = config.momentum * *v + g + config.weight_decay * *w;
                *w -= lr * *v;
            }
            for ((b, v), g) in bias.iter_mut().zip(&mut vel_b).zip(&grad_b) {
                *v = config.momentum * *v + g + config.weight_decay * *b;
                *b -= lr * *v;
            }
        }
    }

    let weights = Tensor::from_vec(&[num_classes, dim], weights)?;
    let bias = Tensor::from_vec(&[num_classes], bias)?;
    let report = score_probe(&weights, &bias, embeddings, labels)?;
    Ok(ProbeOutcome {
        miou: report.miou,
        weights,
        bias,
        report,
    })
}

/// Argmax predictions of a probe over every image, scored without matching.
pub fn score_probe<S: Scalar>(
    weights: &Tensor<f64>,
    bias: &Tensor<f64>,
    embeddings: &[Tensor<S>],
    labels: &[&LabelMap],
) -> Result<EvalReport> {
    let num_classes = weights.shape()[0];
    let dim = weights.shape()[1];
    let wd = weights.data();
    let bd = bias.data();
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for (emb, label) in embeddings.iter().zip(labels) {
        let (h, w) = (emb.shape()[1], emb.shape()[2]);
        let data = emb.data();
        for flat in 0..h * w {
            let mut best = 0usize;
            let mut best_score = f64::NEG_INFINITY;
            for c in 0..num_classes {
                let mut score = bd[c];
                for d in 0..dim {
                    score += wd[c * dim + d] * data[d * h * w + flat].to_f64();
                }
                if score > best_score {
                    best_score = score;
                    best = c;
                }
            }
            pred.push(best as u32);
            gt.push(label.values()[flat]);
        }
    }
    standard_miou(&pred, &gt)
}

/// Flat pixel index and class for every labeled (non-255) pixel.
fn labeled_pixels(labels: &LabelMap) -> Vec<(usize, usize)> {
    labels
        .values()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != IGNORE_LABEL)
        .map(|(i, &v)| (i, v as usize))
        .collect()
}

fn check_maps<S: Scalar>(embeddings: &[Tensor<S>], labels: &[&LabelMap]) -> Result<usize> {
    let dim = embeddings[0].shape()[0];
    for (i, (emb, label)) in embeddings.iter().zip(labels).enumerate() {
        let shape = emb.shape();
        if shape.len() != 3 {
            return Err(Error::Shape(format!(
                "embedding map {i} must be [dim, height, width], got {shape:?}"
            )));
        }
        if shape[0] != dim {
            return Err(Error::Shape(format!(
                "embedding map {i} has dim {} but map 0 has {dim}",
                shape[0]
            )));
        }
        if (label.height(), label.width()) != (shape[1], shape[2]) {
            return Err(Error::Shape(format!(
                "label map {i} is {}x{} but its embedding map is {}x{}",
                label.height(),
                label.width(),
                shape[1],
                shape[2]
            )));
        }
        if !emb.all_finite() {
            return Err(Error::Numeric(format!(
                "embedding map {i} contains non-finite values"
            )));
        }
    }
    Ok(dim)
}

fn count_classes(labels: &[&LabelMap]) -> Result<usize> {
    let max = labels
        .iter()
        .flat_map(|l| l.values().iter())
        .filter(|&&v| v != IGNORE_LABEL)
        .max();
    match max {
        None => Err(Error::Data("no labeled pixels to probe on".into())),
        Some(&m) if (m as usize) < 1 => Err(Error::Data(
            "probing needs at least two classes in the labels".into(),
        )),
        Some(&m) => Ok(m as usize + 1),
    }
}
