//! The optimization loop: SGD with momentum and weight decay, a polynomial
//! learning-rate schedule, the two-view contrastive training driver, and
//! supervised fine-tuning with a class head.
//!
//! Per batch the loop runs in a fixed order: augment both views, run the key
//! network (no tape) to obtain detached object prototypes, run the query
//! network on a tape, form the contrastive + auxiliary loss, backpropagate,
//! apply SGD to the query network only, move the key network by its
//! exponential moving average, and finally enqueue the batch prototypes into
//! the memory bank. Every random choice comes from a tagged, per-purpose
//! stream, so a seed pins the entire run.

use std::path::Path;

use rand::seq::SliceRandom as _;

use crate::augment::{self, AugmentConfig};
use crate::data::{Dataset, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::maskcontrast::{
    build_step_loss, key_prototype, prototype_matrix, LossConfig, MemoryBank, Prototype,
    QueryView,
};
use crate::model::{ClassifierParams, ModelConfig, ModelParams, ParamSet};
use crate::rng::{self, stream};
use crate::tensor::{Scalar, Tensor};

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Base learning rate; 0 disables learning (useful for smoke tests).
    pub base_lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            epochs: 60,
            batch_size: 64,
            base_lr: 0.004,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!(
                "base_lr must be finite and non-negative, got {}",
                self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(Error::Config(format!(
                "sgd_momentum must lie in [0, 1), got {}",
                self.sgd_momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(self.poly_power > 0.0) {
            return Err(Error::Config(format!(
                "poly_power must be positive, got {}",
                self.poly_power
            )));
        }
        Ok(())
    }
}

/// Polynomially decayed learning rate:
/// `base_lr * (1 - iter/max_iter)^power`.
pub fn poly_lr(iter: usize, max_iter: usize, base_lr: f64, power: f64) -> Result<f64> {
    if max_iter == 0 {
        return Err(Error::Config("poly schedule needs max_iter > 0".into()));
    }
    if iter > max_iter {
        return Err(Error::Config(format!(
            "iteration {iter} exceeds schedule length {max_iter}"
        )));
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// Per-parameter velocity buffers, aligned with the canonical name order.
#[derive(Debug, Clone)]
pub struct SgdState<S: Scalar = f32> {
    velocity: Vec<Tensor<S>>,
}

impl<S: Scalar> SgdState<S> {
    /// Zero velocity matching the given parameter list.
    pub fn new<P: ParamSet<S>>(params: &P) -> Self {
        SgdState {
            velocity: params
                .named()
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect(),
        }
    }
}

/// One SGD step with classic (coupled) weight decay:
/// `v <- momentum*v + g + weight_decay*w; w <- w - lr*v`.
///
/// Update arithmetic runs in 64-bit regardless of the stored precision.
pub fn sgd_step<S: Scalar>(
    params: &mut [(String, &mut Tensor<S>)],
    grads: &[Tensor<S>],
    state: &mut SgdState<S>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let scales = vec![1.0; params.len()];
    sgd_step_scaled(params, grads, state, lr, &scales, momentum, weight_decay)
}

/// [`sgd_step`] with a per-parameter learning-rate multiplier (the class
/// head trains faster than the trunk during fine-tuning).
pub fn sgd_step_scaled<S: Scalar>(
    params: &mut [(String, &mut Tensor<S>)],
    grads: &[Tensor<S>],
    state: &mut SgdState<S>,
    lr: f64,
    lr_scales: &[f64],
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    if lr_scales.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} lr scales for {} parameters",
            lr_scales.len(),
            params.len()
        )));
    }
    for (((name, w), g), (v, &scale)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.velocity.iter_mut().zip(lr_scales))
    {
        if w.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient shape {:?} does not match parameter '{name}' {:?}",
                g.shape(),
                w.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient for parameter '{name}'"
            )));
        }
        let step_lr = lr * scale;
        for ((wv, &gv), vv) in w
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(v.data_mut().iter_mut())
        {
            let wf = wv.to_f64();
            let new_v = momentum * vv.to_f64() + gv.to_f64() + weight_decay * wf;
            *vv = S::from_f64(new_v);
            *wv = S::from_f64(wf - step_lr * new_v);
        }
    }
    Ok(())
}

/// Per-epoch training telemetry. Losses are means over the epoch's executed
/// steps; `lr` is the rate at the epoch's first iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub contrastive_loss: f64,
    pub aux_loss: f64,
    pub total_loss: f64,
    pub lr: f64,
}

/// Renders the metrics log as CSV (one line per epoch plus header).
pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,contrastive_loss,aux_loss,total_loss,lr\n");
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            m.epoch, m.contrastive_loss, m.aux_loss, m.total_loss, m.lr
        ));
    }
    out
}

/// Writes the metrics log to a file.
pub fn write_metrics_csv(path: impl AsRef<Path>, metrics: &[EpochMetrics]) -> Result<()> {
    std::fs::write(path.as_ref(), metrics_csv(metrics))
        .map_err(|e| Error::io(path.as_ref(), e))
}

/// Everything a contrastive training run produces.
#[derive(Debug)]
pub struct TrainOutcome<S: Scalar = f32> {
    /// The trained query network — the model that ships.
    pub params: ModelParams<S>,
    /// The EMA key network at the end of training.
    pub key_params: ModelParams<S>,
    pub metrics: Vec<EpochMetrics>,
    /// Batches skipped because augmentation left no salient pixel.
    pub skipped_steps: usize,
}

/// Runs two-view contrastive training from random initialization.
pub fn train<S: Scalar>(
    dataset: &Dataset,
    model_config: &ModelConfig,
    trainer: &TrainerConfig,
    loss: &LossConfig,
    augment_config: &AugmentConfig,
    bank_capacity: usize,
) -> Result<TrainOutcome<S>> {
    model_config.validate()?;
    trainer.validate()?;
    loss.validate()?;
    augment_config.validate()?;
    if let Some(empty) = dataset.iter().find(|s| s.saliency.is_empty()) {
        return Err(Error::Data(format!(
            "sample '{}' has an all-background mask; exclude such images at ingestion",
            empty.id
        )));
    }

    let mut query = ModelParams::<S>::init(model_config, trainer.seed)?;
    let mut key = query.clone();
    let key_init = key.clone();
    let mut bank = MemoryBank::<S>::new(bank_capacity)?;
    let mut sgd = SgdState::new(&query);

    let steps_per_epoch = dataset.len().div_ceil(trainer.batch_size);
    let max_iter = (trainer.epochs * steps_per_epoch).max(1);
    let (out_h, out_w) = (model_config.input_height, model_config.input_width);

    let mut metrics = Vec::with_capacity(trainer.epochs);
    let mut skipped_steps = 0usize;
    let mut iter = 0usize;

    for epoch in 0..trainer.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut shuffle_rng = rng::stream_rng(trainer.seed, &[stream::SHUFFLE, epoch as u64]);
        order.shuffle(&mut shuffle_rng);

        let epoch_lr = poly_lr(iter, max_iter, trainer.base_lr, trainer.poly_power)?;
        let mut sums = (0.0f64, 0.0f64, 0.0f64);
        let mut executed = 0usize;

        for chunk in order.chunks(trainer.batch_size) {
            let lr = poly_lr(iter, max_iter, trainer.base_lr, trainer.poly_power)?;
            iter += 1;

            // Two augmented views per image, from per-(epoch, image) streams.
            let mut views = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let sample = dataset.get(idx);
                let mut view_rng = rng::stream_rng(
                    augment_config.seed,
                    &[stream::AUGMENT, epoch as u64, idx as u64],
                );
                views.push(augment::sample_view_pair(
                    &sample.image,
                    &sample.saliency,
                    augment_config,
                    out_h,
                    out_w,
                    &mut view_rng,
                )?);
            }

            // Key pass (no tape): one detached prototype per image.
            let mut batch_protos: Vec<Prototype<S>> = Vec::with_capacity(chunk.len());
            for ((_, _), (key_img, key_mask)) in &views {
                let (emb, _) = key.forward(&key_img.cast::<S>())?;
                batch_protos.push(key_prototype(&emb, key_mask)?);
            }

            // Query pass on the tape.
            let mut graph = crate::autodiff::Graph::<S>::new();
            let nodes = query.insert_into(&mut graph);
            let mut query_views = Vec::with_capacity(chunk.len());
            for ((query_img, _), _) in &views {
                let (emb, sal) =
                    model_config.forward_graph(&mut graph, &nodes, &query_img.cast::<S>())?;
                query_views.push((emb, sal));
            }
            let step_views: Vec<QueryView<'_>> = query_views
                .iter()
                .zip(&views)
                .map(|(&(embedding, saliency), ((_, query_mask), _))| QueryView {
                    embedding,
                    saliency,
                    mask: query_mask,
                })
                .collect();

            let protos = prototype_matrix(&batch_protos, &bank)?;
            let step = match build_step_loss(&mut graph, &step_views, &protos, loss)? {
                Some(step) => step,
                None => {
                    log::warn!(
                        "epoch {epoch}: batch left no salient pixel after augmentation; step skipped"
                    );
                    skipped_steps += 1;
                    continue;
                }
            };

            let contrastive = graph.value(step.contrastive).item()?.to_f64();
            let aux = graph.value(step.aux).item()?.to_f64();
            let total = graph.value(step.total).item()?.to_f64();

            let mut grads = graph.backward(step.total)?;
            let grad_list = collect_gradients(&mut grads, &nodes.ids(), &query)?;
            sgd_step(
                &mut query.named_mut(),
                &grad_list,
                &mut sgd,
                lr,
                trainer.sgd_momentum,
                trainer.weight_decay,
            )?;
            crate::maskcontrast::momentum_update(&mut key, &query, loss.momentum)?;
            bank.enqueue(batch_protos)?;

            sums.0 += contrastive;
            sums.1 += aux;
            sums.2 += total;
            executed += 1;
        }

        let denom = executed.max(1) as f64;
        metrics.push(EpochMetrics {
            epoch,
            contrastive_loss: sums.0 / denom,
            aux_loss: sums.1 / denom,
            total_loss: sums.2 / denom,
            lr: epoch_lr,
        });
        log::info!(
            "epoch {epoch}: contrastive {:.6} aux {:.6} total {:.6} lr {:.6}",
            sums.0 / denom,
            sums.1 / denom,
            sums.2 / denom,
            epoch_lr
        );
    }

    // A fully EMA-frozen key must still be bit-identical to its start.
    if loss.momentum == 1.0 && key != key_init {
        return Err(Error::Numeric(
            "key network changed despite a frozen moving average".into(),
        ));
    }

    Ok(TrainOutcome {
        params: query,
        key_params: key,
        metrics,
        skipped_steps,
    })
}

fn collect_gradients<S: Scalar, P: ParamSet<S>>(
    grads: &mut crate::autodiff::Gradients<S>,
    ids: &[crate::autodiff::NodeId],
    params: &P,
) -> Result<Vec<Tensor<S>>> {
    let named = params.named();
    let mut out = Vec::with_capacity(ids.len());
    for (&id, (name, tensor)) in ids.iter().zip(&named) {
        match grads.take(id) {
            Some(g) => out.push(g),
            // A parameter that no gradient reached still takes a (zero)
            // step so weight decay stays uniform across parameters.
            None => {
                log::warn!("no gradient reached parameter '{name}'");
                out.push(Tensor::zeros(tensor.shape()));
            }
        }
    }
    Ok(out)
}

/// Trains a classifier from a pretrained trunk on a deterministic labeled
/// subset. The class head learns 25x faster than the trunk.
pub fn supervised_finetune<S: Scalar>(
    dataset: &Dataset,
    label_fraction: f64,
    pretrained: &ModelParams<S>,
    trainer: &TrainerConfig,
) -> Result<ClassifierParams<S>> {
    trainer.validate()?;
    if !(label_fraction > 0.0 && label_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "label fraction must lie in (0, 1], got {label_fraction}"
        )));
    }
    if let Some(unlabeled) = dataset.iter().find(|s| s.labels.is_none()) {
        return Err(Error::Data(format!(
            "sample '{}' has no labels; fine-tuning needs a labeled dataset",
            unlabeled.id
        )));
    }

    // Deterministic subset: shuffle indices on a dedicated stream, keep the
    // first round(fraction * N), at least one.
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    let mut subset_rng = rng::stream_rng(trainer.seed, &[stream::SUBSET]);
    indices.shuffle(&mut subset_rng);
    let count = ((label_fraction * dataset.len() as f64).round() as usize)
        .clamp(1, dataset.len());
    indices.truncate(count);

    let num_classes = indices
        .iter()
        .flat_map(|&i| {
            dataset
                .get(i)
                .labels
                .as_ref()
                .expect("checked above")
                .classes_present()
        })
        .max()
        .map(|c| c as usize + 1)
        .unwrap_or(0);
    if num_classes < 2 {
        return Err(Error::Data(format!(
            "labeled subset exposes {num_classes} classes; need at least 2"
        )));
    }

    let mut classifier = ClassifierParams::from_pretrained(pretrained, num_classes, trainer.seed)?;
    let head_scale: Vec<f64> = classifier
        .named()
        .iter()
        .map(|(name, _)| if name.starts_with("class_head") { 25.0 } else { 1.0 })
        .collect();
    let mut sgd = SgdState::new(&classifier);

    let steps_per_epoch = indices.len().div_ceil(trainer.batch_size);
    let max_iter = (trainer.epochs * steps_per_epoch).max(1);
    let mut iter = 0usize;

    for epoch in 0..trainer.epochs {
        let mut order = indices.clone();
        let mut shuffle_rng =
            rng::stream_rng(trainer.seed, &[stream::SHUFFLE, epoch as u64, 1]);
        order.shuffle(&mut shuffle_rng);

        for chunk in order.chunks(trainer.batch_size) {
            let lr = poly_lr(iter, max_iter, trainer.base_lr, trainer.poly_power)?;
            iter += 1;

            let mut graph = crate::autodiff::Graph::<S>::new();
            let nodes = classifier.insert_into(&mut graph);
            let mut losses = Vec::new();
            for &idx in chunk {
                let sample = dataset.get(idx);
                let labels = sample.labels.as_ref().expect("checked above");
                let (pixels, targets) = labeled_pixels(labels);
                if pixels.is_empty() {
                    continue;
                }
                let logits =
                    classifier.forward_graph(&mut graph, &nodes, &sample.image.cast::<S>())?;
                let rows = graph.select_pixels(logits, &pixels)?;
                losses.push(graph.softmax_cross_entropy(rows, &targets)?);
            }
            if losses.is_empty() {
                continue;
            }
            let mut loss = losses[0];
            for &l in &losses[1..] {
                loss = graph.add(loss, l)?;
            }
            let loss = graph.scale(loss, 1.0 / losses.len() as f64);

            let mut grads = graph.backward(loss)?;
            let grad_list = collect_gradients(&mut grads, &nodes.ids(), &classifier)?;
            sgd_step_scaled(
                &mut classifier.named_mut(),
                &grad_list,
                &mut sgd,
                lr,
                &head_scale,
                trainer.sgd_momentum,
                trainer.weight_decay,
            )?;
        }
    }
    Ok(classifier)
}

/// Flat indices and class targets of every non-ignored pixel.
fn labeled_pixels(labels: &crate::data::LabelMap) -> (Vec<usize>, Vec<usize>) {
    let mut pixels = Vec::new();
    let mut targets = Vec::new();
    for (i, &l) in labels.values().iter().enumerate() {
        if l != IGNORE_LABEL {
            pixels.push(i);
            targets.push(l as usize);
        }
    }
    (pixels, targets)
}

/// Fraction of labeled pixels the classifier gets right, over the dataset.
pub fn pixel_accuracy<S: Scalar>(
    classifier: &ClassifierParams<S>,
    dataset: &Dataset,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for sample in dataset.iter() {
        let labels = sample
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data(format!("sample '{}' has no labels", sample.id)))?;
        let logits = classifier.forward(&sample.image.cast::<S>())?;
        let (m, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
        let data = logits.data();
        for y in 0..h {
            for x in 0..w {
                let gt = labels.at(y, x);
                if gt == IGNORE_LABEL {
                    continue;
                }
                let mut best = (S::from_f64(f64::NEG_INFINITY), 0usize);
                for c in 0..m {
                    let v = data[c * h * w + y * w + x];
                    if v > best.0 {
                        best = (v, c);
                    }
                }
                if best.1 == gt as usize {
                    correct += 1;
                }
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Data("no labeled pixels to score".into()));
    }
    Ok(correct as f64 / total as f64)
}
