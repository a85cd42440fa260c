//! The mask-contrast objective: prototypes, memory bank, losses, and the
//! momentum key encoder.
//!
//! Each training image contributes one salient-object mask. The key network
//! turns the mask's pixels (in one augmented view) into a single unit-norm
//! *prototype*; every salient pixel of the other view is then classified, by
//! dot product, against the prototypes of the current batch plus a FIFO
//! memory bank of recent prototypes. Cross-entropy at temperature τ pulls a
//! pixel towards its own object's prototype and pushes it away from all
//! others. Background pixels are excluded entirely; a separate binary
//! cross-entropy on the saliency head keeps the trunk from collapsing.
//!
//! Prototypes are built sum-then-normalize and explicitly detached, so no
//! gradient ever reaches the key network; the key network instead tracks the
//! query network through an exponential moving average
//! (`key = m*key + (1-m)*query`).

use std::collections::VecDeque;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::{ModelParams, ParamSet, PixelEmbeddingMap};
use crate::ops;
use crate::tensor::{Scalar, Tensor};

/// Binary foreground mask for one object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectMask {
    width: usize,
    height: usize,
    bits: Vec<u8>,
    foreground: usize,
}

impl ObjectMask {
    /// Builds a mask from row-major 0/1 bytes.
    pub fn new(width: usize, height: usize, bits: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!(
                "mask dimensions must be positive, got {width}x{height}"
            )));
        }
        if bits.len() != width * height {
            return Err(Error::Shape(format!(
                "mask of {width}x{height} needs {} bytes, got {}",
                width * height,
                bits.len()
            )));
        }
        if let Some(bad) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::Data(format!(
                "mask values must be 0 or 1, found {bad}"
            )));
        }
        let foreground = bits.iter().filter(|&&b| b == 1).count();
        Ok(ObjectMask {
            width,
            height,
            bits,
            foreground,
        })
    }

    /// Builds a mask by evaluating a predicate per (y, x).
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(u8::from(f(y, x)));
            }
        }
        ObjectMask::new(width, height, bits).expect("generated bits are valid")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Row-major 0/1 bytes.
    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn foreground_count(&self) -> usize {
        self.foreground
    }

    /// Fraction of pixels that are foreground.
    pub fn foreground_fraction(&self) -> f64 {
        self.foreground as f64 / (self.width * self.height) as f64
    }

    pub fn is_empty(&self) -> bool {
        self.foreground == 0
    }

    pub fn is_foreground(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] == 1
    }

    /// Flat indices (`y * width + x`) of all foreground pixels, in raster
    /// order.
    pub fn foreground_indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 1)
            .map(|(i, _)| i)
            .collect()
    }

    /// The mask as a `[H, W]` tensor of zeros and ones (e.g. a BCE target).
    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor::from_vec(
            &[self.height, self.width],
            self.bits.iter().map(|&b| S::from_f64(b as f64)).collect(),
        )
        .expect("mask dimensions are valid")
    }
}

/// Unit-norm aggregate embedding of one object.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototype<S: Scalar = f32> {
    values: Vec<S>,
}

impl<S: Scalar> Prototype<S> {
    /// Wraps an already-normalized vector, verifying ‖v‖ = 1 ± 1e-6.
    pub fn from_unit(values: Vec<S>) -> Result<Self> {
        let norm = norm_f64(&values);
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Numeric(format!(
                "prototype norm {norm:.8} is not 1 within 1e-6"
            )));
        }
        Ok(Prototype { values })
    }

    /// Normalizes an arbitrary sum vector. Fails on (near-)zero norm.
    pub fn from_sum(values: Vec<S>) -> Result<Self> {
        let norm = norm_f64(&values);
        if norm <= ops::NORM_EPSILON {
            return Err(Error::Numeric(format!(
                "cannot normalize prototype with norm {norm:.3e}"
            )));
        }
        Ok(Prototype {
            values: values
                .iter()
                .map(|v| S::from_f64(v.to_f64() / norm))
                .collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[S] {
        &self.values
    }
}

fn norm_f64<S: Scalar>(values: &[S]) -> f64 {
    values
        .iter()
        .map(|v| {
            let f = v.to_f64();
            f * f
        })
        .sum::<f64>()
        .sqrt()
}

/// Fixed-capacity FIFO store of recent prototypes (the negatives pool).
#[derive(Debug, Clone)]
pub struct MemoryBank<S: Scalar = f32> {
    capacity: usize,
    entries: VecDeque<Prototype<S>>,
}

/// Default bank capacity `K`.
pub const DEFAULT_BANK_CAPACITY: usize = 128;

impl<S: Scalar> MemoryBank<S> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("memory bank capacity must be positive".into()));
        }
        Ok(MemoryBank {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries oldest-first.
    pub fn iter(&self) -> impl Iterator<Item = &Prototype<S>> {
        self.entries.iter()
    }

    /// Inserts prototypes in order, evicting the oldest entries beyond
    /// capacity.
    pub fn enqueue(&mut self, prototypes: impl IntoIterator<Item = Prototype<S>>) -> Result<()> {
        for p in prototypes {
            if let Some(front) = self.entries.front() {
                if front.dim() != p.dim() {
                    return Err(Error::Shape(format!(
                        "prototype dim {} does not match bank dim {}",
                        p.dim(),
                        front.dim()
                    )));
                }
            }
            self.entries.push_back(p);
            while self.entries.len() > self.capacity {
                self.entries.pop_front();
            }
        }
        Ok(())
    }
}

/// Loss hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Softmax temperature τ.
    pub temperature: f64,
    /// Weight of the auxiliary saliency BCE term.
    pub aux_weight: f64,
    /// Key-network EMA coefficient `m`.
    pub momentum: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.5,
            aux_weight: 1.0,
            momentum: 0.999,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "key momentum must lie in [0, 1], got {}",
                self.momentum
            )));
        }
        if self.aux_weight < 0.0 {
            return Err(Error::Config(format!(
                "aux_weight must be non-negative, got {}",
                self.aux_weight
            )));
        }
        Ok(())
    }
}

/// Sum-then-normalize prototype of a mask under an embedding map. The result
/// is a plain value — no tape is involved, so it is detached by construction.
pub fn key_prototype<S: Scalar>(
    emb: &PixelEmbeddingMap<S>,
    mask: &ObjectMask,
) -> Result<Prototype<S>> {
    let t = emb.tensor();
    let (d, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match embedding map {h}x{w}",
            mask.height(),
            mask.width()
        )));
    }
    if mask.is_empty() {
        return Err(Error::Numeric(
            "cannot build a prototype from an empty mask".into(),
        ));
    }
    let data = t.data();
    let bits = mask.bits();
    let mut sums = vec![0.0f64; d];
    for (dim, s) in sums.iter_mut().enumerate() {
        let plane = &data[dim * h * w..(dim + 1) * h * w];
        for (v, &b) in plane.iter().zip(bits) {
            if b != 0 {
                *s += v.to_f64();
            }
        }
    }
    Prototype::from_sum(sums.into_iter().map(S::from_f64).collect())
}

/// Stacks batch prototypes (first) and bank entries (second) into a
/// `[N + bank_len, D]` row matrix — the classification columns for
/// [`build_logits`].
pub fn prototype_matrix<S: Scalar>(
    batch: &[Prototype<S>],
    bank: &MemoryBank<S>,
) -> Result<Tensor<S>> {
    if batch.is_empty() {
        return Err(Error::Shape("batch must contain at least one prototype".into()));
    }
    let d = batch[0].dim();
    let rows: Vec<&Prototype<S>> = batch.iter().chain(bank.iter()).collect();
    let mut data = Vec::with_capacity(rows.len() * d);
    for p in &rows {
        if p.dim() != d {
            return Err(Error::Shape(format!(
                "prototype dims disagree: {} vs {d}",
                p.dim()
            )));
        }
        data.extend_from_slice(p.as_slice());
    }
    Tensor::from_vec(&[rows.len(), d], data)
}

/// Dot-product logits of salient-pixel embeddings against batch prototypes
/// and bank entries.
///
/// `query_pixels` is `[P, D]` with unit rows; `owners[p]` is the batch index
/// of the image pixel `p` belongs to (the remap targets). Columns are batch
/// prototypes first, then bank entries oldest-first; during warm-up the bank
/// contributes only as many columns as it holds.
pub fn build_logits<S: Scalar>(
    query_pixels: &Tensor<S>,
    owners: &[usize],
    batch: &[Prototype<S>],
    bank: &MemoryBank<S>,
) -> Result<(Tensor<S>, Vec<usize>)> {
    let shape = query_pixels.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!(
            "query pixels must be [pixels, dim], got {shape:?}"
        )));
    }
    if owners.len() != shape[0] {
        return Err(Error::Shape(format!(
            "{} owners for {} pixel rows",
            owners.len(),
            shape[0]
        )));
    }
    if let Some(&bad) = owners.iter().find(|&&o| o >= batch.len()) {
        return Err(Error::Data(format!(
            "owner index {bad} out of range for batch of {}",
            batch.len()
        )));
    }
    let protos = prototype_matrix(batch, bank)?;
    if protos.shape()[1] != shape[1] {
        return Err(Error::Shape(format!(
            "pixel dim {} does not match prototype dim {}",
            shape[1],
            protos.shape()[1]
        )));
    }
    let logits = ops::matmul_a_bt(query_pixels, &protos)?;
    Ok((logits, owners.to_vec()))
}

/// Temperature-scaled cross-entropy over the logits, averaged over pixels.
pub fn maskcontrast_loss<S: Scalar>(
    logits: &Tensor<S>,
    targets: &[usize],
    temperature: f64,
) -> Result<S> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let scaled = logits.scale(S::from_f64(1.0 / temperature));
    ops::softmax_cross_entropy(&scaled, targets)
}

/// Weighted sum of the contrastive and auxiliary terms.
pub fn total_loss<S: Scalar>(contrastive: S, aux_bce: S, config: &LossConfig) -> S {
    contrastive + S::from_f64(config.aux_weight) * aux_bce
}

/// Moves the key network towards the query network:
/// `key = m*key + (1-m)*query`, elementwise. With `m = 1` the key is
/// bit-identical afterwards; with `m = 0` it equals the query exactly.
pub fn momentum_update<S: Scalar>(
    key: &mut ModelParams<S>,
    query: &ModelParams<S>,
    m: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!("momentum must lie in [0, 1], got {m}")));
    }
    let q = query.named();
    let mut k = key.named_mut();
    if q.len() != k.len() {
        return Err(Error::Shape(format!(
            "parameter structures differ: {} vs {} tensors",
            k.len(),
            q.len()
        )));
    }
    let mf = S::from_f64(m);
    let one_minus = S::from_f64(1.0 - m);
    for ((kname, kt), (qname, qt)) in k.iter_mut().zip(&q) {
        if kname != qname || kt.shape() != qt.shape() {
            return Err(Error::Shape(format!(
                "parameter mismatch: '{kname}' {:?} vs '{qname}' {:?}",
                kt.shape(),
                qt.shape()
            )));
        }
        for (kv, &qv) in kt.data_mut().iter_mut().zip(qt.data()) {
            *kv = mf * *kv + one_minus * qv;
        }
    }
    Ok(())
}

/// Mean squared distance between positive prototype pairs (lower = better
/// aligned).
pub fn alignment<S: Scalar>(pairs: &[(Prototype<S>, Prototype<S>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("alignment needs at least one pair".into()));
    }
    let mut total = 0.0f64;
    for (a, b) in pairs {
        if a.dim() != b.dim() {
            return Err(Error::Shape(format!(
                "pair dims disagree: {} vs {}",
                a.dim(),
                b.dim()
            )));
        }
        total += squared_distance(a.as_slice(), b.as_slice());
    }
    Ok(total / pairs.len() as f64)
}

/// Log of the mean Gaussian-kernel similarity over all distinct vector pairs
/// (more negative = more uniformly spread on the sphere).
pub fn uniformity<S: Scalar>(vectors: &[Prototype<S>]) -> Result<f64> {
    if vectors.len() < 2 {
        return Err(Error::Data(format!(
            "uniformity needs at least 2 vectors, got {}",
            vectors.len()
        )));
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for i in 0..vectors.len() {
        for j in 0..vectors.len() {
            if i == j {
                continue;
            }
            total += (-2.0 * squared_distance(vectors[i].as_slice(), vectors[j].as_slice())).exp();
            count += 1;
        }
    }
    Ok((total / count as f64).ln())
}

/// Both diagnostics in one call.
pub fn alignment_uniformity<S: Scalar>(
    pairs: &[(Prototype<S>, Prototype<S>)],
    all: &[Prototype<S>],
) -> Result<(f64, f64)> {
    Ok((alignment(pairs)?, uniformity(all)?))
}

fn squared_distance<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.to_f64() - y.to_f64();
            d * d
        })
        .sum()
}

/// One query view inside a recorded training step.
pub struct QueryView<'a> {
    /// Embedding map node (`[D, H, W]`, normalized).
    pub embedding: NodeId,
    /// Saliency logit node (`[H, W]`).
    pub saliency: NodeId,
    /// The view's object mask.
    pub mask: &'a ObjectMask,
}

/// The recorded loss nodes of one training step.
pub struct StepLoss {
    /// Contrastive term node (scalar).
    pub contrastive: NodeId,
    /// Auxiliary saliency BCE node (scalar).
    pub aux: NodeId,
    /// `contrastive + aux_weight * aux` (scalar).
    pub total: NodeId,
    /// Salient pixels contributing to the contrastive term.
    pub pixel_count: usize,
}

/// Builds the full training-step loss on a tape.
///
/// `prototypes` is the `[N + bank_len, D]` matrix from [`prototype_matrix`]
/// (key-view prototypes are already plain values, hence detached). Returns
/// `None` — step to be skipped — when no view has a salient pixel; the
/// auxiliary term alone never trains the embedding head.
pub fn build_step_loss<S: Scalar>(
    g: &mut Graph<S>,
    views: &[QueryView<'_>],
    prototypes: &Tensor<S>,
    config: &LossConfig,
) -> Result<Option<StepLoss>> {
    config.validate()?;
    if views.is_empty() {
        return Err(Error::Data("a step needs at least one view".into()));
    }
    if prototypes.shape()[0] < views.len() {
        return Err(Error::Shape(format!(
            "{} prototype rows for {} views",
            prototypes.shape()[0],
            views.len()
        )));
    }

    // Gather salient-pixel embedding rows per image, remembering owners.
    let mut pixel_rows = Vec::new();
    let mut owners = Vec::new();
    for (n, view) in views.iter().enumerate() {
        let indices = view.mask.foreground_indices();
        if indices.is_empty() {
            continue;
        }
        owners.extend(std::iter::repeat(n).take(indices.len()));
        pixel_rows.push(g.select_pixels(view.embedding, &indices)?);
    }
    if pixel_rows.is_empty() {
        return Ok(None);
    }

    let queries = if pixel_rows.len() == 1 {
        pixel_rows[0]
    } else {
        g.concat_rows(&pixel_rows)?
    };

    // logits = q . P^T via an explicit transpose of the prototype matrix.
    let protos_t = transpose_matrix(prototypes)?;
    let protos_node = g.constant(protos_t);
    let logits = g.matmul(queries, protos_node)?;
    let scaled = g.scale(logits, 1.0 / config.temperature);
    let contrastive = g.softmax_cross_entropy(scaled, &owners)?;

    // Auxiliary saliency loss, averaged over the batch's views.
    let mut aux_terms = Vec::new();
    for view in views {
        let target = view.mask.to_tensor::<S>();
        aux_terms.push(g.binary_cross_entropy(view.saliency, &target)?);
    }
    let mut aux = aux_terms[0];
    for &t in &aux_terms[1..] {
        aux = g.add(aux, t)?;
    }
    let aux = g.scale(aux, 1.0 / aux_terms.len() as f64);

    let weighted_aux = g.scale(aux, config.aux_weight);
    let total = g.add(contrastive, weighted_aux)?;
    Ok(Some(StepLoss {
        contrastive,
        aux,
        total,
        pixel_count: owners.len(),
    }))
}

fn transpose_matrix<S: Scalar>(m: &Tensor<S>) -> Result<Tensor<S>> {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let src = m.data();
    let mut data = vec![S::ZERO; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            data[c * rows + r] = src[r * cols + c];
        }
    }
    Tensor::from_vec(&[cols, rows], data)
}
