//! The pixel-embedding network and its checkpoint format.
//!
//! The architecture is deliberately small and dependency-free:
//!
//! 1. an encoder of 3x3 stride-2 convolutions (each followed by ReLU) that
//!    halves the resolution per stage,
//! 2. bilinear upsampling back to the input resolution,
//! 3. one 3x3 fusion convolution with ReLU, and
//! 4. two 1x1 heads: a `D`-channel embedding head whose output is L2
//!    normalized per pixel, and a 1-channel saliency head producing logits.
//!
//! There is no batch normalization, so a forward pass is a pure function of
//! the parameters — which keeps momentum-averaged weights meaningful and
//! makes training exactly reproducible.
//!
//! # Checkpoints
//!
//! A checkpoint file is the 4-byte magic `MCKP`, a `u32` format version, and
//! a sequence of named tensor records (`u32` name length, UTF-8 name, then
//! one serialized tensor). The first record, `__meta`, encodes the
//! architecture — `[kind, embed_dim, head_size, height, width, n_stages,
//! channels…]` — so that a checkpoint is self-describing.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::ops;
use crate::rng::{self, stream};
use crate::tensor::{lanes, Scalar, Tensor};

/// Magic bytes that open a checkpoint file.
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MCKP";
/// Current checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

const META_RECORD: &str = "__meta";
const KIND_EMBEDDING: u32 = 0;
const KIND_CLASSIFIER: u32 = 1;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Embedding dimensionality `D`.
    pub embed_dim: usize,
    /// Encoder stage widths; the length fixes the downsampling factor 2^n.
    pub channels: Vec<usize>,
    /// Input height in pixels.
    pub input_height: usize,
    /// Input width in pixels.
    pub input_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 32,
            channels: vec![8, 16, 32],
            input_height: 64,
            input_width: 64,
        }
    }
}

impl ModelConfig {
    /// Checks internal consistency; every constructor of parameters calls
    /// this first.
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 {
            return Err(Error::Config(format!(
                "embed_dim must be at least 2, got {}",
                self.embed_dim
            )));
        }
        if self.channels.is_empty() {
            return Err(Error::Config("encoder needs at least one stage".into()));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config(format!(
                "encoder channels must be positive, got {:?}",
                self.channels
            )));
        }
        let factor = self.downsample_factor();
        for (name, v) in [("height", self.input_height), ("width", self.input_width)] {
            if v == 0 || v % factor != 0 {
                return Err(Error::Config(format!(
                    "input {name} {v} must be a positive multiple of the downsampling factor {factor}"
                )));
            }
        }
        Ok(())
    }

    /// Total spatial reduction of the encoder (2 per stage).
    pub fn downsample_factor(&self) -> usize {
        1 << self.channels.len()
    }

    /// Names and shapes of every parameter tensor, in canonical order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = 3;
        for (i, &cout) in self.channels.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), vec![cout, cin, 3, 3]));
            out.push((format!("encoder.{i}.bias"), vec![cout]));
            cin = cout;
        }
        let fused = *self.channels.last().unwrap();
        out.push(("decoder.weight".into(), vec![fused, fused, 3, 3]));
        out.push(("decoder.bias".into(), vec![fused]));
        out.push(("embed_head.weight".into(), vec![self.embed_dim, fused, 1, 1]));
        out.push(("embed_head.bias".into(), vec![self.embed_dim]));
        out.push(("saliency_head.weight".into(), vec![1, fused, 1, 1]));
        out.push(("saliency_head.bias".into(), vec![1]));
        out
    }
}

/// Weight and bias of one convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<S: Scalar = f32> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

/// All parameters of the embedding network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S: Scalar = f32> {
    pub config: ModelConfig,
    pub encoder: Vec<ConvParams<S>>,
    pub decoder: ConvParams<S>,
    pub embed_head: ConvParams<S>,
    pub saliency_head: ConvParams<S>,
}

/// Anything that exposes its parameters as an ordered, named tensor list.
/// The order is the contract shared by checkpoints, SGD state, and gradient
/// collection.
pub trait ParamSet<S: Scalar> {
    fn named(&self) -> Vec<(String, &Tensor<S>)>;
    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<S>)>;
}

fn init_conv<S: Scalar>(shape: &[usize], rng: &mut rng::Rng) -> ConvParams<S> {
    // Uniform(-s, s) with s = sqrt(1 / fan_in); biases start at zero.
    let fan_in: usize = shape[1..].iter().product();
    let s = (1.0 / fan_in as f64).sqrt();
    let weight = Tensor::from_fn(shape, |_| S::from_f64(rng.gen_range(-s..s)));
    let bias = Tensor::zeros(&[shape[0]]);
    ConvParams { weight, bias }
}

impl<S: Scalar> ModelParams<S> {
    /// Randomly initialized network.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream_rng(seed, &[stream::INIT]);
        let shapes = config.parameter_shapes();
        let mut iter = shapes.iter();
        let next_weight = |iter: &mut std::slice::Iter<'_, (String, Vec<usize>)>,
                               r: &mut rng::Rng| {
            let (_, wshape) = iter.next().unwrap();
            let _bias = iter.next().unwrap();
            init_conv::<S>(wshape, r)
        };
        let encoder = (0..config.channels.len())
            .map(|_| next_weight(&mut iter, &mut r))
            .collect();
        let decoder = next_weight(&mut iter, &mut r);
        let embed_head = next_weight(&mut iter, &mut r);
        let saliency_head = next_weight(&mut iter, &mut r);
        Ok(ModelParams {
            config: config.clone(),
            encoder,
            decoder,
            embed_head,
            saliency_head,
        })
    }

    /// Validates an input image against the configured geometry.
    fn check_input(&self, image: &Tensor<S>) -> Result<()> {
        let expect = [3, self.config.input_height, self.config.input_width];
        if image.shape() != expect {
            return Err(Error::Shape(format!(
                "input shape {:?} does not match configured {:?}",
                image.shape(),
                expect
            )));
        }
        Ok(())
    }

    /// Tape-free forward pass: per-pixel unit embeddings and saliency logits.
    /// This is the path the key network uses — no gradients are recorded.
    pub fn forward(&self, image: &Tensor<S>) -> Result<(PixelEmbeddingMap<S>, Tensor<S>)> {
        self.check_input(image)?;
        let mut x = image.clone();
        for stage in &self.encoder {
            x = ops::relu(&ops::conv2d(&x, &stage.weight, &stage.bias, 2, 1)?);
        }
        x = ops::bilinear_upsample(&x, self.config.downsample_factor())?;
        x = ops::relu(&ops::conv2d(&x, &self.decoder.weight, &self.decoder.bias, 1, 1)?);
        let emb = ops::l2_normalize_safe(
            &ops::conv2d(&x, &self.embed_head.weight, &self.embed_head.bias, 1, 0)?,
            0,
        )?;
        let sal = ops::conv2d(&x, &self.saliency_head.weight, &self.saliency_head.bias, 1, 0)?;
        let sal = sal.reshape(&[self.config.input_height, self.config.input_width])?;
        Ok((PixelEmbeddingMap::new(emb)?, sal))
    }

    /// Registers every parameter on a tape, in canonical order.
    pub fn insert_into(&self, g: &mut Graph<S>) -> ParamNodes {
        let encoder = self
            .encoder
            .iter()
            .map(|c| (g.parameter(c.weight.clone()), g.parameter(c.bias.clone())))
            .collect();
        ParamNodes {
            encoder,
            decoder: (
                g.parameter(self.decoder.weight.clone()),
                g.parameter(self.decoder.bias.clone()),
            ),
            embed_head: (
                g.parameter(self.embed_head.weight.clone()),
                g.parameter(self.embed_head.bias.clone()),
            ),
            saliency_head: (
                g.parameter(self.saliency_head.weight.clone()),
                g.parameter(self.saliency_head.bias.clone()),
            ),
        }
    }

    /// Writes all parameters to a checkpoint file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let cfg = &self.config;
        let mut meta = vec![
            KIND_EMBEDDING as f32,
            cfg.embed_dim as f32,
            cfg.embed_dim as f32,
            cfg.input_height as f32,
            cfg.input_width as f32,
            cfg.channels.len() as f32,
        ];
        meta.extend(cfg.channels.iter().map(|&c| c as f32));
        let meta = Tensor::<f32>::from_vec(&[meta.len()], meta)?;
        write_checkpoint(path.as_ref(), &meta, &self.named())
    }
}

impl<S: Scalar> ParamSet<S> for ModelParams<S> {
    fn named(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (i, c) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), &c.weight));
            out.push((format!("encoder.{i}.bias"), &c.bias));
        }
        out.push(("decoder.weight".into(), &self.decoder.weight));
        out.push(("decoder.bias".into(), &self.decoder.bias));
        out.push(("embed_head.weight".into(), &self.embed_head.weight));
        out.push(("embed_head.bias".into(), &self.embed_head.bias));
        out.push(("saliency_head.weight".into(), &self.saliency_head.weight));
        out.push(("saliency_head.bias".into(), &self.saliency_head.bias));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = Vec::new();
        for (i, c) in self.encoder.iter_mut().enumerate() {
            out.push((format!("encoder.{i}.weight"), &mut c.weight));
            out.push((format!("encoder.{i}.bias"), &mut c.bias));
        }
        out.push(("decoder.weight".into(), &mut self.decoder.weight));
        out.push(("decoder.bias".into(), &mut self.decoder.bias));
        out.push(("embed_head.weight".into(), &mut self.embed_head.weight));
        out.push(("embed_head.bias".into(), &mut self.embed_head.bias));
        out.push(("saliency_head.weight".into(), &mut self.saliency_head.weight));
        out.push(("saliency_head.bias".into(), &mut self.saliency_head.bias));
        out
    }
}

/// Tape handles for every parameter of [`ModelParams`], in the same order as
/// [`ParamSet::named`].
#[derive(Debug, Clone)]
pub struct ParamNodes {
    pub encoder: Vec<(NodeId, NodeId)>,
    pub decoder: (NodeId, NodeId),
    pub embed_head: (NodeId, NodeId),
    pub saliency_head: (NodeId, NodeId),
}

impl ParamNodes {
    /// Flat id list matching the canonical parameter order.
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for &(w, b) in &self.encoder {
            out.push(w);
            out.push(b);
        }
        for &(w, b) in [&self.decoder, &self.embed_head, &self.saliency_head] {
            out.push(w);
            out.push(b);
        }
        out
    }
}

impl ModelConfig {
    /// Recorded forward pass through parameter nodes previously registered
    /// with [`ModelParams::insert_into`]. Returns the normalized embedding
    /// map node (`[D, H, W]`) and the saliency logit node (`[H, W]`).
    pub fn forward_graph<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        nodes: &ParamNodes,
        image: &Tensor<S>,
    ) -> Result<(NodeId, NodeId)> {
        let mut x = g.constant(image.clone());
        for &(w, b) in &nodes.encoder {
            let c = g.conv2d(x, w, b, 2, 1)?;
            x = g.relu(c);
        }
        x = g.upsample(x, self.downsample_factor())?;
        let fused = g.conv2d(x, nodes.decoder.0, nodes.decoder.1, 1, 1)?;
        let fused = g.relu(fused);
        let emb_raw = g.conv2d(fused, nodes.embed_head.0, nodes.embed_head.1, 1, 0)?;
        let emb = g.l2_normalize_safe(emb_raw, 0)?;
        let sal = g.conv2d(fused, nodes.saliency_head.0, nodes.saliency_head.1, 1, 0)?;
        let sal = g.reshape(sal, &[self.input_height, self.input_width])?;
        Ok((emb, sal))
    }
}

/// A `[D, H, W]` map whose per-pixel columns are unit vectors. The
/// constructor enforces the normalization invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelEmbeddingMap<S: Scalar = f32> {
    tensor: Tensor<S>,
}

impl<S: Scalar> PixelEmbeddingMap<S> {
    /// Wraps a tensor, verifying shape and unit column norms (to 1e-6).
    pub fn new(tensor: Tensor<S>) -> Result<Self> {
        if tensor.rank() != 3 {
            return Err(Error::Shape(format!(
                "embedding map must be [dim, height, width], got {:?}",
                tensor.shape()
            )));
        }
        let (bases, stride) = lanes(tensor.shape(), 0);
        let len = tensor.shape()[0];
        for &b in &bases {
            let mut sq = 0.0f64;
            for k in 0..len {
                let v = tensor.data()[b + k * stride].to_f64();
                sq += v * v;
            }
            let norm = sq.sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Numeric(format!(
                    "pixel embedding at offset {b} has norm {norm:.8}, expected 1"
                )));
            }
        }
        Ok(PixelEmbeddingMap { tensor })
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<S> {
        self.tensor
    }

    pub fn embed_dim(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }
}

// ---------------------------------------------------------------------------
// Classifier variant (supervised fine-tuning and linear evaluation)
// ---------------------------------------------------------------------------

/// The embedding trunk with the heads replaced by a single class head.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams<S: Scalar = f32> {
    pub config: ModelConfig,
    pub num_classes: usize,
    pub encoder: Vec<ConvParams<S>>,
    pub decoder: ConvParams<S>,
    pub class_head: ConvParams<S>,
}

impl<S: Scalar> ClassifierParams<S> {
    /// Copies the trunk of a pretrained network and attaches a freshly
    /// initialized `num_classes`-way 1x1 head.
    pub fn from_pretrained(pretrained: &ModelParams<S>, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "classifier needs at least 2 classes, got {num_classes}"
            )));
        }
        let fused = *pretrained.config.channels.last().unwrap();
        let mut r = rng::stream_rng(seed, &[stream::INIT, 1]);
        Ok(ClassifierParams {
            config: pretrained.config.clone(),
            num_classes,
            encoder: pretrained.encoder.clone(),
            decoder: pretrained.decoder.clone(),
            class_head: init_conv(&[num_classes, fused, 1, 1], &mut r),
        })
    }

    /// Tape-free forward pass to `[num_classes, H, W]` logits.
    pub fn forward(&self, image: &Tensor<S>) -> Result<Tensor<S>> {
        let expect = [3, self.config.input_height, self.config.input_width];
        if image.shape() != expect {
            return Err(Error::Shape(format!(
                "input shape {:?} does not match configured {:?}",
                image.shape(),
                expect
            )));
        }
        let mut x = image.clone();
        for stage in &self.encoder {
            x = ops::relu(&ops::conv2d(&x, &stage.weight, &stage.bias, 2, 1)?);
        }
        x = ops::bilinear_upsample(&x, self.config.downsample_factor())?;
        x = ops::relu(&ops::conv2d(&x, &self.decoder.weight, &self.decoder.bias, 1, 1)?);
        ops::conv2d(&x, &self.class_head.weight, &self.class_head.bias, 1, 0)
    }

    /// Registers every parameter on a tape, trunk first, head last.
    pub fn insert_into(&self, g: &mut Graph<S>) -> ClassifierParamNodes {
        let encoder = self
            .encoder
            .iter()
            .map(|c| (g.parameter(c.weight.clone()), g.parameter(c.bias.clone())))
            .collect();
        ClassifierParamNodes {
            encoder,
            decoder: (
                g.parameter(self.decoder.weight.clone()),
                g.parameter(self.decoder.bias.clone()),
            ),
            class_head: (
                g.parameter(self.class_head.weight.clone()),
                g.parameter(self.class_head.bias.clone()),
            ),
        }
    }

    /// Recorded forward pass to the class-logit node `[num_classes, H, W]`.
    pub fn forward_graph(
        &self,
        g: &mut Graph<S>,
        nodes: &ClassifierParamNodes,
        image: &Tensor<S>,
    ) -> Result<NodeId> {
        let mut x = g.constant(image.clone());
        for &(w, b) in &nodes.encoder {
            let c = g.conv2d(x, w, b, 2, 1)?;
            x = g.relu(c);
        }
        x = g.upsample(x, self.config.downsample_factor())?;
        let fused = g.conv2d(x, nodes.decoder.0, nodes.decoder.1, 1, 1)?;
        let fused = g.relu(fused);
        g.conv2d(fused, nodes.class_head.0, nodes.class_head.1, 1, 0)
    }

    /// Writes all parameters to a checkpoint file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let cfg = &self.config;
        let mut meta = vec![
            KIND_CLASSIFIER as f32,
            cfg.embed_dim as f32,
            self.num_classes as f32,
            cfg.input_height as f32,
            cfg.input_width as f32,
            cfg.channels.len() as f32,
        ];
        meta.extend(cfg.channels.iter().map(|&c| c as f32));
        let meta = Tensor::<f32>::from_vec(&[meta.len()], meta)?;
        write_checkpoint(path.as_ref(), &meta, &self.named())
    }
}

impl<S: Scalar> ParamSet<S> for ClassifierParams<S> {
    fn named(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (i, c) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), &c.weight));
            out.push((format!("encoder.{i}.bias"), &c.bias));
        }
        out.push(("decoder.weight".into(), &self.decoder.weight));
        out.push(("decoder.bias".into(), &self.decoder.bias));
        out.push(("class_head.weight".into(), &self.class_head.weight));
        out.push(("class_head.bias".into(), &self.class_head.bias));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = Vec::new();
        for (i, c) in self.encoder.iter_mut().enumerate() {
            out.push((format!("encoder.{i}.weight"), &mut c.weight));
            out.push((format!("encoder.{i}.bias"), &mut c.bias));
        }
        out.push(("decoder.weight".into(), &mut self.decoder.weight));
        out.push(("decoder.bias".into(), &mut self.decoder.bias));
        out.push(("class_head.weight".into(), &mut self.class_head.weight));
        out.push(("class_head.bias".into(), &mut self.class_head.bias));
        out
    }
}

/// Tape handles for [`ClassifierParams`], trunk first, head last.
#[derive(Debug, Clone)]
pub struct ClassifierParamNodes {
    pub encoder: Vec<(NodeId, NodeId)>,
    pub decoder: (NodeId, NodeId),
    pub class_head: (NodeId, NodeId),
}

impl ClassifierParamNodes {
    /// Flat id list matching the canonical parameter order.
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for &(w, b) in &self.encoder {
            out.push(w);
            out.push(b);
        }
        for &(w, b) in [&self.decoder, &self.class_head] {
            out.push(w);
            out.push(b);
        }
        out
    }

    /// Ids of the trunk (everything except the class head), then the head.
    pub fn trunk_and_head(&self) -> (Vec<NodeId>, Vec<NodeId>) {
        let mut trunk = Vec::new();
        for &(w, b) in &self.encoder {
            trunk.push(w);
            trunk.push(b);
        }
        trunk.push(self.decoder.0);
        trunk.push(self.decoder.1);
        (trunk, vec![self.class_head.0, self.class_head.1])
    }
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------

fn write_checkpoint<S: Scalar>(
    path: &Path,
    meta: &Tensor<f32>,
    named: &[(String, &Tensor<S>)],
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(&CHECKPOINT_MAGIC).map_err(io_err)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io_err)?;
    write_record(&mut w, META_RECORD, meta).map_err(io_err)?;
    for (name, tensor) in named {
        write_record(&mut w, name, tensor).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

fn write_record<S: Scalar>(
    w: &mut impl Write,
    name: &str,
    tensor: &Tensor<S>,
) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    tensor.write_to(w)
}

/// Reads every record of a checkpoint file, `__meta` included.
fn read_checkpoint_records(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let mut pos: u64 = 0;

    let mut magic = [0u8; 4];
    read_bytes(&mut r, &mut magic, path, &mut pos)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(
            path,
            0,
            format!("bad checkpoint magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"),
        ));
    }
    let mut vbuf = [0u8; 4];
    read_bytes(&mut r, &mut vbuf, path, &mut pos)?;
    let version = u32::from_le_bytes(vbuf);
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            4,
            format!("unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"),
        ));
    }

    let mut records = Vec::new();
    loop {
        let mut first = [0u8; 1];
        match r.read(&mut first) {
            Ok(0) => break, // clean end of file between records
            Ok(_) => pos += 1,
            Err(e) => return Err(Error::io(path, e)),
        }
        let mut rest = [0u8; 3];
        read_bytes(&mut r, &mut rest, path, &mut pos)?;
        let name_len =
            u32::from_le_bytes([first[0], rest[0], rest[1], rest[2]]) as usize;
        if name_len == 0 || name_len > 4096 {
            return Err(Error::format(path, pos - 4, format!("record name length {name_len} out of range")));
        }
        let mut name_buf = vec![0u8; name_len];
        read_bytes(&mut r, &mut name_buf, path, &mut pos)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::format(path, pos - name_len as u64, "record name is not UTF-8"))?;
        let tensor = Tensor::<f32>::read_from(&mut r, path, pos)?;
        pos += (4 + 4 + 4 * tensor.rank() + 4 * tensor.numel()) as u64;
        records.push((name, tensor));
    }
    Ok(records)
}

fn read_bytes(r: &mut impl Read, buf: &mut [u8], path: &Path, pos: &mut u64) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(path, *pos, "unexpected end of checkpoint")
        } else {
            Error::io(path, e)
        }
    })?;
    *pos += buf.len() as u64;
    Ok(())
}

fn parse_meta(path: &Path, meta: &Tensor<f32>) -> Result<(u32, usize, ModelConfig)> {
    let d = meta.data();
    if d.len() < 6 {
        return Err(Error::format(path, 8, "metadata record too short"));
    }
    let kind = d[0] as u32;
    let head_size = d[2] as usize;
    let n_stages = d[5] as usize;
    if d.len() != 6 + n_stages {
        return Err(Error::format(
            path,
            8,
            format!("metadata lists {n_stages} stages but holds {} values", d.len()),
        ));
    }
    let config = ModelConfig {
        embed_dim: d[1] as usize,
        channels: d[6..].iter().map(|&c| c as usize).collect(),
        input_height: d[3] as usize,
        input_width: d[4] as usize,
    };
    config.validate().map_err(|e| {
        Error::format(path, 8, format!("metadata describes an invalid model: {e}"))
    })?;
    Ok((kind, head_size, config))
}

fn collect_params(
    path: &Path,
    records: Vec<(String, Tensor<f32>)>,
    expected: &[(String, Vec<usize>)],
) -> Result<Vec<Tensor<f32>>> {
    let mut map: std::collections::HashMap<String, Tensor<f32>> = records.into_iter().collect();
    let mut out = Vec::with_capacity(expected.len());
    for (name, shape) in expected {
        let tensor = map.remove(name).ok_or_else(|| {
            Error::format(path, 0, format!("checkpoint is missing tensor '{name}'"))
        })?;
        if tensor.shape() != &shape[..] {
            return Err(Error::format(
                path,
                0,
                format!(
                    "tensor '{name}' has shape {:?}, expected {shape:?}",
                    tensor.shape()
                ),
            ));
        }
        out.push(tensor);
    }
    if let Some(extra) = map.keys().next() {
        return Err(Error::format(
            path,
            0,
            format!("checkpoint holds unexpected tensor '{extra}'"),
        ));
    }
    Ok(out)
}

/// Loads an embedding-network checkpoint.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams<f32>> {
    let path = path.as_ref();
    let mut records = read_checkpoint_records(path)?;
    if records.is_empty() || records[0].0 != META_RECORD {
        return Err(Error::format(path, 8, "first record must be the metadata record"));
    }
    let (_, meta) = records.remove(0);
    let (kind, head_size, config) = parse_meta(path, &meta)?;
    if kind != KIND_EMBEDDING {
        return Err(Error::format(
            path,
            8,
            format!("checkpoint kind {kind} is not an embedding network"),
        ));
    }
    if head_size != config.embed_dim {
        return Err(Error::format(
            path,
            8,
            format!(
                "embedding checkpoint head size {head_size} disagrees with embedding dim {}",
                config.embed_dim
            ),
        ));
    }
    let expected = config.parameter_shapes();
    let mut tensors = collect_params(path, records, &expected)?.into_iter();
    let encoder = (0..config.channels.len())
        .map(|_| ConvParams {
            weight: tensors.next().unwrap(),
            bias: tensors.next().unwrap(),
        })
        .collect();
    Ok(ModelParams {
        config,
        encoder,
        decoder: ConvParams {
            weight: tensors.next().unwrap(),
            bias: tensors.next().unwrap(),
        },
        embed_head: ConvParams {
            weight: tensors.next().unwrap(),
            bias: tensors.next().unwrap(),
        },
        saliency_head: ConvParams {
            weight: tensors.next().unwrap(),
            bias: tensors.next().unwrap(),
        },
    })
}

/// Loads a classifier checkpoint.
pub fn load_classifier_checkpoint(path: impl AsRef<Path>) -> Result<ClassifierParams<f32>> {
    let path = path.as_ref();
    let mut records = read_checkpoint_records(path)?;
    if records.is_empty() || records[0].0 != META_RECORD {
        return Err(Error::format(path, 8, "first record must be the metadata record"));
    }
    let (_, meta) = records.remove(0);
    let (kind, num_classes, config) = parse_meta(path, &meta)?;
    if kind != KIND_CLASSIFIER {
        return Err(Error::format(
            path,
            8,
            format!("checkpoint kind {kind} is not a classifier"),
        ));
    }
    let fused = *config.channels.last().unwrap();
    let mut expected = Vec::new();
    let mut cin = 3;
    for (i, &cout) in config.channels.iter().enumerate() {
        expected.push((format!("encoder.{i}.weight"), vec![cout, cin, 3, 3]));
        expected.push((format!("encoder.{i}.bias"), vec![cout]));
        cin = cout;
    }
    expected.push(("decoder.weight".into(), vec![fused, fused, 3, 3]));
    expected.push(("decoder.bias".into(), vec![fused]));
    expected.push(("class_head.weight".into(), vec![num_classes, fused, 1, 1]));
    expected.push(("class_head.bias".into(), vec![num_classes]));
    let mut tensors = collect_params(path, records, &expected)?.into_iter();
    let encoder = (0..config.channels.len())
        .map(|_| ConvParams {
            weight: tensors.next().unwrap(),
            bias: tensors.next().unwrap(),
        })
        .collect();
    Ok(ClassifierParams {
        config,
        num_classes,
        encoder,
        decoder: ConvParams {
            weight: tensors.next().unwrap(),
            bias: tensors.next().unwrap(),
        },
        class_head: ConvParams {
            weight: tensors.next().unwrap(),
            bias: tensors.next().unwrap(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            embed_dim: 4,
            channels: vec![4, 6],
            input_height: 16,
            input_width: 12,
        }
    }

    fn test_image(config: &ModelConfig, seed: u64) -> Tensor<f32> {
        let mut r = rng::stream_rng(seed, &[99]);
        Tensor::from_fn(&[3, config.input_height, config.input_width], |_| {
            r.gen_range(0.0..1.0)
        })
    }

    #[test]
    fn config_validation_catches_bad_geometry() {
        let mut c = small_config();
        c.input_height = 15; // not divisible by 4
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.channels.clear();
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.embed_dim = 1;
        assert!(c.validate().is_err());
        assert!(small_config().validate().is_ok());
    }

    #[test]
    fn init_is_bounded_deterministic_and_seed_sensitive() {
        let config = small_config();
        let a = ModelParams::<f32>::init(&config, 7).unwrap();
        let b = ModelParams::<f32>::init(&config, 7).unwrap();
        let c = ModelParams::<f32>::init(&config, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);

        for (name, t) in a.named() {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name} biases start at zero");
            } else {
                let fan_in: usize = t.shape()[1..].iter().product();
                let s = (1.0 / fan_in as f64).sqrt() as f32;
                assert!(
                    t.data().iter().all(|&v| v > -s && v < s),
                    "{name} weights within the uniform bound"
                );
            }
        }
    }

    #[test]
    fn forward_produces_unit_embeddings_and_logits() {
        let config = small_config();
        let params = ModelParams::<f32>::init(&config, 0).unwrap();
        let image = test_image(&config, 1);
        let (emb, sal) = params.forward(&image).unwrap();
        assert_eq!(emb.tensor().shape(), &[4, 16, 12]);
        assert_eq!(sal.shape(), &[16, 12]);
        assert_eq!(emb.embed_dim(), 4);
        // Normalization is validated by the PixelEmbeddingMap constructor;
        // spot-check one pixel anyway.
        let mut sq = 0.0f64;
        for d in 0..4 {
            let v = emb.tensor().at(&[d, 3, 5]) as f64;
            sq += v * v;
        }
        assert!((sq.sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let params = ModelParams::<f32>::init(&small_config(), 0).unwrap();
        let bad = Tensor::<f32>::zeros(&[3, 8, 8]);
        assert!(params.forward(&bad).is_err());
    }

    #[test]
    fn graph_forward_matches_plain_forward_exactly() {
        let config = small_config();
        let params = ModelParams::<f32>::init(&config, 3).unwrap();
        let image = test_image(&config, 4);
        let (emb_plain, sal_plain) = params.forward(&image).unwrap();

        let mut g = Graph::new();
        let nodes = params.insert_into(&mut g);
        let (emb_node, sal_node) = config.forward_graph(&mut g, &nodes, &image).unwrap();
        assert_eq!(g.value(emb_node), emb_plain.tensor());
        assert_eq!(g.value(sal_node).data(), sal_plain.data());
    }

    #[test]
    fn embedding_map_rejects_unnormalized_input() {
        let t = Tensor::<f32>::full(&[2, 2, 2], 1.0);
        assert!(PixelEmbeddingMap::new(t).is_err());
        // Unit columns pass.
        let ok = Tensor::<f32>::from_fn(&[2, 2, 2], |i| if i < 4 { 1.0 } else { 0.0 });
        assert!(PixelEmbeddingMap::new(ok).is_ok());
    }

    #[test]
    fn checkpoint_roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let config = small_config();
        let params = ModelParams::<f32>::init(&config, 11).unwrap();
        params.save(&path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, params);

        let image = test_image(&config, 5);
        let (e1, s1) = params.forward(&image).unwrap();
        let (e2, s2) = loaded.forward(&image).unwrap();
        assert_eq!(e1.tensor(), e2.tensor());
        assert_eq!(s1, s2);
    }

    #[test]
    fn checkpoint_detects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let params = ModelParams::<f32>::init(&small_config(), 0).unwrap();
        params.save(&path).unwrap();

        // Truncation.
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(load_checkpoint(&path).is_err());

        // Bad magic.
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(load_checkpoint(&path).is_err());

        // Wrong version.
        let mut bad = bytes.clone();
        bad[4] = 9;
        std::fs::write(&path, &bad).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version"));

        // A classifier loader must reject an embedding checkpoint.
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_classifier_checkpoint(&path).is_err());
    }

    #[test]
    fn classifier_shares_trunk_and_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cls.ckpt");
        let config = small_config();
        let pretrained = ModelParams::<f32>::init(&config, 2).unwrap();
        let cls = ClassifierParams::from_pretrained(&pretrained, 5, 3).unwrap();
        assert_eq!(cls.encoder, pretrained.encoder);
        assert_eq!(cls.decoder, pretrained.decoder);
        assert_eq!(cls.class_head.weight.shape(), &[5, 6, 1, 1]);

        let image = test_image(&config, 6);
        let logits = cls.forward(&image).unwrap();
        assert_eq!(logits.shape(), &[5, 16, 12]);

        cls.save(&path).unwrap();
        let loaded = load_classifier_checkpoint(&path).unwrap();
        assert_eq!(loaded, cls);

        let mut g = Graph::new();
        let nodes = cls.insert_into(&mut g);
        let node = cls.forward_graph(&mut g, &nodes, &image).unwrap();
        assert_eq!(g.value(node).data(), logits.data());
    }

    #[test]
    fn parameter_order_is_stable_across_views() {
        let params = ModelParams::<f32>::init(&small_config(), 0).unwrap();
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        let shapes: Vec<String> = params
            .config
            .parameter_shapes()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        assert_eq!(names, shapes);

        let mut g = Graph::<f32>::new();
        let nodes = params.insert_into(&mut g);
        assert_eq!(nodes.ids().len(), names.len());
    }
}
