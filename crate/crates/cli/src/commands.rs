//! Implementations of the five subcommands.
//!
//! Commands share three conventions: all randomness flows from an explicit
//! `--seed` (equal seeds mean byte-identical outputs), machine-readable
//! results go to stdout while logging goes to stderr, and every path-like
//! failure is reported with the offending file.

use std::path::PathBuf;

use maskcontrast_core::data::Dataset;
use maskcontrast_core::error::{Error, Result};
use maskcontrast_core::eval::{
    clustering_eval, linear_probe, ClusterEvalConfig, MatchingMode, ProbeConfig,
};
use maskcontrast_core::model::{load_checkpoint, ModelParams};
use maskcontrast_core::retrieval::{build_index, query, retrieval_score, SegmentIndex};
use maskcontrast_core::tensor::Tensor;
use maskcontrast_core::trainer::{train, write_metrics_csv};
use rayon::prelude::*;

use crate::config::Settings;
use crate::dataset::load_dataset;
use crate::synth::{generate, SynthConfig};

/// Train the pixel-embedding model on a dataset directory.
#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// Dataset root holding images/ and saliency/.
    #[arg(long)]
    pub data: PathBuf,
    /// Where to write the trained checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Settings file of `key = value` lines; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base seed for every random stream.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Where to write the per-epoch metrics CSV
    /// (default: the checkpoint path with a .csv extension).
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Number of training epochs (0 writes the initialization unchanged).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Images per contrastive step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Base learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Dimension of the per-pixel embedding vectors.
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Memory-bank capacity (number of stored negative prototypes).
    #[arg(long)]
    pub bank_capacity: Option<usize>,
    /// Softmax temperature of the contrastive loss.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// EMA coefficient of the key network.
    #[arg(long)]
    pub key_momentum: Option<f64>,
    /// Square side of the augmented training views.
    #[arg(long)]
    pub input_size: Option<usize>,
}

impl TrainArgs {
    fn settings(&self) -> Result<Settings> {
        let mut s = Settings::default();
        if let Some(path) = &self.config {
            s.apply_file(path)?;
        }
        if let Some(v) = self.epochs {
            s.trainer.epochs = v;
        }
        if let Some(v) = self.batch_size {
            s.trainer.batch_size = v;
        }
        if let Some(v) = self.lr {
            s.trainer.base_lr = v;
        }
        if let Some(v) = self.embed_dim {
            s.model.embed_dim = v;
        }
        if let Some(v) = self.bank_capacity {
            s.bank_capacity = v;
        }
        if let Some(v) = self.temperature {
            s.loss.temperature = v;
        }
        if let Some(v) = self.key_momentum {
            s.loss.momentum = v;
        }
        if let Some(v) = self.input_size {
            s.model.input_height = v;
            s.model.input_width = v;
        }
        s.set_seed(self.seed);
        s.validate()?;
        Ok(s)
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let settings = args.settings()?;
    let dataset = load_dataset(&args.data, false)?;
    log::info!(
        "training for {} epochs on {} images (batch {}, dim {}, bank {})",
        settings.trainer.epochs,
        dataset.len(),
        settings.trainer.batch_size,
        settings.model.embed_dim,
        settings.bank_capacity
    );
    let outcome = train::<f32>(
        &dataset,
        &settings.model,
        &settings.trainer,
        &settings.loss,
        &settings.augment,
        settings.bank_capacity,
    )?;
    if outcome.skipped_steps > 0 {
        log::warn!(
            "{} steps were skipped because augmentation lost the object",
            outcome.skipped_steps
        );
    }
    outcome.params.save(&args.out)?;
    let metrics_path = args
        .metrics
        .clone()
        .unwrap_or_else(|| args.out.with_extension("csv"));
    write_metrics_csv(&metrics_path, &outcome.metrics)?;
    if let Some(last) = outcome.metrics.last() {
        log::info!(
            "final epoch {}: total loss {:.4} (contrastive {:.4}, auxiliary {:.4})",
            last.epoch,
            last.total_loss,
            last.contrastive_loss,
            last.aux_loss
        );
    }
    log::info!(
        "checkpoint written to {}, metrics to {}",
        args.out.display(),
        metrics_path.display()
    );
    Ok(())
}

/// Evaluation protocol selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalProtocol {
    /// Cluster object descriptors and match clusters to classes one-to-one.
    Kmeans,
    /// Cluster with more clusters than classes; majority-vote matching.
    Overcluster,
    /// Train a linear classifier on frozen pixel embeddings.
    Linear,
}

/// Score a checkpoint against ground-truth labels.
#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    /// Evaluation protocol.
    #[arg(value_enum)]
    pub protocol: EvalProtocol,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset root; label maps are required here.
    #[arg(long)]
    pub data: PathBuf,
    /// Cluster count (kmeans and overcluster protocols).
    #[arg(long)]
    pub clusters: Option<usize>,
    /// Independent clustering runs averaged into the report.
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Score only pixels whose ground truth is an object class
    /// (background becomes ignore).
    #[arg(long)]
    pub foreground_only: bool,
    /// Also write the report JSON to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Runs the model over every sample, in parallel, keeping dataset order.
fn forward_dataset(
    params: &ModelParams<f32>,
    dataset: &Dataset,
) -> Result<(Vec<Tensor<f32>>, Vec<Tensor<f32>>)> {
    let results: Vec<Result<(Tensor<f32>, Tensor<f32>)>> = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let sample = dataset.get(i);
            let (embedding, saliency) = params.forward(&sample.image)?;
            Ok((embedding.into_tensor(), saliency))
        })
        .collect();
    let mut embeddings = Vec::with_capacity(dataset.len());
    let mut saliency = Vec::with_capacity(dataset.len());
    for r in results {
        let (e, s) = r?;
        embeddings.push(e);
        saliency.push(s);
    }
    Ok((embeddings, saliency))
}

/// Distinct ground-truth classes across the dataset, background excluded
/// when the protocol ignores it.
fn distinct_classes(dataset: &Dataset, foreground_only: bool) -> usize {
    let mut present = std::collections::BTreeSet::new();
    for sample in dataset.iter() {
        if let Some(labels) = &sample.labels {
            present.extend(labels.classes_present());
        }
    }
    if foreground_only {
        present.remove(&0u8);
    }
    present.len()
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let dataset = load_dataset(&args.data, true)?;
    let params = load_checkpoint(&args.checkpoint)?;
    let (embeddings, saliency) = forward_dataset(&params, &dataset)?;
    let gt: Vec<&maskcontrast_core::data::LabelMap> = dataset
        .iter()
        .map(|s| s.labels.as_ref().expect("labels were required at load"))
        .collect();

    let report = match args.protocol {
        EvalProtocol::Kmeans | EvalProtocol::Overcluster => {
            let clusters = args.clusters.ok_or_else(|| {
                Error::Config("--clusters is required for clustering protocols".into())
            })?;
            let classes = distinct_classes(&dataset, args.foreground_only);
            let mode = match args.protocol {
                EvalProtocol::Kmeans => {
                    if clusters < classes {
                        return Err(Error::Config(format!(
                            "one-to-one matching needs at least as many clusters as \
                             classes: got {clusters} clusters for {classes} classes"
                        )));
                    }
                    MatchingMode::Hungarian
                }
                _ => MatchingMode::Majority,
            };
            let config = ClusterEvalConfig {
                runs: args.runs,
                seed: args.seed,
                mode,
                foreground_only: args.foreground_only,
                ..ClusterEvalConfig::new(clusters)
            };
            clustering_eval(&embeddings, &saliency, &gt, &config)?
        }
        EvalProtocol::Linear => {
            if args.clusters.is_some() {
                log::warn!("--clusters is ignored by the linear protocol");
            }
            let config = ProbeConfig {
                seed: args.seed,
                ..ProbeConfig::default()
            };
            let outcome = linear_probe(&embeddings, &gt, &config)?;
            outcome.report
        }
    };

    let json = report.to_json();
    println!("{json}");
    if let Some(path) = &args.out {
        std::fs::write(path, format!("{json}\n")).map_err(|e| Error::io(path, e))?;
    }
    log::info!(
        "miou {:.4}, pixel accuracy {:.4} over {} run(s)",
        report.miou,
        report.pixel_accuracy,
        report.runs
    );
    Ok(())
}

/// Build a segment index (one descriptor per salient object).
#[derive(Debug, clap::Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Where to write the index file.
    #[arg(long)]
    pub out: PathBuf,
    /// Name recorded inside the index (e.g. "train" or "val").
    #[arg(long, default_value = "train")]
    pub split: String,
}

pub fn cmd_index(args: &IndexArgs) -> Result<()> {
    let dataset = load_dataset(&args.data, false)?;
    let params = load_checkpoint(&args.checkpoint)?;
    let index = build_index::<f32>(&dataset, &params, args.split.as_str())?;
    index.save(&args.out)?;
    log::info!(
        "indexed {} segments of dimension {} into {}",
        index.len(),
        index.dim(),
        args.out.display()
    );
    Ok(())
}

/// Rank index entries against a query segment.
#[derive(Debug, clap::Args)]
pub struct RetrieveArgs {
    /// Index file produced by the `index` command.
    #[arg(long)]
    pub index: PathBuf,
    /// Image id of the query segment; must be present in the index.
    /// Without it, only the precision report is printed.
    #[arg(long)]
    pub query: Option<String>,
    /// Neighbors returned per query.
    #[arg(long, default_value_t = 5)]
    pub topk: usize,
}

pub fn cmd_retrieve(args: &RetrieveArgs) -> Result<()> {
    let index = SegmentIndex::load(&args.index)?;
    if let Some(id) = &args.query {
        let probe = index
            .entries()
            .iter()
            .find(|d| &d.image_id == id)
            .ok_or_else(|| {
                Error::Data(format!(
                    "query id '{id}' is not in the index (split '{}', {} entries)",
                    index.split(),
                    index.len()
                ))
            })?;
        let ranked = query(&index, probe, args.topk)?;
        println!("query {} (class {})", probe.image_id, probe.class);
        for (rank, (entry, similarity)) in ranked.iter().enumerate() {
            let hit = &index.entries()[*entry];
            println!(
                "{:>4}. {}  class {}  similarity {:.6}",
                rank + 1,
                hit.image_id,
                hit.class,
                similarity
            );
        }
    }
    let score = retrieval_score(&index, index.entries(), args.topk)?;
    println!(
        "precision@{} over {} queries: {:.4}",
        args.topk,
        index.len(),
        score.precision
    );
    for (class, precision) in &score.per_class {
        println!("  class {class}: {precision:.4}");
    }
    Ok(())
}

/// Generate a synthetic dataset of single-object images.
#[derive(Debug, clap::Args)]
pub struct SynthArgs {
    /// Output dataset root.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of images to generate.
    #[arg(long)]
    pub images: usize,
    /// Number of object classes (at least 2).
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    generate(
        &args.out,
        &SynthConfig {
            images: args.images,
            classes: args.classes,
            size: args.size,
            seed: args.seed,
        },
    )
}
