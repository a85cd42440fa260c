//! Evaluation protocols for learned pixel embeddings.
//!
//! The central pipeline clusters per-object mean embeddings with K-Means,
//! broadcasts each object's cluster over its predicted mask, matches cluster
//! ids to ground-truth classes (one-to-one or by majority), and reports mean
//! IoU. A linear probe offers the complementary supervised readout.
//!
//! Conventions shared across the module: ground-truth class 0 is background,
//! 255 marks ignored pixels, and a predicted-background pixel carries the
//! cluster id `k` (one past the last real cluster).

pub mod hungarian;
pub mod kmeans;
pub mod miou;
pub mod probe;

pub use hungarian::{assignment_cost, hungarian};
pub use kmeans::{kmeans, KMeansResult};
pub use miou::{cluster_miou, overcluster_map, standard_miou, MatchingMode};
pub use probe::{linear_probe, score_probe, ProbeConfig, ProbeOutcome};

use crate::data::{LabelMap, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::maskcontrast::ObjectMask;
use crate::ops;
use crate::rng::{self, stream};
use crate::tensor::{Scalar, Tensor};
use rand::Rng as _;
use rayon::prelude::*;

/// One salient object summarized for clustering and retrieval: the image it
/// came from, its ground-truth class (0 when unknown; used by evaluation
/// only), and the l2-normalized mean of its pixel embeddings. Each image
/// holds exactly one salient object, so the image id doubles as the object's
/// mask reference.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentDescriptor {
    pub image_id: String,
    pub class: u32,
    embedding: Vec<f32>,
}

impl SegmentDescriptor {
    /// Builds a descriptor from a raw (unnormalized) mean embedding.
    pub fn new(image_id: impl Into<String>, class: u32, raw_embedding: &[f64]) -> Result<Self> {
        let norm = raw_embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm <= ops::NORM_EPSILON {
            return Err(Error::Numeric(format!(
                "segment embedding norm {norm:.3e} cannot be normalized"
            )));
        }
        let embedding = raw_embedding.iter().map(|v| (v / norm) as f32).collect();
        Ok(SegmentDescriptor {
            image_id: image_id.into(),
            class,
            embedding,
        })
    }

    /// Restores a descriptor whose embedding is already unit-norm (±1e-4),
    /// as read back from an index file.
    pub fn from_unit(image_id: impl Into<String>, class: u32, embedding: Vec<f32>) -> Result<Self> {
        let norm = embedding.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(Error::Numeric(format!(
                "stored segment embedding has norm {norm:.6}, expected 1"
            )));
        }
        Ok(SegmentDescriptor {
            image_id: image_id.into(),
            class,
            embedding,
        })
    }

    pub fn dim(&self) -> usize {
        self.embedding.len()
    }

    pub fn embedding(&self) -> &[f32] {
        &self.embedding
    }
}

/// Outcome of a matching-based evaluation.
///
/// `per_class_iou` is indexed by class id; classes absent from the ground
/// truth hold `None` and are excluded from the mean. When several clustering
/// runs are averaged, `miou`, `pixel_accuracy`, and `per_class_iou` are
/// arithmetic means across runs while `mapping` comes from the run with the
/// best clustering objective.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub mapping: Vec<usize>,
    pub runs: usize,
    pub pixel_accuracy: f64,
}

impl EvalReport {
    /// Compact, deterministic JSON rendering.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::Data(format!("cannot parse evaluation report: {e}")))
    }
}

/// Settings for the clustering evaluation pipeline.
#[derive(Debug, Clone)]
pub struct ClusterEvalConfig {
    /// Number of K-Means clusters over the object descriptors.
    pub clusters: usize,
    /// Independent clustering runs averaged into the report.
    pub runs: usize,
    /// Seedings per run; the restart with the lowest objective is kept.
    pub restarts: usize,
    /// Iteration cap per K-Means invocation.
    pub max_iter: usize,
    pub seed: u64,
    pub mode: MatchingMode,
    /// Score only pixels whose ground-truth class is nonzero (background
    /// becomes ignore), the foreground-restricted protocol.
    pub foreground_only: bool,
}

impl ClusterEvalConfig {
    /// Defaults for everything except the cluster count: 5 runs, 3 restarts
    /// per run, 100 iterations, one-to-one matching, all pixels scored.
    pub fn new(clusters: usize) -> Self {
        ClusterEvalConfig {
            clusters,
            runs: 5,
            restarts: 3,
            max_iter: 100,
            seed: 0,
            mode: MatchingMode::Hungarian,
            foreground_only: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("clusters", self.clusters),
            ("runs", self.runs),
            ("restarts", self.restarts),
            ("max_iter", self.max_iter),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Threshold on saliency logits: a pixel is predicted foreground exactly
/// when its sigmoid exceeds one half, i.e. when the logit is positive.
pub fn predicted_mask<S: Scalar>(saliency_logits: &Tensor<S>) -> Result<ObjectMask> {
    let shape = saliency_logits.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!(
            "saliency logits must be [height, width], got {shape:?}"
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    let data = saliency_logits.data();
    Ok(ObjectMask::from_fn(w, h, |y, x| data[y * w + x].to_f64() > 0.0))
}

/// Per-pixel labels for one image: every predicted-foreground pixel takes
/// the cluster of the object's mean embedding (nearest centroid), and the
/// rest take the background label `k`.
pub fn assign_object_labels<S: Scalar>(
    embedding: &Tensor<S>,
    saliency_logits: &Tensor<S>,
    centroids: &Tensor<f64>,
) -> Result<Vec<u32>> {
    let eshape = embedding.shape();
    if eshape.len() != 3 {
        return Err(Error::Shape(format!(
            "embedding map must be [dim, height, width], got {eshape:?}"
        )));
    }
    let k = centroids.shape()[0];
    if centroids.shape().len() != 2 || centroids.shape()[1] != eshape[0] {
        return Err(Error::Shape(format!(
            "centroids {:?} do not match embedding dim {}",
            centroids.shape(),
            eshape[0]
        )));
    }
    let mask = predicted_mask(saliency_logits)?;
    if (mask.height(), mask.width()) != (eshape[1], eshape[2]) {
        return Err(Error::Shape(format!(
            "saliency map {}x{} does not match embedding map {}x{}",
            mask.height(),
            mask.width(),
            eshape[1],
            eshape[2]
        )));
    }
    let background = k as u32;
    let pixels = eshape[1] * eshape[2];
    if mask.is_empty() {
        return Ok(vec![background; pixels]);
    }
    let mean = object_mean(embedding, &mask);
    let cluster = match normalize_mean(&mean) {
        Some(unit) => nearest_centroid(&unit, centroids) as u32,
        None => {
            log::warn!("object mean embedding has zero norm; labeling the image background");
            return Ok(vec![background; pixels]);
        }
    };
    let mut labels = vec![background; pixels];
    for &flat in &mask.foreground_indices() {
        labels[flat] = cluster;
    }
    Ok(labels)
}

fn object_mean<S: Scalar>(embedding: &Tensor<S>, mask: &ObjectMask) -> Vec<f64> {
    let (d, h, w) = (
        embedding.shape()[0],
        embedding.shape()[1],
        embedding.shape()[2],
    );
    let data = embedding.data();
    let indices = mask.foreground_indices();
    let inv = 1.0 / indices.len() as f64;
    (0..d)
        .map(|dim| {
            indices
                .iter()
                .map(|&flat| data[dim * h * w + flat].to_f64())
                .sum::<f64>()
                * inv
        })
        .collect()
}

fn normalize_mean(mean: &[f64]) -> Option<Vec<f64>> {
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() || norm <= ops::NORM_EPSILON {
        return None;
    }
    Some(mean.iter().map(|v| v / norm).collect())
}

fn nearest_centroid(unit: &[f64], centroids: &Tensor<f64>) -> usize {
    let (k, dim) = (centroids.shape()[0], centroids.shape()[1]);
    let data = centroids.data();
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for c in 0..k {
        let d: f64 = unit
            .iter()
            .zip(&data[c * dim..(c + 1) * dim])
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Full clustering evaluation, returning the averaged report only.
pub fn clustering_eval<S: Scalar>(
    embeddings: &[Tensor<S>],
    saliency_logits: &[Tensor<S>],
    gt: &[&LabelMap],
    config: &ClusterEvalConfig,
) -> Result<EvalReport> {
    Ok(clustering_eval_detailed(embeddings, saliency_logits, gt, config)?.0)
}

/// Full clustering evaluation: builds one descriptor per image with a
/// non-empty predicted mask, clusters the descriptors `runs` times (keeping
/// the best of `restarts` seedings each run), labels every pixel, and scores
/// against the ground truth. Returns the averaged report together with the
/// per-run reports; the averaged `miou` is the arithmetic mean of the
/// per-run `miou` values.
pub fn clustering_eval_detailed<S: Scalar>(
    embeddings: &[Tensor<S>],
    saliency_logits: &[Tensor<S>],
    gt: &[&LabelMap],
    config: &ClusterEvalConfig,
) -> Result<(EvalReport, Vec<EvalReport>)> {
    config.validate()?;
    if embeddings.is_empty() {
        return Err(Error::Data("clustering evaluation needs at least one image".into()));
    }
    if embeddings.len() != saliency_logits.len() || embeddings.len() != gt.len() {
        return Err(Error::Shape(format!(
            "got {} embedding maps, {} saliency maps, {} label maps",
            embeddings.len(),
            saliency_logits.len(),
            gt.len()
        )));
    }

    // One descriptor per image with a non-empty predicted object.
    let mut points = Vec::new();
    let mut dim = None;
    for (i, (emb, sal)) in embeddings.iter().zip(saliency_logits).enumerate() {
        let eshape = emb.shape();
        if eshape.len() != 3 {
            return Err(Error::Shape(format!(
                "embedding map {i} must be [dim, height, width], got {eshape:?}"
            )));
        }
        match dim {
            None => dim = Some(eshape[0]),
            Some(d) if d != eshape[0] => {
                return Err(Error::Shape(format!(
                    "embedding map {i} has dim {} but map 0 has {d}",
                    eshape[0]
                )))
            }
            _ => {}
        }
        let mask = predicted_mask(sal)?;
        if mask.is_empty() {
            continue;
        }
        if let Some(unit) = normalize_mean(&object_mean(emb, &mask)) {
            points.push(unit);
        } else {
            log::warn!("image {i}: zero-norm object mean, treated as background");
        }
    }
    let dim = dim.unwrap();
    if points.len() < config.clusters {
        return Err(Error::Data(format!(
            "only {} salient objects for {} clusters",
            points.len(),
            config.clusters
        )));
    }
    let flat: Vec<f64> = points.iter().flatten().copied().collect();
    let matrix = Tensor::from_vec(&[points.len(), dim], flat)?;

    // Ground truth with the background optionally ignored, flattened once.
    let gt_flat: Vec<u8> = gt
        .iter()
        .flat_map(|l| l.values().iter().copied())
        .map(|v| {
            if config.foreground_only && v == 0 {
                IGNORE_LABEL
            } else {
                v
            }
        })
        .collect();

    // Independent runs; each keeps the best-objective restart.
    let run_results: Vec<Result<(f64, EvalReport)>> = (0..config.runs)
        .into_par_iter()
        .map(|run| {
            let mut best: Option<KMeansResult> = None;
            for restart in 0..config.restarts {
                let seed = rng::stream_rng(
                    config.seed,
                    &[stream::KMEANS, run as u64, restart as u64],
                )
                .gen::<u64>();
                let res = kmeans(&matrix, config.clusters, config.max_iter, seed)?;
                if best.as_ref().map_or(true, |b| res.objective < b.objective) {
                    best = Some(res);
                }
            }
            let best = best.unwrap();
            let mut pred = Vec::with_capacity(gt_flat.len());
            for (emb, sal) in embeddings.iter().zip(saliency_logits) {
                pred.extend(assign_object_labels(emb, sal, &best.centroids)?);
            }
            let report = cluster_miou(&pred, &gt_flat, config.mode)?;
            Ok((best.objective, report))
        })
        .collect();

    let mut per_run = Vec::with_capacity(config.runs);
    let mut best_run = 0usize;
    let mut best_objective = f64::INFINITY;
    for (run, result) in run_results.into_iter().enumerate() {
        let (objective, report) = result?;
        if objective < best_objective {
            best_objective = objective;
            best_run = run;
        }
        per_run.push(report);
    }

    let inv = 1.0 / per_run.len() as f64;
    let classes = per_run[0].per_class_iou.len();
    let per_class_iou: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            per_run[0].per_class_iou[c].map(|_| {
                per_run
                    .iter()
                    .map(|r| r.per_class_iou[c].expect("present classes are fixed by the ground truth"))
                    .sum::<f64>()
                    * inv
            })
        })
        .collect();
    let aggregate = EvalReport {
        miou: per_run.iter().map(|r| r.miou).sum::<f64>() * inv,
        per_class_iou,
        mapping: per_run[best_run].mapping.clone(),
        runs: per_run.len(),
        pixel_accuracy: per_run.iter().map(|r| r.pixel_accuracy).sum::<f64>() * inv,
    };
    Ok((aggregate, per_run))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_embedding(dim: usize, size: usize, axis: usize) -> Tensor<f32> {
        Tensor::from_fn(&[dim, size, size], |i| {
            if i / (size * size) == axis {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Saliency logits positive inside a square block, negative outside.
    fn block_logits(size: usize, y0: usize, x0: usize, side: usize) -> Tensor<f32> {
        Tensor::from_fn(&[size, size], |i| {
            let (y, x) = (i / size, i % size);
            if (y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x) {
                4.0
            } else {
                -4.0
            }
        })
    }

    fn block_labels(size: usize, y0: usize, x0: usize, side: usize, class: u8) -> LabelMap {
        let values = (0..size * size)
            .map(|i| {
                let (y, x) = (i / size, i % size);
                if (y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x) {
                    class
                } else {
                    0
                }
            })
            .collect();
        LabelMap::new(size, size, values).unwrap()
    }

    #[test]
    fn descriptor_normalizes_and_rejects_zero() {
        let d = SegmentDescriptor::new("a", 1, &[3.0, 0.0, 4.0]).unwrap();
        let norm: f64 = d.embedding().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert_eq!(d.embedding()[0], 0.6);
        assert_eq!(d.embedding()[2], 0.8);
        assert!(SegmentDescriptor::new("b", 0, &[0.0, 0.0]).is_err());
        assert!(SegmentDescriptor::from_unit("c", 0, vec![0.6, 0.8]).is_ok());
        assert!(SegmentDescriptor::from_unit("d", 0, vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn report_json_layout_is_stable() {
        let report = EvalReport {
            miou: 0.5,
            per_class_iou: vec![Some(1.0), None],
            mapping: vec![1, 0],
            runs: 5,
            pixel_accuracy: 0.75,
        };
        let json = report.to_json();
        assert_eq!(
            json,
            r#"{"miou":0.5,"per_class_iou":[1.0,null],"mapping":[1,0],"runs":5,"pixel_accuracy":0.75}"#
        );
        assert_eq!(EvalReport::from_json(&json).unwrap(), report);
    }

    #[test]
    fn all_background_image_gets_a_uniform_background_label() {
        let emb = constant_embedding(3, 4, 0);
        let sal = Tensor::from_fn(&[4, 4], |_| -2.0f32);
        let centroids = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let labels = assign_object_labels(&emb, &sal, &centroids).unwrap();
        assert_eq!(labels, vec![2u32; 16]);
    }

    #[test]
    fn single_cluster_broadcasts_over_the_object() {
        let emb = constant_embedding(2, 4, 0);
        let sal = block_logits(4, 1, 1, 2);
        let centroids = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let labels = assign_object_labels(&emb, &sal, &centroids).unwrap();
        for (i, &l) in labels.iter().enumerate() {
            let (y, x) = (i / 4, i % 4);
            let inside = (1..3).contains(&y) && (1..3).contains(&x);
            assert_eq!(l, if inside { 0 } else { 1 }, "pixel ({y}, {x})");
        }
    }

    #[test]
    fn two_objects_follow_the_broadcast_oracle() {
        // Image 0 points along axis 0, image 1 along axis 1; centroids sit on
        // the axes, so each object must take its own axis' cluster.
        let embs = [constant_embedding(2, 4, 0), constant_embedding(2, 4, 1)];
        let sal = block_logits(4, 0, 0, 2);
        let centroids = Tensor::from_vec(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let a = assign_object_labels(&embs[0], &sal, &centroids).unwrap();
        let b = assign_object_labels(&embs[1], &sal, &centroids).unwrap();
        for i in 0..16 {
            let inside = (i / 4) < 2 && (i % 4) < 2;
            assert_eq!(a[i], if inside { 1 } else { 2 });
            assert_eq!(b[i], if inside { 0 } else { 2 });
        }
    }

    #[test]
    fn sigmoid_threshold_is_strictly_positive_logit() {
        let logits = Tensor::from_vec(&[1, 3], vec![-0.1f32, 0.0, 0.1]).unwrap();
        let mask = predicted_mask(&logits).unwrap();
        assert_eq!(mask.bits(), &[0, 0, 1]);
    }

    /// Two embedding classes on orthogonal axes, four images each.
    fn orthogonal_fixture() -> (Vec<Tensor<f32>>, Vec<Tensor<f32>>, Vec<LabelMap>) {
        let mut embeddings = Vec::new();
        let mut saliency = Vec::new();
        let mut labels = Vec::new();
        for i in 0..8 {
            let class = i % 2;
            embeddings.push(constant_embedding(2, 6, class));
            saliency.push(block_logits(6, 1 + i / 4, 1, 3));
            labels.push(block_labels(6, 1 + i / 4, 1, 3, class as u8 + 1));
        }
        (embeddings, saliency, labels)
    }

    #[test]
    fn separable_objects_score_a_perfect_miou() {
        let (embeddings, saliency, labels) = orthogonal_fixture();
        let refs: Vec<&LabelMap> = labels.iter().collect();
        for fg_only in [false, true] {
            let config = ClusterEvalConfig {
                foreground_only: fg_only,
                ..ClusterEvalConfig::new(2)
            };
            let report = clustering_eval(&embeddings, &saliency, &refs, &config).unwrap();
            assert_eq!(report.miou, 1.0, "fg_only={fg_only}");
            assert_eq!(report.pixel_accuracy, 1.0);
            assert_eq!(report.runs, 5);
            if fg_only {
                assert!(report.per_class_iou[0].is_none(), "background ignored");
            } else {
                assert_eq!(report.per_class_iou[0], Some(1.0));
            }
        }
    }

    #[test]
    fn averaged_report_is_the_mean_of_run_reports() {
        let (embeddings, saliency, labels) = orthogonal_fixture();
        let refs: Vec<&LabelMap> = labels.iter().collect();
        let config = ClusterEvalConfig {
            runs: 4,
            restarts: 1,
            seed: 3,
            ..ClusterEvalConfig::new(2)
        };
        let (aggregate, per_run) = clustering_eval_detailed(&embeddings, &saliency, &refs, &config).unwrap();
        assert_eq!(per_run.len(), 4);
        let mean: f64 = per_run.iter().map(|r| r.miou).sum::<f64>() / 4.0;
        assert!((aggregate.miou - mean).abs() < 1e-12);
        let acc: f64 = per_run.iter().map(|r| r.pixel_accuracy).sum::<f64>() / 4.0;
        assert!((aggregate.pixel_accuracy - acc).abs() < 1e-12);
        assert_eq!(aggregate.runs, 4);
    }

    #[test]
    fn clustering_eval_is_deterministic_per_seed() {
        let (embeddings, saliency, labels) = orthogonal_fixture();
        let refs: Vec<&LabelMap> = labels.iter().collect();
        let config = ClusterEvalConfig::new(2);
        let a = clustering_eval(&embeddings, &saliency, &refs, &config).unwrap();
        let b = clustering_eval(&embeddings, &saliency, &refs, &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_objects_for_the_cluster_count_is_fatal() {
        let (embeddings, saliency, labels) = orthogonal_fixture();
        let refs: Vec<&LabelMap> = labels.iter().collect();
        let config = ClusterEvalConfig::new(9);
        let err = clustering_eval(&embeddings, &saliency, &refs, &config).unwrap_err();
        assert!(err.to_string().contains("salient objects"), "{err}");
    }
}
