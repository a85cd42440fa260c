//! Cluster-to-class matching and mean intersection-over-union.
//!
//! Predicted cluster ids carry no semantics, so they are first matched to
//! ground-truth classes — either one-to-one (optimal assignment maximizing
//! total overlap) or many-to-one (each cluster takes its majority class) —
//! and IoU is computed after relabeling. Pixels labeled 255 in the ground
//! truth are excluded everywhere.

use super::hungarian::hungarian;
use super::EvalReport;
use crate::data::IGNORE_LABEL;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How cluster ids are matched to ground-truth classes before scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchingMode {
    /// One-to-one assignment maximizing the total matched pixel count.
    Hungarian,
    /// Each cluster maps to its most frequent ground-truth class; several
    /// clusters may share a class (the overclustering protocol).
    Majority,
}

/// Pixel-count table between cluster ids and ground-truth classes.
struct Confusion {
    /// `counts[cluster][class]` = pixels carrying that cluster and class.
    counts: Vec<Vec<u64>>,
    cluster_sizes: Vec<u64>,
    class_sizes: Vec<u64>,
    total: u64,
}

fn confusion(pred: &[u32], gt: &[u8]) -> Result<Confusion> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "prediction has {} pixels but ground truth has {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut n_clusters = 0usize;
    let mut n_classes = 0usize;
    let mut total = 0u64;
    for (&p, &g) in pred.iter().zip(gt) {
        if g == IGNORE_LABEL {
            continue;
        }
        n_clusters = n_clusters.max(p as usize + 1);
        n_classes = n_classes.max(g as usize + 1);
        total += 1;
    }
    if total == 0 {
        return Err(Error::Data(
            "ground truth contains no scorable pixels (all ignore-labeled)".into(),
        ));
    }
    let mut counts = vec![vec![0u64; n_classes]; n_clusters];
    let mut cluster_sizes = vec![0u64; n_clusters];
    let mut class_sizes = vec![0u64; n_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if g == IGNORE_LABEL {
            continue;
        }
        counts[p as usize][g as usize] += 1;
        cluster_sizes[p as usize] += 1;
        class_sizes[g as usize] += 1;
    }
    Ok(Confusion {
        counts,
        cluster_sizes,
        class_sizes,
        total,
    })
}

/// Optimal one-to-one map. The matching problem is padded to a square over
/// `max(clusters, classes)`, so surplus clusters map to class ids beyond the
/// real range; their pixels then count as misses for every real class.
fn hungarian_mapping(conf: &Confusion) -> Result<Vec<usize>> {
    let n_clusters = conf.counts.len();
    let n_classes = conf.class_sizes.len();
    let n = n_clusters.max(n_classes);
    let mut cost = vec![0.0f64; n * n];
    for (c, row) in conf.counts.iter().enumerate() {
        for (g, &count) in row.iter().enumerate() {
            cost[c * n + g] = -(count as f64);
        }
    }
    let assignment = hungarian(&Tensor::from_vec(&[n, n], cost)?)?;
    Ok(assignment[..n_clusters].to_vec())
}

/// Majority map: each cluster takes its most frequent class, ties broken
/// toward the lowest class id.
fn majority_mapping(conf: &Confusion) -> Vec<usize> {
    conf.counts
        .iter()
        .map(|row| {
            let mut best = 0usize;
            let mut best_count = 0u64;
            for (g, &count) in row.iter().enumerate() {
                if count > best_count {
                    best_count = count;
                    best = g;
                }
            }
            best
        })
        .collect()
}

/// Builds the report for a fixed cluster→class map. All tallies come from
/// the confusion table, so the cost is independent of the pixel count.
fn report_from_mapping(conf: &Confusion, mapping: Vec<usize>) -> EvalReport {
    let n_classes = conf.class_sizes.len();
    let mut tp = vec![0u64; n_classes];
    let mut predicted = vec![0u64; n_classes];
    for (c, &target) in mapping.iter().enumerate() {
        if target < n_classes {
            tp[target] += conf.counts[c][target];
            predicted[target] += conf.cluster_sizes[c];
        }
    }
    let mut per_class_iou = Vec::with_capacity(n_classes);
    let mut sum = 0.0f64;
    let mut present = 0usize;
    for g in 0..n_classes {
        if conf.class_sizes[g] == 0 {
            per_class_iou.push(None);
            continue;
        }
        let fp = predicted[g] - tp[g];
        let fnn = conf.class_sizes[g] - tp[g];
        let denom = tp[g] + fp + fnn;
        let iou = if denom == 0 {
            // Unreachable for a present class (its pixels are TP or FN),
            // kept as a guard against division by zero.
            0.0
        } else {
            tp[g] as f64 / denom as f64
        };
        per_class_iou.push(Some(iou));
        sum += iou;
        present += 1;
    }
    let matched: u64 = tp.iter().sum();
    EvalReport {
        miou: sum / present as f64,
        per_class_iou,
        mapping,
        runs: 1,
        pixel_accuracy: matched as f64 / conf.total as f64,
    }
}

/// Matches predicted cluster ids to ground-truth classes and scores the
/// relabeled prediction: per-class IoU over classes present in the ground
/// truth, their mean, and overall pixel accuracy.
pub fn cluster_miou(pred: &[u32], gt: &[u8], mode: MatchingMode) -> Result<EvalReport> {
    let conf = confusion(pred, gt)?;
    let mapping = match mode {
        MatchingMode::Hungarian => hungarian_mapping(&conf)?,
        MatchingMode::Majority => majority_mapping(&conf),
    };
    Ok(report_from_mapping(&conf, mapping))
}

/// The overclustering protocol: more clusters than classes, each mapped to
/// its majority class before scoring.
pub fn overcluster_map(pred: &[u32], gt: &[u8]) -> Result<EvalReport> {
    cluster_miou(pred, gt, MatchingMode::Majority)
}

/// Scores a prediction whose labels already live in the class vocabulary
/// (no matching step): the standard supervised mIoU.
pub fn standard_miou(pred: &[u32], gt: &[u8]) -> Result<EvalReport> {
    let conf = confusion(pred, gt)?;
    let identity = (0..conf.counts.len()).collect();
    Ok(report_from_mapping(&conf, identity))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;
    use rand::SeedableRng as _;

    #[test]
    fn perfect_prediction_scores_one() {
        let gt: Vec<u8> = vec![0, 0, 1, 1, 2, 2];
        let pred: Vec<u32> = gt.iter().map(|&g| g as u32).collect();
        for mode in [MatchingMode::Hungarian, MatchingMode::Majority] {
            let r = cluster_miou(&pred, &gt, mode).unwrap();
            assert_eq!(r.miou, 1.0);
            assert_eq!(r.pixel_accuracy, 1.0);
            assert_eq!(r.mapping, vec![0, 1, 2]);
        }
    }

    #[test]
    fn permuted_cluster_ids_still_score_one() {
        let gt: Vec<u8> = vec![0, 0, 1, 1, 2, 2];
        // Clusters renamed 0→2, 1→0, 2→1.
        let pred: Vec<u32> = gt.iter().map(|&g| [2u32, 0, 1][g as usize]).collect();
        let r = cluster_miou(&pred, &gt, MatchingMode::Hungarian).unwrap();
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.pixel_accuracy, 1.0);
        assert_eq!(r.mapping, vec![1, 2, 0]);
    }

    #[test]
    fn hand_counted_two_class_example() {
        // Confusion: cluster 0 = {class0: 1, class1: 1}, cluster 1 = {class1: 2}.
        // Identity matching wins; IoU(0) = 1/2, IoU(1) = 2/3, mean 7/12.
        let pred: Vec<u32> = vec![0, 0, 1, 1];
        let gt: Vec<u8> = vec![0, 1, 1, 1];
        let r = cluster_miou(&pred, &gt, MatchingMode::Hungarian).unwrap();
        assert_eq!(r.per_class_iou, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((r.miou - 7.0 / 12.0).abs() < 1e-12);
        assert_eq!(r.mapping, vec![0, 1]);
        assert_eq!(r.pixel_accuracy, 0.75);
    }

    #[test]
    fn ignore_labeled_pixels_do_not_count() {
        let pred: Vec<u32> = vec![0, 0, 1, 1, 9, 9, 9];
        let gt: Vec<u8> = vec![0, 1, 1, 1, 255, 255, 255];
        let with_ignored = cluster_miou(&pred, &gt, MatchingMode::Hungarian).unwrap();
        let plain = cluster_miou(&pred[..4], &gt[..4], MatchingMode::Hungarian).unwrap();
        assert_eq!(with_ignored.miou, plain.miou);
        assert_eq!(with_ignored.per_class_iou, plain.per_class_iou);
        assert_eq!(with_ignored.pixel_accuracy, plain.pixel_accuracy);
    }

    #[test]
    fn fully_ignored_ground_truth_is_fatal() {
        let pred: Vec<u32> = vec![0, 1];
        let gt: Vec<u8> = vec![255, 255];
        assert!(cluster_miou(&pred, &gt, MatchingMode::Hungarian).is_err());
        assert!(cluster_miou(&pred, &[0u8], MatchingMode::Hungarian).is_err(), "length mismatch");
    }

    #[test]
    fn majority_map_equals_the_argmax_oracle() {
        // cluster 0: 3×class1, 1×class0 → class 1
        // cluster 1: 2×class0, 2×class2 → tie, lowest id → class 0
        // cluster 2: 1×class2 → class 2
        let pred: Vec<u32> = vec![0, 0, 0, 0, 1, 1, 1, 1, 2];
        let gt: Vec<u8> = vec![1, 1, 1, 0, 0, 0, 2, 2, 2];
        let r = overcluster_map(&pred, &gt).unwrap();
        assert_eq!(r.mapping, vec![1, 0, 2]);
    }

    #[test]
    fn pure_overclustering_has_perfect_pixel_accuracy() {
        // Four pure clusters over two classes.
        let pred: Vec<u32> = vec![0, 0, 1, 1, 2, 2, 3, 3];
        let gt: Vec<u8> = vec![0, 0, 0, 0, 1, 1, 1, 1];
        let r = overcluster_map(&pred, &gt).unwrap();
        assert_eq!(r.pixel_accuracy, 1.0);
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.mapping, vec![0, 0, 1, 1]);
    }

    #[test]
    fn pure_clusters_match_hungarian_when_counts_agree() {
        let pred: Vec<u32> = vec![1, 1, 0, 0, 2, 2];
        let gt: Vec<u8> = vec![0, 0, 1, 1, 2, 2];
        let h = cluster_miou(&pred, &gt, MatchingMode::Hungarian).unwrap();
        let m = cluster_miou(&pred, &gt, MatchingMode::Majority).unwrap();
        assert_eq!(h.miou, m.miou);
        assert_eq!(h.mapping, m.mapping);
        assert_eq!(h.pixel_accuracy, 1.0);
    }

    #[test]
    fn majority_accuracy_dominates_hungarian_accuracy() {
        let mut r = rand_xoshiro::Xoshiro256StarStar::seed_from_u64(2024);
        for trial in 0..200 {
            let n = 40 + trial % 60;
            let clusters = 2 + trial % 5;
            let classes = 2 + trial % 3;
            let pred: Vec<u32> = (0..n).map(|_| r.gen_range(0..clusters) as u32).collect();
            let gt: Vec<u8> = (0..n).map(|_| r.gen_range(0..classes) as u8).collect();
            let h = cluster_miou(&pred, &gt, MatchingMode::Hungarian).unwrap();
            let m = cluster_miou(&pred, &gt, MatchingMode::Majority).unwrap();
            assert!(
                m.pixel_accuracy >= h.pixel_accuracy - 1e-12,
                "trial {trial}: majority {} < one-to-one {}",
                m.pixel_accuracy,
                h.pixel_accuracy
            );
        }
    }

    #[test]
    fn surplus_clusters_map_past_the_real_classes() {
        // Three clusters over two classes: the weakest cluster is pushed to a
        // padding column and its pixels count against recall only.
        let pred: Vec<u32> = vec![0, 0, 0, 1, 1, 1, 2];
        let gt: Vec<u8> = vec![0, 0, 0, 1, 1, 1, 1];
        let r = cluster_miou(&pred, &gt, MatchingMode::Hungarian).unwrap();
        assert_eq!(&r.mapping[..2], &[0, 1]);
        assert!(r.mapping[2] >= 2, "surplus cluster must take a padding id");
        assert_eq!(r.per_class_iou[0], Some(1.0));
        assert_eq!(r.per_class_iou[1], Some(0.75));
    }

    #[test]
    fn absent_classes_report_no_iou() {
        // Class 1 never appears in the ground truth.
        let pred: Vec<u32> = vec![0, 0, 1];
        let gt: Vec<u8> = vec![0, 0, 2];
        let r = cluster_miou(&pred, &gt, MatchingMode::Hungarian).unwrap();
        assert_eq!(r.per_class_iou.len(), 3);
        assert!(r.per_class_iou[0].is_some());
        assert!(r.per_class_iou[1].is_none());
        assert!(r.per_class_iou[2].is_some());
    }

    #[test]
    fn standard_scoring_skips_the_matching_step() {
        // Swapped labels would score 1.0 after matching but 0.0 without it.
        let pred: Vec<u32> = vec![1, 1, 0, 0];
        let gt: Vec<u8> = vec![0, 0, 1, 1];
        let r = standard_miou(&pred, &gt).unwrap();
        assert_eq!(r.miou, 0.0);
        assert_eq!(r.pixel_accuracy, 0.0);
        let exact = standard_miou(&[0u32, 0, 1, 1], &gt).unwrap();
        assert_eq!(exact.miou, 1.0);
    }

    /// The optimal matched total over all ways of assigning 4 clusters to
    /// 3 classes plus one phantom column, and whether it is unique.
    fn brute_force_optimum(counts: &[[u64; 3]; 4]) -> (u64, bool) {
        let mut best = 0u64;
        let mut hits = 0usize;
        for p in permutations_of_four() {
            let total: u64 = (0..4).map(|i| if p[i] < 3 { counts[i][p[i]] } else { 0 }).sum();
            if total > best {
                best = total;
                hits = 1;
            } else if total == best {
                hits += 1;
            }
        }
        (best, hits == 1)
    }

    fn permutations_of_four() -> Vec<[usize; 4]> {
        let mut out = Vec::new();
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    for d in 0..4 {
                        let p = [a, b, c, d];
                        let mut s = p;
                        s.sort_unstable();
                        if s == [0, 1, 2, 3] {
                            out.push(p);
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn relabeling_never_changes_the_hungarian_score() {
        // When two different assignments tie on the matched total, both are
        // optimal and the mean IoU is legitimately ambiguous — so the test
        // draws confusion tables until the optimum is unique, then demands
        // exact invariance under renaming the cluster ids.
        let mut r = rand_xoshiro::Xoshiro256StarStar::seed_from_u64(77);
        let mut tested = 0;
        while tested < 50 {
            let mut counts = [[0u64; 3]; 4];
            for row in counts.iter_mut() {
                for v in row.iter_mut() {
                    *v = r.gen_range(1..=50);
                }
            }
            let (_, unique) = brute_force_optimum(&counts);
            if !unique {
                continue;
            }
            tested += 1;

            let mut pred = Vec::new();
            let mut gt = Vec::new();
            for (cluster, row) in counts.iter().enumerate() {
                for (class, &n) in row.iter().enumerate() {
                    for _ in 0..n {
                        pred.push(cluster as u32);
                        gt.push(class as u8);
                    }
                }
            }
            let base = cluster_miou(&pred, &gt, MatchingMode::Hungarian).unwrap();
            // Random permutation of the four cluster ids.
            let mut perm: Vec<u32> = (0..4).collect();
            for i in (1..4usize).rev() {
                let j = r.gen_range(0..=i);
                perm.swap(i, j);
            }
            let renamed: Vec<u32> = pred.iter().map(|&p| perm[p as usize]).collect();
            let relabeled = cluster_miou(&renamed, &gt, MatchingMode::Hungarian).unwrap();
            assert_eq!(
                base.pixel_accuracy, relabeled.pixel_accuracy,
                "accuracy changed under renaming {perm:?}"
            );
            assert_eq!(
                base.miou, relabeled.miou,
                "mIoU changed under renaming {perm:?} with counts {counts:?}"
            );
            // The renamed mapping must be the original one pushed through
            // the permutation.
            for (c, &target) in base.mapping.iter().enumerate() {
                assert_eq!(relabeled.mapping[perm[c] as usize], target);
            }
        }
    }
}
