//! Lloyd's K-Means with k-means++ seeding.
//!
//! Clustering runs on l2-normalized vectors with plain Euclidean distance;
//! on unit vectors that ordering coincides with cosine similarity, so no
//! separate spherical variant is needed. Centroids are *not* re-normalized
//! between iterations — they are ordinary cluster means.

use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::tensor::Tensor;
use rand::Rng as _;

/// Outcome of one K-Means run.
#[derive(Debug, Clone)]
pub struct KMeansResult {
    /// `[k, dim]` cluster centers.
    pub centroids: Tensor<f64>,
    /// Cluster id per input row, each `< k`; every cluster holds ≥ 1 point.
    pub assignments: Vec<usize>,
    /// Sum of squared distances from each point to its assigned centroid.
    pub objective: f64,
    /// Objective after every assignment pass, in order. Non-increasing.
    pub objective_trace: Vec<f64>,
}

/// Clusters the rows of `points` (`[m, dim]`) into `k` groups.
///
/// Seeding is k-means++; iteration stops at an assignment fixpoint or after
/// `max_iter` passes. A cluster left empty by an assignment pass is re-seeded
/// at the point farthest from its current centroid (taken from a cluster
/// holding at least two points, so the repair always terminates).
pub fn kmeans(points: &Tensor<f64>, k: usize, max_iter: usize, seed: u64) -> Result<KMeansResult> {
    let shape = points.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!(
            "clustering input must be [points, dim], got {shape:?}"
        )));
    }
    let (m, dim) = (shape[0], shape[1]);
    if k == 0 {
        return Err(Error::Config("cluster count must be at least 1".into()));
    }
    if m < k {
        return Err(Error::Data(format!(
            "cannot form {k} clusters from {m} points"
        )));
    }
    if dim == 0 {
        return Err(Error::Shape("points must have at least one dimension".into()));
    }
    if !points.all_finite() {
        return Err(Error::Numeric("clustering input contains non-finite values".into()));
    }
    if max_iter == 0 {
        return Err(Error::Config("max_iter must be at least 1".into()));
    }

    let data = points.data();
    let mut rng = rng::stream_rng(seed, &[stream::KMEANS]);
    let mut centroids = seed_plus_plus(data, m, dim, k, &mut rng);

    let mut prev: Option<Vec<usize>> = None;
    let mut trace = Vec::new();
    loop {
        let mut assignments = assign_nearest(data, m, dim, &centroids, k);
        reseed_empty_clusters(data, m, dim, &mut centroids, &mut assignments, k);
        trace.push(objective_of(data, m, dim, &centroids, &assignments));

        let fixpoint = prev.as_ref() == Some(&assignments);
        prev = Some(assignments);
        if fixpoint || trace.len() >= max_iter {
            break;
        }
        update_means(data, m, dim, &mut centroids, prev.as_ref().unwrap(), k);
    }

    let assignments = prev.unwrap();
    let objective = *trace.last().unwrap();
    Ok(KMeansResult {
        centroids: Tensor::from_vec(&[k, dim], centroids)?,
        assignments,
        objective,
        objective_trace: trace,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++: first center uniform, each next drawn with probability
/// proportional to the squared distance to the nearest chosen center.
fn seed_plus_plus(data: &[f64], m: usize, dim: usize, k: usize, rng: &mut rng::Rng) -> Vec<f64> {
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..m);
    centroids.extend_from_slice(row(first));

    let mut min_d2: Vec<f64> = (0..m).map(|i| sq_dist(row(i), row(first))).collect();
    for _ in 1..k {
        let total: f64 = min_d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.gen_range(0.0..total);
            let mut pick = m - 1;
            for (i, &d) in min_d2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            // Every point coincides with a chosen center; any choice is
            // equivalent.
            rng.gen_range(0..m)
        };
        let base = centroids.len();
        centroids.extend_from_slice(row(next));
        for i in 0..m {
            let d = sq_dist(row(i), &centroids[base..base + dim]);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
        }
    }
    centroids
}

/// Nearest centroid per point, ties resolved toward the lowest cluster id.
fn assign_nearest(data: &[f64], m: usize, dim: usize, centroids: &[f64], k: usize) -> Vec<usize> {
    (0..m)
        .map(|i| {
            let p = &data[i * dim..(i + 1) * dim];
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d = sq_dist(p, &centroids[c * dim..(c + 1) * dim]);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Moves each empty cluster's centroid onto the point currently farthest from
/// its own centroid, and reassigns that point. Donor clusters are required to
/// hold at least two points, which the pigeonhole bound `m ≥ k` guarantees is
/// always possible.
fn reseed_empty_clusters(
    data: &[f64],
    m: usize,
    dim: usize,
    centroids: &mut [f64],
    assignments: &mut [usize],
    k: usize,
) {
    let mut sizes = vec![0usize; k];
    for &a in assignments.iter() {
        sizes[a] += 1;
    }
    for empty in 0..k {
        while sizes[empty] == 0 {
            let mut far = None;
            let mut far_d = -1.0f64;
            for i in 0..m {
                let a = assignments[i];
                if sizes[a] < 2 {
                    continue;
                }
                let d = sq_dist(
                    &data[i * dim..(i + 1) * dim],
                    &centroids[a * dim..(a + 1) * dim],
                );
                if d > far_d {
                    far_d = d;
                    far = Some(i);
                }
            }
            let donor = far.expect("a cluster with at least two points always exists");
            sizes[assignments[donor]] -= 1;
            assignments[donor] = empty;
            sizes[empty] += 1;
            centroids[empty * dim..(empty + 1) * dim]
                .copy_from_slice(&data[donor * dim..(donor + 1) * dim]);
        }
    }
}

fn update_means(
    data: &[f64],
    m: usize,
    dim: usize,
    centroids: &mut [f64],
    assignments: &[usize],
    k: usize,
) {
    centroids.fill(0.0);
    let mut sizes = vec![0usize; k];
    for i in 0..m {
        let a = assignments[i];
        sizes[a] += 1;
        for d in 0..dim {
            centroids[a * dim + d] += data[i * dim + d];
        }
    }
    for c in 0..k {
        // Assignments always cover every cluster (the empty-cluster repair
        // runs first), so the size is never zero here.
        let inv = 1.0 / sizes[c] as f64;
        for d in 0..dim {
            centroids[c * dim + d] *= inv;
        }
    }
}

fn objective_of(data: &[f64], m: usize, dim: usize, centroids: &[f64], assignments: &[usize]) -> f64 {
    (0..m)
        .map(|i| {
            let a = assignments[i];
            sq_dist(
                &data[i * dim..(i + 1) * dim],
                &centroids[a * dim..(a + 1) * dim],
            )
        })
        .sum()
}
