//! Exact minimum-cost assignment on square matrices.
//!
//! Implements the potential-based shortest-augmenting-path formulation
//! (Jonker–Volgenant style), O(n³) overall. Rectangular problems must be
//! padded to square by the caller.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const UNMATCHED: usize = usize::MAX;

/// Returns the column assigned to each row so that the summed cost is
/// minimal. The input must be a square `[n, n]` matrix of finite reals.
pub fn hungarian(cost: &Tensor<f64>) -> Result<Vec<usize>> {
    let shape = cost.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!(
            "assignment cost must be a square matrix, got {shape:?}"
        )));
    }
    let n = shape[0];
    if shape[1] != n {
        return Err(Error::Shape(format!(
            "assignment cost must be square, got {}x{} (pad before solving)",
            shape[0], shape[1]
        )));
    }
    if !cost.all_finite() {
        return Err(Error::Numeric("assignment cost contains non-finite values".into()));
    }
    let c = cost.data();

    // Row potential u, column potential v (index n is a virtual column that
    // each augmenting search starts from), and p[j] = row matched to column j.
    let mut u = vec![0.0f64; n];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![UNMATCHED; n + 1];
    let mut way = vec![0usize; n + 1];

    for row in 0..n {
        p[n] = row;
        let mut j0 = n;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = UNMATCHED;
            for j in 0..n {
                if used[j] {
                    continue;
                }
                let cur = c[i0 * n + j] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == UNMATCHED {
                break;
            }
        }
        // Flip the alternating path back to the virtual column.
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == n {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for j in 0..n {
        assignment[p[j]] = j;
    }
    Ok(assignment)
}

/// Total cost of an assignment under a cost matrix.
pub fn assignment_cost(cost: &Tensor<f64>, assignment: &[usize]) -> f64 {
    let n = cost.shape()[1];
    assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost.data()[i * n + j])
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;
    use rand::SeedableRng as _;

    fn matrix(n: usize, flat: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(&[n, n], flat).unwrap()
    }

    #[test]
    fn zero_diagonal_yields_the_identity() {
        let cost = matrix(3, vec![0.0, 5.0, 5.0, 5.0, 0.0, 5.0, 5.0, 5.0, 0.0]);
        let a = hungarian(&cost).unwrap();
        assert_eq!(a, vec![0, 1, 2]);
        assert_eq!(assignment_cost(&cost, &a), 0.0);
    }

    #[test]
    fn two_by_two_picks_the_cheaper_permutation() {
        // Identity costs 1 + 0 = 1; the swap costs 2 + 3 = 5.
        let cost = matrix(2, vec![1.0, 2.0, 3.0, 0.0]);
        let a = hungarian(&cost).unwrap();
        assert_eq!(a, vec![0, 1]);
        assert_eq!(assignment_cost(&cost, &a), 1.0);
    }

    /// Every permutation of 0..n, by Heap's algorithm.
    fn permutations(n: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut items: Vec<usize> = (0..n).collect();
        fn heap(k: usize, items: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if k <= 1 {
                out.push(items.clone());
                return;
            }
            for i in 0..k {
                heap(k - 1, items, out);
                if k % 2 == 0 {
                    items.swap(i, k - 1);
                } else {
                    items.swap(0, k - 1);
                }
            }
        }
        heap(n, &mut items, &mut out);
        out
    }

    #[test]
    fn matches_brute_force_on_a_hundred_random_matrices() {
        let mut r = rand_xoshiro::Xoshiro256StarStar::seed_from_u64(12345);
        for trial in 0..100 {
            let n = 1 + trial % 7;
            let flat: Vec<f64> = (0..n * n).map(|_| r.gen_range(-10.0..10.0)).collect();
            let cost = matrix(n, flat);
            let got = hungarian(&cost).unwrap();

            // The result must be a permutation.
            let mut seen = got.clone();
            seen.sort_unstable();
            assert_eq!(seen, (0..n).collect::<Vec<_>>());

            let best = permutations(n)
                .into_iter()
                .map(|p| assignment_cost(&cost, &p))
                .fold(f64::INFINITY, f64::min);
            let ours = assignment_cost(&cost, &got);
            assert!(
                (ours - best).abs() < 1e-9,
                "trial {trial} (n={n}): solver cost {ours}, enumeration minimum {best}"
            );
        }
    }

    #[test]
    fn negative_costs_are_handled() {
        let cost = matrix(2, vec![-5.0, 0.0, 0.0, -5.0]);
        let a = hungarian(&cost).unwrap();
        assert_eq!(assignment_cost(&cost, &a), -10.0);
    }

    #[test]
    fn invalid_matrices_are_rejected() {
        let rect = Tensor::from_vec(&[2, 3], vec![0.0; 6]).unwrap();
        assert!(hungarian(&rect).is_err(), "rectangular input");
        let cube = Tensor::from_vec(&[2, 2, 1], vec![0.0; 4]).unwrap();
        assert!(hungarian(&cube).is_err(), "rank-3 input");
        let inf = matrix(2, vec![0.0, f64::INFINITY, 0.0, 0.0]);
        assert!(hungarian(&inf).is_err(), "non-finite cost");
    }
}
