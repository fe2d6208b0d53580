//! Random projection forest for approximate nearest neighbors.
//!
//! Every tree splits recursively on the hyperplane bisecting two randomly
//! sampled points of the node, until leaves hold at most `max(k, 32)` points.
//! The candidates of a point are its leaf mates over all trees; the `k`
//! closest by true distance are kept.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::knn::{assemble, check_k, select_k, squared_distance, NeighborGraph};
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::scalar::Scalar;

const MIN_LEAF_SIZE: usize = 32;
const SPLIT_ATTEMPTS: usize = 5;

/// Leaves of one tree: `order[bounds[l]..bounds[l + 1]]` are the members of
/// leaf `l`, and `leaf_of[i]` is the leaf holding point `i`.
struct TreeLeaves {
    order: Vec<usize>,
    bounds: Vec<usize>,
    leaf_of: Vec<u32>,
}

impl TreeLeaves {
    fn members(&self, point: usize) -> &[usize] {
        let l = self.leaf_of[point] as usize;
        &self.order[self.bounds[l]..self.bounds[l + 1]]
    }
}

fn build_tree<T: Scalar>(data: &DenseMatrix<T>, leaf_size: usize, rng: &mut ChaCha8Rng) -> TreeLeaves {
    let n = data.nrows();
    let dim = data.ncols();
    let mut order: Vec<usize> = (0..n).collect();
    let mut leaves: Vec<(usize, usize)> = Vec::new();
    let mut stack = vec![(0usize, n)];
    let mut normal = vec![T::zero(); dim];
    let mut side = Vec::new();

    while let Some((start, end)) = stack.pop() {
        let len = end - start;
        if len <= leaf_size {
            leaves.push((start, end));
            continue;
        }
        let node = &mut order[start..end];
        let mut split = None;
        for _ in 0..SPLIT_ATTEMPTS {
            let a = node[rng.random_range(0..len)];
            let mut b = node[rng.random_range(0..len - 1)];
            if b == a {
                b = node[len - 1];
            }
            let (xa, xb) = (data.row(a), data.row(b));
            let mut offset = T::zero();
            for c in 0..dim {
                normal[c] = xa[c] - xb[c];
                offset += normal[c] * (xa[c] + xb[c]) * T::of(0.5);
            }
            side.clear();
            for &i in node.iter() {
                let margin = data
                    .row(i)
                    .iter()
                    .zip(&normal)
                    .map(|(&x, &w)| x * w)
                    .sum::<T>()
                    - offset;
                let right = if margin == T::zero() {
                    rng.random::<bool>()
                } else {
                    margin > T::zero()
                };
                side.push(right);
            }
            let n_right = side.iter().filter(|&&r| r).count();
            if n_right > 0 && n_right < len {
                split = Some(n_right);
                break;
            }
        }
        let n_left = match split {
            Some(n_right) => {
                // stable partition: left block first, preserving order
                let (mut left, mut right): (Vec<usize>, Vec<usize>) = (Vec::new(), Vec::new());
                for (&i, &r) in node.iter().zip(&side) {
                    if r {
                        right.push(i);
                    } else {
                        left.push(i);
                    }
                }
                debug_assert_eq!(right.len(), n_right);
                let n_left = left.len();
                node[..n_left].copy_from_slice(&left);
                node[n_left..].copy_from_slice(&right);
                n_left
            }
            None => {
                // all sampled hyperplanes were degenerate (e.g. duplicates):
                // fall back to a random halving
                for i in (1..len).rev() {
                    node.swap(i, rng.random_range(0..=i));
                }
                len / 2
            }
        };
        stack.push((start + n_left, end));
        stack.push((start, start + n_left));
    }

    leaves.sort_unstable();
    let mut bounds = Vec::with_capacity(leaves.len() + 1);
    let mut leaf_of = vec![0u32; n];
    for (l, &(s, e)) in leaves.iter().enumerate() {
        bounds.push(s);
        for &i in &order[s..e] {
            leaf_of[i] = l as u32;
        }
    }
    bounds.push(n);
    TreeLeaves {
        order,
        bounds,
        leaf_of,
    }
}

/// Approximate k nearest neighbors from a forest of `n_trees` random
/// projection trees. Deterministic for a given seed.
pub fn knn_approx<T: Scalar>(
    data: &DenseMatrix<T>,
    k: usize,
    n_trees: usize,
    seed: u64,
) -> Result<NeighborGraph<T>> {
    let n = data.nrows();
    check_k(n, k)?;
    if n_trees == 0 {
        return Err(Error::invalid("n_trees", "must be at least 1"));
    }
    let leaf_size = k.max(MIN_LEAF_SIZE);
    let trees: Vec<TreeLeaves> = (0..n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            build_tree(data, leaf_size, &mut rng)
        })
        .collect();

    let rows: Vec<Vec<(T, usize)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut ids: Vec<usize> = Vec::new();
            for tree in &trees {
                ids.extend(tree.members(i).iter().copied().filter(|&j| j != i));
            }
            ids.sort_unstable();
            ids.dedup();
            let xi = data.row(i);
            let mut cand: Vec<(T, usize)> = if ids.len() >= k {
                ids.into_iter()
                    .map(|j| (squared_distance(xi, data.row(j)), j))
                    .collect()
            } else {
                // too few leaf mates to fill the row: scan everything
                (0..n)
                    .filter(|&j| j != i)
                    .map(|j| (squared_distance(xi, data.row(j)), j))
                    .collect()
            };
            select_k(&mut cand, k);
            cand
        })
        .collect();
    Ok(assemble(n, k, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affinities::knn_exact;
    use rand_distr::{Distribution, StandardNormal};

    fn clusters(n: usize, dim: usize, n_clusters: usize, seed: u64) -> DenseMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<Vec<f64>> = (0..n_clusters)
            .map(|_| (0..dim).map(|_| rng.random_range(-20.0..20.0)).collect())
            .collect();
        let mut data = DenseMatrix::zeros(n, dim);
        for i in 0..n {
            let c = &centers[i % n_clusters];
            for j in 0..dim {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.set(i, j, c[j] + z);
            }
        }
        data
    }

    #[test]
    fn recall_on_separated_gaussians() {
        let data = clusters(500, 8, 5, 1);
        let exact = knn_exact(&data, 10).unwrap();
        let approx = knn_approx(&data, 10, 50, 7).unwrap();
        assert!(approx.recall_against(&exact) >= 0.95);
    }

    #[test]
    fn duplicated_cluster_returns_duplicates() {
        let mut values = Vec::new();
        for i in 0..100 {
            if i < 40 {
                values.extend_from_slice(&[1.0, 2.0, 3.0]);
            } else {
                values.extend_from_slice(&[i as f64, -(i as f64), 0.5 * i as f64]);
            }
        }
        let data = DenseMatrix::new(100, 3, values).unwrap();
        let g = knn_approx(&data, 5, 10, 3).unwrap();
        for i in 0..40 {
            assert!(g.neighbors(i).iter().all(|&j| j < 40), "row {i}");
            assert!(g.distances(i).iter().all(|&d| d == 0.0));
        }
    }

    #[test]
    fn same_seed_same_graph() {
        let data = clusters(300, 5, 3, 2);
        let a = knn_approx(&data, 8, 6, 11).unwrap();
        let b = knn_approx(&data, 8, 6, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rows_sorted_without_self() {
        let data = clusters(200, 4, 2, 3);
        let g = knn_approx(&data, 6, 4, 5).unwrap();
        for i in 0..200 {
            assert!(!g.neighbors(i).contains(&i));
            for w in g.distances(i).windows(2) {
                assert!(w[0] <= w[1]);
            }
        }
    }

    #[test]
    fn invalid_parameters() {
        let data = clusters(20, 2, 2, 4);
        assert!(knn_approx(&data, 20, 3, 1).is_err());
        assert!(knn_approx(&data, 3, 0, 1).is_err());
    }
}
