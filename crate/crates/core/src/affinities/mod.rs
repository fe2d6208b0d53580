//! Input affinities `p_ij`: neighbor search, bandwidth calibration to a target
//! perplexity, and symmetrization into a sparse joint distribution.

mod forest;
mod knn;
mod perplexity;

pub use forest::knn_approx;
pub use knn::{knn_exact, subsample_neighbors, NeighborGraph};
pub use perplexity::{
    conditional_row, perplexity_search, BandwidthRow, MAX_BISECTION_STEPS, PERPLEXITY_TOLERANCE,
};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::scalar::Scalar;

/// Symmetric sparse joint affinities.
///
/// Each unordered pair `(i, j)`, `i < j`, is stored once; its value applies
/// to both ordered pairs, so the mass over ordered pairs is twice the stored
/// sum. A CSR view with both directions backs row-wise force evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAffinities<T> {
    n: usize,
    entries: Vec<(usize, usize, T)>,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<T>,
}

impl<T: Scalar> SparseAffinities<T> {
    /// Builds from unordered pairs; repeated pairs are summed and `(j, i)` is
    /// folded onto `(i, j)`.
    pub fn from_pairs(n: usize, pairs: impl IntoIterator<Item = (usize, usize, T)>) -> Result<Self> {
        let mut entries: Vec<(usize, usize, T)> = Vec::new();
        for (i, j, p) in pairs {
            if i >= n || j >= n {
                return Err(Error::invalid("affinity index", format!("({i}, {j}) with n = {n}")));
            }
            if i == j {
                return Err(Error::invalid("affinity index", format!("self pair ({i}, {i})")));
            }
            if !(p >= T::zero()) || !p.is_finite() {
                return Err(Error::invalid("affinity value", format!("p({i}, {j}) = {p}")));
            }
            entries.push((i.min(j), i.max(j), p));
        }
        entries.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut merged: Vec<(usize, usize, T)> = Vec::with_capacity(entries.len());
        for e in entries {
            match merged.last_mut() {
                Some(last) if last.0 == e.0 && last.1 == e.1 => last.2 += e.2,
                _ => merged.push(e),
            }
        }

        let mut degree = vec![0usize; n];
        for &(i, j, _) in &merged {
            degree[i] += 1;
            degree[j] += 1;
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        for d in &degree {
            row_ptr.push(row_ptr.last().unwrap() + d);
        }
        let mut fill = row_ptr[..n].to_vec();
        let mut cols = vec![0usize; row_ptr[n]];
        let mut vals = vec![T::zero(); row_ptr[n]];
        for &(i, j, p) in &merged {
            cols[fill[i]] = j;
            vals[fill[i]] = p;
            fill[i] += 1;
            cols[fill[j]] = i;
            vals[fill[j]] = p;
            fill[j] += 1;
        }
        Ok(Self {
            n,
            entries: merged,
            row_ptr,
            cols,
            vals,
        })
    }

    /// From a dense symmetric matrix (upper triangle read, diagonal ignored).
    pub fn from_dense(p: &DenseMatrix<T>) -> Result<Self> {
        let n = p.nrows();
        if p.ncols() != n {
            return Err(Error::shape("dense affinities", "square matrix", format!("{:?}", p.shape())));
        }
        let pairs = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j)));
        let pairs: Vec<_> = pairs
            .filter(|&(i, j)| p.get(i, j) != T::zero())
            .map(|(i, j)| (i, j, p.get(i, j)))
            .collect();
        Self::from_pairs(n, pairs)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of stored unordered pairs.
    #[inline]
    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn pairs(&self) -> &[(usize, usize, T)] {
        &self.entries
    }

    /// `(j, p_ij)` for every stored neighbor `j` of `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    /// `p_ij`, zero when the pair is not stored.
    pub fn get(&self, i: usize, j: usize) -> T {
        self.row(i)
            .find(|&(c, _)| c == j)
            .map_or(T::zero(), |(_, p)| p)
    }

    /// Sum over ordered pairs `i != j`.
    pub fn total_mass(&self) -> T {
        T::of(2.0) * self.entries.iter().map(|e| e.2).sum::<T>()
    }

    pub fn scaled(&self, factor: T) -> Self {
        let mut out = self.clone();
        for e in out.entries.iter_mut() {
            e.2 *= factor;
        }
        for v in out.vals.iter_mut() {
            *v *= factor;
        }
        out
    }
}

/// `p_ij = (p_{j|i} + p_{i|j}) / 2N`, a missing direction contributing 0.
///
/// `conditional` holds one row per point aligned with `graph`.
pub fn symmetrize<T: Scalar>(
    conditional: &[T],
    graph: &NeighborGraph<T>,
    n: usize,
) -> Result<SparseAffinities<T>> {
    let k = graph.k();
    if graph.n() != n {
        return Err(Error::shape("symmetrize graph", n, graph.n()));
    }
    if conditional.len() != n * k {
        return Err(Error::shape("symmetrize conditional rows", n * k, conditional.len()));
    }
    let tol = T::of(1e-9).max(T::epsilon() * T::of_usize(4 * k.max(1)));
    for i in 0..n {
        let sum: T = conditional[i * k..(i + 1) * k].iter().copied().sum();
        if (sum - T::one()).abs() > tol {
            return Err(Error::RowNotNormalized {
                row: i,
                sum: sum.as_f64(),
            });
        }
    }
    let scale = (T::of(2.0) * T::of_usize(n)).recip();
    let pairs = (0..n).flat_map(|i| {
        graph
            .neighbors(i)
            .iter()
            .zip(&conditional[i * k..(i + 1) * k])
            .map(move |(&j, &p)| (i, j, p * scale))
    });
    SparseAffinities::from_pairs(n, pairs)
}

/// How neighbors are searched.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KnnMethod {
    Exact,
    /// Random projection forest with the given number of trees.
    Forest { n_trees: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffinityConfig {
    pub perplexity: f64,
    /// Defaults to `3 * perplexity` (rounded), capped at `N - 1`.
    pub n_neighbors: Option<usize>,
    pub knn: KnnMethod,
    /// Keep this many randomly chosen neighbors per point after calibration.
    pub subsample: Option<usize>,
    pub seed: u64,
}

impl Default for AffinityConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            n_neighbors: None,
            knn: KnnMethod::Forest { n_trees: 50 },
            subsample: None,
            seed: 0,
        }
    }
}

impl AffinityConfig {
    pub fn neighbor_count(&self, n_points: usize) -> usize {
        self.n_neighbors
            .unwrap_or_else(|| (3.0 * self.perplexity).round() as usize)
            .min(n_points.saturating_sub(1))
    }
}

#[derive(Debug, Clone)]
pub struct AffinityResult<T> {
    pub p: SparseAffinities<T>,
    pub sigma: Vec<T>,
    pub achieved_perplexity: Vec<T>,
    /// Rows whose target perplexity could not be reached.
    pub unconverged: Vec<usize>,
}

/// Neighbor search, calibration, optional subsampling and symmetrization.
pub fn compute_affinities<T: Scalar>(
    data: &DenseMatrix<T>,
    config: &AffinityConfig,
) -> Result<AffinityResult<T>> {
    let n = data.nrows();
    if n < 2 {
        return Err(Error::invalid("input", "at least two points are required"));
    }
    if !data.is_finite() {
        return Err(Error::NonFinite("input data".into()));
    }
    let k = config.neighbor_count(n);
    if !(config.perplexity < k as f64) {
        return Err(Error::invalid(
            "perplexity",
            format!("{} needs more than {k} neighbors", config.perplexity),
        ));
    }
    let graph = match config.knn {
        KnnMethod::Exact => knn_exact(data, k)?,
        KnnMethod::Forest { n_trees } => knn_approx(data, k, n_trees, config.seed)?,
    };
    let target = T::of(config.perplexity);
    let rows: Vec<BandwidthRow<T>> = (0..n)
        .into_par_iter()
        .map(|i| perplexity_search(graph.distances(i), target))
        .collect::<Result<_>>()?;
    let unconverged: Vec<usize> = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.converged)
        .map(|(i, _)| i)
        .collect();
    if !unconverged.is_empty() {
        log::warn!(
            "perplexity calibration did not converge for {} of {n} points",
            unconverged.len()
        );
    }
    let sigma: Vec<T> = rows.iter().map(|r| r.sigma).collect();
    let achieved_perplexity = rows.iter().map(|r| r.achieved_perplexity).collect();

    let (graph, conditional) = match config.subsample {
        Some(m) if m < k => {
            let kept = subsample_neighbors(&graph, m, config.seed.wrapping_add(1))?;
            // renormalize the calibrated kernel over the kept neighbors
            let mut cond = Vec::with_capacity(n * m);
            for i in 0..n {
                cond.extend(conditional_row(kept.distances(i), sigma[i]).0);
            }
            (kept, cond)
        }
        Some(m) if m > k => return Err(Error::invalid("subsample", format!("{m} exceeds k = {k}"))),
        _ => {
            let mut cond = Vec::with_capacity(n * k);
            for r in rows {
                cond.extend(r.conditional);
            }
            (graph, cond)
        }
    };
    let p = symmetrize(&conditional, &graph, n)?;
    Ok(AffinityResult {
        p,
        sigma,
        achieved_perplexity,
        unconverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_points_mutual() {
        let g = NeighborGraph::new(2, 1, vec![1, 0], vec![1.0, 1.0]).unwrap();
        let p = symmetrize(&[1.0, 1.0], &g, 2).unwrap();
        assert_eq!(p.pairs(), &[(0, 1, 0.5)]);
        assert_abs_diff_eq!(p.total_mass(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn one_directional_edge() {
        // 0 -> 1 and 2 -> 1, 1 -> 0: pair (1, 2) only has the 2 -> 1 direction
        let g = NeighborGraph::new(3, 1, vec![1, 0, 1], vec![1.0; 3]).unwrap();
        let p = symmetrize(&[1.0, 1.0, 1.0], &g, 3).unwrap();
        assert_abs_diff_eq!(p.get(1, 2), 1.0 / 6.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.get(0, 1), 2.0 / 6.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.total_mass(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn unnormalized_row_rejected() {
        let g = NeighborGraph::new(2, 1, vec![1, 0], vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            symmetrize(&[1.0, 0.9], &g, 2),
            Err(Error::RowNotNormalized { row: 1, .. })
        ));
    }

    #[test]
    fn random_graph_has_unit_mass_and_symmetric_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 300;
        let data: DenseMatrix<f64> = DenseMatrix::from_fn(n, 6, |_, _| rng.random_range(-1.0..1.0));
        let res = compute_affinities(
            &data,
            &AffinityConfig {
                perplexity: 10.0,
                knn: KnnMethod::Exact,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(res.unconverged.is_empty());
        assert!((res.p.total_mass() - 1.0).abs() <= 1e-9);
        for i in 0..n {
            for (j, p) in res.p.row(i) {
                assert_eq!(res.p.get(j, i), p);
            }
        }
        for &perp in &res.achieved_perplexity {
            assert!((perp - 10.0).abs() <= 1e-4);
        }
    }

    #[test]
    fn subsampled_rows_renormalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 250;
        let data: DenseMatrix<f64> = DenseMatrix::from_fn(n, 4, |_, _| rng.random_range(-1.0..1.0));
        let config = AffinityConfig {
            perplexity: 30.0,
            n_neighbors: Some(100),
            knn: KnnMethod::Exact,
            subsample: Some(2),
            seed: 3,
        };
        let res = compute_affinities(&data, &config).unwrap();
        assert!((res.p.total_mass() - 1.0).abs() <= 1e-9);
        // every point keeps two outgoing edges, so at most 2N pairs
        assert!(res.p.nnz() <= 2 * n);
        for i in 0..n {
            assert!(res.p.row(i).count() >= 2);
        }
    }

    #[test]
    fn perplexity_must_be_below_neighbor_count() {
        let data = DenseMatrix::from_fn(10, 2, |i, j| (i * 2 + j) as f64);
        assert!(compute_affinities(&data, &AffinityConfig::default()).is_err());
    }

    #[test]
    fn pairs_fold_and_merge() {
        let p = SparseAffinities::from_pairs(3, vec![(2, 0, 0.1), (0, 2, 0.2), (1, 2, 0.2)]).unwrap();
        assert_eq!(p.nnz(), 2);
        assert_abs_diff_eq!(p.get(2, 0), 0.3, epsilon = 1e-15);
        assert!(SparseAffinities::from_pairs(3, vec![(1, 1, 0.1)]).is_err());
        assert!(SparseAffinities::from_pairs(3, vec![(0, 1, -0.1)]).is_err());
    }
}
