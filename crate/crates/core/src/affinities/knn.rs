use std::cmp::Ordering;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::scalar::Scalar;

/// `k` neighbors per point, each row sorted by ascending squared distance.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph<T> {
    n: usize,
    k: usize,
    indices: Vec<usize>,
    squared_distances: Vec<T>,
}

impl<T: Scalar> NeighborGraph<T> {
    pub fn new(n: usize, k: usize, indices: Vec<usize>, squared_distances: Vec<T>) -> Result<Self> {
        if indices.len() != n * k || squared_distances.len() != n * k {
            return Err(Error::shape(
                "NeighborGraph",
                n * k,
                format!("{} indices, {} distances", indices.len(), squared_distances.len()),
            ));
        }
        for i in 0..n {
            let row = &indices[i * k..(i + 1) * k];
            if row.iter().any(|&j| j >= n || j == i) {
                return Err(Error::invalid("indices", format!("row {i} has a self loop or out-of-range id")));
            }
        }
        Ok(Self {
            n,
            k,
            indices,
            squared_distances,
        })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    #[inline]
    pub fn distances(&self, i: usize) -> &[T] {
        &self.squared_distances[i * self.k..(i + 1) * self.k]
    }

    /// Fraction of this graph's neighbor ids also present in `truth`.
    pub fn recall_against(&self, truth: &NeighborGraph<T>) -> f64 {
        let mut hits = 0usize;
        for i in 0..self.n {
            let t = truth.neighbors(i);
            hits += self.neighbors(i).iter().filter(|j| t.contains(j)).count();
        }
        hits as f64 / (self.n * truth.k).max(1) as f64
    }
}

#[inline]
pub(crate) fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Distance first, then smaller index.
#[inline]
pub(crate) fn neighbor_order<T: Scalar>(a: &(T, usize), b: &(T, usize)) -> Ordering {
    a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

/// Keeps the `k` best candidates in ascending order.
pub(crate) fn select_k<T: Scalar>(candidates: &mut Vec<(T, usize)>, k: usize) {
    if candidates.len() > k {
        candidates.select_nth_unstable_by(k - 1, neighbor_order);
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(neighbor_order);
}

pub(crate) fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("k", "must be at least 1"));
    }
    if k >= n {
        return Err(Error::invalid("k", format!("must be smaller than the number of points ({n}), got {k}")));
    }
    Ok(())
}

pub(crate) fn assemble<T: Scalar>(n: usize, k: usize, rows: Vec<Vec<(T, usize)>>) -> NeighborGraph<T> {
    let mut indices = Vec::with_capacity(n * k);
    let mut squared_distances = Vec::with_capacity(n * k);
    for row in rows {
        for (d, j) in row {
            indices.push(j);
            squared_distances.push(d);
        }
    }
    NeighborGraph {
        n,
        k,
        indices,
        squared_distances,
    }
}

/// Exact k nearest neighbors by a full scan; ties go to the smaller index.
pub fn knn_exact<T: Scalar>(data: &DenseMatrix<T>, k: usize) -> Result<NeighborGraph<T>> {
    let n = data.nrows();
    check_k(n, k)?;
    let rows: Vec<Vec<(T, usize)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = data.row(i);
            let mut cand: Vec<(T, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (squared_distance(xi, data.row(j)), j))
                .collect();
            select_k(&mut cand, k);
            cand
        })
        .collect();
    Ok(assemble(n, k, rows))
}

/// Keeps `m` of the `k` neighbors of every point, sampled uniformly without
/// replacement. Kept entries stay in ascending distance order.
pub fn subsample_neighbors<T: Scalar>(
    graph: &NeighborGraph<T>,
    m: usize,
    seed: u64,
) -> Result<NeighborGraph<T>> {
    if m == 0 {
        return Err(Error::invalid("subsample", "must keep at least one neighbor"));
    }
    if m > graph.k {
        return Err(Error::invalid(
            "subsample",
            format!("cannot keep {m} of {} neighbors", graph.k),
        ));
    }
    if m == graph.k {
        return Ok(graph.clone());
    }
    let rows: Vec<Vec<(T, usize)>> = (0..graph.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut picked = sample(&mut rng, graph.k, m).into_vec();
            picked.sort_unstable();
            picked
                .into_iter()
                .map(|s| (graph.distances(i)[s], graph.neighbors(i)[s]))
                .collect()
        })
        .collect();
    Ok(assemble(graph.n, m, rows))
}
