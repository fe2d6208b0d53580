//! Randomized PCA of a matrix streamed from disk in row blocks.
//!
//! Range finder with `its` power iterations and LU renormalization, then a
//! QR of the sample and the SVD of the small `l x n` projection. A full run
//! makes `2 its + 2` passes over the matrix, plus one for column means when
//! column centering is requested.
//!
//! Linear algebra here is `f64` only, matching the on-disk element type.

mod format;
mod stream;

pub use format::{
    csv_to_binary, read_binary_file, read_csv, read_csv_from, write_binary, write_binary_file,
    write_csv, write_header, OnDiskMatrix, HEADER_BYTES,
};
pub use stream::{
    power_iteration, stream_matmul_left_transpose, stream_matmul_right, BlockStreamer, DiskSource,
    MemorySource, PreprocessSpec, RowSource, StreamStats, STAGING_BYTES,
};

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::scalar::Scalar;

pub const DEFAULT_MEM_BUDGET: u64 = 256 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaConfig {
    pub k: usize,
    /// Oversampled width, defaults to `k + 2`.
    pub l: Option<usize>,
    pub its: usize,
    pub mem_budget_bytes: u64,
    /// Overrides the block size derived from the memory budget.
    pub block_rows: Option<usize>,
    pub seed: u64,
}

impl PcaConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            l: None,
            its: 2,
            mem_budget_bytes: DEFAULT_MEM_BUDGET,
            block_rows: None,
            seed: 0,
        }
    }

    pub fn width(&self) -> usize {
        self.l.unwrap_or(self.k + 2)
    }

    fn validate(&self, m: usize, n: usize) -> Result<()> {
        let l = self.width();
        let cap = m.min(n);
        if self.k == 0 {
            return Err(Error::invalid("k", "must be at least 1"));
        }
        if self.k >= cap {
            return Err(Error::invalid("k", format!("must be below min(m, n) = {cap}, got {}", self.k)));
        }
        if l < self.k || l >= cap {
            return Err(Error::invalid(
                "l",
                format!("need k <= l < min(m, n) = {cap}, got l = {l} with k = {}", self.k),
            ));
        }
        Ok(())
    }

    fn resolve_block_rows(&self, m: usize, n: usize) -> Result<usize> {
        match self.block_rows {
            Some(0) => Err(Error::invalid("block_rows", "must be at least 1")),
            Some(b) => Ok(b.min(m)),
            None => compute_block_rows(self.mem_budget_bytes, n, m),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    /// `m x k`, orthonormal columns.
    pub u: DenseMatrix<f64>,
    /// Descending singular values.
    pub s: Vec<f64>,
    /// `n x k`, orthonormal columns.
    pub v: DenseMatrix<f64>,
    pub stats: StreamStats,
    pub block_rows: usize,
}

/// Rows of `n` doubles fitting in `mem_budget` bytes, at least 1 and at most
/// `m`.
pub fn compute_block_rows(mem_budget: u64, n: usize, m: usize) -> Result<usize> {
    let row_bytes = 8 * n as u64;
    if n == 0 {
        return Err(Error::invalid("n", "matrix has no columns"));
    }
    if mem_budget < row_bytes {
        return Err(Error::invalid(
            "mem",
            format!("budget of {mem_budget} bytes is below one row ({row_bytes} bytes)"),
        ));
    }
    Ok(((mem_budget / row_bytes) as usize).clamp(1, m.max(1)))
}

fn to_nalgebra(a: &DenseMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(a.nrows(), a.ncols(), a.as_slice())
}

fn from_nalgebra(a: &DMatrix<f64>) -> DenseMatrix<f64> {
    DenseMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

/// `P^T L` from the partially pivoted factorization `P Y = L U`.
///
/// Numerically rank-deficient input (a pivot at rounding level) is perturbed
/// by `1e-12 max|Y|` on its diagonal and refactored.
pub fn lu_renormalize(y: &DenseMatrix<f64>) -> Result<DenseMatrix<f64>> {
    let (m, l) = y.shape();
    if l > m {
        return Err(Error::shape("lu_renormalize", format!("at most {m} columns"), l));
    }
    if !y.is_finite() {
        return Err(Error::NonFinite("LU input".into()));
    }
    let scale = y.as_slice().iter().fold(0.0f64, |a, &x| a.max(x.abs()));
    let threshold = scale * f64::EPSILON * (l.max(1) as f64);
    let factor = |a: DMatrix<f64>| {
        let lu = a.lu();
        let u = lu.u();
        let deficient = (0..l).any(|j| !(u[(j, j)].abs() > threshold));
        let mut lower = lu.l();
        lu.p().inv_permute_rows(&mut lower);
        (lower, deficient)
    };
    let (lower, deficient) = factor(to_nalgebra(y));
    if !deficient {
        return Ok(from_nalgebra(&lower));
    }
    log::warn!("LU renormalization: sample matrix is rank deficient, adding diagonal jitter");
    let jitter = 1e-12 * if scale > 0.0 { scale } else { 1.0 };
    let mut a = to_nalgebra(y);
    for j in 0..l {
        a[(j, j)] += jitter;
    }
    let (lower, _) = factor(a);
    let out = from_nalgebra(&lower);
    if !out.is_finite() {
        return Err(Error::NonFinite("LU factor after jitter".into()));
    }
    Ok(out)
}

fn uniform_omega(n: usize, l: usize, seed: u64) -> DenseMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DenseMatrix::from_fn(n, l, |_, _| rng.random_range(-1.0..=1.0))
}

/// Randomized PCA over any row source.
pub fn oocpca_stream<S: RowSource>(mut a: BlockStreamer<S>, config: &PcaConfig) -> Result<PcaResult> {
    let (m, n) = (a.nrows(), a.ncols());
    config.validate(m, n)?;
    let (k, l) = (config.k, config.width());

    let omega = uniform_omega(n, l, config.seed);
    let mut y = stream_matmul_right(&mut a, &omega)?;
    if config.its > 0 {
        let mut lmat = lu_renormalize(&y)?;
        for i in 1..=config.its {
            y = power_iteration(&mut a, &lmat)?;
            if i < config.its {
                lmat = lu_renormalize(&y)?;
            }
        }
    }
    let q = to_nalgebra(&y).qr().q();
    // Q^T A is l x n; stream its transpose A^T Q and factor that
    let w = to_nalgebra(&stream_matmul_left_transpose(&mut a, &from_nalgebra(&q))?);
    let svd = w.svd(true, true);
    let (uw, vw_t) = (svd.u.expect("requested U"), svd.v_t.expect("requested V^T"));
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    order.truncate(k);

    // W = Uw S Vw^T, so Q^T A = Vw S Uw^T: U' = Vw and V = Uw
    let mut u_small = DMatrix::zeros(l, k);
    let mut v = DenseMatrix::zeros(n, k);
    let mut s = Vec::with_capacity(k);
    for (c, &o) in order.iter().enumerate() {
        s.push(svd.singular_values[o]);
        for r in 0..l {
            u_small[(r, c)] = vw_t[(o, r)];
        }
        for r in 0..n {
            v.set(r, c, uw[(r, o)]);
        }
    }
    let u = from_nalgebra(&(q * u_small));
    Ok(PcaResult {
        u,
        s,
        v,
        stats: a.stats(),
        block_rows: a.block_rows(),
    })
}

/// Randomized PCA of a binary matrix file.
pub fn oocpca(path: impl AsRef<Path>, config: &PcaConfig, pre: PreprocessSpec) -> Result<PcaResult> {
    let meta = OnDiskMatrix::open(path)?;
    let b = config.resolve_block_rows(meta.nrows(), meta.ncols())?;
    let streamer = BlockStreamer::new(DiskSource::open(meta)?, b, pre)?;
    oocpca_stream(streamer, config)
}

/// The same algorithm on an in-memory matrix.
pub fn oocpca_in_memory(a: &DenseMatrix<f64>, config: &PcaConfig, pre: PreprocessSpec) -> Result<PcaResult> {
    let b = config.resolve_block_rows(a.nrows(), a.ncols())?;
    let streamer = BlockStreamer::new(MemorySource::new(a), b, pre)?;
    oocpca_stream(streamer, config)
}

/// Column-centered principal component scores `U S` (`m x k`).
pub fn pca_scores<T: Scalar>(data: &DenseMatrix<T>, k: usize, seed: u64) -> Result<DenseMatrix<T>> {
    let a = data.map(|x| x.as_f64());
    let mut config = PcaConfig::new(k);
    config.seed = seed;
    config.block_rows = Some(a.nrows());
    let pre = PreprocessSpec {
        center_cols: true,
        ..Default::default()
    };
    let r = oocpca_in_memory(&a, &config, pre)?;
    Ok(DenseMatrix::from_fn(a.nrows(), k, |i, j| T::of(r.u.get(i, j) * r.s[j])))
}

/// Flips columns of `other` so each has a nonnegative inner product with the
/// matching column of `reference` in U (V follows).
pub fn align_signs(reference: &PcaResult, other: &mut PcaResult) {
    for c in 0..reference.u.ncols().min(other.u.ncols()) {
        let dot: f64 = (0..reference.u.nrows())
            .map(|r| reference.u.get(r, c) * other.u.get(r, c))
            .sum();
        if dot < 0.0 {
            for r in 0..other.u.nrows() {
                other.u.set(r, c, -other.u.get(r, c));
            }
            for r in 0..other.v.nrows() {
                other.v.set(r, c, -other.v.get(r, c));
            }
        }
    }
}
