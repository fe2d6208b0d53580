//! Row-block streaming of a matrix with on-the-fly preprocessing.

use std::fs::File;
use std::io::{Read, Seek, SeekFrom};

use super::format::{OnDiskMatrix, HEADER_BYTES};
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

/// Bytes decoded per read call from disk; the only buffer besides the block.
pub const STAGING_BYTES: usize = 1 << 16;

/// A matrix readable sequentially by rows, from the top, any number of times.
pub trait RowSource {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    /// Positions the reader at the first row.
    fn rewind(&mut self) -> Result<()>;
    /// Fills `dst` (a whole number of rows) with the next rows.
    fn read_rows(&mut self, dst: &mut [f64]) -> Result<()>;
}

/// Streams an [`OnDiskMatrix`] through a fixed staging buffer.
pub struct DiskSource {
    meta: OnDiskMatrix,
    file: File,
    staging: Vec<u8>,
}

impl DiskSource {
    pub fn open(meta: OnDiskMatrix) -> Result<Self> {
        let file = File::open(meta.path()).map_err(|e| Error::io(meta.path(), e))?;
        Ok(Self {
            meta,
            file,
            staging: vec![0u8; STAGING_BYTES],
        })
    }
}

impl RowSource for DiskSource {
    fn nrows(&self) -> usize {
        self.meta.nrows()
    }

    fn ncols(&self) -> usize {
        self.meta.ncols()
    }

    fn rewind(&mut self) -> Result<()> {
        self.file
            .seek(SeekFrom::Start(HEADER_BYTES))
            .map_err(|e| Error::io(self.meta.path(), e))?;
        Ok(())
    }

    fn read_rows(&mut self, dst: &mut [f64]) -> Result<()> {
        for chunk in dst.chunks_mut(STAGING_BYTES / 8) {
            let bytes = &mut self.staging[..chunk.len() * 8];
            self.file
                .read_exact(bytes)
                .map_err(|e| Error::io(self.meta.path(), e))?;
            for (x, b) in chunk.iter_mut().zip(bytes.chunks_exact(8)) {
                *x = f64::from_le_bytes(b.try_into().unwrap());
            }
        }
        Ok(())
    }
}

/// In-memory matrix behind the same interface.
pub struct MemorySource<'a> {
    data: &'a DenseMatrix<f64>,
    next_row: usize,
}

impl<'a> MemorySource<'a> {
    pub fn new(data: &'a DenseMatrix<f64>) -> Self {
        Self { data, next_row: 0 }
    }
}

impl RowSource for MemorySource<'_> {
    fn nrows(&self) -> usize {
        self.data.nrows()
    }

    fn ncols(&self) -> usize {
        self.data.ncols()
    }

    fn rewind(&mut self) -> Result<()> {
        self.next_row = 0;
        Ok(())
    }

    fn read_rows(&mut self, dst: &mut [f64]) -> Result<()> {
        let n = self.data.ncols();
        let start = self.next_row * n;
        dst.copy_from_slice(&self.data.as_slice()[start..start + dst.len()]);
        self.next_row += dst.len() / n;
        Ok(())
    }
}

/// Streaming preprocessing, applied in this order: `log(1 + x)`, row
/// centering, column centering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PreprocessSpec {
    pub log_transform: bool,
    pub center_rows: bool,
    pub center_cols: bool,
}

/// Counters of one streamer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StreamStats {
    /// Full passes over the matrix.
    pub passes: usize,
    pub blocks: usize,
    pub rows_read: u64,
    /// Largest block buffer held at once, in bytes.
    pub peak_block_bytes: usize,
}

/// Drives passes over a [`RowSource`] in blocks of `block_rows` rows.
///
/// The block buffer is the only storage for the matrix: it holds at most
/// `block_rows * n` values. Column centering is never applied to the block;
/// the streaming products subtract the rank-one mean term instead.
pub struct BlockStreamer<S: RowSource> {
    source: S,
    block_rows: usize,
    pre: PreprocessSpec,
    col_means: Option<Vec<f64>>,
    stats: StreamStats,
    block: Vec<f64>,
}

impl<S: RowSource> BlockStreamer<S> {
    pub fn new(source: S, block_rows: usize, pre: PreprocessSpec) -> Result<Self> {
        if block_rows == 0 {
            return Err(Error::invalid("block_rows", "must be at least 1"));
        }
        let (m, n) = (source.nrows(), source.ncols());
        if m == 0 || n == 0 {
            return Err(Error::EmptyInput("matrix"));
        }
        let block_rows = block_rows.min(m);
        let mut s = Self {
            source,
            block_rows,
            pre,
            col_means: None,
            stats: StreamStats::default(),
            block: Vec::new(),
        };
        if pre.center_cols {
            let mut sums = vec![0.0; n];
            s.pass(&mut |_, rows, block| {
                for r in 0..rows {
                    for (acc, &x) in sums.iter_mut().zip(&block[r * n..(r + 1) * n]) {
                        *acc += x;
                    }
                }
                Ok(())
            })?;
            let inv = 1.0 / m as f64;
            s.col_means = Some(sums.into_iter().map(|x| x * inv).collect());
        }
        Ok(s)
    }

    pub fn nrows(&self) -> usize {
        self.source.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.source.ncols()
    }

    pub fn block_rows(&self) -> usize {
        self.block_rows
    }

    pub fn stats(&self) -> StreamStats {
        self.stats
    }

    /// Column means subtracted algebraically, when column centering is on.
    pub fn col_means(&self) -> Option<&[f64]> {
        self.col_means.as_deref()
    }

    /// One full pass; `f(first_row, rows, block)` sees each preprocessed
    /// block in order (without column centering).
    pub fn pass(&mut self, f: &mut dyn FnMut(usize, usize, &[f64]) -> Result<()>) -> Result<()> {
        let (m, n) = (self.nrows(), self.ncols());
        if self.block.is_empty() {
            self.block = vec![0.0; self.block_rows * n];
        }
        self.stats.peak_block_bytes = self
            .stats
            .peak_block_bytes
            .max(self.block.len() * std::mem::size_of::<f64>());
        self.source.rewind()?;
        let mut start = 0;
        while start < m {
            let rows = self.block_rows.min(m - start);
            let block = &mut self.block[..rows * n];
            self.source.read_rows(block)?;
            if self.pre.log_transform {
                for x in block.iter_mut() {
                    *x = x.ln_1p();
                }
            }
            if self.pre.center_rows {
                for row in block.chunks_mut(n) {
                    let mean = row.iter().sum::<f64>() / n as f64;
                    row.iter_mut().for_each(|x| *x -= mean);
                }
            }
            if let Some(bad) = block.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "matrix entry ({}, {}) after preprocessing",
                    start + bad / n,
                    bad % n
                )));
            }
            f(start, rows, block)?;
            self.stats.blocks += 1;
            self.stats.rows_read += rows as u64;
            start += rows;
        }
        self.stats.passes += 1;
        Ok(())
    }
}

/// `C = alpha * A * B + beta * C` on row-major or strided storage.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above keep every strided access in bounds
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `A B` for `B` of size `n x l`, filling the output one block of rows at a
/// time.
pub fn stream_matmul_right<S: RowSource>(
    a: &mut BlockStreamer<S>,
    b: &DenseMatrix<f64>,
) -> Result<DenseMatrix<f64>> {
    let (m, n) = (a.nrows(), a.ncols());
    if b.nrows() != n {
        return Err(Error::shape("stream_matmul_right operand rows", n, b.nrows()));
    }
    let l = b.ncols();
    let mut out = DenseMatrix::zeros(m, l);
    {
        let dst = out.as_mut_slice();
        a.pass(&mut |start, rows, block| {
            gemm(
                rows,
                n,
                l,
                block,
                (n, 1),
                b.as_slice(),
                (l, 1),
                0.0,
                &mut dst[start * l..(start + rows) * l],
            );
            Ok(())
        })?;
    }
    if let Some(mu) = a.col_means() {
        // (A - 1 mu^T) B = A B - 1 (mu^T B)
        let mut mu_b = vec![0.0; l];
        for (r, &mu_r) in mu.iter().enumerate() {
            for (acc, &x) in mu_b.iter_mut().zip(b.row(r)) {
                *acc += mu_r * x;
            }
        }
        for row in out.as_mut_slice().chunks_mut(l) {
            row.iter_mut().zip(&mu_b).for_each(|(x, &c)| *x -= c);
        }
    }
    Ok(out)
}

/// `A^T L` for `L` of size `m x l`, accumulated over blocks.
pub fn stream_matmul_left_transpose<S: RowSource>(
    a: &mut BlockStreamer<S>,
    lmat: &DenseMatrix<f64>,
) -> Result<DenseMatrix<f64>> {
    let (m, n) = (a.nrows(), a.ncols());
    if lmat.nrows() != m {
        return Err(Error::shape("stream_matmul_left_transpose operand rows", m, lmat.nrows()));
    }
    let l = lmat.ncols();
    let mut out = DenseMatrix::zeros(n, l);
    {
        let dst = out.as_mut_slice();
        a.pass(&mut |start, rows, block| {
            // block^T is n x rows with strides (1, n)
            gemm(
                n,
                rows,
                l,
                block,
                (1, n),
                &lmat.as_slice()[start * l..(start + rows) * l],
                (l, 1),
                1.0,
                dst,
            );
            Ok(())
        })?;
    }
    if let Some(mu) = a.col_means() {
        // (A - 1 mu^T)^T L = A^T L - mu (1^T L)
        let mut col_sums = vec![0.0; l];
        for row in lmat.rows_iter() {
            col_sums.iter_mut().zip(row).for_each(|(acc, &x)| *acc += x);
        }
        for (r, &mu_r) in mu.iter().enumerate() {
            out.row_mut(r)
                .iter_mut()
                .zip(&col_sums)
                .for_each(|(x, &c)| *x -= mu_r * c);
        }
    }
    Ok(out)
}

/// `A (A^T L)`: two passes, no renormalization in between.
pub fn power_iteration<S: RowSource>(
    a: &mut BlockStreamer<S>,
    l_prev: &DenseMatrix<f64>,
) -> Result<DenseMatrix<f64>> {
    let z = stream_matmul_left_transpose(a, l_prev)?;
    stream_matmul_right(a, &z)
}
