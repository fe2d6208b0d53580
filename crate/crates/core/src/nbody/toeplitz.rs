//! Kernel matvecs on the interpolation nodes.
//!
//! On equispaced nodes a translation-invariant kernel gives a Toeplitz matrix
//! (block Toeplitz with Toeplitz blocks in 2D). It is embedded in a circulant
//! of twice the size per dimension and applied with FFTs. The embedded kernel
//! is even, so its spectrum is real, and two real coefficient vectors can be
//! convolved in one complex transform (real and imaginary lanes).

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::grid::{ChargeGridCoeffs, InterpGrid};
use super::Kernel;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Circulant FFT machinery for one grid size.
pub struct CirculantFft<T: Scalar> {
    dims: usize,
    /// nodes per dimension
    n: usize,
    spacing: T,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
}

impl<T: Scalar> CirculantFft<T> {
    pub fn new(grid: &InterpGrid<T>, planner: &mut FftPlanner<T>) -> Self {
        let n = grid.nodes_per_dim();
        Self {
            dims: grid.dims(),
            n,
            spacing: grid.spacing(),
            forward: planner.plan_fft_forward(2 * n),
            inverse: planner.plan_fft_inverse(2 * n),
        }
    }

    #[inline]
    fn embedded_len(&self) -> usize {
        (2 * self.n).pow(self.dims as u32)
    }

    fn node_count(&self) -> usize {
        self.n.pow(self.dims as u32)
    }

    /// Real spectrum of the circulant embedding of `kernel` on this grid.
    pub fn kernel_spectrum(&self, kernel: Kernel) -> Vec<T> {
        let n = self.n;
        let m = 2 * n;
        // circulant offset for each embedded index; index n is never read by
        // the Toeplitz product and is set to zero
        let offset = |i: usize| -> Option<T> {
            match i {
                i if i < n => Some(T::of_usize(i) * self.spacing),
                i if i == n => None,
                i => Some(T::of_usize(m - i) * self.spacing),
            }
        };
        let mut buf = vec![Complex::new(T::zero(), T::zero()); self.embedded_len()];
        if self.dims == 1 {
            for (i, c) in buf.iter_mut().enumerate() {
                if let Some(d) = offset(i) {
                    c.re = kernel.eval(d * d);
                }
            }
            self.forward.process(&mut buf);
        } else {
            for a in 0..m {
                let Some(da) = offset(a) else { continue };
                for b in 0..m {
                    let Some(db) = offset(b) else { continue };
                    buf[a * m + b].re = kernel.eval(da * da + db * db);
                }
            }
            self.forward.process(&mut buf);
            transpose_square(&mut buf, m);
            self.forward.process(&mut buf);
        }
        buf.into_iter().map(|c| c.re).collect()
    }

    /// Forward transform of the zero-padded pair `a + i b`.
    pub fn forward(&self, a: &[T], b: Option<&[T]>) -> Vec<Complex<T>> {
        let n = self.n;
        let m = 2 * n;
        debug_assert_eq!(a.len(), self.node_count());
        let mut buf = vec![Complex::new(T::zero(), T::zero()); self.embedded_len()];
        if self.dims == 1 {
            for i in 0..n {
                buf[i] = Complex::new(a[i], b.map_or(T::zero(), |b| b[i]));
            }
            self.forward.process(&mut buf);
        } else {
            for r in 0..n {
                for c in 0..n {
                    let k = r * n + c;
                    buf[r * m + c] = Complex::new(a[k], b.map_or(T::zero(), |b| b[k]));
                }
            }
            // rows n..2n are zero and stay zero under the row transform
            self.forward.process(&mut buf[..n * m]);
            transpose_square(&mut buf, m);
            self.forward.process(&mut buf);
        }
        buf
    }

    /// Inverse transform; returns the real and imaginary lanes restricted to
    /// the original nodes. Expects the layout produced by [`Self::forward`].
    pub fn inverse(&self, mut buf: Vec<Complex<T>>) -> (Vec<T>, Vec<T>) {
        let n = self.n;
        let m = 2 * n;
        let scale = T::one() / T::of_usize(self.embedded_len());
        let count = self.node_count();
        let mut re = Vec::with_capacity(count);
        let mut im = Vec::with_capacity(count);
        if self.dims == 1 {
            self.inverse.process(&mut buf);
            for c in &buf[..n] {
                re.push(c.re * scale);
                im.push(c.im * scale);
            }
        } else {
            self.inverse.process(&mut buf);
            transpose_square(&mut buf, m);
            self.inverse.process(&mut buf[..n * m]);
            for r in 0..n {
                for c in &buf[r * m..r * m + n] {
                    re.push(c.re * scale);
                    im.push(c.im * scale);
                }
            }
        }
        (re, im)
    }

    /// Multiplies a forward-transformed buffer by a kernel spectrum.
    pub fn multiply(buf: &[Complex<T>], spectrum: &[T]) -> Vec<Complex<T>> {
        buf.iter().zip(spectrum).map(|(c, &s)| c * s).collect()
    }

    /// `K a` and `K b` for one kernel.
    pub fn apply_pair(&self, spectrum: &[T], a: &[T], b: &[T]) -> (Vec<T>, Vec<T>) {
        let mut buf = self.forward(a, Some(b));
        for (c, &s) in buf.iter_mut().zip(spectrum) {
            *c = *c * s;
        }
        self.inverse(buf)
    }

    pub fn apply(&self, spectrum: &[T], a: &[T]) -> Vec<T> {
        let mut buf = self.forward(a, None);
        for (c, &s) in buf.iter_mut().zip(spectrum) {
            *c = *c * s;
        }
        self.inverse(buf).0
    }

    /// `K1 a` and `K2 a` from a single forward transform of `a`.
    pub fn apply_two_kernels(&self, first: &[T], second: &[T], a: &[T]) -> (Vec<T>, Vec<T>) {
        let fa = self.forward(a, None);
        // both products are transforms of real sequences, so they can share
        // one inverse as the real and imaginary lanes
        let i = Complex::new(T::zero(), T::one());
        let combined: Vec<Complex<T>> = fa
            .iter()
            .zip(first.iter().zip(second))
            .map(|(c, (&s1, &s2))| c * s1 + c * s2 * i)
            .collect();
        self.inverse(combined)
    }
}

fn transpose_square<T: Copy>(buf: &mut [T], m: usize) {
    for r in 0..m {
        for c in (r + 1)..m {
            buf.swap(r * m + c, c * m + r);
        }
    }
}

/// Step 2: `v_i = sum_j K(node_i, node_j) w_j` through the circulant
/// embedding.
pub fn kernel_matvec_fft<T: Scalar>(
    coeffs: &ChargeGridCoeffs<T>,
    kernel: Kernel,
    grid: &InterpGrid<T>,
) -> Result<ChargeGridCoeffs<T>> {
    if coeffs.len() != grid.total_nodes() {
        return Err(Error::shape(
            "kernel_matvec_fft coefficients",
            grid.total_nodes(),
            coeffs.len(),
        ));
    }
    let mut planner = FftPlanner::new();
    let fft = CirculantFft::new(grid, &mut planner);
    let spectrum = fft.kernel_spectrum(kernel);
    Ok(ChargeGridCoeffs {
        values: fft.apply(&spectrum, &coeffs.values),
    })
}
