//! Fast evaluation of `phi(y_i) = sum_j K(y_i, y_j) q_j` for the two t-SNE
//! kernels, in 1D and 2D.
//!
//! The scheme interpolates the kernel with piecewise Lagrange polynomials on
//! an equispaced grid: charges are spread onto the grid nodes, convolved with
//! the kernel through an FFT of the circulant embedding, and gathered back to
//! the points. Cost is `O(N p^s + (N_int p)^s log(N_int p))`.

mod grid;
mod interp;
mod lagrange;
mod toeplitz;

pub use grid::{make_grid, ChargeGridCoeffs, InterpGrid, GRID_PADDING};
pub use interp::{gather_potentials, spread_charges, Stencils};
pub use lagrange::{lagrange_weights, LagrangeBasis};
pub use toeplitz::{kernel_matvec_fft, CirculantFft};

use rayon::prelude::*;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Translation-invariant kernels of the embedding space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kernel {
    /// `1 / (1 + |y - z|^2)`
    Cauchy,
    /// `1 / (1 + |y - z|^2)^2`
    CauchySquared,
}

impl Kernel {
    #[inline]
    pub fn eval<T: Scalar>(self, squared_distance: T) -> T {
        let k = (T::one() + squared_distance).recip();
        match self {
            Kernel::Cauchy => k,
            Kernel::CauchySquared => k * k,
        }
    }
}

pub fn kernel_eval<T: Scalar>(kernel: Kernel, squared_distance: T) -> T {
    kernel.eval(squared_distance)
}

/// Interpolation accuracy knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NbodyParams {
    pub min_intervals: usize,
    pub points_per_interval: usize,
}

impl Default for NbodyParams {
    fn default() -> Self {
        Self {
            min_intervals: 20,
            points_per_interval: 3,
        }
    }
}

fn check_points<T: Scalar>(points: &[T], dims: usize, charges: &[T]) -> Result<usize> {
    if dims != 1 && dims != 2 {
        return Err(Error::invalid("dims", format!("must be 1 or 2, got {dims}")));
    }
    if points.len() % dims != 0 {
        return Err(Error::shape("points", format!("multiple of {dims}"), points.len()));
    }
    let n = points.len() / dims;
    if charges.len() != n {
        return Err(Error::shape("charges", n, charges.len()));
    }
    Ok(n)
}

/// Interpolation-based evaluation of the kernel sum at every point.
///
/// With `include_self == false` the self term `K(y_i, y_i) q_i = q_i` is
/// subtracted afterwards.
pub fn evaluate_nbody<T: Scalar>(
    points: &[T],
    dims: usize,
    charges: &[T],
    kernel: Kernel,
    params: NbodyParams,
    include_self: bool,
) -> Result<Vec<T>> {
    let n = check_points(points, dims, charges)?;
    if n == 0 {
        return Err(Error::EmptyInput("points"));
    }
    let grid = make_grid(points, dims, params.min_intervals, params.points_per_interval)?;
    let stencils = Stencils::build(&grid, points)?;
    let w = stencils.spread(&[charges])?.pop().expect("one term");
    let mut planner = FftPlanner::new();
    let fft = CirculantFft::new(&grid, &mut planner);
    let v = fft.apply(&fft.kernel_spectrum(kernel), &w);
    let mut phi = stencils.gather(&v)?;
    if !include_self {
        for (p, &q) in phi.iter_mut().zip(charges) {
            *p -= q;
        }
    }
    Ok(phi)
}

/// Exact `O(N^2)` evaluation of the kernel sum.
pub fn brute_force_nbody<T: Scalar>(
    points: &[T],
    dims: usize,
    charges: &[T],
    kernel: Kernel,
    include_self: bool,
) -> Result<Vec<T>> {
    let n = check_points(points, dims, charges)?;
    let out = (0..n)
        .into_par_iter()
        .map(|i| {
            let yi = &points[i * dims..(i + 1) * dims];
            let mut acc = T::zero();
            for j in 0..n {
                if j == i && !include_self {
                    continue;
                }
                let yj = &points[j * dims..(j + 1) * dims];
                let d2 = yi
                    .iter()
                    .zip(yj)
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum::<T>();
                acc += kernel.eval(d2) * charges[j];
            }
            acc
        })
        .collect();
    Ok(out)
}
