//! Attractive and repulsive forces, the gradient and the KL divergence.
//!
//! Conventions: `q_ij Z = (1 + |y_i - y_j|^2)^-1`, both forces point along
//! `y_i - y_j`, and the gradient is `4 (alpha F_attr - F_rep)`.

use rayon::prelude::*;
use rustfft::FftPlanner;

use super::Embedding;
use crate::affinities::SparseAffinities;
use crate::error::{Error, Result};
use crate::nbody::{make_grid, CirculantFft, Kernel, NbodyParams, Stencils};
use crate::scalar::Scalar;

/// Largest N for which [`RepulsionMethod::Auto`] uses the exact double loop.
pub const EXACT_REPULSION_MAX_N: usize = 1000;

/// Largest N for which [`kl_divergence`] computes Z by the exact double loop.
pub const EXACT_Z_MAX_N: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RepulsionMethod {
    /// Exact for `N <= EXACT_REPULSION_MAX_N`, interpolation above.
    #[default]
    Auto,
    Exact,
    Fft,
}

/// Repulsive forces with their ingredients.
///
/// `h_sums` holds `[h1, h2, h4]` in 1D and `[h1, h2, h3, h4]` in 2D, all
/// excluding the self term: `h1` is the K1 sum with unit charges, `h4` the K2
/// sum with unit charges, and `h2`/`h3` the K2 sums with the coordinates as
/// charges. So `F_rep,i(m) = (y_i(m) h4_i - h_{m+1},i) / Z` with `Z = sum h1`.
#[derive(Debug, Clone, PartialEq)]
pub struct RepulsiveResult<T> {
    pub forces: Vec<T>,
    pub z: T,
    pub h_sums: Vec<Vec<T>>,
}

/// Caches FFT plans across iterations.
pub struct RepulsionWorkspace<T: Scalar> {
    planner: FftPlanner<T>,
}

impl<T: Scalar> Default for RepulsionWorkspace<T> {
    fn default() -> Self {
        Self { planner: FftPlanner::new() }
    }
}

impl<T: Scalar> std::fmt::Debug for RepulsionWorkspace<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("RepulsionWorkspace")
    }
}

#[inline]
fn squared_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// `F_attr,i = sum_j p_ij (1 + |y_i - y_j|^2)^-1 (y_i - y_j)`.
pub fn compute_attractive<T: Scalar>(p: &SparseAffinities<T>, y: &Embedding<T>) -> Result<Vec<T>> {
    if p.n() != y.n() {
        return Err(Error::shape("attractive forces: affinities vs embedding", y.n(), p.n()));
    }
    let s = y.dims();
    let mut out = vec![T::zero(); y.n() * s];
    out.par_chunks_mut(s).enumerate().for_each(|(i, f)| {
        let yi = y.point(i);
        for (j, pij) in p.row(i) {
            let yj = y.point(j);
            let w = pij * (T::one() + squared_dist(yi, yj)).recip();
            for d in 0..s {
                f[d] += w * (yi[d] - yj[d]);
            }
        }
    });
    Ok(out)
}

fn repulsive_exact<T: Scalar>(y: &Embedding<T>) -> RepulsiveResult<T> {
    let n = y.n();
    let s = y.dims();
    // per point: h1, h4, the s coordinate-charge sums, and the s force terms
    let width = 2 + 2 * s;
    let mut acc = vec![T::zero(); n * width];
    acc.par_chunks_mut(width).enumerate().for_each(|(i, a)| {
        let yi = y.point(i);
        for j in 0..n {
            if j == i {
                continue;
            }
            let yj = y.point(j);
            let k1 = (T::one() + squared_dist(yi, yj)).recip();
            let k2 = k1 * k1;
            a[0] += k1;
            a[1] += k2;
            for d in 0..s {
                a[2 + d] += k2 * yj[d];
                a[2 + s + d] += k2 * (yi[d] - yj[d]);
            }
        }
    });
    let h1: Vec<T> = acc.chunks(width).map(|a| a[0]).collect();
    let z: T = h1.iter().copied().sum();
    let mut h_sums = vec![h1];
    for d in 0..s {
        h_sums.push(acc.chunks(width).map(|a| a[2 + d]).collect());
    }
    h_sums.push(acc.chunks(width).map(|a| a[1]).collect());
    let forces = acc
        .chunks(width)
        .flat_map(|a| a[2 + s..2 + 2 * s].iter().map(move |&f| f / z))
        .collect();
    RepulsiveResult { forces, z, h_sums }
}

fn repulsive_fft<T: Scalar>(
    y: &Embedding<T>,
    params: NbodyParams,
    ws: &mut RepulsionWorkspace<T>,
) -> Result<RepulsiveResult<T>> {
    let n = y.n();
    let s = y.dims();
    let coords = y.coords();
    let grid = make_grid(coords, s, params.min_intervals, params.points_per_interval)?;
    let stencils = Stencils::build(&grid, coords)?;
    // coordinate charges relative to the grid center keep the cancellation in
    // y_i h4 - h2 small; the forces are translation invariant
    let center: Vec<T> = (0..s).map(|d| grid.center(d)).collect();
    let ones = vec![T::one(); n];
    let centered: Vec<Vec<T>> = (0..s)
        .map(|d| (0..n).map(|i| coords[i * s + d] - center[d]).collect())
        .collect();
    let mut terms: Vec<&[T]> = vec![&ones];
    terms.extend(centered.iter().map(|c| c.as_slice()));
    let w = stencils.spread(&terms)?;

    let fft = CirculantFft::new(&grid, &mut ws.planner);
    let s1 = fft.kernel_spectrum(Kernel::Cauchy);
    let s2 = fft.kernel_spectrum(Kernel::CauchySquared);
    let (v1, v4) = fft.apply_two_kernels(&s1, &s2, &w[0]);
    let vc: Vec<Vec<T>> = if s == 1 {
        vec![fft.apply(&s2, &w[1])]
    } else {
        let (a, b) = fft.apply_pair(&s2, &w[1], &w[2]);
        vec![a, b]
    };

    let mut h1 = stencils.gather(&v1)?;
    let mut h4 = stencils.gather(&v4)?;
    let mut hc: Vec<Vec<T>> = vc.iter().map(|v| stencils.gather(v)).collect::<Result<_>>()?;
    for i in 0..n {
        h1[i] -= T::one();
        h4[i] -= T::one();
        for d in 0..s {
            hc[d][i] -= centered[d][i];
        }
    }
    let z: T = h1.iter().copied().sum();
    if !(z > T::zero()) {
        return Err(Error::NonFinite(format!("normalization Z = {z}")));
    }
    let mut forces = vec![T::zero(); n * s];
    for i in 0..n {
        for d in 0..s {
            forces[i * s + d] = (centered[d][i] * h4[i] - hc[d][i]) / z;
        }
    }
    let mut h_sums = vec![h1];
    for (d, mut h) in hc.into_iter().enumerate() {
        // back to uncentered charges: sum K2 y_j = sum K2 (y_j - c) + c h4
        for (hi, &h4i) in h.iter_mut().zip(&h4) {
            *hi += center[d] * h4i;
        }
        h_sums.push(h);
    }
    h_sums.push(h4);
    Ok(RepulsiveResult { forces, z, h_sums })
}

/// Repulsive forces `F_rep,i = sum_j q_ij^2 Z (y_i - y_j)`.
pub fn compute_repulsive<T: Scalar>(
    y: &Embedding<T>,
    params: NbodyParams,
    method: RepulsionMethod,
    ws: &mut RepulsionWorkspace<T>,
) -> Result<RepulsiveResult<T>> {
    if y.n() < 2 {
        return Err(Error::invalid("embedding", "repulsion needs at least two points"));
    }
    let exact = match method {
        RepulsionMethod::Exact => true,
        RepulsionMethod::Fft => false,
        RepulsionMethod::Auto => y.n() <= EXACT_REPULSION_MAX_N,
    };
    if exact {
        Ok(repulsive_exact(y))
    } else {
        repulsive_fft(y, params, ws)
    }
}

/// Gradient together with the normalization used to compute it.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientResult<T> {
    pub gradient: Vec<T>,
    pub attractive: Vec<T>,
    pub repulsive: RepulsiveResult<T>,
}

/// Full gradient `4 (alpha F_attr - F_rep)`.
pub fn gradient<T: Scalar>(
    p: &SparseAffinities<T>,
    y: &Embedding<T>,
    alpha: T,
    params: NbodyParams,
    method: RepulsionMethod,
    ws: &mut RepulsionWorkspace<T>,
) -> Result<GradientResult<T>> {
    if !(alpha >= T::one()) {
        return Err(Error::invalid("alpha", format!("exaggeration must be >= 1, got {alpha}")));
    }
    let attractive = compute_attractive(p, y)?;
    let repulsive = compute_repulsive(y, params, method, ws)?;
    let four = T::of(4.0);
    let gradient = attractive
        .iter()
        .zip(&repulsive.forces)
        .map(|(&a, &r)| four * (alpha * a - r))
        .collect();
    Ok(GradientResult {
        gradient,
        attractive,
        repulsive,
    })
}

/// `Z = sum_{k != l} (1 + |y_k - y_l|^2)^-1` by the double loop.
pub fn exact_z<T: Scalar>(y: &Embedding<T>) -> T {
    let n = y.n();
    let partial: Vec<T> = (0..n)
        .into_par_iter()
        .map(|i| {
            let yi = y.point(i);
            ((i + 1)..n)
                .map(|j| (T::one() + squared_dist(yi, y.point(j))).recip())
                .sum::<T>()
        })
        .collect();
    T::of(2.0) * partial.into_iter().sum::<T>()
}

/// `sum_{p_ij != 0} p_ij log(p_ij / q_ij)` for a given `Z`.
pub fn kl_divergence_with_z<T: Scalar>(p: &SparseAffinities<T>, y: &Embedding<T>, z: T) -> Result<T> {
    if p.n() != y.n() {
        return Err(Error::shape("kl divergence: affinities vs embedding", y.n(), p.n()));
    }
    let ln_z = z.ln();
    let sum: T = p
        .pairs()
        .iter()
        .filter(|e| e.2 > T::zero())
        .map(|&(i, j, pij)| {
            let ln_q = -(T::one() + squared_dist(y.point(i), y.point(j))).ln() - ln_z;
            pij * (pij.ln() - ln_q)
        })
        .sum();
    // every stored pair stands for both ordered pairs
    Ok(T::of(2.0) * sum)
}

/// KL divergence of the embedding. Z is exact up to [`EXACT_Z_MAX_N`] points
/// and comes from the interpolated K1 sum above.
pub fn kl_divergence<T: Scalar>(p: &SparseAffinities<T>, y: &Embedding<T>) -> Result<T> {
    if y.n() < 2 {
        return Err(Error::invalid("embedding", "KL divergence needs at least two points"));
    }
    let z = if y.n() <= EXACT_Z_MAX_N {
        exact_z(y)
    } else {
        let ones = vec![T::one(); y.n()];
        crate::nbody::evaluate_nbody(y.coords(), y.dims(), &ones, Kernel::Cauchy, NbodyParams::default(), false)?
            .into_iter()
            .sum()
    };
    kl_divergence_with_z(p, y, z)
}
