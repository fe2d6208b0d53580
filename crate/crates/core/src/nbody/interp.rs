//! Spreading point charges onto grid nodes and gathering node values back to
//! the points, through the piecewise Lagrange basis of each interval.

use rayon::prelude::*;

use super::grid::{ChargeGridCoeffs, InterpGrid};
use super::lagrange::LagrangeBasis;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Points handled per partial spreading buffer. The chunking depends only on
/// the number of points, so merged sums are identical for any thread count.
const SPREAD_CHUNK: usize = 1 << 15;
const MAX_SPREAD_CHUNKS: usize = 8;

/// Per-point interpolation stencils: the first node index touched in each
/// dimension and the `p` Lagrange weights per dimension.
#[derive(Debug, Clone)]
pub struct Stencils<T> {
    dims: usize,
    p: usize,
    n_nodes: usize,
    starts: Vec<[usize; 2]>,
    weights: Vec<T>,
}

impl<T: Scalar> Stencils<T> {
    pub fn build(grid: &InterpGrid<T>, points: &[T]) -> Result<Self> {
        let dims = grid.dims();
        if points.len() % dims != 0 {
            return Err(Error::shape(
                "interpolation points",
                format!("multiple of {dims}"),
                points.len(),
            ));
        }
        let p = grid.points_per_interval();
        let basis = LagrangeBasis::<T>::unit_spaced(p)?;
        let n = points.len() / dims;
        let mut starts = vec![[0usize; 2]; n];
        let mut weights = vec![T::zero(); n * dims * p];
        let bad = starts
            .par_iter_mut()
            .zip(weights.par_chunks_mut(dims * p))
            .enumerate()
            .find_map_any(|(i, (start, w))| {
                for d in 0..dims {
                    let (interval, u) = match grid.locate(points[i * dims + d], d) {
                        Some(loc) => loc,
                        None => return Some(i),
                    };
                    start[d] = interval * p;
                    basis.weights_into(u, &mut w[d * p..(d + 1) * p]);
                }
                None
            });
        if let Some(index) = bad {
            // report the smallest offending index for a stable message
            let first = (0..n)
                .find(|&i| (0..dims).any(|d| grid.locate(points[i * dims + d], d).is_none()))
                .unwrap_or(index);
            return Err(Error::OutsideGrid { index: first });
        }
        Ok(Self {
            dims,
            p,
            n_nodes: grid.nodes_per_dim(),
            starts,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    #[inline]
    fn point_weights(&self, i: usize) -> &[T] {
        let stride = self.dims * self.p;
        &self.weights[i * stride..(i + 1) * stride]
    }

    fn total_nodes(&self) -> usize {
        self.n_nodes.pow(self.dims as u32)
    }

    fn spread_range(&self, range: std::ops::Range<usize>, charges: &[&[T]], out: &mut [Vec<T>]) {
        let p = self.p;
        let n = self.n_nodes;
        for i in range {
            let start = self.starts[i];
            let w = self.point_weights(i);
            if self.dims == 1 {
                for (term, q) in charges.iter().enumerate() {
                    let qi = q[i];
                    let dst = &mut out[term][start[0]..start[0] + p];
                    for (o, &wa) in dst.iter_mut().zip(w) {
                        *o += wa * qi;
                    }
                }
            } else {
                let (wx, wy) = w.split_at(p);
                for (term, q) in charges.iter().enumerate() {
                    let qi = q[i];
                    for (a, &wa) in wx.iter().enumerate() {
                        let row = (start[0] + a) * n + start[1];
                        let scaled = wa * qi;
                        for (o, &wb) in out[term][row..row + p].iter_mut().zip(wy) {
                            *o += scaled * wb;
                        }
                    }
                }
            }
        }
    }

    /// Spreads several charge vectors at once, sharing the stencils.
    pub fn spread(&self, charges: &[&[T]]) -> Result<Vec<Vec<T>>> {
        let n_points = self.len();
        for q in charges {
            if q.len() != n_points {
                return Err(Error::shape("charges", n_points, q.len()));
            }
        }
        let total = self.total_nodes();
        let n_chunks = n_points.div_ceil(SPREAD_CHUNK).clamp(1, MAX_SPREAD_CHUNKS);
        let chunk = n_points.div_ceil(n_chunks).max(1);
        let partials: Vec<Vec<Vec<T>>> = (0..n_chunks)
            .into_par_iter()
            .map(|c| {
                let mut out = vec![vec![T::zero(); total]; charges.len()];
                let lo = (c * chunk).min(n_points);
                let hi = ((c + 1) * chunk).min(n_points);
                self.spread_range(lo..hi, charges, &mut out);
                out
            })
            .collect();
        let mut iter = partials.into_iter();
        let mut acc = iter.next().unwrap_or_else(|| vec![vec![T::zero(); total]; charges.len()]);
        for part in iter {
            for (a, b) in acc.iter_mut().zip(part) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
        }
        Ok(acc)
    }

    /// Interpolates node values back to every point.
    pub fn gather(&self, values: &[T]) -> Result<Vec<T>> {
        let total = self.total_nodes();
        if values.len() != total {
            return Err(Error::shape("grid values", total, values.len()));
        }
        let p = self.p;
        let n = self.n_nodes;
        let out = (0..self.len())
            .into_par_iter()
            .map(|i| {
                let start = self.starts[i];
                let w = self.point_weights(i);
                if self.dims == 1 {
                    w.iter()
                        .zip(&values[start[0]..start[0] + p])
                        .map(|(&a, &v)| a * v)
                        .sum()
                } else {
                    let (wx, wy) = w.split_at(p);
                    let mut acc = T::zero();
                    for (a, &wa) in wx.iter().enumerate() {
                        let row = (start[0] + a) * n + start[1];
                        let mut inner = T::zero();
                        for (&wb, &v) in wy.iter().zip(&values[row..row + p]) {
                            inner += wb * v;
                        }
                        acc += wa * inner;
                    }
                    acc
                }
            })
            .collect();
        Ok(out)
    }
}

/// Step 1: `w_{m,l} = sum over points y_j in interval l of L_m(y_j) q_j`
/// (tensor-product weights in 2D).
pub fn spread_charges<T: Scalar>(
    points: &[T],
    charges: &[T],
    grid: &InterpGrid<T>,
) -> Result<ChargeGridCoeffs<T>> {
    let stencils = Stencils::build(grid, points)?;
    let mut out = stencils.spread(&[charges])?;
    Ok(ChargeGridCoeffs {
        values: out.pop().expect("one term"),
    })
}

/// Step 3: interpolates the node values `v` at each point.
pub fn gather_potentials<T: Scalar>(
    points: &[T],
    values: &ChargeGridCoeffs<T>,
    grid: &InterpGrid<T>,
) -> Result<Vec<T>> {
    Stencils::build(grid, points)?.gather(&values.values)
}
