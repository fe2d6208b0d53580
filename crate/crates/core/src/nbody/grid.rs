use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Relative padding added around the point bounds so that boundary points
/// are strictly interior.
pub const GRID_PADDING: f64 = 1e-6;

/// Equispaced interpolation grid: `n_intervals` equal intervals per
/// dimension, each carrying `points_per_interval` equispaced nodes. Nodes are
/// also equispaced globally with spacing `spacing`.
///
/// The domain is square in 2D: both dimensions share the same side length and
/// interval count.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpGrid<T> {
    dims: usize,
    lo: [T; 2],
    side: T,
    n_intervals: usize,
    points_per_interval: usize,
    spacing: T,
}

impl<T: Scalar> InterpGrid<T> {
    /// Grid with explicit lower corner and side length.
    pub fn new(
        dims: usize,
        lo: &[T],
        side: T,
        n_intervals: usize,
        points_per_interval: usize,
    ) -> Result<Self> {
        if dims != 1 && dims != 2 {
            return Err(Error::invalid("dims", format!("must be 1 or 2, got {dims}")));
        }
        if lo.len() != dims {
            return Err(Error::shape("InterpGrid::new lower corner", dims, lo.len()));
        }
        if !(side > T::zero()) || !side.is_finite() {
            return Err(Error::invalid("side", "must be positive and finite"));
        }
        if n_intervals == 0 {
            return Err(Error::invalid("n_intervals", "must be at least 1"));
        }
        if points_per_interval < 2 {
            return Err(Error::invalid("points_per_interval", "must be at least 2"));
        }
        let mut lo_arr = [T::zero(); 2];
        lo_arr[..dims].copy_from_slice(lo);
        let spacing = side / T::of_usize(n_intervals * points_per_interval);
        Ok(Self {
            dims,
            lo: lo_arr,
            side,
            n_intervals,
            points_per_interval,
            spacing,
        })
    }

    #[inline]
    pub fn dims(&self) -> usize {
        self.dims
    }

    #[inline]
    pub fn n_intervals(&self) -> usize {
        self.n_intervals
    }

    #[inline]
    pub fn points_per_interval(&self) -> usize {
        self.points_per_interval
    }

    /// Distance between adjacent nodes.
    #[inline]
    pub fn spacing(&self) -> T {
        self.spacing
    }

    #[inline]
    pub fn interval_width(&self) -> T {
        self.side / T::of_usize(self.n_intervals)
    }

    pub fn lo(&self, dim: usize) -> T {
        self.lo[dim]
    }

    pub fn hi(&self, dim: usize) -> T {
        self.lo[dim] + self.side
    }

    pub fn center(&self, dim: usize) -> T {
        self.lo[dim] + self.side * T::of(0.5)
    }

    #[inline]
    pub fn nodes_per_dim(&self) -> usize {
        self.n_intervals * self.points_per_interval
    }

    #[inline]
    pub fn total_nodes(&self) -> usize {
        self.nodes_per_dim().pow(self.dims as u32)
    }

    /// Node coordinates along one dimension.
    pub fn nodes(&self, dim: usize) -> Vec<T> {
        let half = self.spacing * T::of(0.5);
        (0..self.nodes_per_dim())
            .map(|i| self.lo[dim] + half + T::of_usize(i) * self.spacing)
            .collect()
    }

    /// Nodes after mapping the domain affinely onto `[0, 1]`:
    /// `h/2 + (j + l p) h` with `h = 1 / (n_intervals p)`.
    pub fn normalized_nodes(&self) -> Vec<T> {
        let h = T::one() / T::of_usize(self.nodes_per_dim());
        let half = h * T::of(0.5);
        let p = self.points_per_interval;
        let mut out = Vec::with_capacity(self.nodes_per_dim());
        for l in 0..self.n_intervals {
            for j in 0..p {
                out.push(half + T::of_usize(j + l * p) * h);
            }
        }
        out
    }

    /// Interval containing `x` along `dim` and the position of `x` inside
    /// that interval in units of the node spacing (in `[0, p]`).
    #[inline]
    pub fn locate(&self, x: T, dim: usize) -> Option<(usize, T)> {
        let lo = self.lo[dim];
        if !(x >= lo && x <= lo + self.side) {
            return None;
        }
        let t = (x - lo) / self.spacing;
        let p = T::of_usize(self.points_per_interval);
        let interval = (t / p)
            .floor()
            .to_usize()
            .unwrap_or(0)
            .min(self.n_intervals - 1);
        Some((interval, t - T::of_usize(interval) * p))
    }
}

/// Builds the grid covering `points` (row-major, `dims` coordinates each).
///
/// The interval count is `max(min_intervals, ceil(span))` where `span` is the
/// largest coordinate range over the dimensions. Spans below 1 are widened
/// symmetrically to width 1.
pub fn make_grid<T: Scalar>(
    points: &[T],
    dims: usize,
    min_intervals: usize,
    points_per_interval: usize,
) -> Result<InterpGrid<T>> {
    if dims != 1 && dims != 2 {
        return Err(Error::invalid("dims", format!("must be 1 or 2, got {dims}")));
    }
    if points.is_empty() {
        return Err(Error::EmptyInput("points"));
    }
    if points.len() % dims != 0 {
        return Err(Error::shape(
            "make_grid points",
            format!("multiple of {dims}"),
            points.len(),
        ));
    }
    if min_intervals == 0 {
        return Err(Error::invalid("min_intervals", "must be at least 1"));
    }
    let mut min = [T::infinity(); 2];
    let mut max = [T::neg_infinity(); 2];
    for (i, &x) in points.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("coordinate of point {}", i / dims)));
        }
        let d = i % dims;
        min[d] = min[d].min(x);
        max[d] = max[d].max(x);
    }
    let span = (0..dims)
        .map(|d| max[d] - min[d])
        .fold(T::one(), T::max);
    let n_intervals = span
        .ceil()
        .to_usize()
        .unwrap_or(min_intervals)
        .max(min_intervals);

    let pad = span * T::of(GRID_PADDING);
    let side = span + pad + pad;
    let half = T::of(0.5);
    let lo: Vec<T> = (0..dims)
        .map(|d| (min[d] + max[d]) * half - side * half)
        .collect();
    InterpGrid::new(dims, &lo, side, n_intervals, points_per_interval)
}

/// Coefficients living on the nodes of a grid (`w` before the convolution,
/// `v` after it), flattened row-major with the first dimension slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct ChargeGridCoeffs<T> {
    pub values: Vec<T>,
}

impl<T: Scalar> ChargeGridCoeffs<T> {
    pub fn new(grid: &InterpGrid<T>, values: Vec<T>) -> Result<Self> {
        if values.len() != grid.total_nodes() {
            return Err(Error::shape(
                "grid coefficients",
                grid.total_nodes(),
                values.len(),
            ));
        }
        Ok(Self { values })
    }

    pub fn zeros(grid: &InterpGrid<T>) -> Self {
        Self {
            values: vec![T::zero(); grid.total_nodes()],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}
