//! t-SNE gradient descent with exaggeration, momentum and per-coordinate
//! gains.

mod forces;

pub use forces::{
    compute_attractive, compute_repulsive, exact_z, gradient, kl_divergence, kl_divergence_with_z,
    GradientResult, RepulsionMethod, RepulsionWorkspace, RepulsiveResult, EXACT_REPULSION_MAX_N,
    EXACT_Z_MAX_N,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::affinities::{compute_affinities, AffinityConfig, SparseAffinities};
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::nbody::NbodyParams;
use crate::oocpca::pca_scores;
use crate::scalar::Scalar;

/// `N x s` coordinates, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T> {
    n: usize,
    dims: usize,
    coords: Vec<T>,
}

impl<T: Scalar> Embedding<T> {
    pub fn new(n: usize, dims: usize, coords: Vec<T>) -> Result<Self> {
        if dims != 1 && dims != 2 {
            return Err(Error::invalid("dims", format!("must be 1 or 2, got {dims}")));
        }
        if coords.len() != n * dims {
            return Err(Error::shape("embedding coordinates", n * dims, coords.len()));
        }
        if let Some(i) = coords.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("embedding coordinate of point {}", i / dims)));
        }
        Ok(Self { n, dims, coords })
    }

    /// i.i.d. `N(0, sd^2)` coordinates.
    pub fn random_normal(n: usize, dims: usize, sd: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords = (0..n * dims)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::of(z * sd)
            })
            .collect();
        Self::new(n, dims, coords)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn dims(&self) -> usize {
        self.dims
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[T] {
        &self.coords[i * self.dims..(i + 1) * self.dims]
    }

    pub fn coords(&self) -> &[T] {
        &self.coords
    }

    pub fn coords_mut(&mut self) -> &mut [T] {
        &mut self.coords
    }

    pub fn into_matrix(self) -> DenseMatrix<T> {
        DenseMatrix::new(self.n, self.dims, self.coords).expect("consistent shape")
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().all(|x| x.is_finite())
    }
}

/// Multiplier of the attractive force per iteration (0-based).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExaggerationSchedule {
    pub early_coeff: f64,
    /// Early exaggeration applies to iterations `< early_until_iter`.
    pub early_until_iter: usize,
    pub late_coeff: f64,
    /// Late exaggeration applies to iterations `>= late_from_iter`.
    pub late_from_iter: Option<usize>,
}

impl Default for ExaggerationSchedule {
    fn default() -> Self {
        Self {
            early_coeff: 12.0,
            early_until_iter: 250,
            late_coeff: 1.0,
            late_from_iter: None,
        }
    }
}

impl ExaggerationSchedule {
    pub fn alpha(&self, iteration: usize) -> f64 {
        if iteration < self.early_until_iter {
            self.early_coeff
        } else if self.late_from_iter.is_some_and(|l| iteration >= l) {
            self.late_coeff
        } else {
            1.0
        }
    }

    pub fn validate(&self, max_iter: usize) -> Result<()> {
        if !(self.early_coeff >= 1.0) {
            return Err(Error::invalid("early_coeff", "must be >= 1"));
        }
        if !(self.late_coeff >= 1.0) {
            return Err(Error::invalid("late_coeff", "must be >= 1"));
        }
        if self.early_until_iter > max_iter {
            return Err(Error::invalid("early_until_iter", "exceeds the iteration count"));
        }
        if let Some(l) = self.late_from_iter {
            if l < self.early_until_iter || l > max_iter {
                return Err(Error::invalid(
                    "late_from_iter",
                    format!("must lie in [{}, {max_iter}], got {l}", self.early_until_iter),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentumSchedule {
    pub initial: f64,
    pub r#final: f64,
    /// First iteration using the final momentum.
    pub switch_iter: usize,
}

impl Default for MomentumSchedule {
    fn default() -> Self {
        Self {
            initial: 0.5,
            r#final: 0.8,
            switch_iter: 250,
        }
    }
}

impl MomentumSchedule {
    pub fn at(&self, iteration: usize) -> f64 {
        if iteration < self.switch_iter {
            self.initial
        } else {
            self.r#final
        }
    }
}

pub const MIN_GAIN: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub iteration: usize,
    pub velocity: Vec<T>,
    pub gains: Vec<T>,
    pub learning_rate: T,
    pub momentum: MomentumSchedule,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(len: usize, learning_rate: f64, momentum: MomentumSchedule) -> Self {
        Self {
            iteration: 0,
            velocity: vec![T::zero(); len],
            gains: vec![T::one(); len],
            learning_rate: T::of(learning_rate),
            momentum,
        }
    }
}

/// One gains/momentum update of `y`.
///
/// A gain moves to `0.8 g` when the gradient and the previous velocity have
/// the same sign and to `g + 0.2` when they differ; a component whose
/// velocity is still exactly zero keeps its gain.
pub fn step<T: Scalar>(state: &mut OptimizerState<T>, y: &mut Embedding<T>, grad: &[T]) -> Result<()> {
    let len = y.coords.len();
    if grad.len() != len || state.velocity.len() != len || state.gains.len() != len {
        return Err(Error::shape("optimizer step", len, grad.len()));
    }
    if let Some(c) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient component {c} (point {}) at iteration {}",
            c / y.dims,
            state.iteration
        )));
    }
    let momentum = T::of(state.momentum.at(state.iteration));
    let (up, down, floor) = (T::of(0.2), T::of(0.8), T::of(MIN_GAIN));
    for c in 0..len {
        let v = state.velocity[c];
        let g = grad[c];
        let gain = &mut state.gains[c];
        if v != T::zero() {
            if (g > T::zero()) == (v > T::zero()) && g != T::zero() {
                *gain *= down;
            } else {
                *gain += up;
            }
        }
        *gain = gain.max(floor);
        let nv = momentum * v - state.learning_rate * *gain * g;
        state.velocity[c] = nv;
        y.coords[c] += nv;
    }
    state.iteration += 1;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneConfig {
    pub dims: usize,
    pub max_iter: usize,
    pub learning_rate: f64,
    pub momentum: MomentumSchedule,
    pub exaggeration: ExaggerationSchedule,
    pub affinity: AffinityConfig,
    /// Project the data onto this many principal components first.
    pub pca_dims: Option<usize>,
    pub nbody: NbodyParams,
    pub repulsion: RepulsionMethod,
    pub seed: u64,
    pub init_sd: f64,
    /// Record the KL divergence every this many iterations (0 disables).
    pub kl_every: usize,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            dims: 2,
            max_iter: 1000,
            learning_rate: 200.0,
            momentum: MomentumSchedule::default(),
            exaggeration: ExaggerationSchedule::default(),
            affinity: AffinityConfig::default(),
            pca_dims: None,
            nbody: NbodyParams::default(),
            repulsion: RepulsionMethod::Auto,
            seed: 0,
            init_sd: 1e-4,
            kl_every: 1,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims != 1 && self.dims != 2 {
            return Err(Error::invalid("dims", format!("must be 1 or 2, got {}", self.dims)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate", "must be positive"));
        }
        if !(self.init_sd > 0.0) {
            return Err(Error::invalid("init_sd", "must be positive"));
        }
        if self.nbody.points_per_interval < 2 || self.nbody.min_intervals == 0 {
            return Err(Error::invalid("nbody", "need >= 2 points per interval and >= 1 interval"));
        }
        self.exaggeration.validate(self.max_iter)
    }
}

/// What one iteration did, measured before its update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationReport<T> {
    pub iteration: usize,
    pub alpha: f64,
    pub z: T,
    pub kl: Option<T>,
}

/// Iterative driver over fixed affinities.
#[derive(Debug)]
pub struct TsneOptimizer<T: Scalar> {
    p: SparseAffinities<T>,
    y: Embedding<T>,
    state: OptimizerState<T>,
    config: TsneConfig,
    ws: RepulsionWorkspace<T>,
}

impl<T: Scalar> TsneOptimizer<T> {
    pub fn new(p: SparseAffinities<T>, init: Embedding<T>, config: TsneConfig) -> Result<Self> {
        config.validate()?;
        if p.n() != init.n() {
            return Err(Error::shape("initial embedding", p.n(), init.n()));
        }
        if init.dims() != config.dims {
            return Err(Error::shape("initial embedding dims", config.dims, init.dims()));
        }
        if p.n() < 2 {
            return Err(Error::invalid("input", "at least two points are required"));
        }
        let state = OptimizerState::new(init.coords.len(), config.learning_rate, config.momentum);
        Ok(Self {
            p,
            y: init,
            state,
            config,
            ws: RepulsionWorkspace::default(),
        })
    }

    pub fn iteration(&self) -> usize {
        self.state.iteration
    }

    pub fn embedding(&self) -> &Embedding<T> {
        &self.y
    }

    pub fn affinities(&self) -> &SparseAffinities<T> {
        &self.p
    }

    pub fn state(&self) -> &OptimizerState<T> {
        &self.state
    }

    /// Gradient of the current embedding at the current iteration's
    /// exaggeration.
    pub fn current_gradient(&mut self) -> Result<GradientResult<T>> {
        let alpha = self.config.exaggeration.alpha(self.state.iteration);
        gradient(
            &self.p,
            &self.y,
            T::of(alpha),
            self.config.nbody,
            self.config.repulsion,
            &mut self.ws,
        )
    }

    pub fn step(&mut self) -> Result<IterationReport<T>> {
        let iteration = self.state.iteration;
        let alpha = self.config.exaggeration.alpha(iteration);
        let g = self.current_gradient()?;
        let kl = if self.config.kl_every > 0 && iteration % self.config.kl_every == 0 {
            Some(kl_divergence_with_z(&self.p, &self.y, g.repulsive.z)?)
        } else {
            None
        };
        step(&mut self.state, &mut self.y, &g.gradient)?;
        if !self.y.is_finite() {
            return Err(Error::NonFinite(format!("embedding diverged at iteration {iteration}")));
        }
        Ok(IterationReport {
            iteration,
            alpha,
            z: g.repulsive.z,
            kl,
        })
    }

    pub fn into_embedding(self) -> Embedding<T> {
        self.y
    }
}

pub enum TsneInput<'a, T> {
    Data(&'a DenseMatrix<T>),
    Affinities(SparseAffinities<T>),
}

#[derive(Debug, Clone)]
pub struct TsneResult<T> {
    pub embedding: Embedding<T>,
    /// `(iteration, KL)` using each iteration's normalization Z.
    pub kl_log: Vec<(usize, T)>,
}

/// Full pipeline: optional PCA, affinities, seeded initialization and
/// `max_iter` iterations.
pub fn run_tsne<T: Scalar>(input: TsneInput<'_, T>, config: &TsneConfig) -> Result<TsneResult<T>> {
    config.validate()?;
    let p = match input {
        TsneInput::Affinities(p) => p,
        TsneInput::Data(data) => {
            let reduced;
            let data = match config.pca_dims {
                Some(k) if k < data.ncols() => {
                    reduced = pca_scores(data, k, config.seed)?;
                    &reduced
                }
                _ => data,
            };
            let mut affinity = config.affinity.clone();
            affinity.seed = config.seed;
            compute_affinities(data, &affinity)?.p
        }
    };
    let init = Embedding::random_normal(p.n(), config.dims, config.init_sd, config.seed)?;
    let mut opt = TsneOptimizer::new(p, init, config.clone())?;
    let mut kl_log = Vec::new();
    for _ in 0..config.max_iter {
        let report = opt.step()?;
        if let Some(kl) = report.kl {
            log::debug!("iteration {}: KL {kl}", report.iteration);
            kl_log.push((report.iteration, kl));
        }
    }
    Ok(TsneResult {
        embedding: opt.into_embedding(),
        kl_log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_d(coords: Vec<f64>) -> Embedding<f64> {
        Embedding::new(coords.len(), 1, coords).unwrap()
    }

    #[test]
    fn zero_gradient_zero_velocity_keeps_position() {
        let mut y = one_d(vec![1.0, -2.0]);
        let mut s = OptimizerState::new(2, 200.0, MomentumSchedule::default());
        step(&mut s, &mut y, &[0.0, 0.0]).unwrap();
        assert_eq!(y.coords(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut y = one_d(vec![1.0, -2.0]);
        let mut s = OptimizerState::new(2, 200.0, MomentumSchedule::default());
        step(&mut s, &mut y, &[0.01, -0.02]).unwrap();
        assert_eq!(y.coords(), &[1.0 - 2.0, -2.0 + 4.0]);
    }

    #[test]
    fn gains_grow_while_descending() {
        let mut y = one_d(vec![0.0]);
        let mut s = OptimizerState::new(1, 1.0, MomentumSchedule::default());
        step(&mut s, &mut y, &[1.0]).unwrap();
        for k in 1..=5 {
            // velocity is negative, gradient positive: opposite signs
            step(&mut s, &mut y, &[1.0]).unwrap();
            assert!((s.gains[0] - (1.0 + 0.2 * k as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn gains_shrink_and_floor() {
        let mut y = one_d(vec![0.0]);
        let mut s = OptimizerState::new(1, 1.0, MomentumSchedule::default());
        s.velocity[0] = 1.0;
        for _ in 0..40 {
            s.velocity[0] = 1.0;
            step(&mut s, &mut y, &[1e-9]).unwrap();
        }
        assert_eq!(s.gains[0], MIN_GAIN);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut y = one_d(vec![0.0]);
        let mut s = OptimizerState::new(1, 200.0, MomentumSchedule::default());
        assert!(matches!(step(&mut s, &mut y, &[f64::NAN]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn momentum_switches() {
        let m = MomentumSchedule::default();
        assert_eq!(m.at(249), 0.5);
        assert_eq!(m.at(250), 0.8);
    }

    #[test]
    fn exaggeration_windows() {
        let s = ExaggerationSchedule {
            late_coeff: 12.0,
            late_from_iter: Some(750),
            ..Default::default()
        };
        assert_eq!(s.alpha(0), 12.0);
        assert_eq!(s.alpha(249), 12.0);
        assert_eq!(s.alpha(250), 1.0);
        assert_eq!(s.alpha(749), 1.0);
        assert_eq!(s.alpha(750), 12.0);
        assert_eq!(s.alpha(999), 12.0);
        assert!(s.validate(1000).is_ok());
        assert!(s.validate(700).is_err());
        let bad = ExaggerationSchedule {
            early_coeff: 0.5,
            ..Default::default()
        };
        assert!(bad.validate(1000).is_err());
    }

    #[test]
    fn two_points_stay_finite_and_apart() {
        let p = SparseAffinities::<f64>::from_pairs(2, vec![(0, 1, 0.5)]).unwrap();
        let res = run_tsne(TsneInput::Affinities(p), &TsneConfig::default()).unwrap();
        let y = &res.embedding;
        assert!(y.is_finite());
        let d2: f64 = (0..2).map(|d| (y.point(0)[d] - y.point(1)[d]).powi(2)).sum();
        assert!(d2 > 1e-12 && d2.is_finite(), "{d2}");
        assert_eq!(res.kl_log.len(), 1000);
    }

    #[test]
    fn embedding_validation() {
        assert!(Embedding::<f64>::new(2, 3, vec![0.0; 6]).is_err());
        assert!(Embedding::<f64>::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Embedding::<f64>::new(1, 1, vec![f64::INFINITY]).is_err());
        let a = Embedding::<f64>::random_normal(100, 2, 1e-4, 3).unwrap();
        let b = Embedding::<f64>::random_normal(100, 2, 1e-4, 3).unwrap();
        assert_eq!(a, b);
        let sd = (a.coords().iter().map(|x| x * x).sum::<f64>() / 200.0).sqrt();
        assert!(sd > 0.5e-4 && sd < 2e-4);
    }
}
