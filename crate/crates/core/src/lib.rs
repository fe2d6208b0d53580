//! t-SNE with FFT-accelerated interpolation of the repulsive forces,
//! approximate-neighbor affinities, 1D-embedding heatmaps and out-of-core
//! randomized PCA.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision.

pub mod affinities;
pub mod cli;
pub mod error;
pub mod heatmap;
pub mod matrix;
pub mod nbody;
pub mod oocpca;
pub mod optimizer;
pub mod scalar;

pub use error::{Error, Result};
pub use matrix::DenseMatrix;
pub use scalar::Scalar;

pub type DenseMatrix64 = DenseMatrix<f64>;
pub type DenseMatrix32 = DenseMatrix<f32>;
pub type Embedding64 = optimizer::Embedding<f64>;
pub type Embedding32 = optimizer::Embedding<f32>;
pub type SparseAffinities64 = affinities::SparseAffinities<f64>;
pub type SparseAffinities32 = affinities::SparseAffinities<f32>;
pub type InterpGrid64 = nbody::InterpGrid<f64>;
pub type InterpGrid32 = nbody::InterpGrid<f32>;
