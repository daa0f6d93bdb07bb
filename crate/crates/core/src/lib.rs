//! Contrastive representation learning lab.
//!
//! The crate is organized around small, testable layers:
//!
//! - [`tensor`] / [`graph`]: dense matrices and reverse-mode autodiff;
//! - [`linalg`]: one-sided Jacobi SVD for the analysis paths;
//! - [`datasets`] / [`augment`]: image and synthetic data with paired
//!   stochastic views;
//! - [`models`]: MLP encoders and the projection-head zoo;
//! - [`loss`]: temperature-scaled contrastive objectives;
//! - [`optim`] / [`train`]: optimizers and training schedules (joint,
//!   alternating bilevel, fixed/PCA/slow head regimes);
//! - [`diagnostics`]: covariance spectra, numerical ranks, null-space
//!   decompositions;
//! - [`eval`]: KNN and linear-probe evaluation of feature spaces.
//!
//! All numerics are generic over [`scalar::Real`] (`f32` or `f64`).
//! Experiment pipelines run at `f64`; the `*64` aliases below are the
//! concrete types they use.

pub mod augment;
pub mod datasets;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod graph;
pub mod linalg;
pub mod loss;
pub mod models;
pub mod optim;
pub mod train;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Real;

/// Concrete f64 tensor used by the experiment pipelines.
pub type Tensor64 = tensor::Tensor<f64>;
/// Concrete f32 tensor.
pub type Tensor32 = tensor::Tensor<f32>;
/// Concrete f64 expression graph.
pub type Graph64 = graph::ExprGraph<f64>;
