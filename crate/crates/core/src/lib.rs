//! Sequential ensemble data assimilation with a modified-Cholesky estimate of
//! the background precision matrix.
//!
//! The crate is organized bottom-up:
//!
//! - [`linalg`]: ensembles, sparse unit lower triangular factors, precision
//!   apply/solve.
//! - [`grid`]: component orderings, predecessor sets, local boxes, tapers.
//! - [`estimator`]: per-component localized regressions producing `B̂⁻¹ = Tᵀ D⁻¹ T`.
//! - [`filters`]: EnKF-MC (incremental, primal, dual), LETKF, Schur-localized
//!   EnKF and the exact Kalman update.
//! - [`models`]: Lorenz-96 and synthetic observation networks.
//! - [`harness`]: twin experiments, metrics, domain decomposition, sweeps.
//! - [`config`]: the TOML experiment configuration.
//!
//! Data-parallel loops run on rayon when the `parallel` feature is enabled;
//! see [`exec`] for the sequential fallback.

pub mod config;
pub mod estimator;
pub mod exec;
pub mod filters;
pub mod grid;
pub mod harness;
pub mod linalg;
pub mod models;

pub use estimator::{estimate_factors, RegressionMethod};
pub use filters::{Formulation, ObservationBundle};
pub use grid::GridGeometry;
pub use linalg::{CholeskyFactors, DenseMatrix, EnsembleMatrix};
