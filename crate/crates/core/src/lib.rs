//! Sparse-attention transformer imputation for multivariate time series.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`tape`]: dense `f64` tensors and a reverse-mode tape.
//! - [`sparse`]: sparsemax / sparsegen-lin projections onto the simplex.
//! - [`attention`]: diagonal-masked multi-head self-attention and encoder layers.
//! - [`model`]: the imputation network, its checkpoints and `impute`.
//! - [`objectives`]: masked-imputation, reconstruction and downstream losses.
//! - [`missingness`]: MCAR and block missingness simulators.
//! - [`baselines`] and [`metrics`]: classical imputers, RMSE/MAE, AUC-ROC, PR-AUC.
//! - [`training`]: Adam, the semi-supervised training loop, gradient checks.
//! - [`data`], [`config`], [`experiment`]: CSV ingestion, synthetic data,
//!   flat config files and the evaluation sweep behind the CLI.

pub mod attention;
pub mod baselines;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod missingness;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod sparse;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
