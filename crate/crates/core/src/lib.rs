//! Single-cell variational inference for zero-inflated count matrices.
//!
//! The crate trains an encoder/decoder pair under a zero-inflated negative
//! binomial likelihood and provides the accompanying evaluation tools:
//! importance-sampled held-out likelihood, imputation of zeroed entries,
//! clustering and covariate-disentanglement metrics, a factor-analysis
//! baseline, and a Bayes-factor differential-expression test.

pub mod autodiff;
pub mod data;
pub mod diffexpr;
pub mod distributions;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Result, ScviError};
pub use tensor::Tensor;
