//! Benchmarks for trained models: held-out marginal likelihood, imputation
//! of corrupted entries, latent-space clustering quality, covariate
//! disentanglement, and a factor-analysis baseline.

mod clustering;
mod factor;
mod imputation;
mod likelihood;

pub use clustering::{qc_correlation, silhouette};
pub use factor::{factor_analysis_fit, FactorAnalysis, FactorModel};
pub use imputation::{
    calibrate_lambda, corrupt, corruption_probability, dropout_cross_entropy, global_mean_baseline,
    impute, imputation_errors, Corrupted, CorruptionConfig, Imputation, MaskedEntry,
};
pub use likelihood::{
    heldout_log_likelihoods, heldout_marginal_ll, importance_log_marginal,
};

use serde::{Deserialize, Serialize};

/// One named metric value, tagged with the run that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub metric: String,
    pub value: f64,
    pub dataset: String,
    pub config_hash: String,
    pub seed: u64,
}
