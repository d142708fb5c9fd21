use serde::{Deserialize, Serialize};

use crate::error::{Result, ScviError};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DispersionMode {
    /// One free inverse dispersion per gene.
    #[default]
    PerGene,
    /// Inverse dispersion produced by a decoder head for every entry.
    PerEntry,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentMode {
    /// Reparameterized Gaussian posterior with the KL term.
    #[default]
    Stochastic,
    /// Latent fixed at the encoder mean, no KL term.
    PointMass,
}

fn default_latent_dim() -> usize {
    10
}
fn default_hidden_width() -> usize {
    128
}
fn default_hidden_depth() -> usize {
    3
}
fn default_dropout() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_genes: usize,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "default_hidden_width")]
    pub hidden_width: usize,
    #[serde(default = "default_hidden_depth")]
    pub hidden_depth: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    #[serde(default)]
    pub covariate_dim: usize,
    #[serde(default)]
    pub dispersion_mode: DispersionMode,
    #[serde(default)]
    pub latent_mode: LatentMode,
    #[serde(default)]
    pub encoder_sees_covariates: bool,
}

impl ModelConfig {
    pub fn new(n_genes: usize) -> Self {
        ModelConfig {
            n_genes,
            latent_dim: default_latent_dim(),
            hidden_width: default_hidden_width(),
            hidden_depth: default_hidden_depth(),
            dropout_rate: default_dropout(),
            covariate_dim: 0,
            dispersion_mode: DispersionMode::default(),
            latent_mode: LatentMode::default(),
            encoder_sees_covariates: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_genes == 0 {
            return Err(ScviError::Parameter("n_genes must be at least 1".into()));
        }
        if self.latent_dim == 0 {
            return Err(ScviError::Parameter("latent_dim must be at least 1".into()));
        }
        if self.hidden_depth == 0 || self.hidden_width == 0 {
            return Err(ScviError::Parameter("hidden depth and width must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ScviError::Parameter(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.encoder_sees_covariates && self.covariate_dim == 0 {
            return Err(ScviError::Parameter(
                "encoder_sees_covariates needs covariate_dim > 0".into(),
            ));
        }
        Ok(())
    }

    pub(crate) fn encoder_input_dim(&self) -> usize {
        if self.encoder_sees_covariates {
            self.n_genes + self.covariate_dim
        } else {
            self.n_genes
        }
    }

    pub(crate) fn decoder_input_dim(&self) -> usize {
        self.latent_dim + self.covariate_dim
    }
}
