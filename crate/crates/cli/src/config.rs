//! Run configuration: TOML file, `--set` overrides, and the config hash.
//!
//! Resolution order, later wins: built-in defaults, the `--config` file,
//! each `--set key.path=value`, then `--seed` and `--out`. Unknown keys are
//! rejected. Relative paths are resolved against the working directory.

use std::path::{Path, PathBuf};

use scvi_core::data::SimulationSpec;
use scvi_core::diffexpr::DeConfig;
use scvi_core::model::{DispersionMode, LatentMode, ModelConfig};
use scvi_core::training::TrainingConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Value;

use crate::error::CliError;

/// Version of the configuration schema below.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// Output directory; every file a command writes goes under it.
    pub out: PathBuf,
    /// Checkpoint read by `eval` and `de`; defaults to `<out>/model.ckpt`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub data: DataSection,
    pub simulation: SimulationSpec,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub eval: EvalSection,
    pub corruption: CorruptionSection,
    pub de: DeSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Dense CSV or MatrixMarket (`.mtx`) counts; defaults to
    /// `<out>/counts.csv`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<PathBuf>,
    /// Gene names for MatrixMarket input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub genes: Option<PathBuf>,
    /// Cell ids for MatrixMarket input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cells: Option<PathBuf>,
    /// Per-cell metadata CSV; defaults to `<out>/metadata.csv` when the
    /// counts default is used and that file exists.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<PathBuf>,
    /// Keep only this many most variable genes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_variable_genes: Option<usize>,
    /// Fraction of cells held out from training for evaluation; 0 trains
    /// on every cell.
    pub heldout_fraction: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub latent_dim: usize,
    pub hidden_width: usize,
    pub hidden_depth: usize,
    pub dropout_rate: f64,
    pub dispersion_mode: DispersionMode,
    pub latent_mode: LatentMode,
    /// One-hot batch ids as covariates.
    pub use_batch: bool,
    /// Standardized QC columns as covariates.
    pub use_qc: bool,
    pub encoder_sees_covariates: bool,
}

impl ModelSection {
    pub fn to_model_config(&self, n_genes: usize, covariate_dim: usize) -> ModelConfig {
        ModelConfig {
            n_genes,
            latent_dim: self.latent_dim,
            hidden_width: self.hidden_width,
            hidden_depth: self.hidden_depth,
            dropout_rate: self.dropout_rate,
            covariate_dim,
            dispersion_mode: self.dispersion_mode,
            latent_mode: self.latent_mode,
            encoder_sees_covariates: self.encoder_sees_covariates,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub learning_rate: f64,
    pub adam_betas: [f64; 2],
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub shuffle: bool,
}

impl TrainingSection {
    pub fn to_training_config(&self, seed: u64) -> TrainingConfig {
        TrainingConfig {
            learning_rate: self.learning_rate,
            adam_betas: self.adam_betas,
            adam_epsilon: self.adam_epsilon,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
            shuffle: self.shuffle,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Importance samples per held-out cell.
    pub heldout_samples: usize,
    /// Any of `heldout_ll`, `silhouette`, `qc_correlation`.
    pub metrics: Vec<String>,
    /// Also fit the factor-analysis baseline and report its silhouette.
    pub fa_baseline: bool,
    pub fa_max_iter: usize,
}

pub const METRICS: [&str; 3] = ["heldout_ll", "silhouette", "qc_correlation"];

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSection {
    /// Fixed decay; when absent it is calibrated to `target_fraction`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub target_fraction: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeSection {
    pub n_pairs: usize,
    pub n_mc: usize,
    /// Label of group A; defaults to the first label in sorted order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_a: Option<String>,
    /// Label of group B; when absent, every cell outside group A.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_b: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut simulation = SimulationSpec::new(1000, 100);
        simulation.n_groups = 3;
        let model = ModelConfig::new(1);
        let training = TrainingConfig::default();
        let de = DeConfig::default();
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            out: PathBuf::from("scvi-out"),
            checkpoint: None,
            data: DataSection {
                counts: None,
                genes: None,
                cells: None,
                metadata: None,
                n_variable_genes: None,
                heldout_fraction: 0.1,
            },
            simulation,
            model: ModelSection {
                latent_dim: model.latent_dim,
                hidden_width: model.hidden_width,
                hidden_depth: model.hidden_depth,
                dropout_rate: model.dropout_rate,
                dispersion_mode: model.dispersion_mode,
                latent_mode: model.latent_mode,
                use_batch: false,
                use_qc: false,
                encoder_sees_covariates: false,
            },
            training: TrainingSection {
                learning_rate: training.learning_rate,
                adam_betas: training.adam_betas,
                adam_epsilon: training.adam_epsilon,
                batch_size: training.batch_size,
                epochs: training.epochs,
                shuffle: training.shuffle,
            },
            eval: EvalSection {
                heldout_samples: 1000,
                metrics: METRICS.iter().map(|m| m.to_string()).collect(),
                fa_baseline: true,
                fa_max_iter: 500,
            },
            corruption: CorruptionSection {
                lambda: None,
                target_fraction: 0.1,
            },
            de: DeSection {
                n_pairs: de.n_pairs,
                n_mc: de.n_mc,
                group_a: None,
                group_b: None,
            },
        }
    }
}

/// Recursively overlays `top` onto `base`; tables merge, everything else
/// replaces.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Table(b), Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses `a.b.c=value`; the value is read as a TOML literal, falling back
/// to a bare string.
fn parse_override(spec: &str) -> Result<Value, CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override '{spec}' is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!("override '{spec}' has an empty key")));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    };
    Ok(key
        .rsplit('.')
        .fold(value, |acc, part| Value::Table(toml::Table::from_iter([(part.to_string(), acc)]))))
}

pub struct Overrides<'a> {
    pub config: Option<&'a Path>,
    pub set: &'a [String],
    pub seed: Option<u64>,
    pub out: Option<&'a Path>,
}

impl RunConfig {
    pub fn resolve(o: &Overrides<'_>) -> Result<Self, CliError> {
        let mut value = Value::try_from(RunConfig::default()).expect("defaults serialize");
        if let Some(path) = o.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
            let file: toml::Table = toml::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            merge(&mut value, Value::Table(file));
        }
        for s in o.set {
            merge(&mut value, parse_override(s)?);
        }
        let mut cfg: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string().trim().to_string()))?;
        if let Some(seed) = o.seed {
            cfg.seed = seed;
        }
        if let Some(out) = o.out {
            cfg.out = out.to_path_buf();
        }
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        if let Some(bad) = cfg.eval.metrics.iter().find(|m| !METRICS.contains(&m.as_str())) {
            return Err(CliError::Config(format!("unknown metric '{bad}'")));
        }
        Ok(cfg)
    }

    /// SHA-256 of the effective configuration as canonical JSON, excluding
    /// the output directory so relocated runs hash identically.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let serde_json::Value::Object(m) = &mut v {
            m.remove("out");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn counts_path(&self) -> PathBuf {
        self.data.counts.clone().unwrap_or_else(|| self.out.join("counts.csv"))
    }

    pub fn metadata_path(&self) -> Option<PathBuf> {
        match (&self.data.metadata, &self.data.counts) {
            (Some(p), _) => Some(p.clone()),
            (None, None) => Some(self.out.join("metadata.csv")).filter(|p| p.exists()),
            (None, Some(_)) => None,
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("model.ckpt"))
    }

    pub fn de_config(&self) -> DeConfig {
        DeConfig {
            n_pairs: self.de.n_pairs,
            n_mc: self.de.n_mc,
            seed: self.seed,
        }
    }
}
