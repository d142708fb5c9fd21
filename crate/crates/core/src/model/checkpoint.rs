//! Binary checkpoint container.
//!
//! ```text
//! offset  size  content
//! 0       8     magic b"SCVICKPT"
//! 8       4     format version, u32 little-endian (currently 1)
//! 12      8     header length H in bytes, u64 little-endian
//! 20      H     UTF-8 JSON header
//! 20+H    ...   tensor data: float64 little-endian, concatenated
//! ```
//!
//! The JSON header holds `version`, `model_config`, `covariates` (the fitted
//! covariate encoder or `null`), free-form `metadata`, and `tensors`: a list
//! of `{name, shape, offset, trainable}` where `offset` counts float64
//! elements from the start of the data section. Tensors are row-major; affine
//! weights are stored as `[fan_in, fan_out]`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams, ScviModel};
use crate::data::CovariateEncoder;
use crate::error::{Result, ScviError};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SCVICKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    model_config: ModelConfig,
    covariates: Option<CovariateEncoder>,
    metadata: BTreeMap<String, serde_json::Value>,
    tensors: Vec<TensorRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ScviModel,
    pub covariates: Option<CovariateEncoder>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn new(model: ScviModel) -> Self {
        Checkpoint {
            model,
            covariates: None,
            metadata: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let tensors = self
            .model
            .params
            .entries()
            .iter()
            .map(|e| {
                let rec = TensorRecord {
                    name: e.name.clone(),
                    shape: e.tensor.shape().to_vec(),
                    offset,
                    trainable: e.trainable,
                };
                offset += e.tensor.len();
                rec
            })
            .collect();
        let header = Header {
            version: CHECKPOINT_VERSION,
            model_config: self.model.config.clone(),
            covariates: self.covariates.clone(),
            metadata: self.metadata.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)
            .map_err(|e| ScviError::Checkpoint(format!("serializing header: {e}")))?;
        let mut out = Vec::with_capacity(20 + json.len() + offset * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for e in self.model.params.entries() {
            for v in e.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| ScviError::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(ScviError::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let data_start = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..data_start])
            .map_err(|e| ScviError::Checkpoint(format!("header: {e}")))?;
        let data = &bytes[data_start..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for rec in header.tensors {
            let n: usize = rec.shape.iter().product();
            let (lo, hi) = (rec.offset * 8, (rec.offset + n) * 8);
            if hi > data.len() {
                return Err(ScviError::Checkpoint(format!("tensor '{}' is truncated", rec.name)));
            }
            let values = data[lo..hi]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((rec.name, Tensor::new(rec.shape, values)?));
        }
        let params = ModelParams::from_entries(&header.model_config, tensors)?;
        Ok(Checkpoint {
            model: ScviModel {
                config: header.model_config,
                params,
            },
            covariates: header.covariates,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| ScviError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| ScviError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mode;
    use crate::model::DispersionMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_lossless() {
        let mut cfg = ModelConfig::new(6);
        cfg.hidden_width = 5;
        cfg.latent_dim = 3;
        cfg.dispersion_mode = DispersionMode::PerEntry;
        let model = ScviModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut ck = Checkpoint::new(model);
        ck.metadata.insert("seed".into(), 2.into());
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let x = Tensor::from_rows(&[vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]]).unwrap();
        let a = ck.model.elbo_loss(&x, None, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = back.model.elbo_loss(&x, None, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.value().to_bits(), b.value().to_bits());
    }

    #[test]
    fn rejects_corruption() {
        let model = ScviModel::new(ModelConfig::new(3), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let bytes = Checkpoint::new(model).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
