use serde::{Deserialize, Serialize};

use super::matrix::ExpressionMatrix;
use crate::error::{Result, ScviError};
use crate::tensor::Tensor;

/// Per-cell covariate rows: one-hot batch indicator followed by z-scored QC
/// columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Covariates {
    values: Tensor,
}

impl Covariates {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(ScviError::Dimension("covariates must be a matrix".into()));
        }
        if !values.is_finite() {
            return Err(ScviError::Data("covariates must be finite".into()));
        }
        Ok(Covariates { values })
    }

    pub fn width(&self) -> usize {
        self.values.cols()
    }

    pub fn n_cells(&self) -> usize {
        self.values.rows()
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn select(&self, cells: &[usize]) -> Covariates {
        Covariates {
            values: self.values.select_rows(cells),
        }
    }
}

/// Fitted mapping from cell annotations to covariate rows. Stored with a
/// checkpoint so held-out cells are encoded with the training statistics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CovariateEncoder {
    pub batch_levels: Vec<String>,
    pub qc_columns: Vec<String>,
    pub qc_mean: Vec<f64>,
    pub qc_std: Vec<f64>,
}

impl CovariateEncoder {
    pub fn fit(data: &ExpressionMatrix, use_batch: bool, use_qc: bool) -> Result<Self> {
        let mut enc = CovariateEncoder::default();
        if use_batch {
            let batches = data
                .batches()
                .ok_or_else(|| ScviError::Data("batch covariates requested but no batch ids".into()))?;
            let mut levels: Vec<String> = batches.to_vec();
            levels.sort();
            levels.dedup();
            enc.batch_levels = levels;
        }
        if use_qc {
            let qc = data
                .qc()
                .ok_or_else(|| ScviError::Data("QC covariates requested but no QC table".into()))?;
            let n = qc.values.rows() as f64;
            for (j, name) in qc.names.iter().enumerate() {
                let col: Vec<f64> = (0..qc.values.rows()).map(|i| qc.values.get(i, j)).collect();
                let mean = col.iter().sum::<f64>() / n;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let std = var.sqrt();
                enc.qc_columns.push(name.clone());
                enc.qc_mean.push(mean);
                // constant columns are centred but not scaled
                enc.qc_std.push(if std > 0.0 { std } else { 1.0 });
            }
        }
        Ok(enc)
    }

    pub fn width(&self) -> usize {
        self.batch_levels.len() + self.qc_columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.width() == 0
    }

    pub fn encode(&self, data: &ExpressionMatrix) -> Result<Covariates> {
        let n = data.n_cells();
        let width = self.width();
        let mut values = vec![0.0; n * width];
        if !self.batch_levels.is_empty() {
            let batches = data
                .batches()
                .ok_or_else(|| ScviError::Data("matrix has no batch ids".into()))?;
            for (i, b) in batches.iter().enumerate() {
                let level = self
                    .batch_levels
                    .binary_search(b)
                    .map_err(|_| ScviError::Data(format!("unknown batch '{b}'")))?;
                values[i * width + level] = 1.0;
            }
        }
        if !self.qc_columns.is_empty() {
            let qc = data
                .qc()
                .ok_or_else(|| ScviError::Data("matrix has no QC table".into()))?;
            let offset = self.batch_levels.len();
            for (k, name) in self.qc_columns.iter().enumerate() {
                let j = qc
                    .names
                    .iter()
                    .position(|q| q == name)
                    .ok_or_else(|| ScviError::Data(format!("missing QC column '{name}'")))?;
                for i in 0..n {
                    values[i * width + offset + k] = (qc.values.get(i, j) - self.qc_mean[k]) / self.qc_std[k];
                }
            }
        }
        Covariates::new(Tensor::matrix(n, width, values)?)
    }
}
