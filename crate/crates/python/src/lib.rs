//! Python module `scvi_rs`: simulation, training, latent embedding,
//! held-out likelihood, differential expression and the count likelihood.
//!
//! Matrices cross the boundary as lists of rows of floats. Invalid
//! arguments raise `ValueError`; numerical failures raise `ArithmeticError`.

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scvi_core::data::{simulate as simulate_core, ExpressionMatrix, SimulationSpec};
use scvi_core::diffexpr::{de_test, CellGroup, DeConfig};
use scvi_core::distributions::{zinb_log_pmf as zinb_core, ZinbParams};
use scvi_core::evaluation::{heldout_log_likelihoods, silhouette as silhouette_core};
use scvi_core::model::{Checkpoint, ModelConfig, ScviModel};
use scvi_core::training::{train, TrainingConfig};
use scvi_core::{ScviError, Tensor};

fn to_py(e: ScviError) -> PyErr {
    match e {
        ScviError::Numerical(_) | ScviError::Domain(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(to_py)
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<ExpressionMatrix> {
    ExpressionMatrix::from_counts(to_tensor(rows)?).map_err(to_py)
}

/// `log P(k)` under ZINB(mean `mu`, inverse dispersion `theta`, dropout `pi`).
#[pyfunction]
fn zinb_log_pmf(k: u64, mu: f64, theta: f64, pi: f64) -> PyResult<f64> {
    let p = ZinbParams::new(mu, theta, pi).map_err(to_py)?;
    Ok(zinb_core(k, &p))
}

/// Draws a synthetic dataset; returns a dict with `counts` (cells × genes),
/// `labels`, `genes` and `cells`.
#[pyfunction]
#[pyo3(signature = (n_cells, n_genes, n_groups=1, latent_dim=2, seed=0))]
fn simulate<'py>(
    py: Python<'py>,
    n_cells: usize,
    n_genes: usize,
    n_groups: usize,
    latent_dim: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let mut spec = SimulationSpec::new(n_cells, n_genes);
    spec.n_groups = n_groups;
    spec.latent_dim = latent_dim;
    let sim = simulate_core(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("counts", to_rows(sim.matrix.counts()))?;
    d.set_item("labels", sim.matrix.labels().map(|l| l.to_vec()))?;
    d.set_item("genes", sim.matrix.gene_names().to_vec())?;
    d.set_item("cells", sim.matrix.cell_ids().to_vec())?;
    Ok(d)
}

/// Mean silhouette of the rows of `latent` under `labels`.
#[pyfunction]
fn silhouette(latent: Vec<Vec<f64>>, labels: Vec<String>) -> PyResult<f64> {
    silhouette_core(&to_tensor(latent)?, &labels).map_err(to_py)
}

/// A trained encoder/decoder pair.
#[pyclass(name = "Model", module = "scvi_rs")]
struct PyModel {
    model: ScviModel,
    loss_trace: Vec<f64>,
}

#[pymethods]
impl PyModel {
    /// Trains on a cells × genes count matrix.
    #[staticmethod]
    #[pyo3(signature = (counts, epochs=100, latent_dim=10, batch_size=128, learning_rate=1e-3, seed=0))]
    fn train(
        py: Python<'_>,
        counts: Vec<Vec<f64>>,
        epochs: usize,
        latent_dim: usize,
        batch_size: usize,
        learning_rate: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let data = matrix(counts)?;
        let mut mc = ModelConfig::new(data.n_genes());
        mc.latent_dim = latent_dim;
        let tc = TrainingConfig {
            epochs,
            batch_size,
            learning_rate,
            seed,
            ..TrainingConfig::default()
        };
        let out = py.detach(|| train(&data, None, &mc, &tc)).map_err(to_py)?;
        Ok(PyModel {
            model: out.model,
            loss_trace: out.loss_trace,
        })
    }

    /// Loads a checkpoint written by `save` or by the `scvi` CLI.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ckpt = Checkpoint::load(path).map_err(to_py)?;
        if ckpt.covariates.as_ref().is_some_and(|c| !c.is_empty()) {
            return Err(PyValueError::new_err("checkpoints trained with covariates are not supported here"));
        }
        Ok(PyModel {
            model: ckpt.model,
            loss_trace: Vec::new(),
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        Checkpoint::new(self.model.clone()).save(path).map_err(to_py)
    }

    #[getter]
    fn n_genes(&self) -> usize {
        self.model.config.n_genes
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.model.config.latent_dim
    }

    /// Mean negative ELBO per epoch; empty for loaded models.
    #[getter]
    fn loss_trace(&self) -> Vec<f64> {
        self.loss_trace.clone()
    }

    /// Posterior means, cells × latent_dim.
    fn latent(&self, counts: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let z = self.model.latent_means(&to_tensor(counts)?, None).map_err(to_py)?;
        Ok(to_rows(&z))
    }

    /// Importance-sampled `log p(x)` per cell.
    #[pyo3(signature = (counts, n_samples=1000, seed=0))]
    fn heldout_log_likelihood(
        &self,
        py: Python<'_>,
        counts: Vec<Vec<f64>>,
        n_samples: usize,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let x = to_tensor(counts)?;
        py.detach(|| heldout_log_likelihoods(&self.model, &x, None, n_samples, seed))
            .map_err(to_py)
    }

    /// Bayes-factor test between two sets of row indices of `counts`;
    /// returns one dict per gene.
    #[pyo3(signature = (counts, cells_a, cells_b, n_pairs=10_000, seed=0))]
    fn differential_expression<'py>(
        &self,
        py: Python<'py>,
        counts: Vec<Vec<f64>>,
        cells_a: Vec<usize>,
        cells_b: Vec<usize>,
        n_pairs: usize,
        seed: u64,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let data = matrix(counts)?;
        let cfg = DeConfig {
            n_pairs,
            n_mc: 1,
            seed,
        };
        let (a, b) = (CellGroup::new(cells_a, 0), CellGroup::new(cells_b, 1));
        let results = py
            .detach(|| de_test(&self.model, &data, None, &a, &b, &cfg))
            .map_err(to_py)?;
        results
            .into_iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("gene", r.gene)?;
                d.set_item("p_h0", r.p_h0)?;
                d.set_item("log_bayes_factor", r.log_bayes_factor)?;
                d.set_item("log_bayes_factor_corrected", r.log_bayes_factor_corrected)?;
                d.set_item("std_error", r.std_error)?;
                d.set_item("saturated", r.saturated)?;
                Ok(d)
            })
            .collect()
    }
}

#[pymodule]
fn scvi_rs(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(zinb_log_pmf, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(silhouette, m)?)?;
    Ok(())
}
