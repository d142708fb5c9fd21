//! Bayes-factor differential expression between two sets of cells.
//!
//! For gene g the hypothesis `H0: w_ag < w_bg` is scored by Monte Carlo over
//! uniformly drawn pairs `(a, b)`: `z ~ q(z | x)` for each cell, then
//! `w ~ Gamma(θ_g, θ_g / μ_g(z))`. Each side owns a ChaCha stream, so
//! swapping the two groups (streams included) mirrors every draw and maps
//! `p_h0` to `1 − p_h0` exactly. Ties count one half.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Covariates, ExpressionMatrix};
use crate::distributions::{sample_gamma, DiagGaussian};
use crate::error::{Result, ScviError};
use crate::model::ScviModel;
use crate::tensor::Tensor;

fn default_pairs() -> usize {
    10_000
}
fn default_mc() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeConfig {
    #[serde(default = "default_pairs")]
    pub n_pairs: usize,
    /// (z, w) draws per sampled pair.
    #[serde(default = "default_mc")]
    pub n_mc: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DeConfig {
    fn default() -> Self {
        DeConfig {
            n_pairs: default_pairs(),
            n_mc: default_mc(),
            seed: 0,
        }
    }
}

/// Row indices of one side of the comparison and the RNG stream driving it.
#[derive(Clone, Debug, PartialEq)]
pub struct CellGroup {
    pub cells: Vec<usize>,
    pub stream: u64,
}

impl CellGroup {
    pub fn new(cells: Vec<usize>, stream: u64) -> Self {
        CellGroup { cells, stream }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeResult {
    pub gene: String,
    /// Fraction of draws with `w_a < w_b`.
    pub p_h0: f64,
    /// `ln(p_h0 / (1 − p_h0))`; ±∞ when `saturated`.
    pub log_bayes_factor: f64,
    /// Log Bayes factor from the corrected estimate `(k + ½) / (n + 1)`.
    pub log_bayes_factor_corrected: f64,
    pub saturated: bool,
    pub n_samples: usize,
    /// Binomial standard error `sqrt(p (1 − p) / n)`.
    pub std_error: f64,
}

impl DeResult {
    /// Builds the summary from `hits` favourable draws out of `n`.
    pub fn from_counts(gene: String, hits: f64, n: usize) -> Self {
        let nf = n as f64;
        let p = hits / nf;
        let log_odds = |p: f64| p.ln() - (1.0 - p).ln();
        let corrected = (hits + 0.5) / (nf + 1.0);
        DeResult {
            gene,
            p_h0: p,
            log_bayes_factor: log_odds(p),
            log_bayes_factor_corrected: log_odds(corrected),
            saturated: p == 0.0 || p == 1.0,
            n_samples: n,
            std_error: (p * (1.0 - p) / nf).sqrt(),
        }
    }
}

/// Pairs processed per decoder call.
const CHUNK: usize = 512;

struct Side<'a> {
    model: &'a ScviModel,
    rng: ChaCha8Rng,
    posteriors: Vec<DiagGaussian>,
    covariates: Option<Tensor>,
    n_mc: usize,
}

impl<'a> Side<'a> {
    fn new(
        model: &'a ScviModel,
        counts: &Tensor,
        covariates: Option<&Covariates>,
        group: &CellGroup,
        config: &DeConfig,
    ) -> Result<Self> {
        let x = counts.select_rows(&group.cells);
        let cov = covariates.map(|c| c.values().select_rows(&group.cells));
        let posteriors = model.encode(&x, cov.as_ref())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(group.stream);
        Ok(Side {
            model,
            rng,
            posteriors,
            covariates: cov,
            n_mc: config.n_mc,
        })
    }

    /// Draws `pairs × n_mc` rows of per-gene `w`.
    fn draw(&mut self, pairs: usize) -> Result<Tensor> {
        let rows = pairs * self.n_mc;
        let mut members = Vec::with_capacity(rows);
        let mut z = Vec::with_capacity(rows * self.model.config.latent_dim);
        for _ in 0..pairs {
            let i = self.rng.random_range(0..self.posteriors.len());
            for _ in 0..self.n_mc {
                members.push(i);
                z.extend(self.posteriors[i].sample(&mut self.rng));
            }
        }
        let z = Tensor::matrix(rows, self.model.config.latent_dim, z)?;
        let cov = self.covariates.as_ref().map(|c| c.select_rows(&members));
        let dec = self.model.decode(&z, cov.as_ref())?;
        let mut w = Vec::with_capacity(dec.mu.len());
        for (mu, theta) in dec.mu.data().iter().zip(dec.theta.data()) {
            w.push(sample_gamma(*theta, theta / mu, &mut self.rng)?);
        }
        Tensor::matrix(rows, self.model.config.n_genes, w)
    }
}

/// Per-gene Bayes-factor test of `w_a < w_b` between two groups of rows of
/// `data`.
pub fn de_test(
    model: &ScviModel,
    data: &ExpressionMatrix,
    covariates: Option<&Covariates>,
    group_a: &CellGroup,
    group_b: &CellGroup,
    config: &DeConfig,
) -> Result<Vec<DeResult>> {
    if group_a.cells.is_empty() || group_b.cells.is_empty() {
        return Err(ScviError::Parameter("both cell groups must be non-empty".into()));
    }
    if config.n_pairs == 0 || config.n_mc == 0 {
        return Err(ScviError::Parameter("n_pairs and n_mc must be positive".into()));
    }
    if data.n_genes() != model.config.n_genes {
        return Err(ScviError::Dimension(format!(
            "data has {} genes, model expects {}",
            data.n_genes(),
            model.config.n_genes
        )));
    }
    let n = data.n_cells();
    if let Some(&bad) = group_a.cells.iter().chain(&group_b.cells).find(|&&c| c >= n) {
        return Err(ScviError::Parameter(format!("cell index {bad} out of range")));
    }
    let mut a = Side::new(model, data.counts(), covariates, group_a, config)?;
    let mut b = Side::new(model, data.counts(), covariates, group_b, config)?;
    let g = data.n_genes();
    let mut hits = vec![0.0; g];
    let mut done = 0;
    while done < config.n_pairs {
        let m = CHUNK.min(config.n_pairs - done);
        let (wa, wb) = rayon::join(|| a.draw(m), || b.draw(m));
        let (wa, wb) = (wa?, wb?);
        for (i, (x, y)) in wa.data().iter().zip(wb.data()).enumerate() {
            if x < y {
                hits[i % g] += 1.0;
            } else if x == y {
                hits[i % g] += 0.5;
            }
        }
        done += m;
    }
    let total = config.n_pairs * config.n_mc;
    Ok(data
        .gene_names()
        .iter()
        .zip(hits)
        .map(|(name, h)| DeResult::from_counts(name.clone(), h, total))
        .collect())
}
