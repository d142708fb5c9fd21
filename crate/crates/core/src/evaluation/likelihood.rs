use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Covariates;
use crate::distributions::{log_sum_exp, zinb_log_pmf_logit, DiagGaussian};
use crate::error::{Result, ScviError};
use crate::model::ScviModel;
use crate::tensor::Tensor;

/// `log (1/S) Σ_s exp(log_joint(z_s) − log q(z_s))` with `z_s ~ q`.
pub fn importance_log_marginal<R, F>(
    proposal: &DiagGaussian,
    mut log_joint: F,
    n_samples: usize,
    rng: &mut R,
) -> Result<f64>
where
    R: Rng + ?Sized,
    F: FnMut(&[f64]) -> f64,
{
    if n_samples == 0 {
        return Err(ScviError::Parameter("importance sampling needs at least one sample".into()));
    }
    let weights: Vec<f64> = (0..n_samples)
        .map(|_| {
            let z = proposal.sample(rng);
            log_joint(&z) - proposal.log_density(&z)
        })
        .collect();
    Ok(log_sum_exp(&weights) - (n_samples as f64).ln())
}

/// Samples per decoder call; bounds memory for large `n_samples`.
const CHUNK: usize = 256;

/// Per-cell importance-sampled `log p(x)` using the encoder as proposal.
///
/// Cell `i` draws from its own ChaCha stream `i` under `seed`, so results do
/// not depend on the thread count.
pub fn heldout_log_likelihoods(
    model: &ScviModel,
    counts: &Tensor,
    covariates: Option<&Covariates>,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if n_samples == 0 {
        return Err(ScviError::Parameter("n_importance_samples must be positive".into()));
    }
    if counts.shape().len() != 2 || counts.cols() != model.config.n_genes {
        return Err(ScviError::Dimension(format!(
            "expected a cells × {} count matrix",
            model.config.n_genes
        )));
    }
    let cov = covariates.map(Covariates::values);
    let posteriors = model.encode(counts, cov)?;
    let prior = DiagGaussian::standard(model.config.latent_dim);
    (0..counts.rows())
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let q = &posteriors[i];
            let x = counts.row(i);
            let mut weights = Vec::with_capacity(n_samples);
            let mut done = 0;
            while done < n_samples {
                let m = CHUNK.min(n_samples - done);
                let zs: Vec<Vec<f64>> = (0..m).map(|_| q.sample(&mut rng)).collect();
                let z = Tensor::matrix(m, q.dim(), zs.concat())?;
                let c = cov.map(|c| c.select_rows(&vec![i; m]));
                let dec = model.decode(&z, c.as_ref())?;
                for (s, zs) in zs.iter().enumerate() {
                    let ll: f64 = x
                        .iter()
                        .enumerate()
                        .map(|(g, &k)| {
                            let (mu, th, lg) =
                                (dec.mu.get(s, g), dec.theta.get(s, g), dec.dropout_logit.get(s, g));
                            zinb_log_pmf_logit(k, mu, th, lg).0
                        })
                        .sum();
                    weights.push(ll + prior.log_density(zs) - q.log_density(zs));
                }
                done += m;
            }
            let v = log_sum_exp(&weights) - (n_samples as f64).ln();
            if v.is_finite() {
                Ok(v)
            } else {
                Err(ScviError::Numerical(format!("marginal likelihood of cell {i} is not finite")))
            }
        })
        .collect()
}

/// Mean over cells of [`heldout_log_likelihoods`].
pub fn heldout_marginal_ll(
    model: &ScviModel,
    counts: &Tensor,
    covariates: Option<&Covariates>,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    let v = heldout_log_likelihoods(model, counts, covariates, n_samples, seed)?;
    if v.is_empty() {
        return Err(ScviError::Parameter("held-out set is empty".into()));
    }
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}
