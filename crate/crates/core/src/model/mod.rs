//! Encoder/decoder networks, the negative ELBO and checkpoints.
//!
//! The encoder maps `log(1 + x)` (optionally with covariates) through
//! `hidden_depth` blocks of affine → batch norm → ReLU → dropout to the mean
//! and log-variance of a diagonal Gaussian. The decoder runs one shared trunk
//! of the same shape on `(z, covariates)` and splits into three linear heads:
//! NB mean (exp), inverse dispersion (exp, or a free per-gene vector) and
//! dropout logit.

mod checkpoint;
mod config;
mod params;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{DispersionMode, LatentMode, ModelConfig};
pub use params::{ModelParams, ParamEntry};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Activation, BatchNormConfig, BatchStats, Mode, Tape, Var};
use crate::distributions::{sigmoid, DiagGaussian};
use crate::error::{Result, ScviError};
use crate::tensor::Tensor;
use params::{BlockIdx, DispersionIdx, LinearIdx};

/// Running-statistics update produced by one training-mode batch norm.
#[derive(Clone, Debug)]
pub struct NormUpdate {
    running_mean: usize,
    running_var: usize,
    stats: BatchStats,
}

/// A configured model and its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ScviModel {
    pub config: ModelConfig,
    pub params: ModelParams,
}

/// Decoder output for a batch of latent vectors.
#[derive(Clone, Debug)]
pub struct DecodedBatch {
    /// rows × genes NB means
    pub mu: Tensor,
    /// rows × genes inverse dispersions
    pub theta: Tensor,
    /// rows × genes dropout logits
    pub dropout_logit: Tensor,
}

impl DecodedBatch {
    pub fn pi(&self) -> Tensor {
        self.dropout_logit.map(sigmoid)
    }
}

struct Forward<'a, R: Rng + ?Sized> {
    tape: Tape,
    vars: Vec<Option<Var>>,
    model: &'a ScviModel,
    mode: Mode,
    rng: &'a mut R,
    updates: Vec<NormUpdate>,
}

impl<'a, R: Rng + ?Sized> Forward<'a, R> {
    fn new(model: &'a ScviModel, mode: Mode, track_grad: bool, rng: &'a mut R) -> Self {
        let mut tape = Tape::new();
        let vars = model
            .params
            .entries()
            .iter()
            .map(|e| {
                if !e.trainable {
                    None
                } else if track_grad {
                    Some(tape.param(e.tensor.clone()))
                } else {
                    Some(tape.constant(e.tensor.clone()))
                }
            })
            .collect();
        Forward {
            tape,
            vars,
            model,
            mode,
            rng,
            updates: Vec::new(),
        }
    }

    fn var(&self, idx: usize) -> Var {
        self.vars[idx].expect("trainable parameter is bound")
    }

    fn linear(&mut self, x: Var, idx: LinearIdx) -> Result<Var> {
        let (w, b) = (self.var(idx.weight), self.var(idx.bias));
        self.tape.affine(x, w, b)
    }

    fn block(&mut self, x: Var, idx: BlockIdx) -> Result<Var> {
        let h = self.linear(x, idx.linear)?;
        let params = &self.model.params;
        let (scale, shift) = (self.var(idx.scale), self.var(idx.shift));
        let (h, stats) = self.tape.batch_norm(
            h,
            scale,
            shift,
            params.tensor(idx.running_mean).data(),
            params.tensor(idx.running_var).data(),
            self.mode,
            BatchNormConfig::default(),
        )?;
        if let Some(stats) = stats {
            self.updates.push(NormUpdate {
                running_mean: idx.running_mean,
                running_var: idx.running_var,
                stats,
            });
        }
        let h = self.tape.activation(h, Activation::Relu)?;
        self.tape
            .dropout(h, self.model.config.dropout_rate, self.mode, self.rng)
    }

    fn check_covariates(&self, rows: usize, cov: Option<&Tensor>) -> Result<()> {
        let want = self.model.config.covariate_dim;
        match cov {
            None if want == 0 => Ok(()),
            None => Err(ScviError::Dimension(format!(
                "model expects {want} covariate columns, none given"
            ))),
            Some(c) if c.cols() != want || c.rows() != rows => Err(ScviError::Dimension(format!(
                "covariates are {}×{}, expected {rows}×{want}",
                c.rows(),
                c.cols()
            ))),
            Some(_) => Ok(()),
        }
    }

    /// Returns the latent mean and log-variance nodes.
    fn encode(&mut self, counts: &Tensor, cov: Option<&Tensor>) -> Result<(Var, Var)> {
        let cfg = &self.model.config;
        if counts.cols() != cfg.n_genes {
            return Err(ScviError::Dimension(format!(
                "counts have {} genes, model expects {}",
                counts.cols(),
                cfg.n_genes
            )));
        }
        self.check_covariates(counts.rows(), cov)?;
        let mut input = counts.map(f64::ln_1p);
        if cfg.encoder_sees_covariates {
            input = input.concat_cols(cov.expect("checked"))?;
        }
        let mut h = self.tape.constant(input);
        let layout = self.model.params.layout.clone();
        for idx in layout.encoder {
            h = self.block(h, idx)?;
        }
        let mean = self.linear(h, layout.latent_mean)?;
        let log_var = self.linear(h, layout.latent_log_var)?;
        Ok((mean, log_var))
    }

    /// Returns the NB mean, inverse dispersion and dropout-logit nodes.
    fn decode(&mut self, z: Var, cov: Option<&Tensor>) -> Result<(Var, Var, Var)> {
        let rows = self.tape.value(z).rows();
        if self.tape.value(z).cols() != self.model.config.latent_dim {
            return Err(ScviError::Dimension(format!(
                "latent has {} columns, model expects {}",
                self.tape.value(z).cols(),
                self.model.config.latent_dim
            )));
        }
        self.check_covariates(rows, cov)?;
        let mut h = match cov {
            Some(c) if c.cols() > 0 => {
                let c = self.tape.constant(c.clone());
                self.tape.concat_cols(z, c)?
            }
            _ => z,
        };
        let layout = self.model.params.layout.clone();
        for idx in layout.decoder {
            h = self.block(h, idx)?;
        }
        let log_mu = self.linear(h, layout.nb_mean)?;
        let mu = self.tape.activation(log_mu, Activation::Exp)?;
        let theta = match layout.dispersion {
            DispersionIdx::PerGene(i) => {
                let v = self.var(i);
                self.tape.activation(v, Activation::Exp)?
            }
            DispersionIdx::PerEntry(idx) => {
                let log_theta = self.linear(h, idx)?;
                self.tape.activation(log_theta, Activation::Exp)?
            }
        };
        let logit = self.linear(h, layout.dropout_logit)?;
        Ok((mu, theta, logit))
    }
}

/// A recorded negative-ELBO computation over one minibatch.
pub struct LossGraph {
    tape: Tape,
    loss: Var,
    vars: Vec<Option<Var>>,
    updates: Vec<NormUpdate>,
    /// Per-cell `Σ_g log p(x_ng | z_n)`.
    pub reconstruction: Vec<f64>,
    /// Per-cell KL term (all zeros in point-mass mode).
    pub kl: Vec<f64>,
}

impl LossGraph {
    /// Mean negative ELBO over the batch.
    pub fn value(&self) -> f64 {
        self.tape.value(self.loss).item()
    }

    /// Gradients aligned with [`ModelParams::entries`]; non-trainable
    /// entries get zero tensors.
    pub fn gradients(&self, params: &ModelParams) -> Result<Vec<Tensor>> {
        let mut grads = self.tape.backward(self.loss)?;
        Ok(params
            .entries()
            .iter()
            .zip(&self.vars)
            .map(|(e, v)| match v {
                Some(v) => grads.take(*v, e.tensor.shape()),
                None => Tensor::zeros(e.tensor.shape()),
            })
            .collect())
    }

    pub fn norm_updates(&self) -> &[NormUpdate] {
        &self.updates
    }
}

impl ScviModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let params = ModelParams::init(&config, rng)?;
        Ok(ScviModel { config, params })
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn apply_norm_updates(&mut self, updates: &[NormUpdate]) {
        let m = BatchNormConfig::default().momentum;
        for u in updates {
            let rm = self.params.tensor_mut(u.running_mean);
            for (r, b) in rm.data_mut().iter_mut().zip(&u.stats.mean) {
                *r = m * *r + (1.0 - m) * b;
            }
            let rv = self.params.tensor_mut(u.running_var);
            for (r, b) in rv.data_mut().iter_mut().zip(&u.stats.var) {
                *r = m * *r + (1.0 - m) * b;
            }
        }
    }

    /// Negative ELBO for a minibatch of count rows, recorded for backward.
    pub fn elbo_loss<R: Rng + ?Sized>(
        &self,
        counts: &Tensor,
        covariates: Option<&Tensor>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<LossGraph> {
        let n = counts.rows();
        if n == 0 || counts.shape().len() != 2 {
            return Err(ScviError::Parameter("ELBO needs a non-empty count matrix".into()));
        }
        let mut f = Forward::new(self, mode, true, rng);
        let (mean, log_var) = f.encode(counts, covariates)?;
        let (z, kl_rows) = match self.config.latent_mode {
            LatentMode::PointMass => (mean, None),
            LatentMode::Stochastic => {
                let d = self.config.latent_dim;
                let eps: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut *f.rng)).collect();
                let eps = f.tape.constant(Tensor::matrix(n, d, eps)?);
                let half = f.tape.scale(log_var, 0.5);
                let std = f.tape.activation(half, Activation::Exp)?;
                let noise = f.tape.mul(std, eps)?;
                let z = f.tape.add(mean, noise)?;
                // ½ Σ_d (m² + s² − 1 − log s²)
                let m2 = f.tape.mul(mean, mean)?;
                let s2 = f.tape.mul(std, std)?;
                let t = f.tape.add(m2, s2)?;
                let t = f.tape.sub(t, log_var)?;
                let t = f.tape.add_scalar(t, -1.0);
                let rows = f.tape.sum_rows(t);
                (z, Some(f.tape.scale(rows, 0.5)))
            }
        };
        let (mu, theta, logit) = f.decode(z, covariates)?;
        let recon = f.tape.zinb_log_likelihood(counts, mu, theta, logit)?;
        let per_cell = match kl_rows {
            Some(kl) => f.tape.sub(kl, recon)?,
            None => f.tape.scale(recon, -1.0),
        };
        let reconstruction = f.tape.value(recon).data().to_vec();
        let kl = match kl_rows {
            Some(kl) => f.tape.value(kl).data().to_vec(),
            None => vec![0.0; n],
        };
        if let Some(i) = f.tape.value(per_cell).data().iter().position(|v| !v.is_finite()) {
            return Err(ScviError::Numerical(format!("negative ELBO is not finite for cell {i}")));
        }
        let loss = f.tape.mean(per_cell)?;
        Ok(LossGraph {
            tape: f.tape,
            loss,
            vars: f.vars,
            updates: f.updates,
            reconstruction,
            kl,
        })
    }

    /// Variational posteriors for each row (eval mode).
    pub fn encode(&self, counts: &Tensor, covariates: Option<&Tensor>) -> Result<Vec<DiagGaussian>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut f = Forward::new(self, Mode::Eval, false, &mut rng);
        let (mean, log_var) = f.encode(counts, covariates)?;
        let (m, lv) = (f.tape.value(mean), f.tape.value(log_var));
        (0..m.rows())
            .map(|i| {
                let std = lv.row(i).iter().map(|v| (0.5 * v).min(crate::autodiff::EXP_CLAMP).exp()).collect();
                DiagGaussian::new(m.row(i).to_vec(), std).map_err(|e| {
                    ScviError::Numerical(format!("encoder output for cell {i} is invalid: {e}"))
                })
            })
            .collect()
    }

    /// Posterior means as a rows × latent_dim matrix (eval mode).
    pub fn latent_means(&self, counts: &Tensor, covariates: Option<&Tensor>) -> Result<Tensor> {
        let post = self.encode(counts, covariates)?;
        let d = self.config.latent_dim;
        let data = post.iter().flat_map(|q| q.mean().to_vec()).collect();
        Tensor::matrix(post.len(), d, data)
    }

    /// Decoder outputs for a batch of latent rows (eval mode).
    pub fn decode(&self, z: &Tensor, covariates: Option<&Tensor>) -> Result<DecodedBatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut f = Forward::new(self, Mode::Eval, false, &mut rng);
        let zv = f.tape.constant(z.clone());
        let (mu, theta, logit) = f.decode(zv, covariates)?;
        let (n, g) = (z.rows(), self.config.n_genes);
        let theta = f.tape.value(theta);
        let theta = if theta.shape().len() == 1 {
            let mut data = Vec::with_capacity(n * g);
            for _ in 0..n {
                data.extend_from_slice(theta.data());
            }
            Tensor::matrix(n, g, data)?
        } else {
            theta.clone()
        };
        Ok(DecodedBatch {
            mu: f.tape.value(mu).clone(),
            theta,
            dropout_logit: f.tape.value(logit).clone(),
        })
    }
}
