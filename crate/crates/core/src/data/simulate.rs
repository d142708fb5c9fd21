//! Forward simulation of the generative model with retained ground truth.
//!
//! Each cell belongs to one of `n_groups` groups chosen uniformly at random,
//! draws `z ~ N(center_group, I)`, and each gene's mean is
//! `exp(bias_g + loadings_g · z + fold[group, g] + batch[batch, g])`. Counts
//! follow the Gamma–Poisson cascade with a per-gene dropout probability.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::matrix::ExpressionMatrix;
use crate::distributions::{lgamma, log_add_exp, log_sum_exp, sample_gamma, sample_poisson, sigmoid, softplus};
use crate::error::{Result, ScviError};
use crate::tensor::Tensor;

fn default_latent_dim() -> usize {
    2
}
fn default_groups() -> usize {
    1
}
fn default_separation() -> f64 {
    3.0
}
fn default_log_mean_range() -> [f64; 2] {
    [0.5, 2.5]
}
fn default_loading_scale() -> f64 {
    0.6
}
fn default_theta_range() -> [f64; 2] {
    [1.0, 10.0]
}
fn default_pi_range() -> [f64; 2] {
    [0.05, 0.3]
}
fn default_batches() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    pub n_cells: usize,
    pub n_genes: usize,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "default_groups")]
    pub n_groups: usize,
    /// Distance of the group centers from the origin.
    #[serde(default = "default_separation")]
    pub group_separation: f64,
    /// Explicit group centers, overriding `group_separation`.
    #[serde(default)]
    pub centers: Option<Vec<Vec<f64>>>,
    /// Range of the per-gene log mean at `z = 0`.
    #[serde(default = "default_log_mean_range")]
    pub log_mean_range: [f64; 2],
    /// Standard deviation of the latent loadings.
    #[serde(default = "default_loading_scale")]
    pub loading_scale: f64,
    /// Range of the per-gene inverse dispersion (log-uniform).
    #[serde(default = "default_theta_range")]
    pub theta_range: [f64; 2],
    /// Range of the per-gene dropout probability (uniform).
    #[serde(default = "default_pi_range")]
    pub pi_range: [f64; 2],
    /// Multiplicative mean changes, groups × genes.
    #[serde(default)]
    pub fold_changes: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_batches")]
    pub n_batches: usize,
    /// Standard deviation of the per-(batch, gene) log-mean offsets.
    #[serde(default)]
    pub batch_effect_scale: f64,
    /// Explicit decoder; generated from the RNG when absent.
    #[serde(default)]
    pub decoder: Option<GroundTruthDecoder>,
}

impl SimulationSpec {
    pub fn new(n_cells: usize, n_genes: usize) -> Self {
        SimulationSpec {
            n_cells,
            n_genes,
            latent_dim: default_latent_dim(),
            n_groups: default_groups(),
            group_separation: default_separation(),
            centers: None,
            log_mean_range: default_log_mean_range(),
            loading_scale: default_loading_scale(),
            theta_range: default_theta_range(),
            pi_range: default_pi_range(),
            fold_changes: None,
            n_batches: default_batches(),
            batch_effect_scale: 0.0,
            decoder: None,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ScviError::Parameter(m));
        if self.n_cells == 0 || self.n_genes == 0 || self.latent_dim == 0 {
            return bad("simulation needs at least one cell, gene and latent dimension".into());
        }
        if self.n_groups == 0 || self.n_batches == 0 {
            return bad("n_groups and n_batches must be at least 1".into());
        }
        let [tlo, thi] = self.theta_range;
        if !(tlo > 0.0 && thi >= tlo) {
            return bad(format!("theta range {:?} must be positive and ordered", self.theta_range));
        }
        let [plo, phi] = self.pi_range;
        if !(0.0..=1.0).contains(&plo) || !(0.0..=1.0).contains(&phi) || phi < plo {
            return bad(format!("pi range {:?} must be ordered within [0, 1]", self.pi_range));
        }
        if self.log_mean_range[1] < self.log_mean_range[0] {
            return bad("log mean range must be ordered".into());
        }
        if self.loading_scale < 0.0 || self.batch_effect_scale < 0.0 {
            return bad("scales must be non-negative".into());
        }
        if let Some(c) = &self.centers {
            if c.len() != self.n_groups || c.iter().any(|v| v.len() != self.latent_dim) {
                return bad("centers must be n_groups × latent_dim".into());
            }
        }
        if let Some(f) = &self.fold_changes {
            if f.len() != self.n_groups || f.iter().any(|v| v.len() != self.n_genes) {
                return bad("fold_changes must be n_groups × n_genes".into());
            }
            if f.iter().flatten().any(|v| !(*v > 0.0)) {
                return bad("fold changes must be positive".into());
            }
        }
        if let Some(d) = &self.decoder {
            d.validate(self.n_genes, self.latent_dim)?;
        }
        Ok(())
    }

    fn group_centers(&self) -> Vec<Vec<f64>> {
        if let Some(c) = &self.centers {
            return c.clone();
        }
        let (k, d, r) = (self.n_groups, self.latent_dim, self.group_separation);
        if k == 1 {
            return vec![vec![0.0; d]];
        }
        (0..k)
            .map(|i| {
                let mut c = vec![0.0; d];
                if d == 1 {
                    c[0] = -r + 2.0 * r * i as f64 / (k - 1) as f64;
                } else {
                    let angle = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
                    c[0] = r * angle.cos();
                    c[1] = r * angle.sin();
                }
                c
            })
            .collect()
    }
}

/// Log-linear decoder generating the synthetic data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthDecoder {
    pub log_mean_bias: Vec<f64>,
    /// genes × latent_dim, row-major
    pub loadings: Vec<f64>,
    pub theta: Vec<f64>,
    pub dropout_logit: Vec<f64>,
}

impl GroundTruthDecoder {
    fn validate(&self, n_genes: usize, latent_dim: usize) -> Result<()> {
        if self.log_mean_bias.len() != n_genes
            || self.theta.len() != n_genes
            || self.dropout_logit.len() != n_genes
            || self.loadings.len() != n_genes * latent_dim
        {
            return Err(ScviError::Parameter("ground-truth decoder shapes do not match spec".into()));
        }
        if self.theta.iter().any(|t| !(*t > 0.0)) {
            return Err(ScviError::Parameter("ground-truth theta must be positive".into()));
        }
        Ok(())
    }

    fn generate<R: Rng + ?Sized>(spec: &SimulationSpec, rng: &mut R) -> Self {
        let g = spec.n_genes;
        let [mlo, mhi] = spec.log_mean_range;
        let [tlo, thi] = spec.theta_range;
        let [plo, phi] = spec.pi_range;
        let log_mean_bias = (0..g).map(|_| mlo + (mhi - mlo) * rng.random::<f64>()).collect();
        let loadings = (0..g * spec.latent_dim)
            .map(|_| {
                let e: f64 = StandardNormal.sample(rng);
                spec.loading_scale * e
            })
            .collect();
        let theta = (0..g)
            .map(|_| (tlo.ln() + (thi.ln() - tlo.ln()) * rng.random::<f64>()).exp())
            .collect();
        let dropout_logit = (0..g)
            .map(|_| {
                let p = plo + (phi - plo) * rng.random::<f64>();
                (p / (1.0 - p)).ln()
            })
            .collect();
        GroundTruthDecoder {
            log_mean_bias,
            loadings,
            theta,
            dropout_logit,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.loadings.len() / self.log_mean_bias.len().max(1)
    }

    /// Per-gene log means for latent `z` plus additive log offsets.
    pub fn log_mean(&self, z: &[f64], offsets: &[f64]) -> Vec<f64> {
        let d = z.len();
        self.log_mean_bias
            .iter()
            .enumerate()
            .map(|(g, b)| {
                let row = &self.loadings[g * d..(g + 1) * d];
                b + row.iter().zip(z).map(|(l, v)| l * v).sum::<f64>() + offsets[g]
            })
            .collect()
    }
}

/// Everything the simulator drew, kept for oracle comparisons.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub decoder: GroundTruthDecoder,
    pub centers: Vec<Vec<f64>>,
    /// groups × genes log fold offsets
    pub group_log_fold: Vec<Vec<f64>>,
    /// batches × genes log offsets
    pub batch_log_effect: Vec<Vec<f64>>,
    /// cells × latent_dim
    pub latent: Tensor,
    pub groups: Vec<usize>,
    pub batches: Vec<usize>,
    /// cells × genes NB means
    pub mu: Tensor,
    /// per-gene inverse dispersion
    pub theta: Vec<f64>,
    /// per-gene dropout probability
    pub pi: Vec<f64>,
    /// cells × genes dropout indicators
    pub dropout: Vec<bool>,
}

pub struct SimulatedData {
    pub matrix: ExpressionMatrix,
    pub truth: GroundTruth,
}

/// Runs the generative process forward.
pub fn simulate<R: Rng + ?Sized>(spec: &SimulationSpec, rng: &mut R) -> Result<SimulatedData> {
    spec.validate()?;
    let (n, g, d) = (spec.n_cells, spec.n_genes, spec.latent_dim);
    let decoder = match &spec.decoder {
        Some(dec) => dec.clone(),
        None => GroundTruthDecoder::generate(spec, rng),
    };
    let centers = spec.group_centers();
    let group_log_fold: Vec<Vec<f64>> = match &spec.fold_changes {
        Some(f) => f.iter().map(|row| row.iter().map(|v| v.ln()).collect()).collect(),
        None => vec![vec![0.0; g]; spec.n_groups],
    };
    let batch_log_effect: Vec<Vec<f64>> = (0..spec.n_batches)
        .map(|_| {
            (0..g)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(rng);
                    spec.batch_effect_scale * e
                })
                .collect()
        })
        .collect();
    let pi: Vec<f64> = decoder.dropout_logit.iter().map(|&l| sigmoid(l)).collect();

    let mut latent = Vec::with_capacity(n * d);
    let mut mu = Vec::with_capacity(n * g);
    let mut counts = Vec::with_capacity(n * g);
    let mut dropout = Vec::with_capacity(n * g);
    let mut groups = Vec::with_capacity(n);
    let mut batches = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.random_range(0..spec.n_groups);
        let b = rng.random_range(0..spec.n_batches);
        let z: Vec<f64> = centers[k]
            .iter()
            .map(|c| {
                let e: f64 = StandardNormal.sample(rng);
                c + e
            })
            .collect();
        let offsets: Vec<f64> = (0..g).map(|j| group_log_fold[k][j] + batch_log_effect[b][j]).collect();
        let log_mu = decoder.log_mean(&z, &offsets);
        for j in 0..g {
            let m = log_mu[j].exp();
            let theta = decoder.theta[j];
            let w = sample_gamma(theta, theta / m, rng)?;
            let y = sample_poisson(w, rng)?;
            let h = rng.random::<f64>() < pi[j];
            mu.push(m);
            dropout.push(h);
            counts.push(if h { 0.0 } else { y as f64 });
        }
        latent.extend(z);
        groups.push(k);
        batches.push(b);
    }

    let mut matrix = ExpressionMatrix::from_counts(Tensor::matrix(n, g, counts)?)?
        .with_labels(groups.iter().map(|k| format!("group{k}")).collect())?;
    if spec.n_batches > 1 {
        matrix = matrix.with_batches(batches.iter().map(|b| format!("batch{b}")).collect())?;
    }
    let theta = decoder.theta.clone();
    Ok(SimulatedData {
        matrix,
        truth: GroundTruth {
            decoder,
            centers,
            group_log_fold,
            batch_log_effect,
            latent: Tensor::matrix(n, d, latent)?,
            groups,
            batches,
            mu: Tensor::matrix(n, g, mu)?,
            theta,
            pi,
            dropout,
        },
    })
}

/// Log-likelihood of one cell's counts as a function of the latent vector,
/// with the count-only terms precomputed.
struct CellLikelihood<'a> {
    truth: &'a GroundTruth,
    counts: &'a [f64],
    offsets: Vec<f64>,
    constants: Vec<f64>,
    log_pi: Vec<f64>,
    log_keep: Vec<f64>,
    center: &'a [f64],
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

impl<'a> CellLikelihood<'a> {
    fn new(truth: &'a GroundTruth, counts: &'a [f64], group: usize, batch: usize) -> Self {
        let dec = &truth.decoder;
        let offsets = (0..counts.len())
            .map(|g| truth.group_log_fold[group][g] + truth.batch_log_effect[batch][g])
            .collect();
        let constants = counts
            .iter()
            .zip(&dec.theta)
            .map(|(&k, &t)| if k > 0.0 { lgamma(k + t) - lgamma(t) - lgamma(k + 1.0) } else { 0.0 })
            .collect();
        CellLikelihood {
            truth,
            counts,
            offsets,
            constants,
            log_pi: dec.dropout_logit.iter().map(|&l| -softplus(-l)).collect(),
            log_keep: dec.dropout_logit.iter().map(|&l| -softplus(l)).collect(),
            center: &truth.centers[group],
        }
    }

    /// `log p(x | z) + log N(z; center, I)` and its gradient in `z`.
    fn log_joint(&self, z: &[f64]) -> (f64, Vec<f64>) {
        let dec = &self.truth.decoder;
        let d = z.len();
        let eta = dec.log_mean(z, &self.offsets);
        let mut value = 0.0;
        let mut grad: Vec<f64> = z.iter().zip(self.center).map(|(v, c)| -(v - c)).collect();
        for (g, &k) in self.counts.iter().enumerate() {
            let theta = dec.theta[g];
            let mu = eta[g].exp();
            let log_ratio = -(mu / theta).ln_1p();
            let (v, d_eta) = if k == 0.0 {
                let nb0 = self.log_keep[g] + theta * log_ratio;
                let v = log_add_exp(self.log_pi[g], nb0);
                let keep = (nb0 - v).exp();
                (v, -keep * theta * mu / (theta + mu))
            } else {
                let v = self.log_keep[g] + self.constants[g] + theta * log_ratio + k * (eta[g] - (theta + mu).ln());
                (v, k - (k + theta) * mu / (theta + mu))
            };
            value += v;
            let row = &dec.loadings[g * d..(g + 1) * d];
            for (gr, l) in grad.iter_mut().zip(row) {
                *gr += d_eta * l;
            }
        }
        let prior: f64 = z.iter().zip(self.center).map(|(v, c)| (v - c) * (v - c)).sum::<f64>();
        (value - 0.5 * prior - 0.5 * d as f64 * LN_2PI, grad)
    }

    /// Mode of the log joint and the negative Hessian there.
    fn laplace(&self) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.center.len();
        let mut z = DVector::from_column_slice(self.center);
        let (mut f, _) = self.log_joint(z.as_slice());
        let mut neg_h = DMatrix::identity(d, d);
        for _ in 0..200 {
            let (_, grad) = self.log_joint(z.as_slice());
            let grad = DVector::from_vec(grad);
            neg_h = self.neg_hessian(z.as_slice());
            let step = match neg_h.clone().cholesky() {
                Some(ch) => ch.solve(&grad),
                None => grad.clone(),
            };
            let mut t = 1.0;
            let mut improved = false;
            for _ in 0..40 {
                let cand = &z + &step * t;
                let (fc, _) = self.log_joint(cand.as_slice());
                if fc.is_finite() && fc >= f {
                    z = cand;
                    f = fc;
                    improved = true;
                    break;
                }
                t *= 0.5;
            }
            if !improved || (step.norm() * t) < 1e-10 {
                break;
            }
        }
        (z, neg_h)
    }

    fn neg_hessian(&self, z: &[f64]) -> DMatrix<f64> {
        let d = z.len();
        let h = 1e-5;
        let mut m = DMatrix::zeros(d, d);
        for j in 0..d {
            let mut zp = z.to_vec();
            let mut zm = z.to_vec();
            zp[j] += h;
            zm[j] -= h;
            let (_, gp) = self.log_joint(&zp);
            let (_, gm) = self.log_joint(&zm);
            for i in 0..d {
                m[(i, j)] = -(gp[i] - gm[i]) / (2.0 * h);
            }
        }
        (&m + m.transpose()) * 0.5
    }
}

fn mvn_log_density(x: &DVector<f64>, mean: &DVector<f64>, chol_l: &DMatrix<f64>) -> f64 {
    let d = x.len();
    let diff = x - mean;
    let u = chol_l
        .solve_lower_triangular(&diff)
        .expect("Cholesky factor has a positive diagonal");
    let log_det: f64 = (0..d).map(|i| chol_l[(i, i)].ln()).sum();
    -0.5 * u.norm_squared() - log_det - 0.5 * d as f64 * LN_2PI
}

impl GroundTruth {
    /// Importance-sampling estimate of the generating model's marginal
    /// `log p(x)` for one cell, marginalizing the group (uniform prior) and
    /// the latent vector. Each group component uses a defensive mixture of
    /// an inflated Laplace approximation and the component prior.
    pub fn log_marginal<R: Rng + ?Sized>(
        &self,
        counts: &[f64],
        batch: usize,
        n_samples: usize,
        rng: &mut R,
    ) -> Result<f64> {
        if n_samples == 0 {
            return Err(ScviError::Parameter("need at least one importance sample".into()));
        }
        let k = self.centers.len();
        let d = self.decoder.latent_dim();
        let mut per_group = Vec::with_capacity(k);
        for group in 0..k {
            let lik = CellLikelihood::new(self, counts, group, batch);
            let (mode, neg_h) = lik.laplace();
            let inflate = 1.5;
            let cov = match neg_h.clone().try_inverse() {
                Some(c) if c.clone().cholesky().is_some() => c * (inflate * inflate),
                _ => DMatrix::identity(d, d),
            };
            let chol = cov.cholesky().expect("checked above").l();
            let center = DVector::from_column_slice(&self.centers[group]);
            let eye = DMatrix::<f64>::identity(d, d);
            let defensive = 0.1f64;
            let mut log_w = Vec::with_capacity(n_samples);
            for _ in 0..n_samples {
                let eps = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
                let z = if rng.random::<f64>() < defensive {
                    &center + &eps
                } else {
                    &mode + &chol * &eps
                };
                let log_q = log_add_exp(
                    defensive.ln() + mvn_log_density(&z, &center, &eye),
                    (1.0 - defensive).ln() + mvn_log_density(&z, &mode, &chol),
                );
                let (log_joint, _) = lik.log_joint(z.as_slice());
                log_w.push(log_joint - log_q);
            }
            per_group.push(log_sum_exp(&log_w) - (n_samples as f64).ln() - (k as f64).ln());
        }
        Ok(log_sum_exp(&per_group))
    }

    /// Mean generating-model `log p(x)` over the rows of `data`, whose cells
    /// carry the given batch indices.
    pub fn mean_log_marginal(
        &self,
        data: &Tensor,
        batches: &[usize],
        n_samples: usize,
        seed: u64,
    ) -> Result<f64> {
        use rand::SeedableRng;
        let values: Result<Vec<f64>> = (0..data.rows())
            .into_par_iter()
            .map(|i| {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                self.log_marginal(data.row(i), batches[i], n_samples, &mut rng)
            })
            .collect();
        let values = values?;
        Ok(values.iter().sum::<f64>() / values.len() as f64)
    }
}
