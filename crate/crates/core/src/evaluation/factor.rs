use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::distributions::DiagGaussian;
use crate::error::{Result, ScviError};
use crate::tensor::Tensor;

/// Lower bound on the noise variances.
const NOISE_FLOOR: f64 = 1e-6;

/// Linear-Gaussian factor model `x = mean + W z + ε`, `z ~ N(0, I)`,
/// `ε ~ N(0, diag(noise_var))`.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorModel {
    mean: DVector<f64>,
    loadings: DMatrix<f64>,
    noise_var: DVector<f64>,
}

/// Quantities shared by the likelihood and posterior: `A = Ψ⁻¹W`,
/// `M = I + WᵀΨ⁻¹W`, `M⁻¹` and `ln|C|` for `C = WWᵀ + Ψ`.
struct Woodbury {
    a: DMatrix<f64>,
    m_inv: DMatrix<f64>,
    log_det_c: f64,
}

impl FactorModel {
    pub fn new(mean: Vec<f64>, loadings: Tensor, noise_var: Vec<f64>) -> Result<Self> {
        let g = mean.len();
        if loadings.shape().len() != 2 || loadings.rows() != g || noise_var.len() != g {
            return Err(ScviError::Dimension(
                "factor model needs mean (g), loadings (g × d) and noise variances (g)".into(),
            ));
        }
        if noise_var.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(ScviError::Domain("noise variances must be positive and finite".into()));
        }
        Ok(FactorModel {
            mean: DVector::from_vec(mean),
            loadings: DMatrix::from_row_slice(g, loadings.cols(), loadings.data()),
            noise_var: DVector::from_vec(noise_var),
        })
    }

    pub fn n_genes(&self) -> usize {
        self.mean.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.loadings.ncols()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn noise_var(&self) -> &[f64] {
        self.noise_var.as_slice()
    }

    /// Loadings as a genes × latent_dim tensor.
    pub fn loadings(&self) -> Tensor {
        let (g, d) = self.loadings.shape();
        let data = (0..g).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| self.loadings[(i, j)]).collect();
        Tensor::matrix(g, d, data).expect("shape matches")
    }

    fn woodbury(&self) -> Woodbury {
        let d = self.latent_dim();
        let psi_inv = self.noise_var.map(|v| 1.0 / v);
        let a = DMatrix::from_fn(self.n_genes(), d, |i, j| self.loadings[(i, j)] * psi_inv[i]);
        let m = DMatrix::identity(d, d) + self.loadings.transpose() * &a;
        let chol = m.cholesky().expect("I + WᵀΨ⁻¹W is positive definite");
        let log_det_m = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let log_det_c = self.noise_var.iter().map(|v| v.ln()).sum::<f64>() + log_det_m;
        Woodbury {
            a,
            m_inv: chol.inverse(),
            log_det_c,
        }
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_genes() {
            return Err(ScviError::Dimension(format!(
                "expected {} values, got {}",
                self.n_genes(),
                x.len()
            )));
        }
        Ok(())
    }

    /// Closed-form `log p(x)` under `N(mean, WWᵀ + Ψ)`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        let w = self.woodbury();
        let r = DVector::from_column_slice(x) - &self.mean;
        let quad_diag: f64 = r.iter().zip(self.noise_var.iter()).map(|(r, v)| r * r / v).sum();
        let u = w.a.transpose() * &r;
        let quad = quad_diag - u.dot(&(&w.m_inv * &u));
        let g = self.n_genes() as f64;
        Ok(-0.5 * (g * (2.0 * PI).ln() + w.log_det_c + quad))
    }

    /// `log p(z) + log p(x | z)`.
    pub fn log_joint(&self, x: &[f64], z: &[f64]) -> Result<f64> {
        self.check(x)?;
        if z.len() != self.latent_dim() {
            return Err(ScviError::Dimension("latent vector has the wrong length".into()));
        }
        let z = DVector::from_column_slice(z);
        let pred = &self.mean + &self.loadings * &z;
        let ln2pi = (2.0 * PI).ln();
        let prior = -0.5 * (z.len() as f64 * ln2pi + z.norm_squared());
        let lik: f64 = x
            .iter()
            .zip(pred.iter())
            .zip(self.noise_var.iter())
            .map(|((x, p), v)| -0.5 * (ln2pi + v.ln() + (x - p) * (x - p) / v))
            .sum();
        Ok(prior + lik)
    }

    /// Exact posterior `p(z | x)` as (mean, full covariance `M⁻¹`).
    pub fn posterior(&self, x: &[f64]) -> Result<(Vec<f64>, Tensor)> {
        self.check(x)?;
        let w = self.woodbury();
        let r = DVector::from_column_slice(x) - &self.mean;
        let mean = &w.m_inv * (w.a.transpose() * r);
        let d = self.latent_dim();
        let cov = Tensor::matrix(d, d, (0..d * d).map(|k| w.m_inv[(k / d, k % d)]).collect())?;
        Ok((mean.as_slice().to_vec(), cov))
    }

    /// Diagonal Gaussian with the posterior mean and marginal variances.
    pub fn posterior_diagonal(&self, x: &[f64]) -> Result<DiagGaussian> {
        let (mean, cov) = self.posterior(x)?;
        let std = (0..mean.len()).map(|i| cov.get(i, i).sqrt()).collect();
        DiagGaussian::new(mean, std)
    }

    /// Draws `n` rows from the model.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor {
        let (g, d) = (self.n_genes(), self.latent_dim());
        let mut data = Vec::with_capacity(n * g);
        for _ in 0..n {
            let z = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
            let x = &self.mean + &self.loadings * z;
            for i in 0..g {
                let e: f64 = StandardNormal.sample(rng);
                data.push(x[i] + self.noise_var[i].sqrt() * e);
            }
        }
        Tensor::matrix(n, g, data).expect("shape matches")
    }
}

/// Result of [`factor_analysis_fit`].
#[derive(Clone, Debug)]
pub struct FactorAnalysis {
    pub model: FactorModel,
    /// Posterior means `E[z | x]`, cells × latent_dim.
    pub latents: Tensor,
    /// Total data log-likelihood before each EM update and after the last.
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
}

impl FactorAnalysis {
    pub fn mean_log_likelihood(&self, n_cells: usize) -> f64 {
        self.log_likelihood.last().copied().unwrap_or(f64::NEG_INFINITY) / n_cells as f64
    }
}

/// Total log-likelihood of `n` rows with sample covariance `s` (about the
/// model mean).
fn total_log_likelihood(model: &FactorModel, s: &DMatrix<f64>, n: usize) -> f64 {
    let w = model.woodbury();
    let g = model.n_genes();
    let tr_diag: f64 = (0..g).map(|i| s[(i, i)] / model.noise_var[i]).sum();
    let sa = s * &w.a;
    let corr = (&w.m_inv * (w.a.transpose() * sa)).trace();
    -0.5 * n as f64 * (g as f64 * (2.0 * PI).ln() + w.log_det_c + tr_diag - corr)
}

/// Maximum-likelihood factor analysis by EM. `data` is cells × genes and
/// should already be on the scale to model (e.g. `log(1 + x)`).
///
/// Stops when the per-cell log-likelihood gain falls below `tol` or after
/// `max_iter` updates; `converged` reports which.
pub fn factor_analysis_fit(data: &Tensor, latent_dim: usize, max_iter: usize, tol: f64) -> Result<FactorAnalysis> {
    if data.shape().len() != 2 || data.rows() < 2 {
        return Err(ScviError::Parameter("factor analysis needs at least two rows".into()));
    }
    let (n, g) = (data.rows(), data.cols());
    if latent_dim >= g {
        return Err(ScviError::Parameter(format!(
            "latent_dim {latent_dim} must be below the number of genes {g}"
        )));
    }
    let x = DMatrix::from_row_slice(n, g, data.data());
    let mean = DVector::from_fn(g, |j, _| x.column(j).sum() / n as f64);
    let mut xc = x;
    for j in 0..g {
        let m = mean[j];
        xc.column_mut(j).iter_mut().for_each(|v| *v -= m);
    }
    let s = (xc.transpose() * &xc) / n as f64;

    let eig = s.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let loadings = DMatrix::from_fn(g, latent_dim, |i, k| {
        let c = order[k];
        eig.eigenvectors[(i, c)] * eig.eigenvalues[c].max(0.0).sqrt()
    });
    let noise = DVector::from_fn(g, |i, _| s[(i, i)].max(NOISE_FLOOR));
    let mut model = FactorModel {
        mean,
        loadings,
        noise_var: noise,
    };

    let mut trace = vec![total_log_likelihood(&model, &s, n)];
    // with no factors the initial diagonal Gaussian is already the optimum
    let converged = latent_dim == 0 || em_updates(&mut model, &s, n, max_iter, tol, &mut trace);

    let w = model.woodbury();
    let beta = &w.m_inv * w.a.transpose();
    let z = xc * beta.transpose();
    let latents = Tensor::matrix(n, latent_dim, (0..n).flat_map(|i| z.row(i).iter().copied().collect::<Vec<_>>()).collect())?;
    Ok(FactorAnalysis {
        model,
        latents,
        log_likelihood: trace,
        converged,
    })
}

/// Runs up to `max_iter` EM updates, appending the log-likelihood after
/// each. Returns whether the tolerance was met.
fn em_updates(model: &mut FactorModel, s: &DMatrix<f64>, n: usize, max_iter: usize, tol: f64, trace: &mut Vec<f64>) -> bool {
    let d = model.latent_dim();
    for _ in 0..max_iter {
        let w = model.woodbury();
        let beta = &w.m_inv * w.a.transpose();
        let s_beta_t = s * beta.transpose();
        let ezz = &w.m_inv + &beta * &s_beta_t;
        let ezz_inv = ezz.cholesky().expect("second moment is positive definite").inverse();
        let new_w = &s_beta_t * ezz_inv;
        let g = model.n_genes();
        let new_psi = DVector::from_fn(g, |i, _| {
            let explained: f64 = (0..d).map(|k| new_w[(i, k)] * s_beta_t[(i, k)]).sum();
            (s[(i, i)] - explained).max(NOISE_FLOOR)
        });
        model.loadings = new_w;
        model.noise_var = new_psi;
        let ll = total_log_likelihood(model, s, n);
        let gain = (ll - trace.last().expect("initial value")) / n as f64;
        trace.push(ll);
        if gain.abs() < tol {
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> FactorModel {
        let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5], vec![0.0, 2.0], vec![-1.0, 0.3]]).unwrap();
        FactorModel::new(vec![0.5, -1.0, 2.0, 0.0], w, vec![0.3, 0.2, 0.5, 0.1]).unwrap()
    }

    /// Dense reference: log N(x; mean, WWᵀ + Ψ) through a full Cholesky.
    fn dense_log_density(m: &FactorModel, x: &[f64]) -> f64 {
        let c = &m.loadings * m.loadings.transpose() + DMatrix::from_diagonal(&m.noise_var);
        let chol = c.cholesky().unwrap();
        let r = DVector::from_column_slice(x) - &m.mean;
        let sol = chol.solve(&r);
        let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * (x.len() as f64 * (2.0 * PI).ln() + logdet + r.dot(&sol))
    }

    #[test]
    fn woodbury_matches_dense() {
        let m = toy();
        let x = [1.0, 0.2, -0.5, 3.0];
        assert!((m.log_density(&x).unwrap() - dense_log_density(&m, &x)).abs() < 1e-10);
    }

    #[test]
    fn posterior_normalizes_joint() {
        // log p(x) = log p(x, z) − log p(z | x) for any z
        let m = toy();
        let x = [1.0, 0.2, -0.5, 3.0];
        let (mean, cov) = m.posterior(&x).unwrap();
        let z = [0.3, -0.7];
        let c = DMatrix::from_row_slice(2, 2, cov.data());
        let r = DVector::from_column_slice(&z) - DVector::from_column_slice(&mean);
        let chol = c.clone().cholesky().unwrap();
        let log_q = -0.5 * (2.0 * (2.0 * PI).ln() + c.determinant().ln() + r.dot(&chol.solve(&r)));
        let lhs = m.log_joint(&x, &z).unwrap() - log_q;
        assert!((lhs - m.log_density(&x).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn em_is_monotone() {
        let data = toy().sample(500, &mut ChaCha8Rng::seed_from_u64(1));
        let fit = factor_analysis_fit(&data, 2, 200, 1e-10).unwrap();
        for w in fit.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-8 * w[0].abs(), "{} then {}", w[0], w[1]);
        }
        assert_eq!(fit.latents.shape(), &[500, 2]);
    }

    #[test]
    fn zero_latent_dims_is_diagonal_gaussian() {
        let data = toy().sample(300, &mut ChaCha8Rng::seed_from_u64(2));
        let fit = factor_analysis_fit(&data, 0, 10, 1e-8).unwrap();
        let mut expected = 0.0;
        for j in 0..4 {
            let col: Vec<f64> = (0..300).map(|i| data.get(i, j)).collect();
            let mu = col.iter().sum::<f64>() / 300.0;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 300.0;
            expected += col
                .iter()
                .map(|v| -0.5 * ((2.0 * PI * var).ln() + (v - mu) * (v - mu) / var))
                .sum::<f64>();
        }
        assert!((fit.log_likelihood.last().unwrap() - expected).abs() < 1e-8 * expected.abs());
        assert_eq!(fit.latents.shape(), &[300, 0]);
    }
}
