//! Special functions, count likelihoods and samplers.
//!
//! The negative binomial is parameterized by its mean `mu` and inverse
//! dispersion `theta` (variance `mu + mu^2 / theta`), which corresponds to the
//! Gamma(shape = theta, rate = theta / mu) mixing distribution of a Poisson.
//! The zero-inflated variant adds a point mass `pi` at zero.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};

use crate::error::{Result, ScviError};

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// `ln Γ(x)` for `x > 0`.
pub fn log_gamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(ScviError::Domain(format!("log_gamma requires x > 0, got {x}")));
    }
    Ok(lgamma(x))
}

/// Unchecked `ln Γ(x)` (Lanczos, g = 7), valid for `x > 0`.
pub(crate) fn lgamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection: Γ(x)Γ(1-x) = π / sin(πx)
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - lgamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS_COEF[0];
    for (i, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    LN_SQRT_2PI + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Digamma function ψ(x) for `x > 0`.
pub fn digamma(x: f64) -> f64 {
    let mut x = x;
    let mut acc = 0.0;
    while x < 6.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + x.ln()
        - 0.5 * inv
        - inv2
            * (1.0 / 12.0
                - inv2
                    * (1.0 / 120.0
                        - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0)))))
}

/// `ln(e^a + e^b)` without overflow. Handles `-inf` operands.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `ln Σ exp(v_i)`; `-inf` for an empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn check_nb(mu: f64, theta: f64) -> Result<()> {
    if !(mu > 0.0) || !mu.is_finite() {
        return Err(ScviError::Domain(format!("NB mean must be positive, got {mu}")));
    }
    if !(theta > 0.0) || !theta.is_finite() {
        return Err(ScviError::Domain(format!(
            "NB inverse dispersion must be positive, got {theta}"
        )));
    }
    Ok(())
}

/// `ln (theta / (theta + mu))^theta`, the log probability of a zero count.
#[inline]
fn nb_log_zero(mu: f64, theta: f64) -> f64 {
    -theta * (mu / theta).ln_1p()
}

/// Unchecked NB log-pmf.
#[inline]
pub(crate) fn nb_lpmf(k: f64, mu: f64, theta: f64) -> f64 {
    let log_zero = nb_log_zero(mu, theta);
    if k == 0.0 {
        return log_zero;
    }
    lgamma(k + theta) - lgamma(theta) - lgamma(k + 1.0) + log_zero
        + k * (mu.ln() - (theta + mu).ln())
}

/// Negative binomial log-pmf with mean `mu` and inverse dispersion `theta`.
pub fn nb_log_pmf(k: u64, mu: f64, theta: f64) -> Result<f64> {
    check_nb(mu, theta)?;
    Ok(nb_lpmf(k as f64, mu, theta))
}

/// Poisson log-pmf; the `theta -> inf` limit of [`nb_log_pmf`].
pub fn poisson_log_pmf(k: u64, rate: f64) -> Result<f64> {
    if !(rate > 0.0) {
        return Err(ScviError::Domain(format!("Poisson rate must be positive, got {rate}")));
    }
    let k = k as f64;
    Ok(k * rate.ln() - rate - lgamma(k + 1.0))
}

/// Parameters of a zero-inflated negative binomial at one matrix entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZinbParams {
    pub mu: f64,
    pub theta: f64,
    pub pi: f64,
}

impl ZinbParams {
    pub fn new(mu: f64, theta: f64, pi: f64) -> Result<Self> {
        check_nb(mu, theta)?;
        if !(0.0..=1.0).contains(&pi) {
            return Err(ScviError::Domain(format!(
                "zero-inflation probability must lie in [0, 1], got {pi}"
            )));
        }
        Ok(ZinbParams { mu, theta, pi })
    }

    /// Probability of observing a zero.
    pub fn zero_probability(&self) -> f64 {
        self.pi + (1.0 - self.pi) * nb_log_zero(self.mu, self.theta).exp()
    }

    /// Mean of the observed count, `(1 - pi) * mu`.
    pub fn mean(&self) -> f64 {
        (1.0 - self.pi) * self.mu
    }
}

/// Zero-inflated NB log-pmf. Returns `-inf` when `pi = 1` and `k > 0`.
pub fn zinb_log_pmf(k: u64, p: &ZinbParams) -> f64 {
    let log_pi = p.pi.ln();
    let log_keep = (-p.pi).ln_1p();
    if k == 0 {
        log_add_exp(log_pi, log_keep + nb_log_zero(p.mu, p.theta))
    } else if p.pi == 1.0 {
        f64::NEG_INFINITY
    } else {
        log_keep + nb_lpmf(k as f64, p.mu, p.theta)
    }
}

/// Partial derivatives of a ZINB log-pmf.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ZinbGradient {
    pub d_mu: f64,
    pub d_theta: f64,
    /// With respect to `pi` in [`zinb_log_pmf_grad`], and with respect to
    /// the dropout logit in [`zinb_log_pmf_logit`].
    pub d_pi: f64,
}

/// Gradient of [`zinb_log_pmf`] with respect to `(mu, theta, pi)`.
pub fn zinb_log_pmf_grad(k: u64, p: &ZinbParams) -> ZinbGradient {
    let (mu, theta, pi) = (p.mu, p.theta, p.pi);
    let kf = k as f64;
    let log_ratio = (theta / (theta + mu)).ln();
    if k == 0 {
        let nb0 = nb_log_zero(mu, theta).exp();
        let denom = pi + (1.0 - pi) * nb0;
        let keep = (1.0 - pi) * nb0 / denom;
        ZinbGradient {
            d_mu: keep * (-theta / (theta + mu)),
            d_theta: keep * (log_ratio + mu / (theta + mu)),
            d_pi: (1.0 - nb0) / denom,
        }
    } else {
        ZinbGradient {
            d_mu: kf / mu - (kf + theta) / (theta + mu),
            d_theta: digamma(kf + theta) - digamma(theta) + log_ratio + (mu - kf) / (theta + mu),
            d_pi: -1.0 / (1.0 - pi),
        }
    }
}

/// ZINB log-pmf with the zero inflation given as a logit, together with its
/// gradient with respect to `(mu, theta, logit)`. `k` is a non-negative count.
#[inline]
pub fn zinb_log_pmf_logit(k: f64, mu: f64, theta: f64, logit: f64) -> (f64, ZinbGradient) {
    // ln pi = -softplus(-l), ln(1 - pi) = -softplus(l)
    let log_pi = -softplus(-logit);
    let log_keep = -softplus(logit);
    let pi = sigmoid(logit);
    let log_ratio = -(mu / theta).ln_1p();
    if k == 0.0 {
        let log_nb0 = theta * log_ratio;
        let b = log_keep + log_nb0;
        let value = log_add_exp(log_pi, b);
        // responsibility of the NB branch for the zero
        let keep = (b - value).exp();
        let grad = ZinbGradient {
            d_mu: keep * (-theta / (theta + mu)),
            d_theta: keep * (log_ratio + mu / (theta + mu)),
            d_pi: (1.0 - keep) - pi,
        };
        (value, grad)
    } else {
        let value = log_keep + nb_lpmf(k, mu, theta);
        let grad = ZinbGradient {
            d_mu: k / mu - (k + theta) / (theta + mu),
            d_theta: digamma(k + theta) - digamma(theta) + log_ratio + (mu - k) / (theta + mu),
            d_pi: -pi,
        };
        (value, grad)
    }
}

/// Gaussian with diagonal covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(ScviError::Dimension(format!(
                "mean has length {}, std has length {}",
                mean.len(),
                std.len()
            )));
        }
        if let Some(s) = std.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(ScviError::Domain(format!("standard deviation must be positive, got {s}")));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(ScviError::Domain("mean must be finite".into()));
        }
        Ok(DiagGaussian { mean, std })
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(&self.std)
            .zip(z)
            .map(|((m, s), x)| {
                let u = (x - m) / s;
                -0.5 * u * u - s.ln() - LN_SQRT_2PI
            })
            .sum()
    }

    /// Reparameterized draw `mean + std * eps`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(m, s)| {
                let eps: f64 = StandardNormal.sample(rng);
                m + s * eps
            })
            .collect()
    }
}

/// `KL(q || N(0, I))` for a diagonal Gaussian.
pub fn kl_diag_gaussian_to_standard(q: &DiagGaussian) -> f64 {
    q.mean
        .iter()
        .zip(&q.std)
        .map(|(m, s)| 0.5 * (m * m + s * s - 1.0 - 2.0 * s.ln()))
        .sum()
}

/// Gradient of [`kl_diag_gaussian_to_standard`] with respect to mean and std.
pub fn kl_diag_gaussian_grad(q: &DiagGaussian) -> (Vec<f64>, Vec<f64>) {
    let d_mean = q.mean.clone();
    let d_std = q.std.iter().map(|s| s - 1.0 / s).collect();
    (d_mean, d_std)
}

/// Draws from a diagonal Gaussian. Unlike [`DiagGaussian::sample`], a zero
/// standard deviation is allowed and returns the mean exactly.
pub fn sample_gaussian<R: Rng + ?Sized>(mean: &[f64], std: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    if mean.len() != std.len() {
        return Err(ScviError::Dimension("mean and std lengths differ".into()));
    }
    if std.iter().any(|s| !(*s >= 0.0)) {
        return Err(ScviError::Domain("standard deviation must be non-negative".into()));
    }
    Ok(mean
        .iter()
        .zip(std)
        .map(|(m, s)| {
            let eps: f64 = StandardNormal.sample(rng);
            m + s * eps
        })
        .collect())
}

/// Gamma draw with the given shape and rate (Marsaglia–Tsang).
pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    if !(shape > 0.0) || !(rate > 0.0) || !shape.is_finite() || !rate.is_finite() {
        return Err(ScviError::Domain(format!(
            "Gamma needs positive shape and rate, got ({shape}, {rate})"
        )));
    }
    let dist = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| ScviError::Domain(format!("Gamma({shape}, {rate}): {e}")))?;
    Ok(dist.sample(rng))
}

/// Poisson draw; a zero rate yields zero.
pub fn sample_poisson<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> Result<u64> {
    if rate == 0.0 {
        return Ok(0);
    }
    let dist = Poisson::new(rate)
        .map_err(|e| ScviError::Domain(format!("Poisson({rate}): {e}")))?;
    Ok(dist.sample(rng) as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn log_gamma_known_values() {
        assert!(close(log_gamma(1.0).unwrap(), 0.0, 1e-14));
        assert!(close(log_gamma(5.0).unwrap(), 24f64.ln(), 1e-13));
        // ln sqrt(pi)
        assert!(close(log_gamma(0.5).unwrap(), 0.572_364_942_924_700_1, 1e-13));
        assert!(log_gamma(0.0).is_err());
        assert!(log_gamma(-1.5).is_err());
    }

    #[test]
    fn log_gamma_matches_statrs() {
        for &x in &[1e-3, 0.1, 0.7, 1.5, 3.3, 10.0, 57.25, 1e3, 1e6, 1e8] {
            let expected = statrs::function::gamma::ln_gamma(x);
            let got = log_gamma(x).unwrap();
            assert!(
                (got - expected).abs() <= 1e-10 * expected.abs().max(1.0),
                "x={x}: {got} vs {expected}"
            );
        }
    }

    #[test]
    fn digamma_matches_statrs() {
        for &x in &[1e-2, 0.5, 1.0, 2.5, 7.0, 40.0, 1e5] {
            let expected = statrs::function::gamma::digamma(x);
            assert!((digamma(x) - expected).abs() < 1e-10, "x={x}");
        }
    }

    #[test]
    fn softplus_at_zero() {
        assert!(close(softplus(0.0), 0.693_147_180_559_945_3, 1e-15));
        assert!(close(softplus(800.0), 800.0, 0.0));
        assert!(softplus(-800.0) >= 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn nb_closed_form() {
        assert!(close(nb_log_pmf(0, 1.0, 1.0).unwrap(), 0.5f64.ln(), 1e-15));
        assert!(nb_log_pmf(1, 0.0, 1.0).is_err());
        assert!(nb_log_pmf(1, 1.0, -1.0).is_err());
    }

    #[test]
    fn nb_normalizes() {
        let total: f64 = (0..=10_000)
            .map(|k| nb_log_pmf(k, 5.0, 2.0).unwrap().exp())
            .sum();
        assert!(close(total, 1.0, 1e-10));
    }

    #[test]
    fn zinb_cases() {
        let p = ZinbParams::new(1.0, 1.0, 1.0).unwrap();
        assert_eq!(zinb_log_pmf(0, &p), 0.0);
        assert_eq!(zinb_log_pmf(3, &p), f64::NEG_INFINITY);
        let p = ZinbParams::new(1.0, 1.0, 0.0).unwrap();
        assert!(close(zinb_log_pmf(0, &p), 0.5f64.ln(), 1e-15));
        let p = ZinbParams::new(5.0, 2.0, 0.3).unwrap();
        let total: f64 = (0..=10_000).map(|k| zinb_log_pmf(k, &p).exp()).sum();
        assert!(close(total, 1.0, 1e-10));
        assert!(ZinbParams::new(1.0, 1.0, 1.5).is_err());
    }

    #[test]
    fn logit_form_matches_probability_form() {
        for &(mu, theta, pi) in &[(0.3, 0.7, 0.2), (12.0, 3.0, 0.05), (4.0, 50.0, 0.9)] {
            let p = ZinbParams::new(mu, theta, pi).unwrap();
            for k in 0..20u64 {
                let (v, _) = zinb_log_pmf_logit(k as f64, mu, theta, logit(pi));
                assert!(close(v, zinb_log_pmf(k, &p), 1e-12), "k={k}");
            }
        }
    }

    #[test]
    fn kl_values() {
        assert_eq!(kl_diag_gaussian_to_standard(&DiagGaussian::standard(7)), 0.0);
        let q = DiagGaussian::new(vec![1.0], vec![1.0]).unwrap();
        assert!(close(kl_diag_gaussian_to_standard(&q), 0.5, 1e-15));
        let q = DiagGaussian::new(vec![0.0], vec![2.0]).unwrap();
        assert!(close(kl_diag_gaussian_to_standard(&q), 0.806_852_819_440_054_7, 1e-12));
        assert!(DiagGaussian::new(vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn zero_std_sample_is_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = sample_gaussian(&[1.5, -2.0], &[0.0, 0.0], &mut rng).unwrap();
        assert_eq!(z, vec![1.5, -2.0]);
    }

    #[test]
    fn gamma_domain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_gamma(0.0, 1.0, &mut rng).is_err());
        assert!(sample_gamma(1.0, -1.0, &mut rng).is_err());
    }
}
