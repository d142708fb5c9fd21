use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Covariates, ExpressionMatrix};
use crate::distributions::sigmoid;
use crate::error::{Result, ScviError};
use crate::model::ScviModel;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionConfig {
    /// Decay of the zeroing probability in `ln(1 + x)`.
    pub lambda: f64,
    #[serde(default)]
    pub seed: u64,
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(ScviError::Parameter("corruption lambda must be positive and finite".into()));
        }
        Ok(())
    }
}

/// An entry zeroed by [`corrupt`] together with its original count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedEntry {
    pub cell: usize,
    pub gene: usize,
    pub value: f64,
}

#[derive(Clone, Debug)]
pub struct Corrupted {
    pub matrix: ExpressionMatrix,
    /// Zeroed entries in row-major order.
    pub mask: Vec<MaskedEntry>,
}

/// `exp(−λ (ln(1 + x))²)`, the chance a count `x > 0` is zeroed.
pub fn corruption_probability(x: f64, lambda: f64) -> f64 {
    let l = x.ln_1p();
    (-lambda * l * l).exp()
}

/// Zeroes each nonzero entry independently with [`corruption_probability`].
/// One uniform draw is consumed per nonzero entry, in row-major order.
pub fn corrupt(data: &ExpressionMatrix, config: &CorruptionConfig) -> Result<Corrupted> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut matrix = data.clone();
    let g = data.n_genes();
    let mut mask = Vec::new();
    for (idx, v) in matrix.counts_mut().data_mut().iter_mut().enumerate() {
        if *v > 0.0 && rng.random::<f64>() < corruption_probability(*v, config.lambda) {
            mask.push(MaskedEntry {
                cell: idx / g,
                gene: idx % g,
                value: *v,
            });
            *v = 0.0;
        }
    }
    Ok(Corrupted { matrix, mask })
}

/// λ at which the expected fraction of zeroed nonzero entries equals
/// `target`, found by bisection on `ln λ`.
pub fn calibrate_lambda(counts: &Tensor, target: f64) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(ScviError::Parameter("target corruption fraction must lie in (0, 1)".into()));
    }
    let nonzero: Vec<f64> = counts.data().iter().copied().filter(|v| *v > 0.0).collect();
    if nonzero.is_empty() {
        return Err(ScviError::Data("matrix has no nonzero entries to corrupt".into()));
    }
    let fraction = |lambda: f64| {
        nonzero.iter().map(|&x| corruption_probability(x, lambda)).sum::<f64>() / nonzero.len() as f64
    };
    let (mut lo, mut hi) = (-30.0f64, 30.0f64);
    if fraction(hi.exp()) > target || fraction(lo.exp()) < target {
        return Err(ScviError::Numerical(format!("no lambda reaches corruption fraction {target}")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if fraction(mid.exp()) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

/// Scores for one imputation run.
#[derive(Clone, Debug)]
pub struct Imputation {
    /// Decoded NB mean per masked entry.
    pub imputed: Vec<f64>,
    /// Dropout probability per masked entry.
    pub dropout_prob: Vec<f64>,
    pub median_abs_error: f64,
    pub mean_abs_error: f64,
    /// Binary cross entropy of π over all zeros of the corrupted matrix,
    /// masked entries being the positive class.
    pub cross_entropy: f64,
}

const DECODE_CHUNK: usize = 512;

/// Imputes masked entries with the decoded mean at the posterior-mean
/// latent. Only the positions in `mask` are read; true values serve scoring.
pub fn impute(
    model: &ScviModel,
    corrupted: &ExpressionMatrix,
    covariates: Option<&Covariates>,
    mask: &[MaskedEntry],
) -> Result<Imputation> {
    let (n, g) = (corrupted.n_cells(), corrupted.n_genes());
    if g != model.config.n_genes {
        return Err(ScviError::Dimension(format!("data has {g} genes, model expects {}", model.config.n_genes)));
    }
    let mut mu = Vec::with_capacity(n * g);
    let mut pi = Vec::with_capacity(n * g);
    let all: Vec<usize> = (0..n).collect();
    for rows in all.chunks(DECODE_CHUNK) {
        let x = corrupted.counts().select_rows(rows);
        let c = covariates.map(|c| c.values().select_rows(rows));
        let z = model.latent_means(&x, c.as_ref())?;
        let dec = model.decode(&z, c.as_ref())?;
        mu.extend_from_slice(dec.mu.data());
        pi.extend(dec.dropout_logit.data().iter().map(|&l| sigmoid(l)));
    }
    let pi = Tensor::matrix(n, g, pi)?;
    let imputed: Vec<f64> = mask.iter().map(|e| mu[e.cell * g + e.gene]).collect();
    if imputed.iter().any(|v| !v.is_finite()) {
        return Err(ScviError::Numerical("imputed values are not finite".into()));
    }
    let dropout_prob = mask.iter().map(|e| pi.get(e.cell, e.gene)).collect();
    let (median_abs_error, mean_abs_error) = imputation_errors(&imputed, mask)?;
    let cross_entropy = dropout_cross_entropy(&pi, corrupted.counts(), mask)?;
    Ok(Imputation {
        imputed,
        dropout_prob,
        median_abs_error,
        mean_abs_error,
        cross_entropy,
    })
}

/// (median, mean) of `|imputed − true|` over the mask.
pub fn imputation_errors(imputed: &[f64], mask: &[MaskedEntry]) -> Result<(f64, f64)> {
    if imputed.len() != mask.len() {
        return Err(ScviError::Dimension("one imputed value per masked entry is required".into()));
    }
    if mask.is_empty() {
        return Err(ScviError::Parameter("mask is empty".into()));
    }
    let mut err: Vec<f64> = imputed.iter().zip(mask).map(|(v, e)| (v - e.value).abs()).collect();
    let mean = err.iter().sum::<f64>() / err.len() as f64;
    err.sort_by(f64::total_cmp);
    let m = err.len();
    let median = if m % 2 == 1 {
        err[m / 2]
    } else {
        0.5 * (err[m / 2 - 1] + err[m / 2])
    };
    Ok((median, mean))
}

/// Mean binary cross entropy of `pi` over zero entries of `corrupted`,
/// with masked positions labelled 1. Probabilities are clipped to
/// `[1e-12, 1 − 1e-12]`.
pub fn dropout_cross_entropy(pi: &Tensor, corrupted: &Tensor, mask: &[MaskedEntry]) -> Result<f64> {
    if pi.shape() != corrupted.shape() || pi.shape().len() != 2 {
        return Err(ScviError::Dimension("dropout probabilities must match the count matrix".into()));
    }
    let g = corrupted.cols();
    let masked: HashSet<usize> = mask.iter().map(|e| e.cell * g + e.gene).collect();
    let (mut total, mut count) = (0.0, 0usize);
    for (idx, (&x, &p)) in corrupted.data().iter().zip(pi.data()).enumerate() {
        if x != 0.0 {
            continue;
        }
        let p = p.clamp(1e-12, 1.0 - 1e-12);
        total -= if masked.contains(&idx) { p.ln() } else { (1.0 - p).ln() };
        count += 1;
    }
    if count == 0 {
        return Err(ScviError::Data("corrupted matrix has no zero entries".into()));
    }
    Ok(total / count as f64)
}

/// Per masked entry, the mean of that gene over all unmasked cells of the
/// corrupted matrix.
pub fn global_mean_baseline(corrupted: &Tensor, mask: &[MaskedEntry]) -> Vec<f64> {
    let (n, g) = (corrupted.rows(), corrupted.cols());
    let mut sum = vec![0.0; g];
    let mut count = vec![n as f64; g];
    for i in 0..n {
        for (s, v) in sum.iter_mut().zip(corrupted.row(i)) {
            *s += v;
        }
    }
    for e in mask {
        count[e.gene] -= 1.0;
    }
    mask.iter()
        .map(|e| if count[e.gene] > 0.0 { sum[e.gene] / count[e.gene] } else { 0.0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix() -> ExpressionMatrix {
        let data: Vec<f64> = (0..200).map(|i| (i % 7) as f64).collect();
        ExpressionMatrix::from_counts(Tensor::matrix(20, 10, data).unwrap()).unwrap()
    }

    #[test]
    fn zeros_never_masked_and_reproducible() {
        let m = matrix();
        let cfg = CorruptionConfig { lambda: 0.5, seed: 3 };
        let a = corrupt(&m, &cfg).unwrap();
        let b = corrupt(&m, &cfg).unwrap();
        assert_eq!(a.mask, b.mask);
        assert!(!a.mask.is_empty());
        for e in &a.mask {
            assert!(e.value > 0.0);
            assert_eq!(m.counts().get(e.cell, e.gene), e.value);
            assert_eq!(a.matrix.counts().get(e.cell, e.gene), 0.0);
        }
    }

    #[test]
    fn calibration_hits_target() {
        let m = matrix();
        let lambda = calibrate_lambda(m.counts(), 0.1).unwrap();
        let nz: Vec<f64> = m.counts().data().iter().copied().filter(|v| *v > 0.0).collect();
        let f = nz.iter().map(|&x| corruption_probability(x, lambda)).sum::<f64>() / nz.len() as f64;
        assert!((f - 0.1).abs() < 1e-9);
    }

    #[test]
    fn oracle_scores() {
        let corrupted = Tensor::from_rows(&[vec![0.0, 2.0], vec![0.0, 0.0]]).unwrap();
        let mask = vec![
            MaskedEntry { cell: 0, gene: 0, value: 3.0 },
            MaskedEntry { cell: 1, gene: 1, value: 1.0 },
        ];
        let pi = Tensor::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
        assert!(dropout_cross_entropy(&pi, &corrupted, &mask).unwrap() < 1e-11);
        let (median, mean) = imputation_errors(&[3.0, 1.0], &mask).unwrap();
        assert_eq!((median, mean), (0.0, 0.0));
        let half = Tensor::full(&[2, 2], 0.5);
        let ce = dropout_cross_entropy(&half, &corrupted, &mask).unwrap();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(global_mean_baseline(&corrupted, &mask), vec![0.0, 2.0]);
    }
}
