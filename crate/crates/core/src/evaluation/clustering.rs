use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Result, ScviError};
use crate::tensor::Tensor;

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean Euclidean silhouette of `latent` rows under `labels`.
///
/// Cells in singleton clusters score 0, as do cells with `a = b = 0`.
pub fn silhouette<S: AsRef<str> + Sync>(latent: &Tensor, labels: &[S]) -> Result<f64> {
    if latent.shape().len() != 2 || latent.rows() != labels.len() {
        return Err(ScviError::Dimension("one label per latent row is required".into()));
    }
    let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        let next = ids.len();
        ids.entry(l.as_ref()).or_insert(next);
    }
    let k = ids.len();
    if k < 2 {
        return Err(ScviError::Parameter("silhouette needs at least two clusters".into()));
    }
    let cluster: Vec<usize> = labels.iter().map(|l| ids[l.as_ref()]).collect();
    let mut sizes = vec![0usize; k];
    for &c in &cluster {
        sizes[c] += 1;
    }
    let n = latent.rows();
    let scores: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = cluster[i];
            if sizes[own] < 2 {
                return 0.0;
            }
            let mut sums = vec![0.0; k];
            for j in 0..n {
                if j != i {
                    sums[cluster[j]] += distance(latent.row(i), latent.row(j));
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m > 0.0 {
                (b - a) / m
            } else {
                0.0
            }
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / n as f64)
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx > 0.0 && syy > 0.0 {
        sxy / (sxx * syy).sqrt()
    } else {
        0.0
    }
}

/// Mean over (latent dimension, QC column) pairs of |Pearson r|. Pairs
/// involving a zero-variance column contribute 0.
pub fn qc_correlation(latent: &Tensor, qc: &Tensor) -> Result<f64> {
    if latent.shape().len() != 2 || qc.shape().len() != 2 || latent.rows() != qc.rows() {
        return Err(ScviError::Dimension("latent and QC tables need matching rows".into()));
    }
    if qc.cols() == 0 || latent.cols() == 0 {
        return Err(ScviError::Parameter("QC correlation needs at least one column on each side".into()));
    }
    if latent.rows() < 2 {
        return Err(ScviError::Parameter("QC correlation needs at least two cells".into()));
    }
    let column = |t: &Tensor, j: usize| -> Vec<f64> { (0..t.rows()).map(|i| t.get(i, j)).collect() };
    let mut total = 0.0;
    for d in 0..latent.cols() {
        let z = column(latent, d);
        for c in 0..qc.cols() {
            total += pearson(&z, &column(qc, c)).abs();
        }
    }
    Ok(total / (latent.cols() * qc.cols()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_point_example() {
        let z = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 10.0], vec![10.0, 11.0]]).unwrap();
        let s = silhouette(&z, &["a", "a", "b", "b"]).unwrap();
        // (0,0) and (10,11) share b = (√200 + √221)/2; the other two share
        // b = (√181 + √200)/2; a = 1 everywhere
        let outer = (200f64.sqrt() + 221f64.sqrt()) / 2.0;
        let inner = (181f64.sqrt() + 200f64.sqrt()) / 2.0;
        assert!(((outer - 1.0) / outer - 0.9311).abs() < 1e-4);
        let expected = 0.5 * ((outer - 1.0) / outer + (inner - 1.0) / inner);
        assert!((s - expected).abs() < 1e-12);
    }

    #[test]
    fn degenerate_and_singleton() {
        let z = Tensor::zeros(&[4, 2]);
        assert_eq!(silhouette(&z, &["x", "y", "x", "y"]).unwrap(), 0.0);
        let z = Tensor::from_rows(&[vec![0.0], vec![0.1], vec![5.0]]).unwrap();
        let s = silhouette(&z, &["a", "a", "b"]).unwrap();
        let s0 = (5.0 - 0.1) / 5.0;
        let s1 = (4.9 - 0.1) / 4.9;
        assert!((s - (s0 + s1) / 3.0).abs() < 1e-12);
        assert!(silhouette(&z, &["a", "a", "a"]).is_err());
    }

    #[test]
    fn qc_identity_and_constant() {
        let z = Tensor::from_rows(&[vec![1.0, 3.0], vec![2.0, 3.0], vec![4.0, 3.0]]).unwrap();
        let qc = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![4.0]]).unwrap();
        // dim 0 equals the QC column; dim 1 is constant
        assert!((qc_correlation(&z, &qc).unwrap() - 0.5).abs() < 1e-12);
    }
}
