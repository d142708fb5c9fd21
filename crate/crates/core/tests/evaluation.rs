//! Benchmarks checked against closed forms and direct simulation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scvi_core::data::{simulate, Covariates, ExpressionMatrix, SimulationSpec};
use scvi_core::distributions::DiagGaussian;
use scvi_core::evaluation::{
    corrupt, factor_analysis_fit, heldout_marginal_ll, importance_log_marginal, qc_correlation, silhouette,
    CorruptionConfig, FactorModel,
};
use scvi_core::model::{ModelConfig, ScviModel};
use scvi_core::Tensor;

fn linear_gaussian() -> FactorModel {
    let w = Tensor::from_rows(&[
        vec![1.2, 0.0],
        vec![0.4, 0.9],
        vec![-0.7, 0.5],
        vec![0.0, 1.5],
        vec![0.8, -0.6],
    ])
    .unwrap();
    FactorModel::new(vec![1.0, 0.0, -0.5, 2.0, 0.3], w, vec![0.4, 0.3, 0.5, 0.2, 0.6]).unwrap()
}

/// Mean-field proposal: posterior mean with the posterior marginal
/// standard deviations, ignoring their correlation.
#[test]
fn importance_sampler_matches_closed_form() {
    let fm = linear_gaussian();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cells = fm.sample(20, &mut rng);
    for i in 0..20 {
        let x = cells.row(i);
        let q = fm.posterior_diagonal(x).unwrap();
        let est = importance_log_marginal(&q, |z| fm.log_joint(x, z).unwrap(), 10_000, &mut rng).unwrap();
        let exact = fm.log_density(x).unwrap();
        assert!(((est - exact) / exact).abs() < 0.005, "cell {i}: {est} vs {exact}");
    }
}

#[test]
fn more_samples_do_not_lower_the_estimate() {
    let fm = linear_gaussian();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cells = fm.sample(20, &mut rng);
    let prior = DiagGaussian::standard(2);
    let mut diffs = Vec::new();
    for i in 0..20 {
        let x = cells.row(i);
        let small = importance_log_marginal(&prior, |z| fm.log_joint(x, z).unwrap(), 100, &mut rng).unwrap();
        let large = importance_log_marginal(&prior, |z| fm.log_joint(x, z).unwrap(), 10_000, &mut rng).unwrap();
        diffs.push(large - small);
    }
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean >= -3.0 * sd / n.sqrt(), "mean gain {mean}, sd {sd}");
}

#[test]
fn scvi_estimator_runs_with_covariates() {
    let mut cfg = ModelConfig::new(6);
    cfg.latent_dim = 2;
    cfg.hidden_width = 8;
    cfg.covariate_dim = 1;
    let model = ScviModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let x = Tensor::matrix(3, 6, (0..18).map(|v| (v % 4) as f64).collect()).unwrap();
    let cov = Covariates::new(Tensor::matrix(3, 1, vec![0.0, 1.0, -1.0]).unwrap()).unwrap();
    let ll = heldout_marginal_ll(&model, &x, Some(&cov), 200, 0).unwrap();
    assert!(ll.is_finite() && ll < 0.0);
    assert!(heldout_marginal_ll(&model, &x, None, 200, 0).is_err());
}

#[test]
fn corruption_rate_matches_probability() {
    // exp(−λ (ln 2)²) = ½ for count-1 entries
    let lambda = std::f64::consts::LN_2.recip();
    let ones = ExpressionMatrix::from_counts(Tensor::full(&[1000, 100], 1.0)).unwrap();
    let out = corrupt(&ones, &CorruptionConfig { lambda, seed: 8 }).unwrap();
    let frac = out.mask.len() as f64 / 1e5;
    assert!((frac - 0.5).abs() < 0.01 * 0.5, "{frac}");
    let big = ExpressionMatrix::from_counts(Tensor::full(&[10, 10], 50.0)).unwrap();
    let out = corrupt(&big, &CorruptionConfig { lambda: 1e6, seed: 8 }).unwrap();
    assert!(out.mask.is_empty());
}

#[test]
fn qc_correlation_null_and_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let z = Tensor::matrix(10_000, 3, draw(30_000)).unwrap();
    let qc = Tensor::matrix(10_000, 2, draw(20_000)).unwrap();
    let base = qc_correlation(&z, &qc).unwrap();
    assert!(base < 0.05, "{base}");
    let scaled = z.map(|v| 10.0 * v);
    assert!((qc_correlation(&scaled, &qc).unwrap() - base).abs() < 1e-12);
}

#[test]
fn silhouette_ignores_label_names() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let z = Tensor::matrix(60, 2, (0..120).map(|_| rng.random_range(0.0..3.0)).collect()).unwrap();
    let labels: Vec<String> = (0..60).map(|i| format!("c{}", i % 3)).collect();
    let renamed: Vec<String> = labels.iter().map(|l| format!("zz-{}", 9 - l[1..].parse::<u32>().unwrap())).collect();
    assert_eq!(silhouette(&z, &labels).unwrap(), silhouette(&z, &renamed).unwrap());
}

#[test]
fn factor_analysis_recovers_generating_likelihood() {
    let truth = linear_gaussian();
    let data = truth.sample(5000, &mut ChaCha8Rng::seed_from_u64(7));
    let fit = factor_analysis_fit(&data, 2, 1000, 1e-9).unwrap();
    let n = data.rows();
    let generating: f64 = (0..n).map(|i| truth.log_density(data.row(i)).unwrap()).sum::<f64>() / n as f64;
    let fitted = fit.mean_log_likelihood(n);
    assert!(((fitted - generating) / generating).abs() < 0.01, "{fitted} vs {generating}");
    let direct: f64 = (0..n).map(|i| fit.model.log_density(data.row(i)).unwrap()).sum::<f64>() / n as f64;
    assert!((direct - fitted).abs() < 1e-9 * fitted.abs());
}

#[test]
fn factor_analysis_separates_simulated_groups() {
    let mut spec = SimulationSpec::new(300, 30);
    spec.n_groups = 3;
    let sim = simulate(&spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let fit = factor_analysis_fit(&sim.matrix.log1p(), 2, 300, 1e-8).unwrap();
    let s = silhouette(&fit.latents, sim.matrix.labels().unwrap()).unwrap();
    assert!(s > 0.0, "{s}");
}
