//! Bayes-factor test against forced orderings and closed-form probabilities.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scvi_core::data::{Covariates, ExpressionMatrix};
use scvi_core::diffexpr::{de_test, CellGroup, DeConfig};
use scvi_core::model::{ModelConfig, ScviModel};
use scvi_core::Tensor;

/// A model whose decoder ignores `z` and gives gene g the mean
/// `base · ratio[g]^γ` for a 0/1 covariate γ, with inverse dispersion θ.
fn two_level_model(base: f64, ratio: &[f64], theta: f64) -> ScviModel {
    let g = ratio.len();
    let mut cfg = ModelConfig::new(g);
    cfg.latent_dim = 1;
    cfg.hidden_width = 2;
    cfg.hidden_depth = 1;
    cfg.dropout_rate = 0.0;
    cfg.covariate_dim = 1;
    let mut model = ScviModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut set = |name: &str, f: &dyn Fn(usize) -> f64| {
        let i = model.params.find(name).unwrap();
        for (k, v) in model.params.tensor_mut(i).data_mut().iter_mut().enumerate() {
            *v = f(k);
        }
    };
    // trunk input is (z, γ); unit 0 copies γ through an identity batch norm
    set("decoder.0.linear.weight", &|k| if k == 2 { 1.0 } else { 0.0 });
    set("decoder.0.linear.bias", &|_| 0.0);
    set("decoder.0.norm.scale", &|_| (1.0f64 + 1e-5).sqrt());
    set("decoder.0.norm.shift", &|_| 0.0);
    set("decoder.nb_mean.weight", &|k| if k < g { ratio[k].ln() } else { 0.0 });
    set("decoder.nb_mean.bias", &|_| base.ln());
    set("decoder.log_theta", &|_| theta.ln());
    model
}

fn two_level_data(n_genes: usize, per_side: usize) -> (ExpressionMatrix, Covariates) {
    let n = 2 * per_side;
    let data = ExpressionMatrix::from_counts(Tensor::zeros(&[n, n_genes])).unwrap();
    let gamma = (0..n).map(|i| if i < per_side { 0.0 } else { 1.0 }).collect();
    (data, Covariates::new(Tensor::matrix(n, 1, gamma).unwrap()).unwrap())
}

fn sides(per_side: usize) -> (CellGroup, CellGroup) {
    (
        CellGroup::new((0..per_side).collect(), 0),
        CellGroup::new((per_side..2 * per_side).collect(), 1),
    )
}

#[test]
fn decoder_copies_covariate() {
    let model = two_level_model(0.5, &[2.0, 0.1], 1.0);
    let z = Tensor::matrix(2, 1, vec![0.3, -4.0]).unwrap();
    let cov = Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap();
    let d = model.decode(&z, Some(&cov)).unwrap();
    assert!((d.mu.get(0, 0) - 0.5).abs() < 1e-12);
    assert!((d.mu.get(1, 0) - 1.0).abs() < 1e-12);
    assert!((d.mu.get(1, 1) - 0.05).abs() < 1e-12);
}

#[test]
fn exponential_order_probability() {
    // θ = 1 makes w exponential with rate 1/μ: rates 2 (A) and 1 (B), so
    // P(w_a < w_b) = 2 / (2 + 1)
    let model = two_level_model(0.5, &[2.0], 1.0);
    let (data, cov) = two_level_data(1, 5);
    let (a, b) = sides(5);
    let cfg = DeConfig { n_pairs: 100_000, n_mc: 1, seed: 21 };
    let r = &de_test(&model, &data, Some(&cov), &a, &b, &cfg).unwrap()[0];
    assert!((r.p_h0 - 2.0 / 3.0).abs() < 0.01, "{}", r.p_h0);
    assert_eq!(r.n_samples, 100_000);
}

#[test]
fn forced_ordering_saturates() {
    let model = two_level_model(20.0, &[0.1, 0.1, 0.1], 1e4);
    let (data, cov) = two_level_data(3, 4);
    let (a, b) = sides(4);
    let cfg = DeConfig { n_pairs: 5_000, n_mc: 2, seed: 1 };
    for r in de_test(&model, &data, Some(&cov), &a, &b, &cfg).unwrap() {
        assert!(r.p_h0 < 1e-3, "{}", r.p_h0);
        assert!(r.log_bayes_factor_corrected < -5.0);
        assert_eq!(r.n_samples, 10_000);
    }
}

fn random_model_and_data() -> (ScviModel, ExpressionMatrix) {
    let mut cfg = ModelConfig::new(8);
    cfg.latent_dim = 2;
    cfg.hidden_width = 8;
    let model = ScviModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let counts = Tensor::matrix(12, 8, (0..96).map(|v| ((v * 7) % 11) as f64).collect()).unwrap();
    (model, ExpressionMatrix::from_counts(counts).unwrap())
}

#[test]
fn swapping_groups_mirrors_exactly() {
    let (model, data) = random_model_and_data();
    let a = CellGroup::new(vec![0, 1, 2, 3, 4], 0);
    let b = CellGroup::new(vec![5, 6, 7, 8, 9, 10, 11], 1);
    let cfg = DeConfig { n_pairs: 3_000, n_mc: 1, seed: 4 };
    let fwd = de_test(&model, &data, None, &a, &b, &cfg).unwrap();
    let rev = de_test(&model, &data, None, &b, &a, &cfg).unwrap();
    for (f, r) in fwd.iter().zip(&rev) {
        let n = f.n_samples as f64;
        assert_eq!(f.p_h0 * n + r.p_h0 * n, n);
        assert!((f.log_bayes_factor + r.log_bayes_factor).abs() < 1e-12);
    }
}

#[test]
fn identical_groups_are_balanced() {
    let (model, data) = random_model_and_data();
    let cells: Vec<usize> = (0..12).collect();
    let a = CellGroup::new(cells.clone(), 0);
    let b = CellGroup::new(cells, 1);
    let cfg = DeConfig { n_pairs: 10_000, n_mc: 1, seed: 9 };
    for r in de_test(&model, &data, None, &a, &b, &cfg).unwrap() {
        assert!(r.log_bayes_factor.abs() < 0.2, "{}: {}", r.gene, r.log_bayes_factor);
    }
}

#[test]
fn standard_error_shrinks_with_samples() {
    let model = two_level_model(0.5, &[2.0], 1.0);
    let (data, cov) = two_level_data(1, 3);
    let (a, b) = sides(3);
    let se = |n| {
        de_test(&model, &data, Some(&cov), &a, &b, &DeConfig { n_pairs: n, n_mc: 1, seed: 3 }).unwrap()[0].std_error
    };
    let ratio = se(1_000) / se(16_000);
    assert!((ratio - 4.0).abs() < 0.4, "{ratio}");
}

#[test]
fn empty_group_rejected() {
    let (model, data) = random_model_and_data();
    let a = CellGroup::new(vec![], 0);
    let b = CellGroup::new(vec![1], 1);
    assert!(de_test(&model, &data, None, &a, &b, &DeConfig::default()).is_err());
}
