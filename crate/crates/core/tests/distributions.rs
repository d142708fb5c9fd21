//! Count-likelihood identities, limits and sampler moments.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scvi_core::distributions::{
    kl_diag_gaussian_to_standard, nb_log_pmf, poisson_log_pmf, sample_gamma, sample_gaussian, sample_poisson,
    zinb_log_pmf, DiagGaussian, ZinbParams,
};

/// Σ_{k<K} pmf(k) plus a bound on the NB tail: for k ≥ K past the mode the
/// pmf ratio p(k+1)/p(k) = (k+θ)/(k+1) · μ/(θ+μ) is decreasing, so the tail
/// is at most p(K) / (1 − r(K)).
fn truncated_mass(mu: f64, theta: f64, pi: f64) -> (f64, f64) {
    let p = ZinbParams::new(mu, theta, pi).unwrap();
    let mut k = 0u64;
    let mut total = 0.0;
    loop {
        total += zinb_log_pmf(k, &p).exp();
        k += 1;
        let kf = k as f64;
        let ratio = (kf + theta) / (kf + 1.0) * mu / (theta + mu);
        if kf > mu && ratio < 1.0 {
            let tail = zinb_log_pmf(k, &p).exp() / (1.0 - ratio);
            if tail < 1e-14 {
                return (total, tail);
            }
        }
        assert!(k < 2_000_000, "tail did not shrink for mu={mu} theta={theta}");
    }
}

#[test]
fn zinb_normalizes_on_grid() {
    for &mu in &[0.1, 1.0, 10.0, 100.0] {
        for &theta in &[0.5, 1.0, 5.0, 50.0] {
            for &pi in &[0.0, 0.3, 0.9] {
                let (mass, tail) = truncated_mass(mu, theta, pi);
                assert!((mass + tail - 1.0).abs() < 1e-10, "mu={mu} theta={theta} pi={pi}: {mass}");
            }
        }
    }
}

#[test]
fn nb_reference_values() {
    assert!((nb_log_pmf(0, 1.0, 1.0).unwrap() - 0.5f64.ln()).abs() < 1e-14);
    let s: f64 = (0..=10_000).map(|k| nb_log_pmf(k, 5.0, 2.0).unwrap().exp()).sum();
    assert!((s - 1.0).abs() < 1e-10);
    let z = ZinbParams::new(1.0, 1.0, 0.0).unwrap();
    assert!((zinb_log_pmf(0, &z) - 0.5f64.ln()).abs() < 1e-14);
    assert_eq!(zinb_log_pmf(0, &ZinbParams::new(3.0, 2.0, 1.0).unwrap()), 0.0);
    assert_eq!(zinb_log_pmf(4, &ZinbParams::new(3.0, 2.0, 1.0).unwrap()), f64::NEG_INFINITY);
}

#[test]
fn gamma_poisson_mixture_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mu, theta) = (5.0, 2.0);
    let n = 1_000_000;
    let mut total = 0.0;
    for _ in 0..n {
        let w = sample_gamma(theta, theta / mu, &mut rng).unwrap();
        total += sample_poisson(w, &mut rng).unwrap() as f64;
    }
    assert!((total / n as f64 / mu - 1.0).abs() < 0.01);
}

#[test]
fn sampler_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 1_000_000;
    let mean = (0..n).map(|_| sample_gamma(1.0, 1.0, &mut rng).unwrap()).sum::<f64>() / n as f64;
    assert!((mean - 1.0).abs() < 0.01);
    let draws: Vec<f64> = (0..n).map(|_| sample_gaussian(&[0.5], &[2.0], &mut rng).unwrap()[0]).collect();
    let m = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    assert!((var / 4.0 - 1.0).abs() < 0.02);
    assert_eq!(sample_gaussian(&[1.0, -2.0], &[0.0, 0.0], &mut rng).unwrap(), vec![1.0, -2.0]);
    assert!(sample_gamma(0.0, 1.0, &mut rng).is_err());
    assert!(sample_gamma(1.0, -1.0, &mut rng).is_err());
}

proptest! {
    #[test]
    fn zero_inflation_off_is_nb(k in 0u64..500, mu in 1e-3f64..1e3, theta in 1e-2f64..1e3) {
        let p = ZinbParams::new(mu, theta, 0.0).unwrap();
        prop_assert_eq!(zinb_log_pmf(k, &p), nb_log_pmf(k, mu, theta).unwrap());
    }

    #[test]
    fn large_theta_is_poisson(k in 0u64..60, mu in 0.05f64..30.0) {
        let nb = nb_log_pmf(k, mu, 1e8).unwrap();
        let po = poisson_log_pmf(k, mu).unwrap();
        prop_assert!((nb - po).abs() < 1e-4, "{} vs {}", nb, po);
    }

    #[test]
    fn kl_nonnegative_and_zero_only_at_standard(
        mean in prop::collection::vec(-5.0f64..5.0, 1..6),
        log_std in prop::collection::vec(-2.0f64..2.0, 6),
    ) {
        let std: Vec<f64> = log_std[..mean.len()].iter().map(|v| v.exp()).collect();
        let kl = kl_diag_gaussian_to_standard(&DiagGaussian::new(mean.clone(), std.clone()).unwrap());
        prop_assert!(kl >= 0.0);
        let off = mean.iter().chain(&log_std[..mean.len()]).any(|v| v.abs() > 1e-3);
        if off {
            prop_assert!(kl > 0.0);
        }
        prop_assert_eq!(kl_diag_gaussian_to_standard(&DiagGaussian::standard(mean.len())), 0.0);
    }

    #[test]
    fn zinb_zero_branch_matches_closed_form(mu in 1e-2f64..1e2, theta in 1e-1f64..1e2, pi in 0.0f64..1.0) {
        let p = ZinbParams::new(mu, theta, pi).unwrap();
        let direct = (pi + (1.0 - pi) * (theta / (theta + mu)).powf(theta)).ln();
        prop_assert!((zinb_log_pmf(0, &p) - direct).abs() < 1e-10 * direct.abs().max(1.0));
    }
}
