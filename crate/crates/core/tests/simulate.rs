//! Simulator output against the likelihood it is meant to realise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scvi_core::data::{simulate, split, GroundTruthDecoder, SimulationSpec};
use scvi_core::distributions::{zinb_log_pmf, ZinbParams};

/// One gene whose mean does not depend on z.
fn single_gene(n: usize, mu: f64, theta: f64, pi: f64) -> SimulationSpec {
    let mut spec = SimulationSpec::new(n, 1);
    spec.decoder = Some(GroundTruthDecoder {
        log_mean_bias: vec![mu.ln()],
        loadings: vec![0.0; 2],
        theta: vec![theta],
        dropout_logit: vec![(pi / (1.0 - pi)).ln()],
    });
    spec
}

#[test]
fn zero_fraction_and_mean_match_zinb() {
    let n = 100_000;
    for (seed, &(mu, theta, pi)) in [(2.0, 1.5, 0.2), (10.0, 5.0, 0.05), (0.5, 0.8, 0.4)].iter().enumerate() {
        let sim = simulate(&single_gene(n, mu, theta, pi), &mut ChaCha8Rng::seed_from_u64(seed as u64)).unwrap();
        let x = sim.matrix.counts().data();
        let p = ZinbParams::new(mu, theta, pi).unwrap();
        let p0 = zinb_log_pmf(0, &p).exp();
        let zeros = x.iter().filter(|v| **v == 0.0).count() as f64 / n as f64;
        let sigma = (p0 * (1.0 - p0) / n as f64).sqrt();
        assert!((zeros - p0).abs() < 3.0 * sigma, "zeros {zeros} vs {p0}");
        let mean = x.iter().sum::<f64>() / n as f64;
        // ZINB variance: (1−π)(μ + μ²/θ) + π(1−π)μ²
        let var = (1.0 - pi) * (mu + mu * mu / theta) + pi * (1.0 - pi) * mu * mu;
        let expected = (1.0 - pi) * mu;
        assert!((mean - expected).abs() < 3.0 * (var / n as f64).sqrt(), "mean {mean} vs {expected}");
    }
}

#[test]
fn poisson_limit_recovers_mean() {
    let n = 100_000;
    let sim = simulate(&single_gene(n, 4.0, 1e9, 1e-12), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let mean = sim.matrix.counts().data().iter().sum::<f64>() / n as f64;
    assert!((mean / 4.0 - 1.0).abs() < 0.01);
}

#[test]
fn split_is_disjoint_and_exhaustive() {
    let sim = simulate(&SimulationSpec::new(50, 4), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let (a, b) = split(&sim.matrix, 0.3, 2).unwrap();
    let (c, _) = split(&sim.matrix, 0.3, 2).unwrap();
    assert_eq!(a.n_cells() + b.n_cells(), 50);
    assert_eq!(a.cell_ids(), c.cell_ids());
    assert!(a.cell_ids().iter().all(|id| !b.cell_ids().contains(id)));
}
