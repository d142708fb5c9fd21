//! Analytic gradients against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scvi_core::autodiff::{Activation, BatchNormConfig, Mode, Tape, Var};
use scvi_core::distributions::{
    kl_diag_gaussian_grad, kl_diag_gaussian_to_standard, zinb_log_pmf_logit, DiagGaussian,
};
use scvi_core::model::{DispersionMode, LatentMode, ModelConfig, ScviModel};
use scvi_core::Tensor;

const H: f64 = 1e-5;

/// |a − n| / max(|a|, |n|, floor); the floor keeps near-zero entries from
/// turning round-off into large relative errors.
fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn random_counts(rng: &mut ChaCha8Rng, n: usize, g: usize) -> Tensor {
    let data = (0..n * g)
        .map(|_| if rng.random::<f64>() < 0.3 { 0.0 } else { rng.random_range(0..20) as f64 })
        .collect();
    Tensor::matrix(n, g, data).unwrap()
}

fn toy_config(seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig::new(5);
    cfg.latent_dim = 2;
    cfg.hidden_width = 8;
    cfg.hidden_depth = 2;
    if seed % 3 == 1 {
        cfg.dispersion_mode = DispersionMode::PerEntry;
    }
    if seed % 4 == 3 {
        cfg.latent_mode = LatentMode::PointMass;
    }
    if seed % 2 == 1 {
        cfg.covariate_dim = 2;
        cfg.encoder_sees_covariates = seed % 5 == 1;
    }
    cfg
}

/// Checks every trainable scalar of the negative ELBO; the same noise
/// stream drives every evaluation. Returns the number of entries whose
/// h = 1e-5 stencil straddled a ReLU kink.
///
/// A stencil is treated as straddling a kink only when the difference at
/// h disagrees with the one at h/16; such entries must then agree with the
/// analytic value at h/16. A smooth loss gives matching stencils, so a wrong
/// analytic gradient cannot pass this way.
fn check_elbo_gradients(seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = toy_config(seed);
    let mut model = ScviModel::new(cfg.clone(), &mut rng).unwrap();
    let counts = random_counts(&mut rng, 6, 5);
    let cov = (cfg.covariate_dim > 0).then(|| {
        Tensor::matrix(6, cfg.covariate_dim, (0..6 * cfg.covariate_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    });
    let noise = ChaCha8Rng::seed_from_u64(seed + 1000);
    let loss = |m: &ScviModel| m.elbo_loss(&counts, cov.as_ref(), Mode::Train, &mut noise.clone()).unwrap();
    let grads = loss(&model).gradients(&model.params).unwrap();
    let mut kinks = 0;
    for (i, entry) in model.params.entries().to_vec().iter().enumerate() {
        if !entry.trainable {
            continue;
        }
        for j in 0..entry.tensor.len() {
            let orig = entry.tensor.data()[j];
            let mut central = |h: f64| {
                model.params.tensor_mut(i).data_mut()[j] = orig + h;
                let up = loss(&model).value();
                model.params.tensor_mut(i).data_mut()[j] = orig - h;
                let down = loss(&model).value();
                model.params.tensor_mut(i).data_mut()[j] = orig;
                (up - down) / (2.0 * h)
            };
            let analytic = grads[i].data()[j];
            let coarse = central(H);
            if rel_err(analytic, coarse, 1e-4) < 1e-4 {
                continue;
            }
            let fine = central(H / 16.0);
            assert!(
                rel_err(coarse, fine, 1e-4) > 1e-4 && rel_err(analytic, fine, 1e-4) < 1e-4,
                "seed {seed} {}[{j}]: analytic {analytic}, h={H}: {coarse}, h={}: {fine}",
                entry.name,
                H / 16.0
            );
            kinks += 1;
        }
    }
    kinks
}

#[test]
fn elbo_gradients_match_finite_differences() {
    let kinks: usize = (0..20).map(check_elbo_gradients).sum();
    // kinks are rare; many would point at a broken check rather than bad luck
    assert!(kinks < 50, "{kinks} kink crossings");
}

/// Random small network through every tape op, reduced to a scalar.
fn op_network(tape: &mut Tape, x: &Tensor, params: &[Tensor], rng: &mut ChaCha8Rng) -> (Var, Vec<Var>) {
    let xv = tape.constant(x.clone());
    let p: Vec<_> = params.iter().map(|t| tape.param(t.clone())).collect();
    let h = tape.affine(xv, p[0], p[1]).unwrap();
    let rm = [0.0; 3];
    let rv = [1.0; 3];
    let (h, _) = tape
        .batch_norm(h, p[2], p[3], &rm, &rv, Mode::Train, BatchNormConfig::default())
        .unwrap();
    let a = tape.activation(h, Activation::Softplus).unwrap();
    let b = tape.activation(h, Activation::Sigmoid).unwrap();
    let c = tape.activation(h, Activation::Exp).unwrap();
    let d = tape.activation(h, Activation::Relu).unwrap();
    let d = tape.dropout(d, 0.3, Mode::Train, rng).unwrap();
    let ab = tape.mul(a, b).unwrap();
    let cd = tape.sub(c, d).unwrap();
    let s = tape.add(ab, cd).unwrap();
    let s = tape.scale(s, 0.7);
    let s = tape.add_scalar(s, 0.1);
    let wide = tape.concat_cols(s, h).unwrap();
    let rows = tape.sum_rows(wide);
    let lin = tape.activation(rows, Activation::Linear).unwrap();
    let sq = tape.mul(lin, lin).unwrap();
    let m = tape.mean(sq).unwrap();
    let t = tape.sum(a);
    (tape.add(m, t).unwrap(), p)
}

#[test]
fn every_op_matches_finite_differences() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let x = Tensor::matrix(4, 2, normal(8)).unwrap();
        let mut params = vec![
            Tensor::matrix(2, 3, normal(6)).unwrap(),
            Tensor::vector(normal(3)),
            Tensor::vector(normal(3).iter().map(|v| 1.0 + 0.5 * v).collect()),
            Tensor::vector(normal(3)),
        ];
        let noise = ChaCha8Rng::seed_from_u64(seed + 77);
        let eval = |params: &[Tensor]| {
            let mut tape = Tape::new();
            let (out, _) = op_network(&mut tape, &x, params, &mut noise.clone());
            tape.value(out).item()
        };
        let mut tape = Tape::new();
        let (out, vars) = op_network(&mut tape, &x, &params, &mut noise.clone());
        let mut grads = tape.backward(out).unwrap();
        let analytic: Vec<Tensor> = params.iter().zip(&vars).map(|(p, v)| grads.take(*v, p.shape())).collect();
        for i in 0..params.len() {
            for j in 0..params[i].len() {
                let orig = params[i].data()[j];
                params[i].data_mut()[j] = orig + H;
                let up = eval(&params);
                params[i].data_mut()[j] = orig - H;
                let down = eval(&params);
                params[i].data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * H);
                let err = rel_err(analytic[i].data()[j], numeric, 1e-4);
                assert!(err < 1e-4, "seed {seed} param {i}[{j}]: {} vs {numeric}", analytic[i].data()[j]);
            }
        }
    }
}

#[test]
fn zinb_and_kl_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let mu = rng.random_range(0.05..50.0);
        let theta = rng.random_range(0.1..20.0);
        let logit = rng.random_range(-4.0..4.0);
        let k = if rng.random::<f64>() < 0.4 { 0.0 } else { rng.random_range(1..40) as f64 };
        let (_, g) = zinb_log_pmf_logit(k, mu, theta, logit);
        let f = |m: f64, t: f64, l: f64| zinb_log_pmf_logit(k, m, t, l).0;
        let fd = [
            (f(mu + H, theta, logit) - f(mu - H, theta, logit)) / (2.0 * H),
            (f(mu, theta + H, logit) - f(mu, theta - H, logit)) / (2.0 * H),
            (f(mu, theta, logit + H) - f(mu, theta, logit - H)) / (2.0 * H),
        ];
        for (a, n) in [g.d_mu, g.d_theta, g.d_pi].iter().zip(fd) {
            assert!(rel_err(*a, n, 1e-4) < 1e-4, "k={k} mu={mu} theta={theta}: {a} vs {n}");
        }
    }
    for _ in 0..50 {
        let mean: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let std: Vec<f64> = (0..3).map(|_| rng.random_range(0.2..3.0)).collect();
        let (dm, ds) = kl_diag_gaussian_grad(&DiagGaussian::new(mean.clone(), std.clone()).unwrap());
        for d in 0..3 {
            let kl = |m: &[f64], s: &[f64]| kl_diag_gaussian_to_standard(&DiagGaussian::new(m.to_vec(), s.to_vec()).unwrap());
            let (mut mp, mut mm, mut sp, mut sm) = (mean.clone(), mean.clone(), std.clone(), std.clone());
            mp[d] += H;
            mm[d] -= H;
            sp[d] += H;
            sm[d] -= H;
            let nm = (kl(&mp, &std) - kl(&mm, &std)) / (2.0 * H);
            let ns = (kl(&mean, &sp) - kl(&mean, &sm)) / (2.0 * H);
            assert!(rel_err(dm[d], nm, 1e-4) < 1e-4);
            assert!(rel_err(ds[d], ns, 1e-4) < 1e-4);
        }
    }
}

#[test]
fn fan_out_sums_per_use_gradients() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.5, -0.5]));
    let a = tape.activation(x, Activation::Exp).unwrap();
    let b = tape.mul(x, a).unwrap();
    let c = tape.add(b, x).unwrap();
    let loss = tape.sum(c);
    let g = tape.backward(loss).unwrap();
    for (i, &v) in [1.5f64, -0.5].iter().enumerate() {
        // d/dx (x eˣ + x) = eˣ + x eˣ + 1
        let expected = v.exp() * (1.0 + v) + 1.0;
        assert!((g.get(x).unwrap().data()[i] - expected).abs() < 1e-12);
    }
}
