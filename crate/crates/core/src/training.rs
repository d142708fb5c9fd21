//! Minibatch Adam optimization of the negative ELBO.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mode;
use crate::data::{Covariates, ExpressionMatrix};
use crate::error::{Result, ScviError};
use crate::model::{ModelConfig, ModelParams, ScviModel};
use crate::tensor::Tensor;

fn default_lr() -> f64 {
    1e-3
}
fn default_betas() -> [f64; 2] {
    [0.9, 0.999]
}
fn default_eps() -> f64 {
    1e-8
}
fn default_batch() -> usize {
    128
}
fn default_epochs() -> usize {
    100
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_betas")]
    pub adam_betas: [f64; 2],
    #[serde(default = "default_eps")]
    pub adam_epsilon: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub shuffle: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: default_lr(),
            adam_betas: default_betas(),
            adam_epsilon: default_eps(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(ScviError::Parameter("learning_rate must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(ScviError::Parameter("batch_size must be at least 2".into()));
        }
        let [b1, b2] = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || !(self.adam_epsilon > 0.0) {
            return Err(ScviError::Parameter("Adam betas must lie in [0, 1), epsilon > 0".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates for each parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(shapes: &[&[usize]]) -> Self {
        AdamState {
            first: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
        }
    }

    pub fn for_params(params: &ModelParams) -> Self {
        let shapes: Vec<&[usize]> = params.entries().iter().map(|e| e.tensor.shape()).collect();
        Self::new(&shapes)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. `trainable[i] == false` leaves the
    /// i-th tensor untouched.
    pub fn update(
        &mut self,
        values: &mut [&mut Tensor],
        names: &[&str],
        trainable: &[bool],
        grads: &[Tensor],
        config: &TrainingConfig,
    ) -> Result<()> {
        if values.len() != grads.len() || values.len() != self.first.len() {
            return Err(ScviError::Dimension("Adam state, values and gradients differ in length".into()));
        }
        for (i, g) in grads.iter().enumerate() {
            if trainable[i] && !g.is_finite() {
                return Err(ScviError::Numerical(format!(
                    "non-finite gradient for parameter '{}'",
                    names[i]
                )));
            }
        }
        self.step += 1;
        let [b1, b2] = config.adam_betas;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for i in 0..values.len() {
            if !trainable[i] {
                continue;
            }
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let w = values[i].data_mut();
            for (((w, m), v), g) in w.iter_mut().zip(m).zip(v).zip(grads[i].data()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_epsilon);
            }
        }
        Ok(())
    }
}

/// Applies one Adam step to every trainable model parameter.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Tensor],
    state: &mut AdamState,
    config: &TrainingConfig,
) -> Result<()> {
    let entries = params.entries_mut();
    let names: Vec<String> = entries.iter().map(|e| e.name.clone()).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let trainable: Vec<bool> = entries.iter().map(|e| e.trainable).collect();
    let mut refs: Vec<&mut Tensor> = entries.iter_mut().map(|e| &mut e.tensor).collect();
    state.update(&mut refs, &names, &trainable, grads, config)?;
    Ok(())
}

pub struct TrainOutput {
    pub model: ScviModel,
    /// Mean negative ELBO per epoch.
    pub loss_trace: Vec<f64>,
}

/// Splits a cell ordering into minibatches. A trailing batch of a single
/// cell is merged into its predecessor because training-mode batch norm
/// needs at least two rows.
pub fn minibatches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

pub fn train(
    data: &ExpressionMatrix,
    covariates: Option<&Covariates>,
    model_config: &ModelConfig,
    config: &TrainingConfig,
) -> Result<TrainOutput> {
    train_with_progress(data, covariates, model_config, config, |_, _| {})
}

/// [`train`] with a callback invoked after each epoch with `(epoch, loss)`.
pub fn train_with_progress(
    data: &ExpressionMatrix,
    covariates: Option<&Covariates>,
    model_config: &ModelConfig,
    config: &TrainingConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutput> {
    config.validate()?;
    model_config.validate()?;
    if data.n_genes() != model_config.n_genes {
        return Err(ScviError::Dimension(format!(
            "data has {} genes, model expects {}",
            data.n_genes(),
            model_config.n_genes
        )));
    }
    let n = data.n_cells();
    if n < 2 {
        return Err(ScviError::Parameter("training needs at least 2 cells".into()));
    }
    if let Some(c) = covariates {
        if c.n_cells() != n {
            return Err(ScviError::Dimension("covariate rows do not match cells".into()));
        }
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = ScviModel::new(model_config.clone(), &mut init_rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut adam = AdamState::for_params(&model.params);
    let mut trace = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        for (b, batch) in minibatches(&order, config.batch_size).iter().enumerate() {
            let counts = data.counts().select_rows(batch);
            let cov = covariates.map(|c| c.select(batch));
            let wrap = |e: ScviError| match e {
                ScviError::Numerical(m) => {
                    ScviError::Numerical(format!("epoch {}, batch {b}: {m}", epoch + 1))
                }
                other => other,
            };
            let graph = model
                .elbo_loss(&counts, cov.as_ref().map(Covariates::values), Mode::Train, &mut rng)
                .map_err(wrap)?;
            let loss = graph.value();
            if !loss.is_finite() {
                return Err(ScviError::Numerical(format!(
                    "loss diverged at epoch {}, batch {b}",
                    epoch + 1
                )));
            }
            let grads = graph.gradients(&model.params)?;
            adam_step(&mut model.params, &grads, &mut adam, config).map_err(wrap)?;
            model.apply_norm_updates(graph.norm_updates());
            total += loss * batch.len() as f64;
        }
        let mean = total / n as f64;
        trace.push(mean);
        on_epoch(epoch + 1, mean);
    }
    Ok(TrainOutput {
        model,
        loss_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut state = AdamState::new(&[&[3]]);
        let mut x = Tensor::vector(vec![1.0, -2.0, 3.0]);
        let before = x.clone();
        let g = vec![Tensor::zeros(&[3])];
        state
            .update(&mut [&mut x], &["x"], &[true], &g, &TrainingConfig::default())
            .unwrap();
        assert_eq!(x, before);
    }

    #[test]
    fn quadratic_converges() {
        let cfg = TrainingConfig {
            learning_rate: 0.01,
            ..TrainingConfig::default()
        };
        let mut state = AdamState::new(&[&[]]);
        let mut x = Tensor::scalar(0.0);
        let mut steps = 0;
        while steps < 5000 {
            let g = vec![Tensor::scalar(2.0 * (x.item() - 3.0))];
            state.update(&mut [&mut x], &["x"], &[true], &g, &cfg).unwrap();
            steps += 1;
        }
        assert!((x.item() - 3.0).abs() < 1e-3, "x = {}", x.item());
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut state = AdamState::new(&[&[1]]);
        let mut x = Tensor::vector(vec![0.0]);
        let g = vec![Tensor::vector(vec![f64::NAN])];
        let err = state
            .update(&mut [&mut x], &["encoder.0.linear.weight"], &[true], &g, &TrainingConfig::default())
            .unwrap_err();
        assert!(err.to_string().contains("encoder.0.linear.weight"));
    }

    #[test]
    fn batches_cover_every_cell() {
        let order: Vec<usize> = (0..11).collect();
        let b = minibatches(&order, 5);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![5, 6]);
        let b = minibatches(&order, 4);
        assert_eq!(b.iter().map(Vec::len).sum::<usize>(), 11);
        assert_eq!(b.len(), 3);
    }
}
