//! Flat parameter store with a role layout derived from the config.

use rand::Rng;

use super::config::{DispersionMode, ModelConfig};
use crate::error::{Result, ScviError};
use crate::tensor::Tensor;

/// One named tensor of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    /// Buffers such as batch-norm running statistics are not trainable.
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct LinearIdx {
    pub weight: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct BlockIdx {
    pub linear: LinearIdx,
    pub scale: usize,
    pub shift: usize,
    pub running_mean: usize,
    pub running_var: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum DispersionIdx {
    PerGene(usize),
    PerEntry(LinearIdx),
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Layout {
    pub encoder: Vec<BlockIdx>,
    pub latent_mean: LinearIdx,
    pub latent_log_var: LinearIdx,
    pub decoder: Vec<BlockIdx>,
    pub nb_mean: LinearIdx,
    pub dispersion: DispersionIdx,
    pub dropout_logit: LinearIdx,
}

/// All weights, biases and batch-norm statistics of the encoder/decoder pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    entries: Vec<ParamEntry>,
    pub(crate) layout: Layout,
}

/// Initializer for a parameter, given its shape and `(fan_in, fan_out)`.
enum Init {
    Glorot(usize, usize),
    Constant(f64),
}

struct Builder<'r, R: Rng + ?Sized> {
    entries: Vec<ParamEntry>,
    rng: Option<&'r mut R>,
}

impl<R: Rng + ?Sized> Builder<'_, R> {
    fn add(&mut self, name: String, shape: &[usize], init: Init, trainable: bool) -> usize {
        let tensor = match (init, self.rng.as_deref_mut()) {
            (Init::Glorot(fan_in, fan_out), Some(rng)) => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
                Tensor::new(shape.to_vec(), data).expect("shape product matches")
            }
            (Init::Glorot(..), None) => Tensor::zeros(shape),
            (Init::Constant(c), _) => Tensor::full(shape, c),
        };
        self.entries.push(ParamEntry {
            name,
            tensor,
            trainable,
        });
        self.entries.len() - 1
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bias: f64) -> LinearIdx {
        LinearIdx {
            weight: self.add(
                format!("{prefix}.weight"),
                &[fan_in, fan_out],
                Init::Glorot(fan_in, fan_out),
                true,
            ),
            bias: self.add(format!("{prefix}.bias"), &[fan_out], Init::Constant(bias), true),
        }
    }

    fn block(&mut self, prefix: &str, fan_in: usize, width: usize) -> BlockIdx {
        let linear = self.linear(&format!("{prefix}.linear"), fan_in, width, 0.0);
        BlockIdx {
            linear,
            scale: self.add(format!("{prefix}.norm.scale"), &[width], Init::Constant(1.0), true),
            shift: self.add(format!("{prefix}.norm.shift"), &[width], Init::Constant(0.0), true),
            running_mean: self.add(format!("{prefix}.norm.running_mean"), &[width], Init::Constant(0.0), false),
            running_var: self.add(format!("{prefix}.norm.running_var"), &[width], Init::Constant(1.0), false),
        }
    }
}

fn build<R: Rng + ?Sized>(config: &ModelConfig, rng: Option<&mut R>) -> (Vec<ParamEntry>, Layout) {
    let mut b = Builder {
        entries: Vec::new(),
        rng,
    };
    let w = config.hidden_width;
    let mut encoder = Vec::with_capacity(config.hidden_depth);
    for i in 0..config.hidden_depth {
        let fan_in = if i == 0 { config.encoder_input_dim() } else { w };
        encoder.push(b.block(&format!("encoder.{i}"), fan_in, w));
    }
    let latent_mean = b.linear("encoder.latent_mean", w, config.latent_dim, 0.0);
    let latent_log_var = b.linear("encoder.latent_log_var", w, config.latent_dim, -1.0);
    let mut decoder = Vec::with_capacity(config.hidden_depth);
    for i in 0..config.hidden_depth {
        let fan_in = if i == 0 { config.decoder_input_dim() } else { w };
        decoder.push(b.block(&format!("decoder.{i}"), fan_in, w));
    }
    let nb_mean = b.linear("decoder.nb_mean", w, config.n_genes, 0.0);
    let dispersion = match config.dispersion_mode {
        DispersionMode::PerGene => DispersionIdx::PerGene(b.add(
            "decoder.log_theta".into(),
            &[config.n_genes],
            Init::Constant(0.0),
            true,
        )),
        DispersionMode::PerEntry => DispersionIdx::PerEntry(b.linear("decoder.log_theta", w, config.n_genes, 0.0)),
    };
    let dropout_logit = b.linear("decoder.dropout_logit", w, config.n_genes, 0.0);
    let layout = Layout {
        encoder,
        latent_mean,
        latent_log_var,
        decoder,
        nb_mean,
        dispersion,
        dropout_logit,
    };
    (b.entries, layout)
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases (log-variance head bias −1),
    /// identity batch norms.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (entries, layout) = build(config, Some(rng));
        Ok(ModelParams { entries, layout })
    }

    /// Rebuilds parameters from named tensors, checking names and shapes
    /// against the layout implied by `config`.
    pub fn from_entries(config: &ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let (mut entries, layout) = build::<rand_chacha::ChaCha8Rng>(config, None);
        if tensors.len() != entries.len() {
            return Err(ScviError::Checkpoint(format!(
                "expected {} tensors, found {}",
                entries.len(),
                tensors.len()
            )));
        }
        for (entry, (name, tensor)) in entries.iter_mut().zip(tensors) {
            if entry.name != name || entry.tensor.shape() != tensor.shape() {
                return Err(ScviError::Checkpoint(format!(
                    "expected tensor '{}' with shape {:?}, found '{}' with shape {:?}",
                    entry.name,
                    entry.tensor.shape(),
                    name,
                    tensor.shape()
                )));
            }
            entry.tensor = tensor;
        }
        Ok(ModelParams { entries, layout })
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.entries[idx].tensor
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].tensor
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Number of trainable scalars.
    pub fn n_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.tensor.len()).sum()
    }
}
