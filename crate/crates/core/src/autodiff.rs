//! Reverse-mode automatic differentiation over a fixed operation set.
//!
//! A [`Tape`] records every primitive in execution order. Each node keeps its
//! forward value plus whatever local partials the backward rule needs, so the
//! backward pass is a single reverse sweep over the node list.

use rand::Rng;

use crate::distributions::{sigmoid, softplus, zinb_log_pmf_logit};
use crate::error::{Result, ScviError};
use crate::tensor::{gemm, Tensor};

/// Inputs to `exp` are clamped to this value before exponentiation.
pub const EXP_CLAMP: f64 = 30.0;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Exp,
    Softplus,
    Sigmoid,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Batch-norm hyperparameters and running statistics.
#[derive(Clone, Copy, Debug)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            momentum: 0.99,
            eps: 1e-5,
        }
    }
}

/// Minibatch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for the running estimate.
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Activation {
        x: Var,
        derivative: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        scale: Var,
        shift: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    ConcatCols(Var, Var),
    Zinb {
        mu: Var,
        theta: Var,
        logit: Var,
        d_mu: Vec<f64>,
        d_theta: Vec<f64>,
        d_logit: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed primitives.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every trainable leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Takes ownership of a leaf's gradient; zeros when the loss does not
    /// depend on it.
    pub fn take(&mut self, v: Var, shape: &[usize]) -> Tensor {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if let Some(i) = t.data().iter().position(|v| !v.is_finite()) {
        return Err(ScviError::Numerical(format!(
            "{what} produced non-finite value at flat index {i}"
        )));
    }
    Ok(())
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(ScviError::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(g) => g
            .data_mut()
            .iter_mut()
            .zip(delta.data())
            .for_each(|(a, b)| *a += b),
        None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// `x · w + b` for `x: batch×in`, `w: in×out`, `b: out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if wv.shape().len() != 2 {
            return Err(ScviError::Dimension(format!(
                "affine weight must be a matrix, got shape {:?}",
                wv.shape()
            )));
        }
        let (n, k) = (xv.rows(), xv.cols());
        let (kw, m) = (wv.shape()[0], wv.shape()[1]);
        if k != kw || bv.len() != m {
            return Err(ScviError::Dimension(format!(
                "affine: input {:?}, weight {:?}, bias {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(bv.data());
        }
        gemm(xv.data(), (k, 1), wv.data(), (m, 1), &mut out, n, k, m, 1.0);
        let value = Tensor::matrix(n, m, out)?;
        check_finite(&value, "affine")?;
        Ok(self.push(value, Op::Affine { x, w, b }, &[x, w, b]))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let input = self.value(x);
        let n = input.len();
        let mut out = Vec::with_capacity(n);
        let mut derivative = Vec::with_capacity(n);
        for &v in input.data() {
            let (y, d) = match kind {
                Activation::Relu => {
                    if v > 0.0 {
                        (v, 1.0)
                    } else {
                        (0.0, 0.0)
                    }
                }
                Activation::Exp => {
                    if v > EXP_CLAMP {
                        (EXP_CLAMP.exp(), 0.0)
                    } else {
                        let e = v.exp();
                        (e, e)
                    }
                }
                Activation::Softplus => (softplus(v), sigmoid(v)),
                Activation::Sigmoid => {
                    let s = sigmoid(v);
                    (s, s * (1.0 - s))
                }
                Activation::Linear => (v, 1.0),
            };
            out.push(y);
            derivative.push(d);
        }
        let value = Tensor::new(input.shape().to_vec(), out)?;
        check_finite(&value, "activation")?;
        Ok(self.push(value, Op::Activation { x, derivative }, &[x]))
    }

    /// Batch normalization over the rows of `x: batch×d`.
    ///
    /// In training mode the minibatch statistics are used and returned so the
    /// caller can fold them into its running estimates; in eval mode the
    /// supplied running statistics are used.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        running_mean: &[f64],
        running_var: &[f64],
        mode: Mode,
        config: BatchNormConfig,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let (sv, bv) = (self.value(scale), self.value(shift));
        if sv.len() != d || bv.len() != d || running_mean.len() != d || running_var.len() != d {
            return Err(ScviError::Dimension(format!(
                "batch norm over {d} features with scale {:?} and shift {:?}",
                sv.shape(),
                bv.shape()
            )));
        }
        let (mean, var, stats) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(ScviError::Parameter(
                        "training-mode batch norm needs at least 2 rows".into(),
                    ));
                }
                let mut mean = vec![0.0; d];
                for i in 0..n {
                    for (m, v) in mean.iter_mut().zip(xv.row(i)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; d];
                for i in 0..n {
                    for ((s, v), m) in var.iter_mut().zip(xv.row(i)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                let unbiased = var.iter().map(|s| s / (n - 1) as f64).collect();
                var.iter_mut().for_each(|s| *s /= n as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            Mode::Eval => (running_mean.to_vec(), running_var.to_vec(), None),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + config.eps).sqrt()).collect();
        let mut normalized = Vec::with_capacity(n * d);
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            for (j, v) in xv.row(i).iter().enumerate() {
                let h = (v - mean[j]) * inv_std[j];
                normalized.push(h);
                out.push(h * sv.data()[j] + bv.data()[j]);
            }
        }
        let value = Tensor::matrix(n, d, out)?;
        check_finite(&value, "batch norm")?;
        let op = Op::BatchNorm {
            x,
            scale,
            shift,
            normalized,
            inv_std,
            train: mode == Mode::Train,
        };
        Ok((self.push(value, op, &[x, scale, shift]), stats))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)` so that
    /// eval mode is the identity.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(ScviError::Parameter(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let input = self.value(x);
        let mask: Vec<f64> = (0..input.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = input.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(input.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, what)?;
        let out = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape().to_vec(), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        check_finite(&value, "mul")?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v * c);
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v + c);
        self.push(value, Op::AddScalar(a), &[a])
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(ScviError::Parameter("mean of an empty tensor".into()));
        }
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        Ok(self.push(value, Op::Mean(a), &[a]))
    }

    /// Per-row sums of a matrix, as a vector.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let sums = (0..t.rows()).map(|i| t.row(i).iter().sum()).collect();
        let value = Tensor::vector(sums);
        self.push(value, Op::SumRows(a), &[a])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).concat_cols(self.value(b))?;
        Ok(self.push(value, Op::ConcatCols(a, b), &[a, b]))
    }

    /// Per-row ZINB log-likelihood `Σ_g log p(counts[n,g] | mu, theta, logit)`.
    ///
    /// `mu` and `logit` are `batch×genes`; `theta` is either `batch×genes` or
    /// a per-gene vector broadcast over rows. Counts are constants.
    pub fn zinb_log_likelihood(&mut self, counts: &Tensor, mu: Var, theta: Var, logit: Var) -> Result<Var> {
        let (mv, tv, lv) = (self.value(mu), self.value(theta), self.value(logit));
        let (n, g) = (counts.rows(), counts.cols());
        if mv.rows() != n || mv.cols() != g || lv.rows() != n || lv.cols() != g {
            return Err(ScviError::Dimension(format!(
                "ZINB: counts {:?}, mean {:?}, logit {:?}",
                counts.shape(),
                mv.shape(),
                lv.shape()
            )));
        }
        let per_gene = tv.shape().len() == 1;
        if (per_gene && tv.len() != g) || (!per_gene && (tv.rows() != n || tv.cols() != g)) {
            return Err(ScviError::Dimension(format!(
                "ZINB: dispersion shape {:?} does not match {n}×{g}",
                tv.shape()
            )));
        }
        let mut rows = vec![0.0; n];
        let mut d_mu = Vec::with_capacity(n * g);
        let mut d_theta = Vec::with_capacity(n * g);
        let mut d_logit = Vec::with_capacity(n * g);
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..g {
                let idx = i * g + j;
                let th = if per_gene { tv.data()[j] } else { tv.data()[idx] };
                let (v, grad) = zinb_log_pmf_logit(counts.data()[idx], mv.data()[idx], th, lv.data()[idx]);
                acc += v;
                d_mu.push(grad.d_mu);
                d_theta.push(grad.d_theta);
                d_logit.push(grad.d_pi);
            }
            if !acc.is_finite() {
                return Err(ScviError::Numerical(format!(
                    "ZINB log-likelihood is not finite for row {i}"
                )));
            }
            rows[i] = acc;
        }
        let op = Op::Zinb {
            mu,
            theta,
            logit,
            d_mu,
            d_theta,
            d_logit,
        };
        Ok(self.push(Tensor::vector(rows), op, &[mu, theta, logit]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(ScviError::Dimension(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &upstream, &mut grads)?;
        }
        // Only trainable leaves keep their gradients.
        for (i, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.needs_grad) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn send(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if self.needs(v) {
            accumulate(&mut grads[v.0], delta);
        }
    }

    fn propagate(&self, node: &Node, up: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let shape = |v: Var| self.value(v).shape().to_vec();
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, k) = (xv.rows(), xv.cols());
                let m = wv.shape()[1];
                if self.needs(*x) {
                    // dx = up · wᵀ
                    let mut dx = vec![0.0; n * k];
                    gemm(up.data(), (m, 1), wv.data(), (1, m), &mut dx, n, m, k, 0.0);
                    self.send(grads, *x, Tensor::new(shape(*x), dx)?);
                }
                if self.needs(*w) {
                    // dw = xᵀ · up
                    let mut dw = vec![0.0; k * m];
                    gemm(xv.data(), (1, k), up.data(), (m, 1), &mut dw, k, n, m, 0.0);
                    self.send(grads, *w, Tensor::new(shape(*w), dw)?);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; m];
                    for i in 0..n {
                        for (d, u) in db.iter_mut().zip(up.row(i)) {
                            *d += u;
                        }
                    }
                    self.send(grads, *b, Tensor::new(shape(*b), db)?);
                }
            }
            Op::Activation { x, derivative } => {
                let dx = up.data().iter().zip(derivative).map(|(u, d)| u * d).collect();
                self.send(grads, *x, Tensor::new(shape(*x), dx)?);
            }
            Op::BatchNorm {
                x,
                scale,
                shift,
                normalized,
                inv_std,
                train,
            } => {
                let (n, d) = (up.rows(), up.cols());
                let sv = self.value(*scale).data();
                let mut dscale = vec![0.0; d];
                let mut dshift = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        let u = up.data()[i * d + j];
                        dscale[j] += u * normalized[i * d + j];
                        dshift[j] += u;
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; n * d];
                    if *train {
                        let nf = n as f64;
                        for j in 0..d {
                            // Σ dxhat and Σ dxhat·xhat over the batch
                            let sum_dh = dshift[j] * sv[j];
                            let sum_dh_h = dscale[j] * sv[j];
                            for i in 0..n {
                                let dh = up.data()[i * d + j] * sv[j];
                                dx[i * d + j] = inv_std[j] / nf
                                    * (nf * dh - sum_dh - normalized[i * d + j] * sum_dh_h);
                            }
                        }
                    } else {
                        for i in 0..n {
                            for j in 0..d {
                                dx[i * d + j] = up.data()[i * d + j] * sv[j] * inv_std[j];
                            }
                        }
                    }
                    self.send(grads, *x, Tensor::new(shape(*x), dx)?);
                }
                self.send(grads, *scale, Tensor::new(shape(*scale), dscale)?);
                self.send(grads, *shift, Tensor::new(shape(*shift), dshift)?);
            }
            Op::Dropout { x, mask } => {
                let dx = up.data().iter().zip(mask).map(|(u, m)| u * m).collect();
                self.send(grads, *x, Tensor::new(shape(*x), dx)?);
            }
            Op::Add(a, b) => {
                self.send(grads, *a, up.clone());
                self.send(grads, *b, up.clone());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, up.clone());
                self.send(grads, *b, up.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let da = up.data().iter().zip(bv.data()).map(|(u, y)| u * y).collect();
                    self.send(grads, *a, Tensor::new(shape(*a), da)?);
                }
                if self.needs(*b) {
                    let db = up.data().iter().zip(av.data()).map(|(u, x)| u * x).collect();
                    self.send(grads, *b, Tensor::new(shape(*b), db)?);
                }
            }
            Op::Scale(a, c) => self.send(grads, *a, up.map(|v| v * c)),
            Op::AddScalar(a) => self.send(grads, *a, up.clone()),
            Op::Sum(a) => {
                self.send(grads, *a, Tensor::full(&shape(*a), up.item()));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                self.send(grads, *a, Tensor::full(&shape(*a), up.item() / n));
            }
            Op::SumRows(a) => {
                let av = self.value(*a);
                let (n, d) = (av.rows(), av.cols());
                let mut da = Vec::with_capacity(n * d);
                for i in 0..n {
                    da.extend(std::iter::repeat_n(up.data()[i], d));
                }
                self.send(grads, *a, Tensor::new(shape(*a), da)?);
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                let n = up.rows();
                let mut da = Vec::with_capacity(n * ca);
                let mut db = Vec::with_capacity(n * cb);
                for i in 0..n {
                    let row = up.row(i);
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                self.send(grads, *a, Tensor::new(shape(*a), da)?);
                self.send(grads, *b, Tensor::new(shape(*b), db)?);
            }
            Op::Zinb {
                mu,
                theta,
                logit,
                d_mu,
                d_theta,
                d_logit,
            } => {
                let n = up.len();
                let g = d_mu.len() / n.max(1);
                let row_scaled = |partials: &[f64]| -> Vec<f64> {
                    partials
                        .iter()
                        .enumerate()
                        .map(|(idx, p)| p * up.data()[idx / g])
                        .collect()
                };
                if self.needs(*mu) {
                    self.send(grads, *mu, Tensor::new(shape(*mu), row_scaled(d_mu))?);
                }
                if self.needs(*logit) {
                    self.send(grads, *logit, Tensor::new(shape(*logit), row_scaled(d_logit))?);
                }
                if self.needs(*theta) {
                    let full = row_scaled(d_theta);
                    let tshape = shape(*theta);
                    let dt = if tshape.len() == 1 {
                        let mut acc = vec![0.0; g];
                        for (idx, v) in full.iter().enumerate() {
                            acc[idx % g] += v;
                        }
                        acc
                    } else {
                        full
                    };
                    self.send(grads, *theta, Tensor::new(tshape, dt)?);
                }
            }
        }
        Ok(())
    }
}
