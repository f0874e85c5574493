//! Layers, initializers, dropout, Adam and global-norm clipping.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, BlockSparsity, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Token id reserved for padding. Its embedding row is zero and frozen.
pub const PAD_ID: usize = 0;

/// Retain probability used by every dropout site of the model.
pub const RETAIN_P: f64 = 0.8;

/// Uniform init range for embeddings.
pub const EMBEDDING_INIT: f64 = 0.05;

/// Glorot-uniform draws for a tensor with the given fans.
pub fn glorot_uniform<R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    t.data_mut()
        .iter_mut()
        .for_each(|v| *v = rng.gen_range(-limit..limit));
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        match *weight.shape() {
            [_, out] if bias.shape() == [out] => Ok(DenseLayer {
                weight,
                bias,
                activation,
            }),
            _ => Err(Error::shape("dense layer", weight.shape(), bias.shape())),
        }
    }

    /// Glorot-uniform weights and zero bias.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, activation: Activation, rng: &mut R) -> Self {
        DenseLayer {
            weight: glorot_uniform(&[inputs, outputs], inputs, outputs, rng),
            bias: Tensor::zeros(&[outputs]),
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> BoundDense {
        BoundDense {
            weight: g.param(&self.weight),
            bias: g.param(&self.bias),
            activation: self.activation,
        }
    }
}

/// A [`DenseLayer`] whose parameters live on a graph.
#[derive(Debug, Clone, Copy)]
pub struct BoundDense {
    pub weight: Var,
    pub bias: Var,
    pub activation: Activation,
}

impl BoundDense {
    /// `activation(x·W + b)` for a 2-D `x`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = g.matmul(x, self.weight)?;
        let h = g.add_row_bias(h, self.bias)?;
        g.activation(self.activation, h)
    }

    /// Same as [`BoundDense::forward`] with structurally zero input blocks skipped.
    pub fn forward_sparse(&self, g: &mut Graph<'_>, x: Var, sparsity: Rc<BlockSparsity>) -> Result<Var> {
        let h = g.matmul_block_sparse(x, self.weight, sparsity)?;
        let h = g.add_row_bias(h, self.bias)?;
        g.activation(self.activation, h)
    }
}

/// Token embedding matrix `[V×d]`; row [`PAD_ID`] stays zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub table: Tensor,
}

impl EmbeddingTable {
    pub fn init<R: Rng + ?Sized>(vocab: usize, dim: usize, rng: &mut R) -> Self {
        let mut table = Tensor::zeros(&[vocab, dim]);
        for (i, v) in table.data_mut().iter_mut().enumerate() {
            if i / dim != PAD_ID {
                *v = rng.gen_range(-EMBEDDING_INIT..EMBEDDING_INIT);
            }
        }
        EmbeddingTable { table }
    }

    pub fn vocab_size(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }
}

/// Row gather from a bound embedding table; the pad row gets no gradient.
pub fn embedding_lookup(g: &mut Graph<'_>, table: Var, ids: &[usize]) -> Result<Var> {
    g.gather_rows(table, ids, Some(PAD_ID))
}

/// Inverted dropout: in training each entry survives with `retain_p` and is
/// rescaled by `1/retain_p`; at inference it is the identity.
pub fn dropout<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    x: Var,
    retain_p: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    if !(retain_p > 0.0 && retain_p <= 1.0) {
        return Err(Error::Config(format!(
            "dropout retain probability must be in (0, 1], got {retain_p}"
        )));
    }
    if !training || retain_p == 1.0 {
        return Ok(x);
    }
    let scale = 1.0 / retain_p;
    let mask = (0..g.value(x).len())
        .map(|_| if rng.gen::<f64>() < retain_p { scale } else { 0.0 })
        .collect();
    g.mul_const(x, mask)
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for a fixed, ordered list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        AdamState {
            config,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update of every parameter.
    ///
    /// `params` and `grads` must follow the order the state was created with.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<Vec<f64>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Config(format!(
                "adam state tracks {} parameters, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let g = g.as_ref().ok_or_else(|| Error::MissingGradient(format!("#{i}")))?;
            if g.len() != p.len() || self.m[i].len() != p.len() {
                return Err(Error::shape("adam_step", p.shape(), &[g.len()]));
            }
        }
        self.t += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let g = g.as_ref().expect("checked above");
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[Option<Vec<f64>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients jointly so their global L2 norm is at most
/// `threshold`. Returns the norms before and after.
pub fn clip_global_norm(grads: &mut [Option<Vec<f64>>], threshold: f64) -> Result<(f64, f64)> {
    if !(threshold > 0.0) {
        return Err(Error::Config(format!("clip threshold must be positive, got {threshold}")));
    }
    let pre = global_norm(grads);
    if pre <= threshold {
        return Ok((pre, pre));
    }
    let scale = threshold / pre;
    grads
        .iter_mut()
        .flatten()
        .for_each(|g| g.iter_mut().for_each(|v| *v *= scale));
    Ok((pre, global_norm(grads)))
}
