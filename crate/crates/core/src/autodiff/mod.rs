//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Values are `f64` and row-major. A [`Graph`] records every op applied to
//! its [`Var`] handles; [`Graph::backward`] sweeps the tape once in reverse
//! and returns the gradients of all trainable leaves.

mod graph;
mod gumbel;
mod kernels;
mod tensor;

use std::str::FromStr;

pub use graph::{BlockSparsity, Gradients, Graph, Var};
pub use gumbel::{gumbel_from_uniform, sample_gumbel, UNIFORM_EPS};
pub use tensor::Tensor;

pub(crate) use kernels::sigmoid as sigmoid_scalar;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Softmax,
    None,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "softmax" => Ok(Activation::Softmax),
            "none" => Ok(Activation::None),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

impl Graph<'_> {
    /// Applies `kind` elementwise (softmax: over the last axis).
    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        Ok(match kind {
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
            Activation::Softmax => self.softmax(x)?,
            Activation::None => x,
        })
    }
}
