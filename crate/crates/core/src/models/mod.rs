//! Recurrent and transformer forecasters mapping an input window to logits
//! `H` of shape `d x k`.
//!
//! Both work on batches: inputs are `[B, T_in, d]` and the output is a
//! `[B, d * k]` tape value whose row `b` is window `b`'s `H` flattened
//! row-major (variable-major, horizon-minor).

mod checkpoint;
mod params;
mod recurrent;
mod transformer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffnum::{DiffError, Tape, Tensor, Var};

pub use params::{ParamId, ParamStore};
pub use recurrent::RecurrentNet;
pub use transformer::{attention, attention_weights, multi_head, positional_encoding, AttentionWeights, TransformerNet};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Recurrent,
    Transformer,
}

impl Arch {
    pub fn label(self) -> &'static str {
        match self {
            Arch::Recurrent => "lstm",
            Arch::Transformer => "transformer",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cell {
    Lstm,
    Elman,
}

/// Activation of the Elman cell. The LSTM uses its fixed sigmoid/tanh gates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub cell: Cell,
    pub activation: Activation,
    /// Recurrent hidden size.
    pub hidden: usize,
    /// Transformer model width.
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    /// Feed-forward inner width.
    pub ffn: usize,
    pub residual: bool,
    pub layer_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Recurrent,
            cell: Cell::Lstm,
            activation: Activation::Tanh,
            hidden: 64,
            width: 64,
            heads: 4,
            layers: 2,
            ffn: 128,
            residual: true,
            layer_norm: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(ModelError::Config(format!("{name} must be >= 1")))
            } else {
                Ok(())
            }
        };
        match self.arch {
            Arch::Recurrent => positive("hidden", self.hidden),
            Arch::Transformer => {
                positive("width", self.width)?;
                positive("heads", self.heads)?;
                positive("layers", self.layers)?;
                positive("ffn", self.ffn)?;
                if self.width % self.heads != 0 {
                    return Err(ModelError::Config(format!(
                        "width {} is not divisible by head count {}",
                        self.width, self.heads
                    )));
                }
                Ok(())
            }
        }
    }
}

/// One supervised example: `inputs` is `d x T_in`, `targets` is `d x k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub env_id: String,
}

impl Window {
    pub fn d(&self) -> usize {
        self.inputs.rows()
    }

    pub fn t_in(&self) -> usize {
        self.inputs.cols()
    }

    pub fn k(&self) -> usize {
        self.targets.cols()
    }
}

/// Windows stacked for a forward pass: `inputs [B, T_in, d]`, `targets [B, d*k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub targets: Tensor,
}

impl Batch {
    pub fn from_windows(windows: &[&Window]) -> Result<Self, ModelError> {
        let first = windows.first().ok_or_else(|| ModelError::Config("empty batch".into()))?;
        let (d, t, k) = (first.d(), first.t_in(), first.k());
        let mut inputs = Vec::with_capacity(windows.len() * t * d);
        let mut targets = Vec::with_capacity(windows.len() * d * k);
        for w in windows {
            if (w.d(), w.t_in(), w.k()) != (d, t, k) {
                return Err(DiffError::dimension("batch", first.inputs.shape(), w.inputs.shape()).into());
            }
            let x = w.inputs.data();
            for step in 0..t {
                inputs.extend((0..d).map(|i| x[i * t + step]));
            }
            targets.extend_from_slice(w.targets.data());
        }
        let b = windows.len();
        Ok(Self { inputs: Tensor::new(vec![b, t, d], inputs)?, targets: Tensor::matrix(b, d * k, targets) })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_inputs(inputs: &Tensor, d: usize) -> Result<(usize, usize), ModelError> {
    let s = inputs.shape();
    if s.len() != 3 || s[2] != d {
        return Err(DiffError::dimension("forecaster input", s, &[0, 0, d]).into());
    }
    Ok((s[0], s[1]))
}

/// A forecaster of either architecture together with its parameters.
#[derive(Clone, Debug)]
pub enum Forecaster {
    Recurrent(RecurrentNet),
    Transformer(TransformerNet),
}

impl Forecaster {
    pub fn new(config: &ModelConfig, d: usize, k: usize, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if d == 0 || k == 0 {
            return Err(ModelError::Config(format!("d and k must be >= 1, got d={d} k={k}")));
        }
        Ok(match config.arch {
            Arch::Recurrent => Forecaster::Recurrent(RecurrentNet::new(config.cell, config.activation, d, config.hidden, k, seed)),
            Arch::Transformer => Forecaster::Transformer(TransformerNet::new(config, d, k, seed)),
        })
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Forecaster::Recurrent(m) => &m.params,
            Forecaster::Transformer(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Forecaster::Recurrent(m) => &mut m.params,
            Forecaster::Transformer(m) => &mut m.params,
        }
    }

    /// `(d, k)` the model was built for.
    pub fn io_dims(&self) -> (usize, usize) {
        match self {
            Forecaster::Recurrent(m) => (m.d, m.k),
            Forecaster::Transformer(m) => (m.d, m.k),
        }
    }

    /// Records the forward pass; `vars` must come from `self.params().bind`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], inputs: &Tensor) -> Result<Var, ModelError> {
        match self {
            Forecaster::Recurrent(m) => m.forward(tape, vars, inputs),
            Forecaster::Transformer(m) => m.forward(tape, vars, inputs),
        }
    }

    /// Logits for a whole batch, `[B, d*k]`, without keeping the tape.
    pub fn predict(&self, inputs: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let vars = self.params().bind_constants(&mut tape)?;
        let out = self.forward(&mut tape, &vars, inputs)?;
        Ok(tape.value(out).clone())
    }

    /// `H` for a single window, shaped `d x k`.
    pub fn forecast(&self, window: &Window) -> Result<Tensor, ModelError> {
        let (d, k) = self.io_dims();
        let out = self.predict(&Batch::from_windows(&[window])?.inputs)?;
        Ok(out.reshape(&[d, k])?)
    }
}

#[cfg(test)]
mod tests;
