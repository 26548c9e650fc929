//! Reference models: a two-layer MLP and a small pre-norm decoder-only
//! transformer with optional mirrored skip connections. Both expose their
//! per-layer representations for entropy measurement.

pub mod checkpoint;
pub mod mlp;
pub mod transformer;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::autograd::{AutogradError, Tape, Var};
use crate::tensor::Tensor;

pub use mlp::{mlp_forward, shifted_params, Activation, MlpConfig};
pub use transformer::{transformer_forward, TransformerConfig};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("missing parameter {0:?}")]
    MissingParam(String),
    #[error("parameter {name:?}: shape {found:?} where {expected:?} was expected")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("input has width {found}, model expects {expected}")]
    InputWidth { expected: usize, found: usize },
    #[error("token id {id} at position {position} is outside the vocabulary of {vocab}")]
    TokenOutOfRange {
        id: usize,
        position: usize,
        vocab: usize,
    },
    #[error("sequence length {len} exceeds the context length {context}")]
    SequenceTooLong { len: usize, context: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Named parameter tensors, ordered by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, NetError> {
        self.tensors
            .get(name)
            .ok_or_else(|| NetError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, NetError> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| NetError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Same names and shapes, every value zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Errors unless `other` has exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<(), NetError> {
        for (name, t) in &self.tensors {
            let o = other.get(name)?;
            if o.shape() != t.shape() {
                return Err(NetError::ParamShape {
                    name: name.clone(),
                    expected: t.shape().to_vec(),
                    found: o.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = other.tensors.keys().find(|k| !self.tensors.contains_key(*k)) {
            return Err(NetError::MissingParam(extra.clone()));
        }
        Ok(())
    }

    /// Records every tensor on the tape, differentiable when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| {
                    let var = if trainable {
                        tape.param(v.clone())
                    } else {
                        tape.constant(v.clone())
                    };
                    (k.clone(), var)
                })
                .collect(),
        }
    }
}

/// Tape handles for a bound [`ParamSet`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var, NetError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| NetError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients after backward; parameters the loss never reached get zeros.
    pub fn grads(&self, tape: &Tape) -> ParamSet {
        ParamSet {
            tensors: self
                .vars
                .iter()
                .map(|(k, &v)| {
                    let g = tape
                        .grad(v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
                    (k.clone(), g)
                })
                .collect(),
        }
    }
}

/// Per-layer representations (tokens × width) and the model output, all on
/// the tape that produced them.
#[derive(Debug, Clone)]
pub struct ActivationBundle {
    /// `layers[l − 1]` is the representation after layer `l`.
    pub layers: Vec<Var>,
    pub logits: Var,
}

impl ActivationBundle {
    pub fn layer(&self, l: usize) -> Option<Var> {
        l.checked_sub(1).and_then(|i| self.layers.get(i)).copied()
    }

    pub fn layer_values(&self, tape: &Tape) -> Vec<Tensor> {
        self.layers.iter().map(|&v| tape.value(v).clone()).collect()
    }
}

fn expect_shape(params: &ParamSet, name: &str, shape: &[usize]) -> Result<(), NetError> {
    let t = params.get(name)?;
    if t.shape() != shape {
        return Err(NetError::ParamShape {
            name: name.to_string(),
            expected: shape.to_vec(),
            found: t.shape().to_vec(),
        });
    }
    Ok(())
}
