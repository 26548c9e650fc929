use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{expect_shape, ActivationBundle, BoundParams, NetError, ParamSet};
use crate::autograd::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

/// `x → act(x·W1 + b1) → ·W2 + b2`; the hidden activation is layer 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            input_dim: 10,
            hidden_dim: 32,
            output_dim: 4,
            activation: Activation::Relu,
            seed: 0,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(NetError::InvalidConfig("MLP dimensions must be positive".into()));
        }
        Ok(())
    }

    fn shapes(&self) -> [(&'static str, [usize; 2]); 4] {
        [
            ("w1", [self.input_dim, self.hidden_dim]),
            ("b1", [1, self.hidden_dim]),
            ("w2", [self.hidden_dim, self.output_dim]),
            ("b2", [1, self.output_dim]),
        ]
    }

    /// Gaussian parameters with standard deviation `1/√fan_in`, biases
    /// included.
    pub fn init(&self) -> Result<ParamSet, NetError> {
        self.init_scaled(1.0, self.seed)
    }

    /// Same layout as [`MlpConfig::init`] with every standard deviation
    /// multiplied by `factor`, drawn from `seed`.
    pub fn init_scaled(&self, factor: f64, seed: u64) -> Result<ParamSet, NetError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        for (name, shape) in self.shapes() {
            let fan_in = match name {
                "w1" | "b1" => self.input_dim,
                _ => self.hidden_dim,
            };
            let std = factor / (fan_in as f64).sqrt();
            p.insert(name, Tensor::randn(&shape, std, &mut rng));
        }
        Ok(p)
    }

    pub fn check_params(&self, params: &ParamSet) -> Result<(), NetError> {
        for (name, shape) in self.shapes() {
            expect_shape(params, name, &shape)?;
        }
        Ok(())
    }
}

/// Forward pass on a batch `x` (rows × input_dim) already on the tape.
pub fn mlp_forward(
    tape: &mut Tape,
    config: &MlpConfig,
    params: &BoundParams,
    x: Var,
) -> Result<ActivationBundle, NetError> {
    let width = tape.shape(x).get(1).copied().unwrap_or(0);
    if tape.shape(x).len() != 2 || width != config.input_dim {
        return Err(NetError::InputWidth {
            expected: config.input_dim,
            found: width,
        });
    }
    if let Some(i) = tape.value(x).first_non_finite() {
        return Err(crate::autograd::AutogradError::NonFinite { coordinate: i }.into());
    }
    let pre = tape.matmul(x, params.var("w1")?)?;
    let pre = tape.add(pre, params.var("b1")?)?;
    let hidden = match config.activation {
        Activation::Relu => tape.relu(pre),
        Activation::Gelu => tape.gelu(pre),
    };
    let out = tape.matmul(hidden, params.var("w2")?)?;
    let out = tape.add(out, params.var("b2")?)?;
    Ok(ActivationBundle {
        layers: vec![hidden],
        logits: out,
    })
}

/// `θ + sign·Δθ`, elementwise per parameter.
pub fn shifted_params(params: &ParamSet, delta: &ParamSet, sign: f64) -> Result<ParamSet, NetError> {
    params.check_compatible(delta)?;
    let mut out = params.clone();
    for (name, t) in out.iter_mut() {
        let d = delta.get(name)?;
        for (x, dx) in t.data_mut().iter_mut().zip(d.data()) {
            *x += sign * dx;
        }
    }
    Ok(out)
}

/// Evaluates the MLP without recording gradients.
pub fn mlp_eval(config: &MlpConfig, params: &ParamSet, x: &Tensor) -> Result<(Tensor, Tensor), NetError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let bundle = mlp_forward(&mut tape, config, &bound, xv)?;
    Ok((
        tape.value(bundle.layers[0]).clone(),
        tape.value(bundle.logits).clone(),
    ))
}
