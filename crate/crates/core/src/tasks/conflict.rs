use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::TaskError;
use crate::nets::mlp::{mlp_eval, shifted_params};
use crate::nets::{MlpConfig, ParamSet};
use crate::tensor::Tensor;

pub const MEAN_1: [f64; 10] = [1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
pub const MEAN_2: [f64; 10] = [0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0];

/// Two Gaussian input clouds in ten dimensions, labelled by two teachers
/// `θ + Δθ` and `θ − Δθ` that share a base network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConflictTaskSpec {
    pub n_per_task: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for ConflictTaskSpec {
    fn default() -> Self {
        Self {
            n_per_task: 256,
            sigma: 0.25,
            seed: 0,
        }
    }
}

impl ConflictTaskSpec {
    pub fn validate(&self) -> Result<(), TaskError> {
        if self.n_per_task == 0 {
            return Err(TaskError::InvalidSpec("n_per_task must be positive".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(TaskError::InvalidSpec(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    pub fn mean(task: usize) -> &'static [f64; 10] {
        if task == 1 {
            &MEAN_1
        } else {
            &MEAN_2
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConflictData {
    pub x1: Tensor,
    pub y1: Tensor,
    pub x2: Tensor,
    pub y2: Tensor,
}

fn sample_cloud(mean: &[f64; 10], n: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..n)
        .flat_map(|_| mean.to_vec())
        .map(|m| {
            let z: f64 = StandardNormal.sample(rng);
            m + sigma * z
        })
        .collect();
    Tensor::new(vec![n, mean.len()], data).expect("shape matches data")
}

/// Samples both clouds from `spec.seed` and labels them with the shifted
/// teachers. The MLP must take ten inputs.
pub fn gen_conflict_data(
    spec: &ConflictTaskSpec,
    model: &MlpConfig,
    base: &ParamSet,
    delta: &ParamSet,
) -> Result<ConflictData, TaskError> {
    spec.validate()?;
    if model.input_dim != MEAN_1.len() {
        return Err(TaskError::InvalidSpec(format!(
            "teacher takes {} inputs, the task has {}",
            model.input_dim,
            MEAN_1.len()
        )));
    }
    model.check_params(base)?;
    model.check_params(delta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let x1 = sample_cloud(&MEAN_1, spec.n_per_task, spec.sigma, &mut rng);
    let x2 = sample_cloud(&MEAN_2, spec.n_per_task, spec.sigma, &mut rng);
    let plus = shifted_params(base, delta, 1.0)?;
    let minus = shifted_params(base, delta, -1.0)?;
    let (_, y1) = mlp_eval(model, &plus, &x1)?;
    let (_, y2) = mlp_eval(model, &minus, &x2)?;
    Ok(ConflictData { x1, y1, x2, y2 })
}
