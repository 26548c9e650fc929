use iblm_core::nets::{NetError, ParamSet};

use crate::config::{OptimizerConfig, OptimizerKind};

/// Plain SGD with L2 weight decay, or Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd {
        lr: f64,
        weight_decay: f64,
    },
    Adam {
        lr: f64,
        betas: [f64; 2],
        weight_decay: f64,
        t: i32,
        m: ParamSet,
        v: ParamSet,
    },
}

pub const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(config: &OptimizerConfig, params: &ParamSet) -> Self {
        match config.kind {
            OptimizerKind::Sgd => Optimizer::Sgd {
                lr: config.learning_rate,
                weight_decay: config.weight_decay,
            },
            OptimizerKind::Adam => Optimizer::Adam {
                lr: config.learning_rate,
                betas: config.betas,
                weight_decay: config.weight_decay,
                t: 0,
                m: params.zeros_like(),
                v: params.zeros_like(),
            },
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<(), NetError> {
        params.check_compatible(grads)?;
        match self {
            Optimizer::Sgd { lr, weight_decay } => {
                for (name, p) in params.iter_mut() {
                    let g = grads.get(name)?;
                    for (x, dx) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= *lr * (dx + *weight_decay * *x);
                    }
                }
            }
            Optimizer::Adam {
                lr,
                betas: [b1, b2],
                weight_decay,
                t,
                m,
                v,
            } => {
                *t += 1;
                let c1 = 1.0 - b1.powi(*t);
                let c2 = 1.0 - b2.powi(*t);
                for (name, p) in params.iter_mut() {
                    let g = grads.get(name)?.data();
                    let m = m.get_mut(name)?.data_mut();
                    let v = v.get_mut(name)?.data_mut();
                    for (i, x) in p.data_mut().iter_mut().enumerate() {
                        m[i] = *b1 * m[i] + (1.0 - *b1) * g[i];
                        v[i] = *b2 * v[i] + (1.0 - *b2) * g[i] * g[i];
                        let update = (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                        *x -= *lr * (update + *weight_decay * *x);
                    }
                }
            }
        }
        Ok(())
    }
}
