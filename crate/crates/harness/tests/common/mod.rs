#![allow(dead_code)]

use iblm_core::nets::{BoundParams, ParamSet};
use iblm_core::{Tape, Tensor};
use iblm_harness::workload::{StepGraph, Workload};
use iblm_harness::{RunConfig, RunError};
use serde_json::Value;

/// A workload whose losses are scripted: step `t` reports `ce[t − 1]` (the
/// last entry repeats) and the `k`-th validation call reports `val[k]`.
/// Its single layer is a fixed matrix, so its entropy never moves.
pub struct Scripted {
    pub ce: Vec<f64>,
    pub val: Vec<f64>,
    pub val_calls: usize,
    pub rep: Tensor,
}

impl Scripted {
    pub fn new(ce: Vec<f64>, val: Vec<f64>) -> Self {
        Self {
            ce,
            val,
            val_calls: 0,
            rep: Tensor::from_rows(&[vec![1.0, 0.2], vec![0.3, 1.0], vec![0.5, 0.5]]).unwrap(),
        }
    }

    pub fn constant(ce: f64) -> Self {
        Self::new(vec![ce], vec![ce])
    }
}

impl Workload for Scripted {
    fn layers(&self) -> usize {
        1
    }

    fn init_params(&self) -> Result<ParamSet, RunError> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::filled(&[2, 2], 0.5));
        Ok(p)
    }

    fn train_graph(
        &mut self,
        tape: &mut Tape,
        params: &BoundParams,
        step: u64,
    ) -> Result<StepGraph, RunError> {
        let i = (step as usize - 1).min(self.ce.len() - 1);
        let c = tape.constant(Tensor::scalar(self.ce[i]));
        let w = params.var("w")?;
        let s = tape.sum(w);
        let z = tape.scale(s, 0.0);
        let task_loss = tape.add(c, z)?;
        let rep = tape.constant(self.rep.clone());
        Ok(StepGraph::single_blocks(task_loss, vec![rep]))
    }

    fn validate(&mut self, _params: &ParamSet) -> Result<f64, RunError> {
        let v = self.val[self.val_calls.min(self.val.len() - 1)];
        self.val_calls += 1;
        Ok(v)
    }

    fn probe_layers(&mut self, _params: &ParamSet) -> Result<Vec<Tensor>, RunError> {
        Ok(vec![self.rep.clone()])
    }
}

pub fn config(v: Value) -> RunConfig {
    RunConfig::from_value(v).expect("test config is valid")
}

/// A conflict run small enough for a unit-speed test.
pub fn small_conflict(extra: Value) -> RunConfig {
    let mut base = serde_json::json!({
        "experiment": "conflict",
        "total_steps": 60,
        "eval_every": 20,
        "seed": 3,
        "task": {"conflict": {"spec": {"n_per_task": 64}, "test_per_task": 32}}
    });
    merge(&mut base, extra);
    config(base)
}

/// A two-layer byte-level LM on a short synthetic corpus.
pub fn small_lm(extra: Value) -> RunConfig {
    let mut base = serde_json::json!({
        "experiment": "lm-pretrain",
        "model": {"transformer": {"layers": 2, "model_dim": 16, "heads": 2, "context_length": 8}},
        "task": {"corpus": {"synthetic_bytes": 20000, "eval_blocks": 4}},
        "batch_size": 2,
        "total_steps": 6,
        "eval_every": 3,
        "seed": 5
    });
    merge(&mut base, extra);
    config(base)
}

fn merge(base: &mut Value, extra: Value) {
    match (base, extra) {
        (Value::Object(b), Value::Object(e)) => {
            for (k, v) in e {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
