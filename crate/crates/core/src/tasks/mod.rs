//! Synthetic datasets and task metrics: the conflicting-teacher Gaussian
//! regression task, per-digit multiplication equations, byte-level text
//! corpora and the representation separation report.

pub mod arithmetic;
pub mod conflict;
pub mod corpus;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entropy::{mbe_value, EntropyError, MbeConfig};
use crate::nets::NetError;
use crate::tensor::Tensor;

pub use arithmetic::{
    gen_multiplication_data, ArithmeticSpec, ArithmeticSplits, DigitTokenizer, Equation, SeqBatch,
};
pub use conflict::{gen_conflict_data, ConflictData, ConflictTaskSpec, MEAN_1, MEAN_2};
pub use corpus::{char_corpus, synthetic_corpus, CharCorpus};

/// Added to the mean spread so coincident points give a finite ratio.
pub const SPREAD_EPSILON: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid task settings: {0}")]
    InvalidSpec(String),
    #[error("{split}: {requested} distinct pairs requested but only {available} exist")]
    RangeExhausted {
        split: &'static str,
        requested: usize,
        available: u64,
    },
    #[error("character {ch:?} at position {position} is not in the vocabulary")]
    UnknownChar { ch: char, position: usize },
    #[error("token id {id} at position {position} is not in the vocabulary")]
    UnknownToken { id: usize, position: usize },
    #[error("corpus has {len} bytes, fewer than one context of {context}")]
    CorpusTooShort { len: usize, context: usize },
    #[error("representation widths differ: {0} vs {1}")]
    WidthMismatch(usize, usize),
    #[error("representation set {0} is not a samples × features matrix")]
    NotAMatrix(usize),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    /// Euclidean distance between the two task centroids.
    pub distance: f64,
    /// `distance / (mean within-task spread + SPREAD_EPSILON)`.
    pub separation_ratio: f64,
    /// Mean distance of each task's rows to their own centroid.
    pub spreads: [f64; 2],
    pub per_task_mbe: [f64; 2],
}

fn centroid(r: &Tensor) -> Vec<f64> {
    let (n, d) = r.dims2().expect("validated 2-D");
    let mut c = vec![0.0; d];
    for i in 0..n {
        for (acc, v) in c.iter_mut().zip(r.row(i)) {
            *acc += v;
        }
    }
    c.iter_mut().for_each(|v| *v /= n as f64);
    c
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn spread(r: &Tensor, c: &[f64]) -> f64 {
    let n = r.shape()[0];
    (0..n).map(|i| distance(r.row(i), c)).sum::<f64>() / n as f64
}

/// Centroid distance, separation ratio and per-task entropy of two sets of
/// hidden representations (rows are samples).
pub fn separation_metrics(
    task1: &Tensor,
    task2: &Tensor,
    mbe: &MbeConfig,
) -> Result<SeparationReport, TaskError> {
    let mut widths = [0; 2];
    for (i, r) in [task1, task2].into_iter().enumerate() {
        match r.dims2() {
            Some((n, d)) if n > 0 && d > 0 => widths[i] = d,
            _ => return Err(TaskError::NotAMatrix(i + 1)),
        }
    }
    if widths[0] != widths[1] {
        return Err(TaskError::WidthMismatch(widths[0], widths[1]));
    }
    let (c1, c2) = (centroid(task1), centroid(task2));
    let dist = distance(&c1, &c2);
    let spreads = [spread(task1, &c1), spread(task2, &c2)];
    let mean_spread = 0.5 * (spreads[0] + spreads[1]);
    Ok(SeparationReport {
        distance: dist,
        separation_ratio: dist / (mean_spread + SPREAD_EPSILON),
        spreads,
        per_task_mbe: [mbe_value(task1, mbe)?, mbe_value(task2, mbe)?],
    })
}
