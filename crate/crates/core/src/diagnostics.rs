//! Gradient-alignment measurements: cosine similarity between gradient
//! snapshots, cross-batch consistency, CE↔MBE alignment and the oscillation
//! statistics of an alignment series.

use std::fmt;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Norm below which a gradient is treated as zero.
pub const DEGENERATE_NORM: f64 = 1e-15;

/// Shortest series [`oscillation_stats`] accepts.
pub const MIN_SERIES_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiagnosticsError {
    #[error("vector length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("parameter group mismatch: {0} vs {1}")]
    GroupMismatch(GroupId, GroupId),
    #[error("need at least {needed} snapshots, got {got}")]
    TooFewSnapshots { needed: usize, got: usize },
    #[error("series has {0} samples; at least {MIN_SERIES_LEN} are needed")]
    SeriesTooShort(usize),
    #[error("series steps must strictly increase: {prev} then {next}")]
    NonIncreasingStep { prev: u64, next: u64 },
    #[error("similarity {0} is outside [-1, 1]")]
    OutOfRange(f64),
    #[error("unknown parameter group {0:?}")]
    UnknownGroup(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Attention,
    Mlp,
    Embedding,
    Other,
}

impl ParamKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::Attention => "attention",
            ParamKind::Mlp => "mlp",
            ParamKind::Embedding => "embedding",
            ParamKind::Other => "other",
        }
    }
}

/// A parameter group: a layer index and the kind of parameters in it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupId {
    pub layer: usize,
    pub kind: ParamKind,
}

impl GroupId {
    pub fn new(layer: usize, kind: ParamKind) -> Self {
        Self { layer, kind }
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.{}", self.layer, self.kind.as_str())
    }
}

impl std::str::FromStr for GroupId {
    type Err = DiagnosticsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DiagnosticsError::UnknownGroup(s.to_string());
        let (layer, kind) = s
            .strip_prefix('L')
            .and_then(|r| r.split_once('.'))
            .ok_or_else(bad)?;
        let layer = layer.parse().map_err(|_| bad())?;
        let kind = match kind {
            "attention" => ParamKind::Attention,
            "mlp" => ParamKind::Mlp,
            "embedding" => ParamKind::Embedding,
            "other" => ParamKind::Other,
            _ => return Err(bad()),
        };
        Ok(GroupId { layer, kind })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GradSource {
    #[serde(rename = "ce")]
    CrossEntropy,
    #[serde(rename = "mbe")]
    Mbe,
}

/// Flattened gradient of one parameter group from one loss on one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSnapshot {
    pub step: u64,
    pub group: GroupId,
    pub source: GradSource,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// Set when either vector has (near) zero norm; `value` is then 0.
    pub degenerate: bool,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<Cosine, DiagnosticsError> {
    if a.len() != b.len() {
        return Err(DiagnosticsError::LengthMismatch(a.len(), b.len()));
    }
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let (na, nb) = (aa.sqrt(), bb.sqrt());
    if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
        return Ok(Cosine {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Cosine {
        value: (ab / (aa * bb).sqrt()).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

fn check_pair(a: &GradientSnapshot, b: &GradientSnapshot) -> Result<(), DiagnosticsError> {
    if a.group != b.group {
        return Err(DiagnosticsError::GroupMismatch(a.group, b.group));
    }
    Ok(())
}

/// Mean cosine similarity over every unordered pair of CE gradients taken on
/// different batches at the same step.
pub fn cross_batch_consistency(snapshots: &[GradientSnapshot]) -> Result<f64, DiagnosticsError> {
    if snapshots.len() < 2 {
        return Err(DiagnosticsError::TooFewSnapshots {
            needed: 2,
            got: snapshots.len(),
        });
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (i, a) in snapshots.iter().enumerate() {
        for b in &snapshots[i + 1..] {
            check_pair(a, b)?;
            total += cosine_similarity(&a.vector, &b.vector)?.value;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Mean cosine similarity over all ordered (CE batch, MBE batch) pairs.
pub fn ce_mbe_alignment(ce: &[GradientSnapshot], mbe: &[GradientSnapshot]) -> Result<f64, DiagnosticsError> {
    if ce.is_empty() || mbe.is_empty() {
        return Err(DiagnosticsError::TooFewSnapshots {
            needed: 1,
            got: ce.len().min(mbe.len()),
        });
    }
    let mut total = 0.0;
    for a in ce {
        for b in mbe {
            check_pair(a, b)?;
            total += cosine_similarity(&a.vector, &b.vector)?.value;
        }
    }
    Ok(total / (ce.len() * mbe.len()) as f64)
}

/// Per-step similarity values for one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSeries {
    pub group: GroupId,
    pub steps: Vec<u64>,
    pub values: Vec<f64>,
}

impl AlignmentSeries {
    pub fn new(group: GroupId) -> Self {
        Self {
            group,
            steps: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, step: u64, value: f64) -> Result<(), DiagnosticsError> {
        if let Some(&prev) = self.steps.last() {
            if step <= prev {
                return Err(DiagnosticsError::NonIncreasingStep { prev, next: step });
            }
        }
        if value.is_nan() || value.abs() > 1.0 + 1e-9 {
            return Err(DiagnosticsError::OutOfRange(value));
        }
        self.steps.push(step);
        self.values.push(value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn has_both_signs(&self) -> bool {
        self.values.iter().any(|&v| v > 0.0) && self.values.iter().any(|&v| v < 0.0)
    }

    pub fn stats(&self) -> Result<OscillationStats, DiagnosticsError> {
        oscillation_stats(&self.values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OscillationStats {
    /// Population standard deviation.
    pub std: f64,
    /// Sign changes between consecutive samples over `len − 1`; computed on
    /// the raw series, zeros carrying the previous sign.
    pub zero_crossing_rate: f64,
    /// Largest over mean power of the one-sided periodogram of the
    /// mean-removed series, bins `1..=len/2`. A flat series reports 1.
    pub psd_peak_to_mean: f64,
    /// Bin index of the periodogram peak (0 for a flat series).
    pub psd_peak_bin: usize,
}

pub fn oscillation_stats(values: &[f64]) -> Result<OscillationStats, DiagnosticsError> {
    let n = values.len();
    if n < MIN_SERIES_LEN {
        return Err(DiagnosticsError::SeriesTooShort(n));
    }
    let flat = values.iter().all(|&v| v == values[0]);
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if flat {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
    };

    let mut crossings = 0usize;
    let mut sign = 0i8;
    for &v in values {
        let s = if v > 0.0 {
            1
        } else if v < 0.0 {
            -1
        } else {
            sign
        };
        if s != 0 && sign != 0 && s != sign {
            crossings += 1;
        }
        if s != 0 {
            sign = s;
        }
    }
    let zero_crossing_rate = crossings as f64 / (n - 1) as f64;

    if flat {
        return Ok(OscillationStats {
            std,
            zero_crossing_rate,
            psd_peak_to_mean: 1.0,
            psd_peak_bin: 0,
        });
    }
    let power = periodogram(values, mean);
    let (psd_peak_bin, peak) =
        power.iter().enumerate().fold(
            (0, 0.0f64),
            |(bi, bp), (i, &p)| if p > bp { (i + 1, p) } else { (bi, bp) },
        );
    let mean_power = power.iter().sum::<f64>() / power.len() as f64;
    let psd_peak_to_mean = if mean_power > 0.0 { peak / mean_power } else { 1.0 };

    Ok(OscillationStats {
        std,
        zero_crossing_rate,
        psd_peak_to_mean,
        psd_peak_bin,
    })
}

/// `|X_k|²` for `k = 1..=n/2` of the series with `mean` subtracted.
fn periodogram(values: &[f64], mean: f64) -> Vec<f64> {
    let n = values.len();
    let mut buf: Vec<Complex<f64>> = values.iter().map(|&v| Complex::new(v - mean, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf[1..=n / 2].iter().map(|c| c.norm_sqr()).collect()
}
