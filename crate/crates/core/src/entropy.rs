//! Matrix-based entropy of token representations, Shannon entropy, and the
//! closed-form entropy and generalization-gap bounds.
//!
//! For a representation matrix `R` (tokens × features) with Gram matrix
//! `K = R·Rᵀ`, the order-α matrix-based entropy is
//!
//! ```text
//! S_α(R) = 1/(1−α) · ln Σᵢ (λᵢ(K) / tr K)^α
//! ```
//!
//! with the Shannon limit `−Σ pᵢ ln pᵢ` at α = 1. `R·Rᵀ` and `Rᵀ·R` share
//! their nonzero spectrum, so the smaller of the two is decomposed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{AutogradError, Tape, Var};
use crate::linalg::symmetric_eigen;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EntropyError {
    #[error("invalid entropy configuration: {0}")]
    InvalidConfig(String),
    #[error("degenerate representation: trace {trace:e} is not above epsilon")]
    DegenerateRepresentation { trace: f64 },
    #[error("non-finite input at coordinate {0}")]
    NonFinite(usize),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("argument out of range: {0}")]
    OutOfRange(String),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

/// Order and normalization of the matrix-based entropy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MbeConfig {
    /// Rényi order; `1.0` selects the Shannon limit.
    pub alpha: f64,
    /// Divide by `ln min(s, d)` so the value lies in `[0, 1]`.
    pub normalize: bool,
    /// Spectrum floor, relative to the trace.
    pub epsilon: f64,
}

impl Default for MbeConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            normalize: false,
            epsilon: 1e-12,
        }
    }
}

impl MbeConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::default()
        }
    }

    pub fn normalized(mut self) -> Self {
        self.normalize = true;
        self
    }

    pub fn validate(&self) -> Result<(), EntropyError> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(EntropyError::InvalidConfig(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(EntropyError::InvalidConfig(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    fn is_shannon(&self) -> bool {
        (self.alpha - 1.0).abs() < 1e-12
    }
}

/// Spectrum of a representation's Gram matrix and the entropy derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Descending eigenvalues of the smaller Gram matrix.
    pub eigenvalues: Vec<f64>,
    pub trace: f64,
    /// Floored eigenvalues divided by their sum.
    pub normalized_spectrum: Vec<f64>,
    /// Eigenvalues above `epsilon · trace`.
    pub rank: usize,
    /// Entropy in nats.
    pub mbe: f64,
    /// Entropy divided by `ln min(s, d)` (0 when `min(s, d) = 1`).
    pub mbe_normalized: f64,
}

impl SpectrumReport {
    pub fn mbe_bits(&self) -> f64 {
        self.mbe / std::f64::consts::LN_2
    }
}

fn validate_representation(r: &Tensor) -> Result<(usize, usize, f64), EntropyError> {
    let (s, d) = r.dims2().ok_or_else(|| {
        EntropyError::Autograd(AutogradError::InvalidShape {
            shape: r.shape().to_vec(),
            reason: "representation must be tokens × features",
        })
    })?;
    if let Some(i) = r.first_non_finite() {
        return Err(EntropyError::NonFinite(i));
    }
    Ok((s, d, r.sum_squares()))
}

fn normalizer(s: usize, d: usize) -> f64 {
    let m = s.min(d);
    if m > 1 {
        1.0 / (m as f64).ln()
    } else {
        // A single eigenvalue always has zero entropy.
        0.0
    }
}

/// Differentiable matrix-based entropy of `r` (`s×d`), in nats.
pub fn mbe(tape: &mut Tape, r: Var, config: &MbeConfig) -> Result<Var, EntropyError> {
    config.validate()?;
    let (s, d, trace) = validate_representation(tape.value(r))?;
    if trace <= config.epsilon {
        return Err(EntropyError::DegenerateRepresentation { trace });
    }
    let gram = if s <= d {
        tape.gram(r)?
    } else {
        let rt = tape.transpose(r)?;
        tape.gram(rt)?
    };
    let eig = tape.symmetric_eigenvalues(gram)?;
    let floored = tape.clamp_min(eig, config.epsilon * trace);
    let total = tape.sum(floored);
    let p = tape.div(floored, total)?;
    let entropy = if config.is_shannon() {
        let lp = tape.log(p);
        let plp = tape.mul(p, lp)?;
        let s = tape.sum(plp);
        tape.neg(s)
    } else {
        let pa = tape.powf(p, config.alpha);
        let s = tape.sum(pa);
        let l = tape.log(s);
        tape.scale(l, 1.0 / (1.0 - config.alpha))
    };
    Ok(if config.normalize {
        tape.scale(entropy, normalizer(s, d))
    } else {
        entropy
    })
}

/// Order-2 entropy through `Σλᵢ² = ‖K‖_F²`, skipping the eigen-solver:
/// `S₂ = −ln(‖RᵀR‖_F² / ‖R‖_F⁴)`.
pub fn mbe_alpha2_fast(tape: &mut Tape, r: Var, normalize: bool) -> Result<Var, EntropyError> {
    let (s, d, trace) = validate_representation(tape.value(r))?;
    if trace <= MbeConfig::default().epsilon {
        return Err(EntropyError::DegenerateRepresentation { trace });
    }
    let rt = tape.transpose(r)?;
    let small = if s >= d {
        tape.matmul(rt, r)?
    } else {
        tape.matmul(r, rt)?
    };
    let k_sq = tape.frobenius_sq(small);
    let tr = tape.frobenius_sq(r);
    let log_k = tape.log(k_sq);
    let log_tr = tape.log(tr);
    let log_tr2 = tape.scale(log_tr, 2.0);
    let entropy = tape.sub(log_tr2, log_k)?;
    Ok(if normalize {
        tape.scale(entropy, normalizer(s, d))
    } else {
        entropy
    })
}

/// Matrix-based entropy of a plain tensor.
pub fn mbe_value(r: &Tensor, config: &MbeConfig) -> Result<f64, EntropyError> {
    let mut tape = Tape::new();
    let x = tape.constant(r.clone());
    let v = mbe(&mut tape, x, config)?;
    Ok(tape.scalar_value(v))
}

/// Full spectrum report for a representation matrix.
pub fn spectrum_report(r: &Tensor, config: &MbeConfig) -> Result<SpectrumReport, EntropyError> {
    config.validate()?;
    let (s, d, trace) = validate_representation(r)?;
    if trace <= config.epsilon {
        return Err(EntropyError::DegenerateRepresentation { trace });
    }
    let gram = if s <= d {
        r.matmul(&r.transposed())?
    } else {
        r.transposed().matmul(r)?
    };
    let n = s.min(d);
    let eigenvalues = symmetric_eigen(gram.data(), n)?.values;
    let floor = config.epsilon * trace;
    let floored: Vec<f64> = eigenvalues.iter().map(|&l| l.max(floor)).collect();
    let total: f64 = floored.iter().sum();
    let normalized_spectrum: Vec<f64> = floored.iter().map(|l| l / total).collect();
    let rank = eigenvalues.iter().filter(|&&l| l > floor).count();
    let mbe = renyi_of_distribution(&normalized_spectrum, config.alpha);
    Ok(SpectrumReport {
        eigenvalues,
        trace,
        normalized_spectrum,
        rank,
        mbe,
        mbe_normalized: mbe * normalizer(s, d),
    })
}

/// Rényi entropy (nats) of a strictly positive probability vector.
fn renyi_of_distribution(p: &[f64], alpha: f64) -> f64 {
    if (alpha - 1.0).abs() < 1e-12 {
        -p.iter().map(|&x| x * x.ln()).sum::<f64>()
    } else {
        p.iter().map(|&x| x.powf(alpha)).sum::<f64>().ln() / (1.0 - alpha)
    }
}

fn validate_distribution(p: &[f64]) -> Result<(), EntropyError> {
    if p.is_empty() {
        return Err(EntropyError::InvalidDistribution("empty".into()));
    }
    if let Some(i) = p.iter().position(|&x| !x.is_finite() || x < 0.0) {
        return Err(EntropyError::InvalidDistribution(format!(
            "entry {i} is {} (must be finite and non-negative)",
            p[i]
        )));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-8 {
        return Err(EntropyError::InvalidDistribution(format!(
            "entries sum to {total}, not 1"
        )));
    }
    Ok(())
}

/// Shannon entropy in bits, with `0·log 0 = 0`.
pub fn shannon_entropy(p: &[f64]) -> Result<f64, EntropyError> {
    validate_distribution(p)?;
    Ok(-p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.log2()).sum::<f64>())
}

/// Lower bounds on the entropy of any distribution over `n` outcomes whose
/// probabilities are all at least `alpha_min`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinProbBound {
    /// Entropy of the most imbalanced admissible distribution (bits).
    pub exact: f64,
    /// `β·log₂ n` with `β = alpha_min·n`.
    pub approx: f64,
}

pub fn min_prob_entropy_bound(n: u64, alpha_min: f64) -> Result<MinProbBound, EntropyError> {
    if n < 2 {
        return Err(EntropyError::OutOfRange(format!("n must be at least 2, got {n}")));
    }
    let nf = n as f64;
    if !(alpha_min > 0.0 && alpha_min <= (1.0 / nf) * (1.0 + 1e-12)) {
        return Err(EntropyError::OutOfRange(format!(
            "minimum probability must lie in (0, 1/{n}], got {alpha_min}"
        )));
    }
    let head = 1.0 - alpha_min * (nf - 1.0);
    let head_term = if head > 0.0 { -head * head.log2() } else { 0.0 };
    let exact = head_term - (nf - 1.0) * alpha_min * alpha_min.log2();
    Ok(MinProbBound {
        exact,
        approx: alpha_min * nf * nf.log2(),
    })
}

/// The β for which `H(p) = β · log₂ n`, clamped to `(0, 1]`.
pub fn beta_for_distribution(p: &[f64]) -> Result<f64, EntropyError> {
    validate_distribution(p)?;
    if let Some(i) = p.iter().position(|&x| x == 0.0) {
        return Err(EntropyError::InvalidDistribution(format!(
            "entry {i} is zero; every outcome needs positive probability"
        )));
    }
    if p.len() == 1 {
        return Ok(1.0);
    }
    let h = shannon_entropy(p)?;
    let beta = h / (p.len() as f64).log2();
    Ok(beta.clamp(f64::MIN_POSITIVE, 1.0))
}

/// Inputs of the entropy-based generalization-gap expression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Training-set size `N`.
    pub samples: u64,
    /// Per-layer representation entropies, in bits.
    pub layer_entropies: Vec<f64>,
    /// Exponent on the entropy, at least 1.
    pub alpha: f64,
}

/// `log₂N · 2^(α·min_l H(R_l)) / √N`.
///
/// The big-O constant of the underlying bound is taken as 1, so the value is
/// an order-of-magnitude diagnostic; only ratios and trends are meaningful.
pub fn generalization_gap_bound(inputs: &BoundInputs) -> Result<f64, EntropyError> {
    if inputs.samples < 2 {
        return Err(EntropyError::OutOfRange(format!(
            "sample count must be at least 2, got {}",
            inputs.samples
        )));
    }
    if inputs.layer_entropies.is_empty() {
        return Err(EntropyError::OutOfRange("no layer entropies".into()));
    }
    if let Some(h) = inputs
        .layer_entropies
        .iter()
        .find(|h| !h.is_finite() || **h < 0.0)
    {
        return Err(EntropyError::OutOfRange(format!(
            "layer entropy {h} is not a finite non-negative value"
        )));
    }
    if !(inputs.alpha >= 1.0 && inputs.alpha.is_finite()) {
        return Err(EntropyError::OutOfRange(format!(
            "alpha must be at least 1, got {}",
            inputs.alpha
        )));
    }
    let n = inputs.samples as f64;
    let h_min = inputs
        .layer_entropies
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    Ok(n.log2() * (inputs.alpha * h_min).exp2() / n.sqrt())
}
