//! Gated phase controller alternating a memorization phase (cross-entropy
//! only) with a compression phase (cross-entropy plus weighted per-layer MBE).
//!
//! [`gapt_step`] is a pure transition function. Each step:
//!
//! 1. `ΔE = E_min − L_ce`, then `E_min = min(E_min, L_ce)`.
//! 2. Memorization: `s_m` resets on `ΔE > δ`, otherwise increments; at
//!    `s_m ≥ p_m` switch to compression and reset `s_c`, `E_min` and every
//!    `MBE_min[i]` to +∞.
//! 3. Compression: if `L_ce > E_min·(1+τ)` revert to memorization at once.
//!    Otherwise `ΔM = maxᵢ(MBE_min[i] − MBEᵢ)`, update the minima, reset
//!    `s_c` on `ΔM > δ` or increment it, and revert once `s_c ≥ p_c`.
//!
//! Counters belonging to the phase being left are zeroed on every
//! transition, so emitted states always satisfy `s_m < p_m` and `s_c < p_c`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{AutogradError, Tape, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GaptError {
    #[error("invalid controller configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite {what} at step {step}: {value}")]
    NonFinite { what: String, step: u64, value: f64 },
    #[error("no MBE value supplied for regularized layer {0}")]
    MissingLayer(usize),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "mem")]
    Memorization,
    #[serde(rename = "comp")]
    Compression,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Memorization => "mem",
            Phase::Compression => "comp",
        }
    }

    /// 1 for memorization, 2 for compression.
    pub fn code(self) -> u8 {
        match self {
            Phase::Memorization => 1,
            Phase::Compression => 2,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransitionReason {
    MemPatience,
    CompPatience,
    CeDegraded,
}

impl TransitionReason {
    pub fn as_str(self) -> &'static str {
        match self {
            TransitionReason::MemPatience => "mem-patience",
            TransitionReason::CompPatience => "comp-patience",
            TransitionReason::CeDegraded => "ce-degraded",
        }
    }
}

impl fmt::Display for TransitionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub from: Phase,
    pub to: Phase,
    pub reason: TransitionReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaptConfig {
    /// Improvement threshold shared by the CE and MBE tests.
    pub delta: f64,
    /// Relative CE degradation that aborts compression.
    pub tau: f64,
    pub patience_mem: u32,
    pub patience_comp: u32,
    /// MBE weight on regularized layers during compression.
    pub lambda_mbe: f64,
    pub regularized_layers: BTreeSet<usize>,
    /// Optional EMA factor in `(0, 1)` applied to the controller inputs by
    /// [`GaptController`]; `None` feeds raw batch losses.
    pub ema: Option<f64>,
}

impl Default for GaptConfig {
    fn default() -> Self {
        Self {
            delta: 1e-3,
            tau: 0.02,
            patience_mem: 50,
            patience_comp: 25,
            lambda_mbe: 0.05,
            regularized_layers: BTreeSet::new(),
            ema: None,
        }
    }
}

impl GaptConfig {
    pub fn with_layers(layers: impl IntoIterator<Item = usize>) -> Self {
        Self {
            regularized_layers: layers.into_iter().collect(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GaptError> {
        let bad = |msg: String| Err(GaptError::InvalidConfig(msg));
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad(format!("delta must be positive, got {}", self.delta));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.patience_mem == 0 || self.patience_comp == 0 {
            return bad("patience values must be at least 1".into());
        }
        if !(self.lambda_mbe >= 0.0 && self.lambda_mbe.is_finite()) {
            return bad(format!(
                "lambda_mbe must be non-negative, got {}",
                self.lambda_mbe
            ));
        }
        if self.regularized_layers.is_empty() {
            return bad("regularized_layers must not be empty".into());
        }
        if let Some(a) = self.ema {
            if !(a > 0.0 && a < 1.0) {
                return bad(format!("ema factor must lie in (0, 1), got {a}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaptState {
    pub phase: Phase,
    pub stall_mem: u32,
    pub stall_comp: u32,
    #[serde(with = "inf_float")]
    pub ce_min: f64,
    #[serde(with = "inf_float_map")]
    pub mbe_min: BTreeMap<usize, f64>,
    pub step: u64,
}

impl GaptState {
    /// Memorization with every tracked minimum at +∞.
    pub fn new(config: &GaptConfig) -> Self {
        Self {
            phase: Phase::Memorization,
            stall_mem: 0,
            stall_comp: 0,
            ce_min: f64::INFINITY,
            mbe_min: config
                .regularized_layers
                .iter()
                .map(|&l| (l, f64::INFINITY))
                .collect(),
            step: 0,
        }
    }
}

/// How to weight the loss terms on the current step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseDirective {
    pub phase: Phase,
    pub ce_weight: f64,
    pub mbe_weights: BTreeMap<usize, f64>,
    pub transition: Option<Transition>,
}

impl PhaseDirective {
    fn for_phase(phase: Phase, config: &GaptConfig, transition: Option<Transition>) -> Self {
        let w = match phase {
            Phase::Memorization => 0.0,
            Phase::Compression => config.lambda_mbe,
        };
        Self {
            phase,
            ce_weight: 1.0,
            mbe_weights: config.regularized_layers.iter().map(|&l| (l, w)).collect(),
            transition,
        }
    }

    /// MBE weight for a layer; layers outside the map weigh 0.
    pub fn weight(&self, layer: usize) -> f64 {
        self.mbe_weights.get(&layer).copied().unwrap_or(0.0)
    }

    pub fn has_mbe_term(&self) -> bool {
        self.mbe_weights.values().any(|&w| w != 0.0)
    }
}

/// Plain cross-entropy training: memorization forever.
pub fn ce_only_directive(config: &GaptConfig) -> PhaseDirective {
    PhaseDirective::for_phase(Phase::Memorization, config, None)
}

/// Fixed-weight `CE + λ·MBE` objective with no gating. With `λ = 0` this is
/// exactly [`ce_only_directive`].
pub fn lagrangian_directive(config: &GaptConfig) -> PhaseDirective {
    let phase = if config.lambda_mbe > 0.0 {
        Phase::Compression
    } else {
        Phase::Memorization
    };
    PhaseDirective::for_phase(phase, config, None)
}

/// One controller update. Returns the next state and the directive for the
/// phase after the update.
pub fn gapt_step(
    state: &GaptState,
    ce_loss: f64,
    mbe: &BTreeMap<usize, f64>,
    config: &GaptConfig,
) -> Result<(GaptState, PhaseDirective), GaptError> {
    let step = state.step + 1;
    if !ce_loss.is_finite() {
        return Err(GaptError::NonFinite {
            what: "cross-entropy".into(),
            step,
            value: ce_loss,
        });
    }
    let mut current = Vec::with_capacity(config.regularized_layers.len());
    for &layer in &config.regularized_layers {
        let v = *mbe.get(&layer).ok_or(GaptError::MissingLayer(layer))?;
        if !v.is_finite() {
            return Err(GaptError::NonFinite {
                what: format!("MBE of layer {layer}"),
                step,
                value: v,
            });
        }
        current.push((layer, v));
    }

    let mut next = state.clone();
    next.step = step;
    let delta_e = next.ce_min - ce_loss;
    next.ce_min = next.ce_min.min(ce_loss);
    let mut transition = None;

    match state.phase {
        Phase::Memorization => {
            next.stall_mem = if delta_e > config.delta {
                0
            } else {
                next.stall_mem + 1
            };
            if next.stall_mem >= config.patience_mem {
                next.phase = Phase::Compression;
                next.stall_comp = 0;
                next.stall_mem = 0;
                next.ce_min = f64::INFINITY;
                next.mbe_min.values_mut().for_each(|m| *m = f64::INFINITY);
                transition = Some(TransitionReason::MemPatience);
            }
        }
        Phase::Compression => {
            if ce_loss > next.ce_min * (1.0 + config.tau) {
                transition = Some(TransitionReason::CeDegraded);
            } else {
                let mut delta_m = f64::NEG_INFINITY;
                for &(layer, v) in &current {
                    let min = next.mbe_min.entry(layer).or_insert(f64::INFINITY);
                    delta_m = delta_m.max(*min - v);
                    *min = min.min(v);
                }
                next.stall_comp = if delta_m > config.delta {
                    0
                } else {
                    next.stall_comp + 1
                };
                if next.stall_comp >= config.patience_comp {
                    transition = Some(TransitionReason::CompPatience);
                }
            }
            if transition.is_some() {
                next.phase = Phase::Memorization;
                next.stall_mem = 0;
                next.stall_comp = 0;
            }
        }
    }

    let transition = transition.map(|reason| Transition {
        from: state.phase,
        to: next.phase,
        reason,
    });
    let directive = PhaseDirective::for_phase(next.phase, config, transition);
    Ok((next, directive))
}

/// Owns a [`GaptState`] and optionally smooths its inputs with an EMA.
#[derive(Debug, Clone)]
pub struct GaptController {
    config: GaptConfig,
    state: GaptState,
    smoothed_ce: Option<f64>,
    smoothed_mbe: BTreeMap<usize, f64>,
}

impl GaptController {
    pub fn new(config: GaptConfig) -> Result<Self, GaptError> {
        config.validate()?;
        let state = GaptState::new(&config);
        Ok(Self {
            config,
            state,
            smoothed_ce: None,
            smoothed_mbe: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &GaptConfig {
        &self.config
    }

    pub fn state(&self) -> &GaptState {
        &self.state
    }

    pub fn phase(&self) -> Phase {
        self.state.phase
    }

    /// Directive for the next step without consuming any measurement.
    pub fn current_directive(&self) -> PhaseDirective {
        PhaseDirective::for_phase(self.state.phase, &self.config, None)
    }

    pub fn observe(&mut self, ce_loss: f64, mbe: &BTreeMap<usize, f64>) -> Result<PhaseDirective, GaptError> {
        let (ce, mbe) = match self.config.ema {
            None => (ce_loss, mbe.clone()),
            Some(a) => {
                let ce = match self.smoothed_ce {
                    Some(prev) => a * prev + (1.0 - a) * ce_loss,
                    None => ce_loss,
                };
                let mut out = BTreeMap::new();
                for (&l, &v) in mbe {
                    let s = match self.smoothed_mbe.get(&l) {
                        Some(&prev) => a * prev + (1.0 - a) * v,
                        None => v,
                    };
                    out.insert(l, s);
                }
                (ce, out)
            }
        };
        let (next, directive) = gapt_step(&self.state, ce, &mbe, &self.config)?;
        self.state = next;
        if self.config.ema.is_some() {
            self.smoothed_ce = Some(ce);
            self.smoothed_mbe = mbe;
        }
        Ok(directive)
    }
}

/// `ce_weight·ce + Σᵢ wᵢ·mbeᵢ`. Layers with zero weight may be absent from
/// `mbe`; a nonzero weight without a matching term is an error.
pub fn composite_loss(
    tape: &mut Tape,
    ce: Var,
    mbe: &BTreeMap<usize, Var>,
    directive: &PhaseDirective,
) -> Result<Var, GaptError> {
    let mut total = if directive.ce_weight == 1.0 {
        ce
    } else {
        tape.scale(ce, directive.ce_weight)
    };
    for (&layer, &w) in &directive.mbe_weights {
        if w == 0.0 {
            continue;
        }
        let term = *mbe.get(&layer).ok_or(GaptError::MissingLayer(layer))?;
        let weighted = tape.scale(term, w);
        total = tape.add(total, weighted)?;
    }
    Ok(total)
}

mod inf_float {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    pub(super) enum Repr {
        Num(f64),
        Text(String),
    }

    pub(super) fn encode(v: f64) -> Repr {
        if v == f64::INFINITY {
            Repr::Text("inf".into())
        } else {
            Repr::Num(v)
        }
    }

    pub(super) fn decode<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(E::custom(format!("expected a number or \"inf\", got {t:?}"))),
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        encode(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        decode(Repr::deserialize(d)?)
    }
}

mod inf_float_map {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::inf_float::{decode, encode, Repr};

    pub fn serialize<S: Serializer>(m: &BTreeMap<usize, f64>, s: S) -> Result<S::Ok, S::Error> {
        m.iter()
            .map(|(&k, &v)| (k, encode(v)))
            .collect::<BTreeMap<_, _>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<usize, f64>, D::Error> {
        BTreeMap::<usize, Repr>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| decode(v).map(|v| (k, v)))
            .collect()
    }
}
