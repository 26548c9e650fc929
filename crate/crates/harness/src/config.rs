//! Run configuration: a JSON document merged over per-experiment defaults,
//! with dotted `key=value` overrides applied on top.

use std::path::{Path, PathBuf};

use iblm_core::gapt::GaptConfig;
use iblm_core::nets::{MlpConfig, TransformerConfig};
use iblm_core::tasks::{ArithmeticSpec, ConflictTaskSpec, DigitTokenizer};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("override {0:?} is not of the form key=value")]
    BadOverride(String),
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    LmPretrain,
    Conflict,
    Arithmetic,
    GradScan,
}

impl Experiment {
    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::LmPretrain => "lm-pretrain",
            Experiment::Conflict => "conflict",
            Experiment::Arithmetic => "arithmetic",
            Experiment::GradScan => "grad-scan",
        }
    }

    fn uses_transformer(self) -> bool {
        self != Experiment::Conflict
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerMode {
    CeOnly,
    Gapt,
    Lagrangian,
}

impl ControllerMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ControllerMode::CeOnly => "ce-only",
            ControllerMode::Gapt => "gapt",
            ControllerMode::Lagrangian => "lagrangian",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub betas: [f64; 2],
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
            betas: [0.9, 0.999],
            weight_decay: 0.0,
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            ..Self::adam(learning_rate)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStopConfig {
    pub enabled: bool,
    pub threshold_fraction: f64,
    /// Evaluations at or before this step never halt the run. `None` uses
    /// 45% of `total_steps`.
    pub activation_step: Option<u64>,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            threshold_fraction: 0.2,
            activation_step: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    /// Text file to train on; `None` generates a synthetic corpus.
    pub path: Option<PathBuf>,
    pub synthetic_bytes: usize,
    pub synthetic_seed: u64,
    pub split_fraction: f64,
    /// Validation blocks scored at each evaluation.
    pub eval_blocks: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            path: None,
            synthetic_bytes: 1 << 20,
            synthetic_seed: 0,
            split_fraction: 0.1,
            eval_blocks: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConflictStrategy {
    PosOnly,
    NegOnly,
    PosThenNeg,
    NegThenPos,
    Mixed,
    GaptMbe,
}

impl ConflictStrategy {
    pub const ALL: [ConflictStrategy; 6] = [
        ConflictStrategy::PosOnly,
        ConflictStrategy::NegOnly,
        ConflictStrategy::PosThenNeg,
        ConflictStrategy::NegThenPos,
        ConflictStrategy::Mixed,
        ConflictStrategy::GaptMbe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConflictStrategy::PosOnly => "pos-only",
            ConflictStrategy::NegOnly => "neg-only",
            ConflictStrategy::PosThenNeg => "pos-then-neg",
            ConflictStrategy::NegThenPos => "neg-then-pos",
            ConflictStrategy::Mixed => "mixed",
            ConflictStrategy::GaptMbe => "gapt-mbe",
        }
    }
}

/// Rows over which the conflict MLP's hidden entropy is measured during
/// training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntropyScope {
    /// The whole batch as one matrix.
    Batch,
    /// Each task's rows separately, averaged.
    PerTask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConflictConfig {
    pub spec: ConflictTaskSpec,
    /// Teacher shift `Δθ` is the MLP initialization scaled by this factor.
    pub delta_scale: f64,
    /// Held-out samples per task for the final metrics.
    pub test_per_task: usize,
    pub strategy: ConflictStrategy,
    pub entropy_scope: EntropyScope,
}

impl Default for ConflictConfig {
    fn default() -> Self {
        Self {
            spec: ConflictTaskSpec::default(),
            delta_scale: 0.5,
            test_per_task: 256,
            strategy: ConflictStrategy::Mixed,
            entropy_scope: EntropyScope::PerTask,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradScanConfig {
    /// Batches per step on which CE and MBE gradients are taken.
    pub batches: usize,
}

impl Default for GradScanConfig {
    fn default() -> Self {
        Self { batches: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub corpus: CorpusConfig,
    pub conflict: ConflictConfig,
    pub arithmetic: ArithmeticSpec,
    pub grad_scan: GradScanConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub transformer: TransformerConfig,
    pub mlp: MlpConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub optimizer: OptimizerConfig,
    pub controller: ControllerMode,
    pub gapt: GaptConfig,
    pub total_steps: u64,
    pub batch_size: usize,
    pub eval_every: u64,
    pub early_stop: EarlyStopConfig,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Desk-scale defaults for one experiment.
    pub fn defaults_for(experiment: Experiment) -> Self {
        let mut c = Self {
            experiment,
            model: ModelConfig::default(),
            task: TaskConfig::default(),
            optimizer: OptimizerConfig::adam(3e-4),
            controller: ControllerMode::CeOnly,
            gapt: GaptConfig::default(),
            total_steps: 2000,
            batch_size: 32,
            eval_every: 100,
            early_stop: EarlyStopConfig::default(),
            seed: 0,
            output_dir: None,
        };
        match experiment {
            Experiment::LmPretrain | Experiment::GradScan => {}
            Experiment::Conflict => {
                c.optimizer = OptimizerConfig::sgd(0.05);
                c.total_steps = 4000;
                // Minibatch L1 is noisy enough to trip the degradation test
                // within a few steps, so the controller sees smoothed inputs.
                c.gapt.lambda_mbe = 1.0;
                c.gapt.ema = Some(0.98);
            }
            Experiment::Arithmetic => {
                c.batch_size = 16;
                c.early_stop.enabled = true;
                c.model.transformer.vocab_size = DigitTokenizer::VOCAB_SIZE;
                c.model.transformer.context_length = c.task.arithmetic.sequence_length();
            }
        }
        c
    }

    /// Reads `path` (if any), applies `overrides` and fills derived defaults.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut user = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.to_path_buf(),
                    source,
                })?;
                serde_json::from_str(&text)?
            }
            None => Value::Object(Map::new()),
        };
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        Self::from_value(user)
    }

    /// Merges `user` over the defaults of the experiment it names
    /// (`lm-pretrain` when absent).
    pub fn from_value(user: Value) -> Result<Self, ConfigError> {
        if !user.is_object() {
            return Err(ConfigError::Invalid("config must be a JSON object".into()));
        }
        let experiment: Experiment = match user.get("experiment") {
            Some(v) => serde_json::from_value(v.clone())?,
            None => Experiment::LmPretrain,
        };
        let mut merged = serde_json::to_value(Self::defaults_for(experiment))?;
        check_known_keys(&merged, &user, "")?;
        merge(&mut merged, user);
        let mut config: RunConfig = serde_json::from_value(merged)?;
        config.resolve();
        config.validate()?;
        Ok(config)
    }

    fn resolve(&mut self) {
        if self.gapt.regularized_layers.is_empty() {
            let depth = if self.experiment.uses_transformer() {
                self.model.transformer.layers
            } else {
                1
            };
            self.gapt.regularized_layers = interior_layers(depth).into_iter().collect();
        }
        if self.model.transformer.seed == 0 {
            self.model.transformer.seed = self.seed;
        }
        if self.model.mlp.seed == 0 {
            self.model.mlp.seed = self.seed;
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.total_steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("total_steps, batch_size and eval_every must be positive".into());
        }
        if self.early_stop.threshold_fraction.is_nan() || self.early_stop.threshold_fraction <= 0.0 {
            return bad("early_stop.threshold_fraction must be positive".into());
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", o.learning_rate));
        }
        if o.betas.iter().any(|b| !(0.0..1.0).contains(b)) || o.weight_decay < 0.0 {
            return bad("betas must lie in [0, 1) and weight decay must be non-negative".into());
        }
        self.gapt
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.experiment.uses_transformer() {
            let t = &self.model.transformer;
            t.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            if let Some(&l) = self
                .gapt
                .regularized_layers
                .iter()
                .find(|&&l| l == 0 || l > t.layers)
            {
                return bad(format!("regularized layer {l} does not exist"));
            }
        } else {
            self.model
                .mlp
                .validate()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            if self.gapt.regularized_layers.iter().any(|&l| l != 1) {
                return bad("the MLP has a single hidden layer, 1".into());
            }
        }
        match self.experiment {
            Experiment::Arithmetic => {
                let spec = &self.task.arithmetic;
                spec.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
                if self.model.transformer.vocab_size != DigitTokenizer::VOCAB_SIZE {
                    return bad(format!(
                        "arithmetic needs vocab_size {}",
                        DigitTokenizer::VOCAB_SIZE
                    ));
                }
                if self.model.transformer.context_length < spec.sequence_length() {
                    return bad(format!(
                        "arithmetic needs context_length ≥ {}",
                        spec.sequence_length()
                    ));
                }
            }
            Experiment::Conflict => {
                self.task
                    .conflict
                    .spec
                    .validate()
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
                if self.task.conflict.test_per_task == 0 {
                    return bad("conflict.test_per_task must be positive".into());
                }
            }
            Experiment::LmPretrain | Experiment::GradScan => {
                if self.model.transformer.vocab_size != 256 {
                    return bad("byte-level corpora need vocab_size 256".into());
                }
                let f = self.task.corpus.split_fraction;
                if !(f > 0.0 && f < 1.0) || self.task.corpus.eval_blocks == 0 {
                    return bad(
                        "corpus split_fraction must lie in (0, 1) and eval_blocks be positive".into(),
                    );
                }
                if self.experiment == Experiment::GradScan && self.task.grad_scan.batches == 0 {
                    return bad("grad_scan.batches must be positive".into());
                }
            }
        }
        Ok(())
    }

    pub fn early_stop_activation(&self) -> u64 {
        self.early_stop
            .activation_step
            .unwrap_or((self.total_steps as f64 * 0.45).round() as u64)
    }
}

/// Layers `2..depth−1`; a model with one or two layers regularizes all of
/// them.
pub fn interior_layers(depth: usize) -> Vec<usize> {
    if depth <= 2 {
        (1..=depth).collect()
    } else {
        (2..depth).collect()
    }
}

/// Sets `a.b.c=value` on a JSON object. The value is parsed as JSON when
/// possible and kept as a string otherwise.
pub fn apply_override(target: &mut Value, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec
        .split_once('=')
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| ConfigError::BadOverride(spec.to_string()))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = target;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(m) => m,
            _ => return Err(ConfigError::BadOverride(spec.to_string())),
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("split always yields at least one part")
}

fn check_known_keys(defaults: &Value, user: &Value, prefix: &str) -> Result<(), ConfigError> {
    let (Value::Object(d), Value::Object(u)) = (defaults, user) else {
        return Ok(());
    };
    for (k, v) in u {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match d.get(k) {
            None => return Err(ConfigError::UnknownKey(path)),
            Some(dv) => check_known_keys(dv, v, &path)?,
        }
    }
    Ok(())
}

fn merge(base: &mut Value, user: Value) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
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

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_follow_the_experiment() {
        let c = RunConfig::from_value(json!({"experiment": "conflict"})).unwrap();
        assert_eq!(c.optimizer.kind, OptimizerKind::Sgd);
        assert_eq!(c.optimizer.learning_rate, 0.05);
        assert_eq!(
            c.gapt.regularized_layers.iter().copied().collect::<Vec<_>>(),
            vec![1]
        );
        let a = RunConfig::from_value(json!({"experiment": "arithmetic"})).unwrap();
        assert_eq!(a.batch_size, 16);
        assert!(a.early_stop.enabled);
        assert_eq!(a.early_stop_activation(), 900);
        assert_eq!(
            a.gapt.regularized_layers.iter().copied().collect::<Vec<_>>(),
            vec![2, 3]
        );
        let lm = RunConfig::from_value(json!({})).unwrap();
        assert_eq!(lm.experiment, Experiment::LmPretrain);
        assert_eq!(lm.optimizer, OptimizerConfig::adam(3e-4));
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let mut v = json!({"experiment": "conflict"});
        apply_override(&mut v, "optimizer.learning_rate=0.1").unwrap();
        apply_override(&mut v, "controller=gapt").unwrap();
        apply_override(&mut v, "task.conflict.strategy=\"pos-only\"").unwrap();
        apply_override(&mut v, "gapt.regularized_layers=[1]").unwrap();
        let c = RunConfig::from_value(v).unwrap();
        assert_eq!(c.optimizer.learning_rate, 0.1);
        assert_eq!(c.controller, ControllerMode::Gapt);
        assert_eq!(c.task.conflict.strategy, ConflictStrategy::PosOnly);
        assert_eq!(c.optimizer.kind, OptimizerKind::Sgd);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(matches!(
            RunConfig::from_value(json!({"optimiser": {}})),
            Err(ConfigError::UnknownKey(k)) if k == "optimiser"
        ));
        assert!(matches!(
            RunConfig::from_value(json!({"gapt": {"patience": 3}})),
            Err(ConfigError::UnknownKey(k)) if k == "gapt.patience"
        ));
        assert!(matches!(
            RunConfig::from_value(json!({"total_steps": 0})),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            RunConfig::from_value(json!({"early_stop": {"threshold_fraction": 0.0}})),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            apply_override(&mut json!({}), "noequals"),
            Err(ConfigError::BadOverride(_))
        ));
    }

    #[test]
    fn round_trips_through_json() {
        let c = RunConfig::from_value(json!({"experiment": "arithmetic", "seed": 4})).unwrap();
        let again = RunConfig::from_value(serde_json::to_value(&c).unwrap()).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn interior_layers_skip_the_ends() {
        assert_eq!(interior_layers(4), vec![2, 3]);
        assert_eq!(interior_layers(12), (2..=11).collect::<Vec<_>>());
        assert_eq!(interior_layers(1), vec![1]);
    }
}
