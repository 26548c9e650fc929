//! Per-step run records, the run summary and their on-disk forms: one
//! `steps.csv` row per step and one `summary.json` per run.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use iblm_core::diagnostics::GroupId;
use iblm_core::gapt::{Phase, TransitionReason};
use iblm_core::tasks::SeparationReport;
use serde::{Deserialize, Serialize};

use crate::config::{ConflictStrategy, ControllerMode, Experiment};
use crate::RunError;

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub phase: Phase,
    /// Task loss: cross-entropy, or L1 for the conflict task.
    pub train_ce: f64,
    /// Composite objective actually differentiated.
    pub loss: f64,
    pub val_ce: Option<f64>,
    /// Normalized order-2 entropy of every layer on this step's batch.
    pub mbe: BTreeMap<usize, f64>,
    pub stall_mem: u32,
    pub stall_comp: u32,
    pub transition: Option<TransitionReason>,
    /// CE↔MBE gradient alignment per group; filled by gradient scans only.
    pub alignment: BTreeMap<GroupId, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    EarlyStopped,
    Aborted,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Completed => "completed",
            RunStatus::EarlyStopped => "early-stopped",
            RunStatus::Aborted => "aborted",
        }
    }
}

/// Where and why a run stopped on a non-finite value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortRecord {
    pub step: u64,
    pub phase: Phase,
    pub quantity: String,
    /// Rendered with `Display` since JSON has no NaN or infinity.
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub experiment: Experiment,
    pub controller: ControllerMode,
    pub strategy: Option<ConflictStrategy>,
    pub seed: u64,
    pub status: RunStatus,
    pub steps_run: u64,
    pub final_val_ce: Option<f64>,
    pub best_val_ce: Option<f64>,
    /// Per-layer normalized order-2 entropy on the fixed probe batch after
    /// the last step.
    pub final_mbe: BTreeMap<usize, f64>,
    /// Task-specific scalars such as held-out losses.
    pub metrics: BTreeMap<String, f64>,
    pub separation: Option<SeparationReport>,
    pub transitions: usize,
    pub early_stop_step: Option<u64>,
    pub abort: Option<AbortRecord>,
    pub notes: Vec<String>,
}

impl RunSummary {
    /// Mean of `final_mbe` over `layers` (every logged layer when empty).
    pub fn mean_mbe(&self, layers: &[usize]) -> f64 {
        let vals: Vec<f64> = if layers.is_empty() {
            self.final_mbe.values().copied().collect()
        } else {
            layers
                .iter()
                .filter_map(|l| self.final_mbe.get(l))
                .copied()
                .collect()
        };
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }

    pub fn read(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub records: Vec<StepRecord>,
    pub summary: RunSummary,
}

impl RunLog {
    pub fn phases(&self) -> Vec<Phase> {
        self.records.iter().map(|r| r.phase).collect()
    }
}

/// Column names of `steps.csv` for a model with `layers` layers and the
/// given alignment groups.
pub fn csv_header(layers: usize, groups: &[GroupId]) -> Vec<String> {
    let mut h: Vec<String> = [
        "step",
        "phase",
        "train_ce",
        "loss",
        "val_ce",
        "stall_mem",
        "stall_comp",
        "transition",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((1..=layers).map(|l| format!("mbe_{l}")));
    h.extend(groups.iter().map(|g| format!("align_{g}")));
    h
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Streams step records to `steps.csv`, flushing after every row so an
/// interrupted run leaves only whole records behind.
pub struct LogWriter {
    dir: PathBuf,
    layers: usize,
    groups: Vec<GroupId>,
    steps: csv::Writer<BufWriter<File>>,
}

impl LogWriter {
    pub fn create(dir: &Path, layers: usize, groups: &[GroupId]) -> Result<Self, RunError> {
        std::fs::create_dir_all(dir)?;
        let mut steps = csv::Writer::from_writer(BufWriter::new(File::create(dir.join("steps.csv"))?));
        steps.write_record(csv_header(layers, groups))?;
        steps.flush()?;
        Ok(Self {
            dir: dir.to_path_buf(),
            layers,
            groups: groups.to_vec(),
            steps,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write_step(&mut self, r: &StepRecord) -> Result<(), RunError> {
        let mut row = vec![
            r.step.to_string(),
            r.phase.as_str().to_string(),
            r.train_ce.to_string(),
            r.loss.to_string(),
            opt(r.val_ce),
            r.stall_mem.to_string(),
            r.stall_comp.to_string(),
            r.transition.map(|t| t.as_str().to_string()).unwrap_or_default(),
        ];
        row.extend((1..=self.layers).map(|l| opt(r.mbe.get(&l).copied())));
        row.extend(self.groups.iter().map(|g| opt(r.alignment.get(g).copied())));
        self.steps.write_record(&row)?;
        self.steps.flush()?;
        Ok(())
    }

    pub fn write_summary(&self, s: &RunSummary) -> Result<(), RunError> {
        std::fs::write(self.dir.join("summary.json"), serde_json::to_string_pretty(s)?)?;
        Ok(())
    }
}

/// Halts once validation loss exceeds the best value seen so far by more
/// than `threshold` (relative), counting only evaluations after
/// `activation_step`.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    threshold: f64,
    activation_step: u64,
    best: f64,
}

impl EarlyStopper {
    pub fn new(threshold: f64, activation_step: u64) -> Self {
        Self {
            threshold,
            activation_step,
            best: f64::INFINITY,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best.is_finite().then_some(self.best)
    }

    /// Records one evaluation; `true` means stop now.
    pub fn observe(&mut self, step: u64, val: f64) -> bool {
        let halt = step > self.activation_step && val > self.best * (1.0 + self.threshold);
        self.best = self.best.min(val);
        halt
    }
}
