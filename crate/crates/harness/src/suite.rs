//! The six-strategy conflicting-teacher comparison, every strategy trained
//! from the same initialization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ConflictStrategy, ControllerMode, Experiment, RunConfig};
use crate::log::{RunStatus, RunSummary};
use crate::train::train;
use crate::RunError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub strategy: ConflictStrategy,
    pub status: RunStatus,
    pub l1_pos: f64,
    pub l1_neg: f64,
    pub mbe_pos: f64,
    pub mbe_neg: f64,
    pub distance: f64,
    pub separation_ratio: f64,
}

impl SuiteRow {
    fn from_summary(strategy: ConflictStrategy, s: &RunSummary) -> Result<Self, RunError> {
        let m = |k: &str| {
            s.metrics
                .get(k)
                .copied()
                .ok_or_else(|| RunError::Invalid(format!("{} run did not report {k}", strategy.as_str())))
        };
        Ok(Self {
            strategy,
            status: s.status,
            l1_pos: m("l1_pos")?,
            l1_neg: m("l1_neg")?,
            mbe_pos: m("mbe_pos")?,
            mbe_neg: m("mbe_neg")?,
            distance: m("distance")?,
            separation_ratio: m("separation_ratio")?,
        })
    }

    pub fn mean_mbe(&self) -> f64 {
        0.5 * (self.mbe_pos + self.mbe_neg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteTable {
    pub seed: u64,
    pub rows: Vec<SuiteRow>,
}

impl SuiteTable {
    pub fn row(&self, strategy: ConflictStrategy) -> &SuiteRow {
        self.rows
            .iter()
            .find(|r| r.strategy == strategy)
            .expect("every strategy has a row")
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), RunError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "strategy",
            "l1_pos",
            "l1_neg",
            "mbe_pos",
            "mbe_neg",
            "distance",
            "separation_ratio",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.strategy.as_str().to_string(),
                r.l1_pos.to_string(),
                r.l1_neg.to_string(),
                r.mbe_pos.to_string(),
                r.mbe_neg.to_string(),
                r.distance.to_string(),
                r.separation_ratio.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<13} {:>8} {:>8} {:>8} {:>8} {:>9} {:>10}\n",
            "strategy", "L1(pos)", "L1(neg)", "MBE(pos)", "MBE(neg)", "dist", "sep.ratio"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<13} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>9.4} {:>10.4}\n",
                r.strategy.as_str(),
                r.l1_pos,
                r.l1_neg,
                r.mbe_pos,
                r.mbe_neg,
                r.distance,
                r.separation_ratio
            ));
        }
        s
    }
}

/// Trains every strategy under `base` (a conflict config). Ordered
/// strategies switch task halfway through `total_steps`; `gapt-mbe` runs the
/// phase controller on mixed batches and every other strategy runs CE-only.
pub fn run_conflict_suite(base: &RunConfig, out: Option<&Path>) -> Result<SuiteTable, RunError> {
    if base.experiment != Experiment::Conflict {
        return Err(RunError::Invalid(format!(
            "the conflict suite needs a conflict config, got {}",
            base.experiment.as_str()
        )));
    }
    let mut rows = Vec::with_capacity(ConflictStrategy::ALL.len());
    for strategy in ConflictStrategy::ALL {
        let mut cfg = base.clone();
        cfg.task.conflict.strategy = strategy;
        cfg.controller = if strategy == ConflictStrategy::GaptMbe {
            ControllerMode::Gapt
        } else {
            ControllerMode::CeOnly
        };
        cfg.output_dir = out.map(|d| d.join(strategy.as_str()));
        let log = train(&cfg)?;
        if log.summary.status == RunStatus::Aborted {
            return Err(RunError::NonFinite(format!(
                "{} run: {:?}",
                strategy.as_str(),
                log.summary.abort
            )));
        }
        rows.push(SuiteRow::from_summary(strategy, &log.summary)?);
    }
    let table = SuiteTable {
        seed: base.seed,
        rows,
    };
    if let Some(d) = out {
        std::fs::create_dir_all(d)?;
        table.write_csv(&d.join("conflict_table.csv"))?;
    }
    Ok(table)
}
