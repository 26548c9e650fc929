//! Baseline-versus-candidate tables: scalar deltas with percentage change
//! and a per-layer entropy table.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::log::RunSummary;
use crate::RunError;

/// `(new − old) / old · 100`; `None` when `old` is zero and `new` is not.
pub fn pct_change(old: f64, new: f64) -> Option<f64> {
    if old == new {
        Some(0.0)
    } else if old == 0.0 {
        None
    } else {
        Some((new - old) / old * 100.0)
    }
}

/// Two decimals with an explicit sign, `n/a` when undefined.
pub fn format_pct(p: Option<f64>) -> String {
    match p {
        Some(v) => format!("{v:+.2}%"),
        None => "n/a".into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub metric: String,
    pub baseline: f64,
    pub candidate: f64,
    pub change_pct: Option<f64>,
}

impl ReportRow {
    pub fn new(metric: impl Into<String>, baseline: f64, candidate: f64) -> Self {
        Self {
            metric: metric.into(),
            baseline,
            candidate,
            change_pct: pct_change(baseline, candidate),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRow {
    pub layer: usize,
    pub baseline: f64,
    pub candidate: f64,
    pub change_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub scalars: Vec<ReportRow>,
    pub layers: Vec<LayerRow>,
}

/// Compares two runs of the same experiment.
pub fn compare(baseline: &RunSummary, candidate: &RunSummary) -> Result<Comparison, RunError> {
    if baseline.experiment != candidate.experiment {
        return Err(RunError::Mismatch(format!(
            "baseline is {}, candidate is {}",
            baseline.experiment.as_str(),
            candidate.experiment.as_str()
        )));
    }
    let mut scalars = Vec::new();
    for (name, a, b) in [
        ("final_val_ce", baseline.final_val_ce, candidate.final_val_ce),
        ("best_val_ce", baseline.best_val_ce, candidate.best_val_ce),
    ] {
        if let (Some(a), Some(b)) = (a, b) {
            scalars.push(ReportRow::new(name, a, b));
        }
    }
    for (k, &a) in &baseline.metrics {
        if let Some(&b) = candidate.metrics.get(k) {
            scalars.push(ReportRow::new(k.clone(), a, b));
        }
    }
    let layers: Vec<LayerRow> = baseline
        .final_mbe
        .iter()
        .filter_map(|(&layer, &a)| {
            candidate.final_mbe.get(&layer).map(|&b| LayerRow {
                layer,
                baseline: a,
                candidate: b,
                change_pct: pct_change(a, b),
            })
        })
        .collect();
    if !layers.is_empty() {
        let n = layers.len() as f64;
        let a = layers.iter().map(|r| r.baseline).sum::<f64>() / n;
        let b = layers.iter().map(|r| r.candidate).sum::<f64>() / n;
        scalars.push(ReportRow::new("mean_mbe", a, b));
    }
    Ok(Comparison { scalars, layers })
}

impl Comparison {
    pub fn render(&self, baseline: &str, candidate: &str) -> String {
        let mut s = format!(
            "{:<16} {:>12} {:>12} {:>10}\n",
            "metric", baseline, candidate, "change"
        );
        for r in &self.scalars {
            s.push_str(&format!(
                "{:<16} {:>12.4} {:>12.4} {:>10}\n",
                r.metric,
                r.baseline,
                r.candidate,
                format_pct(r.change_pct)
            ));
        }
        if !self.layers.is_empty() {
            s.push_str(&format!(
                "\n{:<6} {:>12} {:>12} {:>10}\n",
                "layer", baseline, candidate, "change"
            ));
            for r in &self.layers {
                s.push_str(&format!(
                    "{:<6} {:>12.4} {:>12.4} {:>10}\n",
                    r.layer,
                    r.baseline,
                    r.candidate,
                    format_pct(r.change_pct)
                ));
            }
        }
        s
    }

    /// `report.csv` with the scalar rows and `mbe_layers.csv` with the
    /// per-layer table.
    pub fn write_csv(&self, dir: &Path) -> Result<(), RunError> {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("report.csv"))?;
        w.write_record(["metric", "baseline", "candidate", "change_pct"])?;
        for r in &self.scalars {
            w.write_record([
                r.metric.clone(),
                r.baseline.to_string(),
                r.candidate.to_string(),
                format_pct(r.change_pct),
            ])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("mbe_layers.csv"))?;
        w.write_record(["layer", "baseline", "candidate", "change_pct"])?;
        for r in &self.layers {
            w.write_record([
                r.layer.to_string(),
                r.baseline.to_string(),
                r.candidate.to_string(),
                format_pct(r.change_pct),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A run directory's `summary.json`, or the file itself.
pub fn load_summary(path: &Path) -> Result<RunSummary, RunError> {
    let file: PathBuf = if path.is_dir() {
        path.join("summary.json")
    } else {
        path.to_path_buf()
    };
    RunSummary::read(&file)
}
