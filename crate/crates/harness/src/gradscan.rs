//! Per-step gradient snapshots of every attention and MLP group: CE
//! gradients on several batches, MBE gradients on the same batches, and the
//! consistency and alignment series derived from them.

use std::collections::BTreeMap;
use std::path::Path;

use iblm_core::diagnostics::{
    ce_mbe_alignment, cross_batch_consistency, AlignmentSeries, GradSource, GradientSnapshot, GroupId,
    OscillationStats, MIN_SERIES_LEN,
};
use iblm_core::nets::{BoundParams, ParamSet};
use iblm_core::{Tape, Var};
use serde::Serialize;

use crate::workload::{layer_mbe, StepGraph, Workload};
use crate::RunError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupStats {
    pub group: GroupId,
    pub samples: usize,
    pub has_both_signs: bool,
    pub stats: OscillationStats,
}

/// What a scan leaves behind once training ends.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanReport {
    pub alignment: Vec<AlignmentSeries>,
    /// Empty when only one batch is taken per step.
    pub consistency: Vec<AlignmentSeries>,
    /// Groups whose series is long enough for oscillation statistics.
    pub stats: Vec<GroupStats>,
}

pub struct GradScanner {
    batches: usize,
    groups: BTreeMap<GroupId, Vec<String>>,
    alignment: BTreeMap<GroupId, AlignmentSeries>,
    consistency: BTreeMap<GroupId, AlignmentSeries>,
}

impl GradScanner {
    /// Groups are taken from `workload.param_group` over the names in
    /// `params`.
    pub fn new(batches: usize, workload: &dyn Workload, params: &ParamSet) -> Self {
        let mut groups: BTreeMap<GroupId, Vec<String>> = BTreeMap::new();
        for name in params.names() {
            if let Some(g) = workload.param_group(name) {
                groups.entry(g).or_default().push(name.clone());
            }
        }
        Self::with_groups(batches, groups)
    }

    pub fn with_groups(batches: usize, groups: BTreeMap<GroupId, Vec<String>>) -> Self {
        Self {
            batches,
            alignment: groups.keys().map(|&g| (g, AlignmentSeries::new(g))).collect(),
            consistency: if batches >= 2 {
                groups.keys().map(|&g| (g, AlignmentSeries::new(g))).collect()
            } else {
                BTreeMap::new()
            },
            groups,
        }
    }

    pub fn groups(&self) -> Vec<GroupId> {
        self.groups.keys().copied().collect()
    }

    fn snapshots(
        &self,
        step: u64,
        source: GradSource,
        grads: &ParamSet,
    ) -> Result<Vec<GradientSnapshot>, RunError> {
        let mut out = Vec::with_capacity(self.groups.len());
        for (&group, names) in &self.groups {
            let mut vector = Vec::new();
            for n in names {
                vector.extend_from_slice(grads.get(n)?.data());
            }
            out.push(GradientSnapshot {
                step,
                group,
                source,
                vector,
            });
        }
        Ok(out)
    }

    /// CE and MBE gradients of one recorded batch. Leaves the tape's
    /// gradients cleared.
    fn batch_grads(
        &self,
        step: u64,
        tape: &mut Tape,
        bound: &BoundParams,
        ce: Var,
        mbe_total: Var,
    ) -> Result<(ParamSet, Vec<GradientSnapshot>, Vec<GradientSnapshot>), RunError> {
        tape.backward(ce)?;
        let ce_grads = bound.grads(tape);
        tape.reset_grads();
        tape.backward(mbe_total)?;
        let mbe_grads = bound.grads(tape);
        tape.reset_grads();
        let ce_snaps = self.snapshots(step, GradSource::CrossEntropy, &ce_grads)?;
        let mbe_snaps = self.snapshots(step, GradSource::Mbe, &mbe_grads)?;
        Ok((ce_grads, ce_snaps, mbe_snaps))
    }

    /// Scans the training batch already on `tape` plus `batches − 1` fresh
    /// ones. Returns the training batch's CE gradient and this step's
    /// alignment per group.
    #[allow(clippy::too_many_arguments)]
    pub fn observe(
        &mut self,
        step: u64,
        tape: &mut Tape,
        bound: &BoundParams,
        graph: &StepGraph,
        mbe_total: Var,
        workload: &mut dyn Workload,
        params: &ParamSet,
    ) -> Result<(ParamSet, BTreeMap<GroupId, f64>), RunError> {
        let (train_ce, mut ce, mut mbe) = self.batch_grads(step, tape, bound, graph.task_loss, mbe_total)?;
        for _ in 1..self.batches {
            let mut t = Tape::new();
            let b = params.bind(&mut t, true);
            let g = workload.train_graph(&mut t, &b, step)?;
            let total = mbe_sum(&mut t, &g.layers)?;
            let (_, c, m) = self.batch_grads(step, &mut t, &b, g.task_loss, total)?;
            ce.extend(c);
            mbe.extend(m);
        }
        let alignment = self.record(step, &ce, &mbe)?;
        Ok((train_ce, alignment))
    }

    /// Adds one step of snapshots (any number of batches, every group) to
    /// the series and returns the step's alignment per group.
    pub fn record(
        &mut self,
        step: u64,
        ce: &[GradientSnapshot],
        mbe: &[GradientSnapshot],
    ) -> Result<BTreeMap<GroupId, f64>, RunError> {
        let mut out = BTreeMap::new();
        for &group in self.groups.keys() {
            let c: Vec<GradientSnapshot> = ce.iter().filter(|s| s.group == group).cloned().collect();
            let m: Vec<GradientSnapshot> = mbe.iter().filter(|s| s.group == group).cloned().collect();
            let a = ce_mbe_alignment(&c, &m)?;
            self.alignment
                .get_mut(&group)
                .expect("series per group")
                .push(step, a)?;
            if let Some(series) = self.consistency.get_mut(&group) {
                series.push(step, cross_batch_consistency(&c)?)?;
            }
            out.insert(group, a);
        }
        Ok(out)
    }

    pub fn finish(self) -> Result<ScanReport, RunError> {
        let mut stats = Vec::new();
        for s in self.alignment.values() {
            if s.len() >= MIN_SERIES_LEN {
                stats.push(GroupStats {
                    group: s.group,
                    samples: s.len(),
                    has_both_signs: s.has_both_signs(),
                    stats: s.stats()?,
                });
            }
        }
        Ok(ScanReport {
            alignment: self.alignment.into_values().collect(),
            consistency: self.consistency.into_values().collect(),
            stats,
        })
    }
}

/// Sum of the normalized order-2 entropy of every layer.
pub fn mbe_sum(tape: &mut Tape, layers: &[Vec<Var>]) -> Result<Var, RunError> {
    let mut total: Option<Var> = None;
    for blocks in layers {
        let m = layer_mbe(tape, blocks)?;
        total = Some(match total {
            Some(t) => tape.add(t, m)?,
            None => m,
        });
    }
    total.ok_or_else(|| RunError::Invalid("model has no layers".into()))
}

fn write_series(path: &Path, series: &[AlignmentSeries]) -> Result<(), RunError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["step".to_string()];
    header.extend(series.iter().map(|s| s.group.to_string()));
    w.write_record(&header)?;
    let steps = series.first().map(|s| s.steps.clone()).unwrap_or_default();
    for (i, step) in steps.iter().enumerate() {
        let mut row = vec![step.to_string()];
        row.extend(series.iter().map(|s| s.values[i].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

impl ScanReport {
    /// `alignment.csv`, `consistency.csv` (when present) and
    /// `oscillation.csv`, one row per group.
    pub fn write(&self, dir: &Path) -> Result<(), RunError> {
        std::fs::create_dir_all(dir)?;
        write_series(&dir.join("alignment.csv"), &self.alignment)?;
        if !self.consistency.is_empty() {
            write_series(&dir.join("consistency.csv"), &self.consistency)?;
        }
        let mut w = csv::Writer::from_path(dir.join("oscillation.csv"))?;
        w.write_record([
            "group",
            "samples",
            "has_both_signs",
            "std",
            "zero_crossing_rate",
            "psd_peak_to_mean",
            "psd_peak_bin",
        ])?;
        for g in &self.stats {
            w.write_record([
                g.group.to_string(),
                g.samples.to_string(),
                g.has_both_signs.to_string(),
                g.stats.std.to_string(),
                g.stats.zero_crossing_rate.to_string(),
                g.stats.psd_peak_to_mean.to_string(),
                g.stats.psd_peak_bin.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
