mod common;

use std::collections::BTreeMap;

use common::small_lm;
use iblm_core::diagnostics::{
    ce_mbe_alignment, AlignmentSeries, GradSource, GradientSnapshot, GroupId, ParamKind,
};
use iblm_harness::gradscan::GradScanner;
use iblm_harness::run_grad_scan;
use iblm_harness::workload::build_workload;
use serde_json::json;

fn scan_config(batches: usize) -> iblm_harness::RunConfig {
    small_lm(
        json!({"experiment": "grad-scan", "task": {"grad_scan": {"batches": batches}}, "total_steps": 10}),
    )
}

#[test]
fn single_batch_scan_has_alignment_but_no_consistency() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scan_config(1);
    let mut w = build_workload(&cfg).unwrap();
    let out = run_grad_scan(&cfg, w.as_mut(), Some(dir.path())).unwrap();
    assert!(out.scan.consistency.is_empty());
    assert_eq!(
        out.scan.alignment.len(),
        4,
        "attention and MLP groups of two layers"
    );
    assert!(out.scan.alignment.iter().all(|s| s.len() == 10));
    assert!(dir.path().join("alignment.csv").exists());
    assert!(!dir.path().join("consistency.csv").exists());
    assert!(dir.path().join("oscillation.csv").exists());
    // The step log carries the same alignment values.
    for s in &out.scan.alignment {
        for (i, &v) in s.values.iter().enumerate() {
            assert_eq!(out.log.records[i].alignment[&s.group], v);
        }
    }
}

#[test]
fn two_batch_scan_emits_consistency_per_group() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scan_config(2);
    let mut w = build_workload(&cfg).unwrap();
    let out = run_grad_scan(&cfg, w.as_mut(), Some(dir.path())).unwrap();
    assert_eq!(out.scan.consistency.len(), 4);
    assert!(out
        .scan
        .consistency
        .iter()
        .flat_map(|s| &s.values)
        .all(|v| (-1.0..=1.0).contains(v)));
    let mut rdr = csv::Reader::from_path(dir.path().join("consistency.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap().len(), 5);
    assert_eq!(rdr.records().count(), 10);
    assert_eq!(out.scan.stats.len(), 4);
}

#[test]
fn scanning_does_not_change_the_training_trajectory() {
    let cfg = scan_config(2);
    let mut w = build_workload(&cfg).unwrap();
    let scanned = run_grad_scan(&cfg, w.as_mut(), None).unwrap().log;
    let mut plain_cfg = cfg.clone();
    plain_cfg.experiment = iblm_harness::Experiment::LmPretrain;
    let mut w = build_workload(&plain_cfg).unwrap();
    let plain = iblm_harness::run(&plain_cfg, w.as_mut(), None).unwrap();
    // Extra scan batches draw from the sampler, so only the first step shares
    // its batch.
    assert_eq!(scanned.records[0].train_ce, plain.records[0].train_ce);
    assert_eq!(scanned.records[0].loss, plain.records[0].loss);
}

fn snap(step: u64, group: GroupId, source: GradSource, vector: Vec<f64>) -> GradientSnapshot {
    GradientSnapshot {
        step,
        group,
        source,
        vector,
    }
}

#[test]
fn injected_gradients_pass_through_to_the_diagnostics() {
    let att = GroupId::new(1, ParamKind::Attention);
    let mlp = GroupId::new(1, ParamKind::Mlp);
    let groups = BTreeMap::from([(att, vec!["a".to_string()]), (mlp, vec!["m".to_string()])]);
    let mut scanner = GradScanner::with_groups(2, groups);
    let mut direct_att = AlignmentSeries::new(att);
    let mut direct_mlp = AlignmentSeries::new(mlp);

    for step in 1..=64u64 {
        let t = step as f64 * 0.7;
        let ce = vec![
            snap(step, att, GradSource::CrossEntropy, vec![t.cos(), t.sin(), 0.1]),
            snap(step, att, GradSource::CrossEntropy, vec![t.cos(), 0.5, 0.2]),
            snap(step, mlp, GradSource::CrossEntropy, vec![(0.3 * t).sin(), 1.0]),
            snap(step, mlp, GradSource::CrossEntropy, vec![(0.3 * t).cos(), -1.0]),
        ];
        let mbe = vec![
            snap(step, att, GradSource::Mbe, vec![1.0, 0.0, 0.0]),
            snap(step, att, GradSource::Mbe, vec![0.5, -0.5, 1.0]),
            snap(step, mlp, GradSource::Mbe, vec![1.0, 0.2]),
            snap(step, mlp, GradSource::Mbe, vec![-0.4, 1.0]),
        ];
        let got = scanner.record(step, &ce, &mbe).unwrap();

        let a = ce_mbe_alignment(&ce[..2], &mbe[..2]).unwrap();
        let m = ce_mbe_alignment(&ce[2..], &mbe[2..]).unwrap();
        direct_att.push(step, a).unwrap();
        direct_mlp.push(step, m).unwrap();
        assert_eq!(got[&att], a);
        assert_eq!(got[&mlp], m);
    }
    let report = scanner.finish().unwrap();
    assert_eq!(report.alignment, vec![direct_att.clone(), direct_mlp.clone()]);
    assert_eq!(report.stats[0].stats, direct_att.stats().unwrap());
    assert_eq!(report.stats[1].stats, direct_mlp.stats().unwrap());
    assert_eq!(report.stats[0].has_both_signs, direct_att.has_both_signs());
}

#[test]
fn short_series_get_no_oscillation_row() {
    let g = GroupId::new(2, ParamKind::Mlp);
    let mut scanner = GradScanner::with_groups(1, BTreeMap::from([(g, vec!["x".to_string()])]));
    for step in 1..=3 {
        let ce = [snap(step, g, GradSource::CrossEntropy, vec![1.0, step as f64])];
        let mbe = [snap(step, g, GradSource::Mbe, vec![1.0, -1.0])];
        scanner.record(step, &ce, &mbe).unwrap();
    }
    let report = scanner.finish().unwrap();
    assert!(report.stats.is_empty());
    assert_eq!(report.alignment[0].len(), 3);
}
