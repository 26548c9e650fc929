//! The training loop: forward, per-layer entropy, controller step,
//! composite loss, backward, optimizer update, logging and evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use iblm_core::entropy::{mbe_value, MbeConfig};
use iblm_core::gapt::{
    ce_only_directive, composite_loss, lagrangian_directive, GaptController, GaptError, Phase, PhaseDirective,
};
use iblm_core::nets::ParamSet;
use iblm_core::Tape;

use crate::config::{ControllerMode, Experiment, RunConfig};
use crate::gradscan::{mbe_sum, GradScanner, ScanReport};
use crate::log::{AbortRecord, EarlyStopper, LogWriter, RunLog, RunStatus, RunSummary, StepRecord};
use crate::optim::Optimizer;
use crate::workload::{build_workload, layer_mbe, Workload};
use crate::RunError;

/// Marks every summary produced with desk-scale hyperparameters.
pub const DESK_NOTE: &str =
    "desk-scale defaults: optimizer, entropy weight and schedule are conventional choices, not published settings";

enum Controller {
    CeOnly(PhaseDirective),
    Lagrangian(PhaseDirective),
    Gapt(GaptController),
}

impl Controller {
    fn new(config: &RunConfig) -> Result<Self, RunError> {
        Ok(match config.controller {
            ControllerMode::CeOnly => Controller::CeOnly(ce_only_directive(&config.gapt)),
            ControllerMode::Lagrangian => Controller::Lagrangian(lagrangian_directive(&config.gapt)),
            ControllerMode::Gapt => Controller::Gapt(GaptController::new(config.gapt.clone())?),
        })
    }

    fn step(&mut self, ce: f64, mbe: &BTreeMap<usize, f64>) -> Result<PhaseDirective, GaptError> {
        match self {
            Controller::CeOnly(d) | Controller::Lagrangian(d) => Ok(d.clone()),
            Controller::Gapt(c) => c.observe(ce, mbe),
        }
    }

    fn phase(&self) -> Phase {
        match self {
            Controller::CeOnly(d) | Controller::Lagrangian(d) => d.phase,
            Controller::Gapt(c) => c.phase(),
        }
    }

    fn counters(&self) -> (u32, u32) {
        match self {
            Controller::Gapt(c) => (c.state().stall_mem, c.state().stall_comp),
            _ => (0, 0),
        }
    }
}

/// Outcome of a run that used a gradient scanner.
pub struct ScanRun {
    pub log: RunLog,
    pub scan: ScanReport,
}

/// Builds the configured workload and trains it, writing logs under
/// `output_dir` when one is set.
pub fn train(config: &RunConfig) -> Result<RunLog, RunError> {
    let mut w = build_workload(config)?;
    run(config, w.as_mut(), config.output_dir.as_deref())
}

/// Trains `workload` under `config`.
pub fn run(config: &RunConfig, workload: &mut dyn Workload, out: Option<&Path>) -> Result<RunLog, RunError> {
    Ok(run_inner(config, workload, out, None)?.0)
}

/// Trains with a gradient scan on every step; scan tables go next to the
/// step log.
pub fn run_grad_scan(
    config: &RunConfig,
    workload: &mut dyn Workload,
    out: Option<&Path>,
) -> Result<ScanRun, RunError> {
    let params = workload.init_params()?;
    let scanner = GradScanner::new(config.task.grad_scan.batches, workload, &params);
    let (log, scanner) = run_inner(config, workload, out, Some(scanner))?;
    let scan = scanner.expect("scanner is returned").finish()?;
    if let Some(dir) = out {
        scan.write(dir)?;
    }
    Ok(ScanRun { log, scan })
}

fn abort_record(step: u64, phase: Phase, quantity: impl Into<String>, value: f64) -> AbortRecord {
    AbortRecord {
        step,
        phase,
        quantity: quantity.into(),
        value: value.to_string(),
    }
}

fn run_inner(
    config: &RunConfig,
    workload: &mut dyn Workload,
    out: Option<&Path>,
    mut scanner: Option<GradScanner>,
) -> Result<(RunLog, Option<GradScanner>), RunError> {
    let mut params = workload.init_params()?;
    let mut optimizer = Optimizer::new(&config.optimizer, &params);
    let mut controller = Controller::new(config)?;
    let layers = workload.layers();
    let groups = scanner.as_ref().map(|s| s.groups()).unwrap_or_default();
    let mut writer = out.map(|d| LogWriter::create(d, layers, &groups)).transpose()?;
    let mut stopper = config.early_stop.enabled.then(|| {
        EarlyStopper::new(
            config.early_stop.threshold_fraction,
            config.early_stop_activation(),
        )
    });

    let mut summary = RunSummary {
        experiment: config.experiment,
        controller: config.controller,
        strategy: None,
        seed: config.seed,
        status: RunStatus::Completed,
        steps_run: 0,
        final_val_ce: None,
        best_val_ce: None,
        final_mbe: BTreeMap::new(),
        metrics: BTreeMap::new(),
        separation: None,
        transitions: 0,
        early_stop_step: None,
        abort: None,
        notes: vec![DESK_NOTE.to_string()],
    };
    let mut records = Vec::with_capacity(config.total_steps as usize);
    let mut best_val = f64::INFINITY;

    for step in 1..=config.total_steps {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let graph = workload.train_graph(&mut tape, &bound, step)?;
        let ce = tape.scalar_value(graph.task_loss);
        if !ce.is_finite() {
            summary.abort = Some(abort_record(step, controller.phase(), "train_ce", ce));
            break;
        }
        let mut mbe_vars = BTreeMap::new();
        let mut mbe = BTreeMap::new();
        let mut bad = None;
        for (i, blocks) in graph.layers.iter().enumerate() {
            let v = layer_mbe(&mut tape, blocks)?;
            let value = tape.scalar_value(v);
            if !value.is_finite() && bad.is_none() {
                bad = Some((format!("mbe_{}", i + 1), value));
            }
            mbe_vars.insert(i + 1, v);
            mbe.insert(i + 1, value);
        }
        if let Some((what, value)) = bad {
            summary.abort = Some(abort_record(step, controller.phase(), what, value));
            break;
        }
        let regularized: BTreeMap<usize, f64> = config
            .gapt
            .regularized_layers
            .iter()
            .filter_map(|l| mbe.get(l).map(|&v| (*l, v)))
            .collect();
        let directive = match controller.step(ce, &regularized) {
            Ok(d) => d,
            Err(GaptError::NonFinite { what, step: _, value }) => {
                summary.abort = Some(abort_record(step, controller.phase(), what, value));
                break;
            }
            Err(e) => return Err(e.into()),
        };

        let mut alignment = BTreeMap::new();
        let mut scanned_ce = None;
        if let Some(s) = scanner.as_mut() {
            let total = mbe_sum(&mut tape, &graph.layers)?;
            let (ce_grads, a) = s.observe(step, &mut tape, &bound, &graph, total, workload, &params)?;
            alignment = a;
            scanned_ce = Some(ce_grads);
        }

        let loss_var = composite_loss(&mut tape, graph.task_loss, &mbe_vars, &directive)?;
        let loss = tape.scalar_value(loss_var);
        if !loss.is_finite() {
            summary.abort = Some(abort_record(step, directive.phase, "loss", loss));
            break;
        }
        let grads = match scanned_ce {
            Some(g) if !directive.has_mbe_term() && directive.ce_weight == 1.0 => g,
            _ => {
                tape.backward(loss_var)?;
                bound.grads(&tape)
            }
        };
        if let Some((name, g)) = grads.iter().find(|(_, g)| !g.all_finite()) {
            let i = g.first_non_finite().unwrap_or(0);
            summary.abort = Some(abort_record(
                step,
                directive.phase,
                format!("gradient:{name}"),
                g.data()[i],
            ));
            break;
        }
        optimizer.step(&mut params, &grads)?;

        let mut val_ce = None;
        let mut halt = false;
        if step % config.eval_every == 0 || step == config.total_steps {
            let v = workload.validate(&params)?;
            if !v.is_finite() {
                summary.abort = Some(abort_record(step, directive.phase, "val_ce", v));
                break;
            }
            ::log::info!(
                "step {step}: train CE {ce:.4}, val CE {v:.4}, phase {}",
                directive.phase.as_str()
            );
            best_val = best_val.min(v);
            val_ce = Some(v);
            summary.final_val_ce = Some(v);
            if let Some(s) = stopper.as_mut() {
                halt = s.observe(step, v);
            }
        }
        let (stall_mem, stall_comp) = controller.counters();
        let record = StepRecord {
            step,
            phase: directive.phase,
            train_ce: ce,
            loss,
            val_ce,
            mbe,
            stall_mem,
            stall_comp,
            transition: directive.transition.map(|t| t.reason),
            alignment,
        };
        if record.transition.is_some() {
            summary.transitions += 1;
        }
        if let Some(w) = writer.as_mut() {
            w.write_step(&record)?;
        }
        records.push(record);
        summary.steps_run = step;
        if halt {
            summary.status = RunStatus::EarlyStopped;
            summary.early_stop_step = Some(step);
            break;
        }
    }

    summary.best_val_ce = best_val.is_finite().then_some(best_val);
    if summary.abort.is_some() {
        summary.status = RunStatus::Aborted;
    } else {
        finish_summary(config, workload, &params, &mut summary)?;
    }
    if let Some(w) = writer.as_ref() {
        w.write_summary(&summary)?;
    }
    Ok((RunLog { records, summary }, scanner))
}

fn finish_summary(
    config: &RunConfig,
    workload: &mut dyn Workload,
    params: &ParamSet,
    summary: &mut RunSummary,
) -> Result<(), RunError> {
    let cfg = MbeConfig::default().normalized();
    for (i, r) in workload.probe_layers(params)?.iter().enumerate() {
        summary.final_mbe.insert(i + 1, mbe_value(r, &cfg)?);
    }
    workload.finish(params, summary)?;
    if config.experiment == Experiment::Conflict {
        summary.strategy = Some(config.task.conflict.strategy);
    }
    Ok(())
}
