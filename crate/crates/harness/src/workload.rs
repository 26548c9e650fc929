//! The three training tasks behind a common interface: byte-level language
//! modelling, per-digit multiplication and the conflicting-teacher
//! regression task.

use iblm_core::diagnostics::{GroupId, ParamKind};
use iblm_core::entropy::{mbe_alpha2_fast, MbeConfig};
use iblm_core::nets::mlp::mlp_forward;
use iblm_core::nets::{transformer_forward, BoundParams, MlpConfig, ParamSet, TransformerConfig};
use iblm_core::tasks::{
    char_corpus, gen_conflict_data, gen_multiplication_data, separation_metrics, synthetic_corpus,
    ArithmeticSplits, CharCorpus, ConflictData, ConflictTaskSpec, Equation, SeqBatch,
};
use iblm_core::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ConflictStrategy, EntropyScope, Experiment, RunConfig};
use crate::log::RunSummary;
use crate::RunError;

/// Forward pass of one training batch: the task loss and every layer's
/// representation, split into row blocks whose entropies are averaged.
/// Most workloads use a single block per layer.
#[derive(Debug, Clone)]
pub struct StepGraph {
    pub task_loss: Var,
    pub layers: Vec<Vec<Var>>,
}

impl StepGraph {
    pub fn single_blocks(task_loss: Var, layers: Vec<Var>) -> Self {
        Self {
            task_loss,
            layers: layers.into_iter().map(|l| vec![l]).collect(),
        }
    }
}

/// Normalized order-2 entropy of one layer: the mean over its row blocks.
pub fn layer_mbe(tape: &mut Tape, blocks: &[Var]) -> Result<Var, RunError> {
    let mut total: Option<Var> = None;
    for &b in blocks {
        let m = mbe_alpha2_fast(tape, b, true)?;
        total = Some(match total {
            Some(t) => tape.add(t, m)?,
            None => m,
        });
    }
    let total = total.ok_or_else(|| RunError::Invalid("layer has no representation blocks".into()))?;
    Ok(if blocks.len() == 1 {
        total
    } else {
        tape.scale(total, 1.0 / blocks.len() as f64)
    })
}

pub trait Workload {
    fn layers(&self) -> usize;

    fn init_params(&self) -> Result<ParamSet, RunError>;

    /// Draws the next training batch and records its forward pass.
    fn train_graph(
        &mut self,
        tape: &mut Tape,
        params: &BoundParams,
        step: u64,
    ) -> Result<StepGraph, RunError>;

    /// Validation loss, the quantity early stopping watches.
    fn validate(&mut self, params: &ParamSet) -> Result<f64, RunError>;

    /// Layer representations on a fixed probe batch.
    fn probe_layers(&mut self, params: &ParamSet) -> Result<Vec<Tensor>, RunError>;

    /// Adds task-specific end-of-run metrics to the summary.
    fn finish(&mut self, _params: &ParamSet, _summary: &mut RunSummary) -> Result<(), RunError> {
        Ok(())
    }

    /// Alignment group of a parameter, `None` for parameters outside the
    /// per-layer attention and MLP groups.
    fn param_group(&self, _name: &str) -> Option<GroupId> {
        None
    }
}

/// Builds the workload a config describes.
pub fn build_workload(config: &RunConfig) -> Result<Box<dyn Workload>, RunError> {
    Ok(match config.experiment {
        Experiment::LmPretrain | Experiment::GradScan => Box::new(LmWorkload::new(config)?),
        Experiment::Arithmetic => Box::new(ArithmeticWorkload::new(config)?),
        Experiment::Conflict => Box::new(ConflictWorkload::new(config)?),
    })
}

fn seq_forward(
    tape: &mut Tape,
    model: &TransformerConfig,
    params: &BoundParams,
    batch: &SeqBatch,
) -> Result<StepGraph, RunError> {
    let bundle = transformer_forward(tape, model, params, &batch.tokens, batch.batch, batch.seq)?;
    let task_loss = tape.softmax_cross_entropy(bundle.logits, &batch.targets)?;
    Ok(StepGraph::single_blocks(task_loss, bundle.layers))
}

/// Token-weighted mean cross-entropy and final-step layer values over
/// `batches`, without gradients.
fn seq_eval(
    model: &TransformerConfig,
    params: &ParamSet,
    batches: impl Iterator<Item = SeqBatch>,
) -> Result<f64, RunError> {
    let (mut total, mut count) = (0.0, 0usize);
    for b in batches {
        let n = b.targets.iter().filter(|t| t.is_some()).count();
        if n == 0 {
            continue;
        }
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let g = seq_forward(&mut tape, model, &bound, &b)?;
        total += tape.scalar_value(g.task_loss) * n as f64;
        count += n;
    }
    Ok(total / count.max(1) as f64)
}

fn seq_layers(
    model: &TransformerConfig,
    params: &ParamSet,
    batch: &SeqBatch,
) -> Result<Vec<Tensor>, RunError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let bundle = transformer_forward(&mut tape, model, &bound, &batch.tokens, batch.batch, batch.seq)?;
    Ok(bundle.layer_values(&tape))
}

fn transformer_group(model: &TransformerConfig, name: &str) -> Option<GroupId> {
    let g = model.group_of(name);
    matches!(g.kind, ParamKind::Attention | ParamKind::Mlp).then_some(g)
}

pub struct LmWorkload {
    model: TransformerConfig,
    corpus: CharCorpus,
    batch: usize,
    eval_blocks: usize,
    rng: ChaCha8Rng,
}

impl LmWorkload {
    pub fn new(config: &RunConfig) -> Result<Self, RunError> {
        let c = &config.task.corpus;
        let model = config.model.transformer.clone();
        let corpus = match &c.path {
            Some(p) => char_corpus(p, model.context_length, c.split_fraction)?,
            None => CharCorpus::from_bytes(
                &synthetic_corpus(c.synthetic_bytes, c.synthetic_seed),
                model.context_length,
                c.split_fraction,
            )?,
        };
        if corpus.val_blocks() == 0 {
            return Err(RunError::Invalid(
                "corpus too small for a validation split".into(),
            ));
        }
        Ok(Self {
            model,
            corpus,
            batch: config.batch_size,
            eval_blocks: c.eval_blocks,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x6c6d),
        })
    }

    pub fn corpus(&self) -> &CharCorpus {
        &self.corpus
    }
}

impl Workload for LmWorkload {
    fn layers(&self) -> usize {
        self.model.layers
    }

    fn init_params(&self) -> Result<ParamSet, RunError> {
        Ok(self.model.init()?)
    }

    fn train_graph(
        &mut self,
        tape: &mut Tape,
        params: &BoundParams,
        _step: u64,
    ) -> Result<StepGraph, RunError> {
        let b = self.corpus.sample_batch(self.batch, &mut self.rng);
        seq_forward(tape, &self.model, params, &b)
    }

    fn validate(&mut self, params: &ParamSet) -> Result<f64, RunError> {
        let n = self.eval_blocks.min(self.corpus.val_blocks());
        let batches = (0..n)
            .step_by(self.batch)
            .map(|s| self.corpus.val_batch(s, self.batch.min(n - s)));
        seq_eval(&self.model, params, batches)
    }

    fn probe_layers(&mut self, params: &ParamSet) -> Result<Vec<Tensor>, RunError> {
        seq_layers(&self.model, params, &self.corpus.val_batch(0, self.batch))
    }

    fn param_group(&self, name: &str) -> Option<GroupId> {
        transformer_group(&self.model, name)
    }
}

/// Held-out equations per evaluation batch.
const EVAL_CHUNK: usize = 256;
/// Test equations in the probe batch.
const PROBE_EQUATIONS: usize = 64;

pub struct ArithmeticWorkload {
    model: TransformerConfig,
    splits: ArithmeticSplits,
    seq: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl ArithmeticWorkload {
    pub fn new(config: &RunConfig) -> Result<Self, RunError> {
        let spec = &config.task.arithmetic;
        Ok(Self {
            model: config.model.transformer.clone(),
            splits: gen_multiplication_data(spec)?,
            seq: spec.sequence_length(),
            batch: config.batch_size,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x6172),
        })
    }

    fn eval_split(&self, params: &ParamSet, eqs: &[Equation]) -> Result<f64, RunError> {
        let batches = eqs
            .chunks(EVAL_CHUNK)
            .map(|c| SeqBatch::from_equations(c, self.seq))
            .collect::<Result<Vec<_>, _>>()?;
        seq_eval(&self.model, params, batches.into_iter())
    }
}

impl Workload for ArithmeticWorkload {
    fn layers(&self) -> usize {
        self.model.layers
    }

    fn init_params(&self) -> Result<ParamSet, RunError> {
        Ok(self.model.init()?)
    }

    fn train_graph(
        &mut self,
        tape: &mut Tape,
        params: &BoundParams,
        _step: u64,
    ) -> Result<StepGraph, RunError> {
        let n = self.splits.train.len();
        let eqs: Vec<Equation> = (0..self.batch)
            .map(|_| self.splits.train[self.rng.random_range(0..n)])
            .collect();
        let b = SeqBatch::from_equations(&eqs, self.seq)?;
        seq_forward(tape, &self.model, params, &b)
    }

    fn validate(&mut self, params: &ParamSet) -> Result<f64, RunError> {
        self.eval_split(params, &self.splits.val_ood)
    }

    fn probe_layers(&mut self, params: &ParamSet) -> Result<Vec<Tensor>, RunError> {
        let n = PROBE_EQUATIONS.min(self.splits.test_id.len());
        let b = SeqBatch::from_equations(&self.splits.test_id[..n], self.seq)?;
        seq_layers(&self.model, params, &b)
    }

    fn finish(&mut self, params: &ParamSet, summary: &mut RunSummary) -> Result<(), RunError> {
        for (name, eqs) in [
            ("test_id_ce", &self.splits.test_id),
            ("test_ood_ce", &self.splits.test_ood),
            ("val_ood_ce", &self.splits.val_ood),
        ] {
            if !eqs.is_empty() {
                summary.metrics.insert(name.into(), self.eval_split(params, eqs)?);
            }
        }
        Ok(())
    }

    fn param_group(&self, name: &str) -> Option<GroupId> {
        transformer_group(&self.model, name)
    }
}

/// Mean absolute error between `pred` and a constant target.
pub fn l1_loss(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var, RunError> {
    let y = tape.constant(target.clone());
    let d = tape.sub(pred, y)?;
    let up = tape.relu(d);
    let nd = tape.neg(d);
    let down = tape.relu(nd);
    let abs = tape.add(up, down)?;
    Ok(tape.mean(abs))
}

fn take_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = idx.iter().map(|&i| t.row(i).to_vec()).collect();
    Tensor::from_rows(&rows).expect("nonempty rows of equal width")
}

fn stack(a: &Tensor, b: &Tensor) -> Tensor {
    let width = a.shape()[1];
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(vec![data.len() / width, width], data).expect("equal widths")
}

/// Which task(s) a conflict strategy trains on at a given step.
fn conflict_tasks(strategy: ConflictStrategy, step: u64, total: u64) -> (bool, bool) {
    let first_half = step <= total / 2;
    match strategy {
        ConflictStrategy::PosOnly => (true, false),
        ConflictStrategy::NegOnly => (false, true),
        ConflictStrategy::PosThenNeg => (first_half, !first_half),
        ConflictStrategy::NegThenPos => (!first_half, first_half),
        ConflictStrategy::Mixed | ConflictStrategy::GaptMbe => (true, true),
    }
}

/// The student initialization `θ` plus the train and test sets drawn from
/// teachers `θ ± Δθ`. The test set uses its own seed.
pub fn conflict_datasets(config: &RunConfig) -> Result<(ParamSet, ConflictData, ConflictData), RunError> {
    let c = &config.task.conflict;
    let model = &config.model.mlp;
    let base = model.init()?;
    let delta = model.init_scaled(c.delta_scale, model.seed.wrapping_add(1))?;
    let train = gen_conflict_data(&c.spec, model, &base, &delta)?;
    let test_spec = ConflictTaskSpec {
        n_per_task: c.test_per_task,
        seed: c.spec.seed.wrapping_add(0x7465_7374),
        ..c.spec.clone()
    };
    let test = gen_conflict_data(&test_spec, model, &base, &delta)?;
    Ok((base, train, test))
}

/// Student MLP regressing two teachers `θ ± Δθ` on disjoint input clouds.
/// The student starts at `θ`.
pub struct ConflictWorkload {
    model: MlpConfig,
    base: ParamSet,
    train: ConflictData,
    test: ConflictData,
    strategy: ConflictStrategy,
    entropy_scope: EntropyScope,
    total_steps: u64,
    batch: usize,
    rng: ChaCha8Rng,
}

impl ConflictWorkload {
    pub fn new(config: &RunConfig) -> Result<Self, RunError> {
        let (base, train, test) = conflict_datasets(config)?;
        Ok(Self {
            model: config.model.mlp.clone(),
            base,
            train,
            test,
            strategy: config.task.conflict.strategy,
            entropy_scope: config.task.conflict.entropy_scope,
            total_steps: config.total_steps,
            batch: config.batch_size,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x636f),
        })
    }

    fn hidden_and_out(&self, params: &ParamSet, x: &Tensor) -> Result<(Tensor, Tensor), RunError> {
        Ok(iblm_core::nets::mlp::mlp_eval(&self.model, params, x)?)
    }

    fn test_l1(&self, params: &ParamSet) -> Result<[f64; 2], RunError> {
        let mut out = [0.0; 2];
        for (i, (x, y)) in [(&self.test.x1, &self.test.y1), (&self.test.x2, &self.test.y2)]
            .into_iter()
            .enumerate()
        {
            let (_, pred) = self.hidden_and_out(params, x)?;
            out[i] = pred.sub(y)?.data().iter().map(|v| v.abs()).sum::<f64>() / pred.numel() as f64;
        }
        Ok(out)
    }
}

impl Workload for ConflictWorkload {
    fn layers(&self) -> usize {
        1
    }

    fn init_params(&self) -> Result<ParamSet, RunError> {
        Ok(self.base.clone())
    }

    fn train_graph(
        &mut self,
        tape: &mut Tape,
        params: &BoundParams,
        step: u64,
    ) -> Result<StepGraph, RunError> {
        let (pos, neg) = conflict_tasks(self.strategy, step, self.total_steps);
        let per_task = if pos && neg {
            (self.batch / 2).max(1)
        } else {
            self.batch
        };
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (use_it, x, y) in [
            (pos, &self.train.x1, &self.train.y1),
            (neg, &self.train.x2, &self.train.y2),
        ] {
            if use_it {
                let n = x.shape()[0];
                let idx: Vec<usize> = (0..per_task).map(|_| self.rng.random_range(0..n)).collect();
                xs.push(take_rows(x, &idx));
                ys.push(take_rows(y, &idx));
            }
        }
        if self.entropy_scope == EntropyScope::PerTask {
            // One forward per task so each task's rows form their own block.
            let n = xs.len() as f64;
            let mut loss: Option<Var> = None;
            let mut blocks = Vec::with_capacity(xs.len());
            for (x, y) in xs.into_iter().zip(&ys) {
                let xv = tape.constant(x);
                let bundle = mlp_forward(tape, &self.model, params, xv)?;
                let l = l1_loss(tape, bundle.logits, y)?;
                loss = Some(match loss {
                    Some(t) => tape.add(t, l)?,
                    None => l,
                });
                blocks.extend(bundle.layers);
            }
            let loss = loss.expect("at least one task per step");
            let task_loss = if n > 1.0 { tape.scale(loss, 1.0 / n) } else { loss };
            return Ok(StepGraph {
                task_loss,
                layers: vec![blocks],
            });
        }
        let (x, y) = match (xs.len(), xs.first(), ys.first()) {
            (1, Some(x), Some(y)) => (x.clone(), y.clone()),
            _ => (stack(&xs[0], &xs[1]), stack(&ys[0], &ys[1])),
        };
        let xv = tape.constant(x);
        let bundle = mlp_forward(tape, &self.model, params, xv)?;
        let task_loss = l1_loss(tape, bundle.logits, &y)?;
        Ok(StepGraph::single_blocks(task_loss, bundle.layers))
    }

    fn validate(&mut self, params: &ParamSet) -> Result<f64, RunError> {
        let [a, b] = self.test_l1(params)?;
        Ok(0.5 * (a + b))
    }

    fn probe_layers(&mut self, params: &ParamSet) -> Result<Vec<Tensor>, RunError> {
        let (h1, _) = self.hidden_and_out(params, &self.test.x1)?;
        let (h2, _) = self.hidden_and_out(params, &self.test.x2)?;
        Ok(vec![stack(&h1, &h2)])
    }

    fn finish(&mut self, params: &ParamSet, summary: &mut RunSummary) -> Result<(), RunError> {
        let [l1_pos, l1_neg] = self.test_l1(params)?;
        let (h1, _) = self.hidden_and_out(params, &self.test.x1)?;
        let (h2, _) = self.hidden_and_out(params, &self.test.x2)?;
        let sep = separation_metrics(&h1, &h2, &MbeConfig::default().normalized())?;
        summary.metrics.insert("l1_pos".into(), l1_pos);
        summary.metrics.insert("l1_neg".into(), l1_neg);
        summary.metrics.insert("mbe_pos".into(), sep.per_task_mbe[0]);
        summary.metrics.insert("mbe_neg".into(), sep.per_task_mbe[1]);
        summary.metrics.insert("distance".into(), sep.distance);
        summary
            .metrics
            .insert("separation_ratio".into(), sep.separation_ratio);
        summary.separation = Some(sep);
        summary.strategy = Some(self.strategy);
        Ok(())
    }
}
