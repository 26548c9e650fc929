//! End-to-end acceptance checks, one per criterion.
//!
//! Runs as a plain binary (no libtest harness) so that the verdict lines are
//! always printed. Positional arguments select criteria by name, for example
//! `cargo test --test acceptance -- ac1 ac3`; with none, all nine run.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use iblm_core::entropy::{
    generalization_gap_bound, mbe, mbe_alpha2_fast, mbe_value, min_prob_entropy_bound, shannon_entropy,
    spectrum_report, BoundInputs, EntropyError, MbeConfig,
};
use iblm_core::gapt::{gapt_step, GaptConfig, GaptState, Phase, TransitionReason};
use iblm_core::linalg::symmetric_eigen;
use iblm_core::{grad_check, AutogradError, Tape, Tensor, Var};
use iblm_harness::config::ConflictStrategy;
use iblm_harness::report::{compare, format_pct};
use iblm_harness::suite::run_conflict_suite;
use iblm_harness::workload::build_workload;
use iblm_harness::{run_grad_scan, train, ControllerMode, Experiment, RunConfig, RunStatus, RunSummary};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::Deserialize;
use serde_json::json;

/// Outcome of one criterion: sub-check results plus free-form measurements.
struct Verdict {
    checks: Vec<(String, bool)>,
    notes: Vec<String>,
}

impl Verdict {
    fn new() -> Self {
        Self {
            checks: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn check(&mut self, name: impl Into<String>, ok: bool) {
        self.checks.push((name.into(), ok));
    }

    fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }
}

struct Criterion {
    name: &'static str,
    title: &'static str,
    budget: Duration,
    run: fn() -> Verdict,
}

const MINUTE: u64 = 60;

fn main() -> ExitCode {
    let criteria = [
        Criterion {
            name: "ac1",
            title: "entropy properties",
            budget: Duration::from_secs(10),
            run: ac1,
        },
        Criterion {
            name: "ac2",
            title: "gradient correctness",
            budget: Duration::from_secs(60),
            run: ac2,
        },
        Criterion {
            name: "ac3",
            title: "phase controller",
            budget: Duration::from_secs(5),
            run: ac3,
        },
        Criterion {
            name: "ac4",
            title: "conflict suite direction",
            budget: Duration::from_secs(10 * MINUTE),
            run: ac4,
        },
        Criterion {
            name: "ac5",
            title: "oscillation emergence",
            budget: Duration::from_secs(60 * MINUTE),
            run: ac5,
        },
        Criterion {
            name: "ac6",
            title: "fixed-weight collapse",
            budget: Duration::from_secs(120 * MINUTE),
            run: ac6,
        },
        Criterion {
            name: "ac7",
            title: "arithmetic OOD direction",
            budget: Duration::from_secs(120 * MINUTE),
            run: ac7,
        },
        Criterion {
            name: "ac8",
            title: "bound calculators",
            budget: Duration::from_secs(30),
            run: ac8,
        },
        Criterion {
            name: "ac9",
            title: "report percentages",
            budget: Duration::from_secs(5),
            run: ac9,
        },
    ];
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .map(|a| a.to_lowercase())
        .collect();

    let mut failed = Vec::new();
    for c in &criteria {
        if !filters.is_empty() && !filters.iter().any(|f| c.name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let mut v = (c.run)();
        let took = start.elapsed();
        v.check(
            format!(
                "runtime {:.1}s within {}s",
                took.as_secs_f64(),
                c.budget.as_secs()
            ),
            took < c.budget,
        );
        for n in &v.notes {
            println!("    {n}");
        }
        let bad: Vec<&str> = v
            .checks
            .iter()
            .filter(|(_, ok)| !ok)
            .map(|(n, _)| n.as_str())
            .collect();
        let label = c.name.to_uppercase();
        if bad.is_empty() {
            println!(
                "{label} PASS {} ({} checks, {:.1}s)",
                c.title,
                v.checks.len(),
                took.as_secs_f64()
            );
        } else {
            println!("{label} FAIL {}: {}", c.title, bad.join("; "));
            failed.push(label);
        }
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failing criteria: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::randn(&[rows, cols], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn random_orthogonal(n: usize, seed: u64) -> Tensor {
    let a = random(n, n, seed);
    let sym = a.add(&a.transposed()).unwrap();
    let eig = symmetric_eigen(sym.data(), n).unwrap();
    Tensor::new(vec![n, n], eig.vectors).unwrap()
}

/// Shapes for the seeded matrices: both orientations, including degenerate
/// single rows and columns.
fn seeded_shape(seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00ac_0001);
    (rng.random_range(1..=12), rng.random_range(1..=12))
}

const ORDERS: [f64; 4] = [0.5, 1.0, 2.0, 3.0];

fn ac1() -> Verdict {
    let mut v = Verdict::new();
    let (mut scale, mut orth, mut cont, mut fast_gap) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut range_ok = true;
    let mut rank_one = 0.0f64;
    for seed in 0..100u64 {
        let (s, d) = seeded_shape(seed);
        let r = random(s, d, seed);
        let q = random_orthogonal(d, seed + 1000);
        let rq = r.matmul(&q).unwrap();
        for alpha in ORDERS {
            let cfg = MbeConfig::with_alpha(alpha);
            let base = mbe_value(&r, &cfg).unwrap();
            for c in [1e-3, 7.5, 1e3] {
                scale = scale.max((mbe_value(&r.scaled(c), &cfg).unwrap() - base).abs());
            }
            orth = orth.max((mbe_value(&rq, &cfg).unwrap() - base).abs());
            let rep = spectrum_report(&r, &cfg).unwrap();
            let cap = (s.min(d) as f64).ln();
            range_ok &= rep.mbe >= -1e-12 && rep.mbe <= cap + 1e-9 && rep.mbe_normalized <= 1.0 + 1e-9;
        }
        let at_one = mbe_value(&r, &MbeConfig::with_alpha(1.0)).unwrap();
        for near in [0.9999, 1.0001] {
            cont = cont.max((mbe_value(&r, &MbeConfig::with_alpha(near)).unwrap() - at_one).abs());
        }
        for normalize in [false, true] {
            let cfg = MbeConfig {
                normalize,
                ..MbeConfig::default()
            };
            let spectral = mbe_value(&r, &cfg).unwrap();
            let mut t = Tape::new();
            let x = t.constant(r.clone());
            let f = mbe_alpha2_fast(&mut t, x, normalize).unwrap();
            fast_gap = fast_gap.max((t.scalar_value(f) - spectral).abs());
        }

        // Outer product u·wᵀ of the same seed's vectors.
        let u = random(s, 1, seed + 2000);
        let w = random(1, d, seed + 3000);
        let outer = u.matmul(&w).unwrap();
        for alpha in [1.0, 2.0, 3.0] {
            rank_one = rank_one.max(mbe_value(&outer, &MbeConfig::with_alpha(alpha)).unwrap().abs());
        }
    }
    let mut identity_gap = 0.0f64;
    for n in 1..=12 {
        for alpha in ORDERS {
            let h = mbe_value(&Tensor::identity(n), &MbeConfig::with_alpha(alpha)).unwrap();
            identity_gap = identity_gap.max((h - (n as f64).ln()).abs());
        }
    }
    v.note(format!(
        "max drift: scale {scale:.1e}, orthogonal {orth:.1e}, alpha->1 {cont:.1e}, fast vs spectral {fast_gap:.1e}, rank-1 {rank_one:.1e}, identity {identity_gap:.1e}"
    ));
    v.check("scale invariance <= 1e-9", scale <= 1e-9);
    v.check("orthogonal invariance <= 1e-8", orth <= 1e-8);
    v.check("rank-1 gives 0", rank_one <= 1e-9);
    v.check("identity gives ln n", identity_gap <= 1e-12);
    v.check("range bound", range_ok);
    v.check("alpha->1 continuity <= 1e-3", cont <= 1e-3);
    v.check("fast order-2 matches spectral <= 1e-10", fast_gap <= 1e-10);
    v
}

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Largest relative finite-difference error of `f` over ten seeded points.
/// The op's output is contracted with a fixed random tensor so that every
/// output coordinate contributes to the checked scalar.
fn op_error<F>(shape: &[usize], positive: bool, f: F) -> f64
where
    F: Fn(&mut Tape, Var) -> Result<Var, AutogradError>,
{
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let mut point = Tensor::randn(shape, 1.0, &mut seeded_rng(seed));
        if positive {
            point = point.map(|x| x.abs() + 0.5);
        }
        let err = grad_check(
            |t, x| {
                let y = f(t, x)?;
                let w = t.constant(Tensor::randn(t.shape(y), 1.0, &mut seeded_rng(seed + 77)));
                let p = t.mul(y, w)?;
                Ok(t.sum(p))
            },
            &point,
            FD_STEP,
        )
        .unwrap();
        worst = worst.max(err);
    }
    worst
}

fn fixed(t: &mut Tape, shape: &[usize], seed: u64) -> Var {
    t.constant(Tensor::randn(shape, 1.0, &mut seeded_rng(seed)))
}

fn entropy_autograd(e: EntropyError) -> AutogradError {
    match e {
        EntropyError::Autograd(a) => a,
        other => panic!("entropy failed outside autograd: {other}"),
    }
}

fn ac2() -> Verdict {
    let mut errors: Vec<(&str, f64)> = vec![
        (
            "matmul",
            op_error(&[3, 4], false, |t, x| {
                let b = fixed(t, &[4, 2], 11);
                let l = t.matmul(x, b)?;
                let a = fixed(t, &[2, 3], 12);
                t.matmul(a, l)
            }),
        ),
        ("transpose", op_error(&[3, 2], false, |t, x| t.transpose(x))),
        ("reshape", op_error(&[3, 4], false, |t, x| t.reshape(x, &[2, 6]))),
        (
            "add",
            op_error(&[3, 4], false, |t, x| {
                let c = fixed(t, &[1, 4], 13);
                let y = t.add(x, c)?;
                t.add(y, x)
            }),
        ),
        (
            "sub",
            op_error(&[3, 4], false, |t, x| {
                let c = fixed(t, &[3, 1], 14);
                let y = t.sub(c, x)?;
                t.sub(y, x)
            }),
        ),
        (
            "mul",
            op_error(&[3, 4], false, |t, x| {
                let c = fixed(t, &[1, 4], 15);
                let y = t.mul(x, c)?;
                t.mul(y, x)
            }),
        ),
        (
            "div",
            op_error(&[3, 4], true, |t, x| {
                let c = fixed(t, &[3, 4], 16);
                let y = t.div(c, x)?;
                t.div(y, x)
            }),
        ),
        ("scale", op_error(&[5], false, |t, x| Ok(t.scale(x, -2.5)))),
        ("neg", op_error(&[5], false, |t, x| Ok(t.neg(x)))),
        ("relu", op_error(&[4, 4], false, |t, x| Ok(t.relu(x)))),
        ("gelu", op_error(&[4, 4], false, |t, x| Ok(t.gelu(x)))),
        ("log", op_error(&[6], true, |t, x| Ok(t.log(x)))),
        ("powf", op_error(&[6], true, |t, x| Ok(t.powf(x, 2.7)))),
        (
            "clamp_min",
            op_error(&[8], false, |t, x| Ok(t.clamp_min(x, 0.05))),
        ),
        ("sum", op_error(&[3, 3], false, |t, x| Ok(t.sum(x)))),
        ("mean", op_error(&[3, 3], false, |t, x| Ok(t.mean(x)))),
        ("layer_norm", op_error(&[3, 5], false, |t, x| t.layer_norm(x))),
        (
            "embedding",
            op_error(&[5, 3], false, |t, x| t.embedding(x, &[0, 4, 4, 2])),
        ),
        (
            "softmax_cross_entropy",
            op_error(&[4, 6], false, |t, x| {
                t.softmax_cross_entropy(x, &[Some(1), None, Some(5), Some(0)])
            }),
        ),
        ("gram", op_error(&[4, 3], false, |t, x| t.gram(x))),
        ("trace", op_error(&[4, 4], false, |t, x| t.trace(x))),
        (
            "frobenius_sq",
            op_error(&[3, 4], false, |t, x| Ok(t.frobenius_sq(x))),
        ),
        (
            "symmetric_eigenvalues",
            op_error(&[4, 5], false, |t, x| {
                let k = t.gram(x)?;
                t.symmetric_eigenvalues(k)
            }),
        ),
    ];
    for (name, which) in [("attention q", 0), ("attention k", 1), ("attention v", 2)] {
        let e = op_error(&[6, 4], false, move |t, x| {
            let others = [fixed(t, &[6, 4], 21), fixed(t, &[6, 4], 22)];
            let (q, k, v) = match which {
                0 => (x, others[0], others[1]),
                1 => (others[0], x, others[1]),
                _ => (others[0], others[1], x),
            };
            t.causal_attention(q, k, v, 2, 3, 2)
        });
        errors.push((name, e));
    }

    let mut entropy_errors = Vec::new();
    for alpha in [1.0, 2.0] {
        let cfg = MbeConfig::with_alpha(alpha);
        let mut worst = 0.0f64;
        for seed in 0..10u64 {
            let (s, d) = if seed % 2 == 0 { (6, 4) } else { (4, 6) };
            let point = random(s, d, 500 + seed);
            let err = grad_check(|t, x| mbe(t, x, &cfg).map_err(entropy_autograd), &point, FD_STEP).unwrap();
            worst = worst.max(err);
        }
        entropy_errors.push((alpha, worst));
    }
    let mut fast = 0.0f64;
    for seed in 0..10u64 {
        let point = random(7, 5, 600 + seed);
        let err = grad_check(
            |t, x| mbe_alpha2_fast(t, x, true).map_err(entropy_autograd),
            &point,
            FD_STEP,
        )
        .unwrap();
        fast = fast.max(err);
    }

    let mut v = Verdict::new();
    let worst_op = errors
        .iter()
        .cloned()
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    v.note(format!(
        "{} ops checked, worst {} at {:.1e}",
        errors.len(),
        worst_op.0,
        worst_op.1
    ));
    v.note(format!(
        "entropy: alpha 1 {:.1e}, alpha 2 {:.1e}, fast order-2 {fast:.1e}",
        entropy_errors[0].1, entropy_errors[1].1
    ));
    for (name, e) in errors {
        v.check(format!("{name} rel error {e:.1e} <= {FD_TOL:.0e}"), e <= FD_TOL);
    }
    for (alpha, e) in entropy_errors {
        v.check(format!("entropy alpha {alpha} rel error {e:.1e}"), e <= FD_TOL);
    }
    v.check(format!("fast entropy rel error {fast:.1e}"), fast <= FD_TOL);
    v
}

#[derive(Deserialize)]
struct TraceFixture {
    config: GaptConfig,
    steps: Vec<TraceStep>,
}

#[derive(Deserialize)]
struct TraceStep {
    ce: f64,
    mbe: BTreeMap<usize, f64>,
    transition: Option<TransitionReason>,
    phase: Phase,
    stall_mem: u32,
    stall_comp: u32,
    ce_min: serde_json::Value,
    mbe_min: BTreeMap<usize, serde_json::Value>,
}

fn fixture_number(v: &serde_json::Value) -> f64 {
    match v {
        serde_json::Value::String(s) if s == "inf" => f64::INFINITY,
        other => other.as_f64().expect("fixture minima are numbers or \"inf\""),
    }
}

fn replay_fixture() -> Result<usize, String> {
    let fixture: TraceFixture =
        serde_json::from_str(include_str!("../../core/tests/fixtures/gapt_trace.json"))
            .map_err(|e| e.to_string())?;
    fixture.config.validate().map_err(|e| e.to_string())?;
    let mut state = GaptState::new(&fixture.config);
    let mut reasons = Vec::new();
    for (i, step) in fixture.steps.iter().enumerate() {
        let (next, dir) =
            gapt_step(&state, step.ce, &step.mbe, &fixture.config).map_err(|e| e.to_string())?;
        let n = i + 1;
        let mins_match = step
            .mbe_min
            .iter()
            .all(|(l, m)| next.mbe_min.get(l) == Some(&fixture_number(m)));
        if next.phase != step.phase
            || dir.phase != next.phase
            || next.stall_mem != step.stall_mem
            || next.stall_comp != step.stall_comp
            || next.ce_min != fixture_number(&step.ce_min)
            || !mins_match
            || dir.transition.map(|t| t.reason) != step.transition
        {
            return Err(format!("diverges at step {n}"));
        }
        reasons.extend(dir.transition.map(|t| t.reason));
        state = next;
    }
    for r in [
        TransitionReason::MemPatience,
        TransitionReason::CompPatience,
        TransitionReason::CeDegraded,
    ] {
        if !reasons.contains(&r) {
            return Err(format!("never exercises {}", r.as_str()));
        }
    }
    Ok(fixture.steps.len())
}

fn controller_config() -> impl Strategy<Value = GaptConfig> {
    (1u32..6, 1u32..6, 1e-3f64..0.1, 1e-3f64..0.2).prop_map(|(pm, pc, delta, tau)| GaptConfig {
        delta,
        tau,
        patience_mem: pm,
        patience_comp: pc,
        lambda_mbe: 0.1,
        ..GaptConfig::with_layers([1, 2, 3])
    })
}

fn drifting_feed() -> impl Strategy<Value = Vec<(f64, [f64; 3])>> {
    prop::collection::vec((-0.1f64..0.1, prop::array::uniform3(-0.05f64..0.05)), 1..200).prop_map(|steps| {
        let (mut ce, mut m) = (3.0f64, [0.8f64, 0.6, 0.4]);
        steps
            .into_iter()
            .map(|(dc, dm)| {
                ce = (ce + dc).max(0.01);
                for (x, d) in m.iter_mut().zip(dm) {
                    *x = (*x + d).clamp(0.0, 1.0);
                }
                (ce, m)
            })
            .collect()
    })
}

fn layers3(m: [f64; 3]) -> BTreeMap<usize, f64> {
    BTreeMap::from([(1, m[0]), (2, m[1]), (3, m[2])])
}

fn runner() -> TestRunner {
    TestRunner::new(PropConfig {
        cases: 256,
        failure_persistence: None,
        ..PropConfig::default()
    })
}

fn property<S: Strategy>(
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    runner().run(&strategy, test).map_err(|e| e.to_string())
}

/// Steps between successive compression entries under a constant feed.
fn constant_feed_periods(cfg: &GaptConfig, ce: f64, m: [f64; 3]) -> Vec<u32> {
    let mut s = GaptState::new(cfg);
    let mut entries = Vec::new();
    for step in 1..=8 * (cfg.patience_mem + cfg.patience_comp + 1) {
        let (next, dir) = gapt_step(&s, ce, &layers3(m), cfg).unwrap();
        if dir.transition.is_some_and(|t| t.to == Phase::Compression) {
            entries.push(step);
        }
        s = next;
    }
    entries.windows(2).map(|w| w[1] - w[0]).collect()
}

fn ac3() -> Verdict {
    let mut v = Verdict::new();
    match replay_fixture() {
        Ok(n) => {
            v.note(format!("golden trace: {n} steps replayed"));
            v.check("golden trace has >= 12 steps", n >= 12);
        }
        Err(e) => v.check(format!("golden trace {e}"), false),
    }

    let determinism = property((controller_config(), drifting_feed()), |(cfg, seq)| {
        let (mut a, mut b) = (GaptState::new(&cfg), GaptState::new(&cfg));
        for (ce, m) in seq {
            let (na, da) = gapt_step(&a, ce, &layers3(m), &cfg).unwrap();
            let (nb, db) = gapt_step(&b, ce, &layers3(m), &cfg).unwrap();
            prop_assert_eq!(&na, &nb);
            prop_assert_eq!(da, db);
            (a, b) = (na, nb);
        }
        Ok(())
    });
    let resets = property((controller_config(), drifting_feed()), |(cfg, seq)| {
        let mut s = GaptState::new(&cfg);
        for (ce, m) in seq {
            let (next, dir) = gapt_step(&s, ce, &layers3(m), &cfg).unwrap();
            match dir.transition.map(|t| t.to) {
                Some(Phase::Compression) => {
                    prop_assert_eq!(next.stall_comp, 0);
                    prop_assert_eq!(next.ce_min, f64::INFINITY);
                    prop_assert!(next.mbe_min.values().all(|x| *x == f64::INFINITY));
                }
                Some(Phase::Memorization) => prop_assert_eq!(next.stall_mem, 0),
                None => {}
            }
            s = next;
        }
        Ok(())
    });
    let bounds = property((controller_config(), drifting_feed()), |(cfg, seq)| {
        let mut s = GaptState::new(&cfg);
        for (ce, m) in seq {
            s = gapt_step(&s, ce, &layers3(m), &cfg).unwrap().0;
            prop_assert!(s.stall_mem < cfg.patience_mem && s.stall_comp < cfg.patience_comp);
        }
        Ok(())
    });
    let priority = property(
        (controller_config(), drifting_feed(), 1.01f64..3.0),
        |(cfg, seq, spike)| {
            let mut s = GaptState::new(&cfg);
            for (ce, m) in seq {
                if s.phase == Phase::Compression && s.ce_min.is_finite() {
                    let bad = s.ce_min * (1.0 + cfg.tau) * spike;
                    let (next, dir) = gapt_step(&s, bad, &layers3([0.0; 3]), &cfg).unwrap();
                    prop_assert_eq!(
                        dir.transition.map(|t| t.reason),
                        Some(TransitionReason::CeDegraded)
                    );
                    prop_assert_eq!(&next.mbe_min, &s.mbe_min);
                }
                s = gapt_step(&s, ce, &layers3(m), &cfg).unwrap().0;
            }
            Ok(())
        },
    );
    let improving = property(
        (
            controller_config(),
            prop::collection::vec(0.0f64..1.0, 1..300),
            prop::array::uniform3(0.0f64..1.0),
        ),
        |(cfg, gains, m)| {
            let (mut s, mut ce) = (GaptState::new(&cfg), 1000.0);
            for g in gains {
                ce -= cfg.delta * (1.0 + g) + 1e-9;
                s = gapt_step(&s, ce, &layers3(m), &cfg).unwrap().0;
                prop_assert_eq!(s.phase, Phase::Memorization);
            }
            Ok(())
        },
    );
    for (name, r) in [
        ("determinism", determinism),
        ("phase-entry resets", resets),
        ("counter bounds", bounds),
        ("degradation priority", priority),
        ("strict improvement stays in memorization", improving),
    ] {
        if let Err(e) = &r {
            v.note(format!("{name}: {e}"));
        }
        v.check(format!("invariant: {name}"), r.is_ok());
    }

    // The period clause asks for p_m + p_c. The update rule resets every MBE
    // minimum to +inf on entering compression, so the first compression step
    // always registers an improvement and the cycle is one step longer.
    let mut stated = true;
    let mut measured = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for pm in 1..=6u32 {
        for pc in 1..=6u32 {
            let cfg = GaptConfig {
                patience_mem: pm,
                patience_comp: pc,
                ..GaptConfig::with_layers([1, 2, 3])
            };
            let m = [rng.random::<f64>(), rng.random(), rng.random()];
            let periods = constant_feed_periods(&cfg, rng.random_range(0.1..5.0), m);
            stated &= !periods.is_empty() && periods.iter().all(|&p| p == pm + pc);
            for p in periods {
                *measured.entry(p as i64 - (pm + pc) as i64).or_insert(0usize) += 1;
            }
        }
    }
    let offsets: Vec<String> = measured
        .iter()
        .map(|(k, n)| format!("p_m+p_c{k:+} x{n}"))
        .collect();
    v.note(format!(
        "constant-feed periods over p_m, p_c in 1..=6: {}",
        offsets.join(", ")
    ));
    v.check("period p_m+p_c under constant inputs", stated);
    v
}

fn conflict_config(seed: u64) -> RunConfig {
    RunConfig::from_value(json!({"experiment": "conflict", "seed": seed})).unwrap()
}

fn ac4() -> Verdict {
    let mut tally = [0usize; 4];
    let mut v = Verdict::new();
    for seed in 1..=5u64 {
        let table = run_conflict_suite(&conflict_config(seed), None).unwrap();
        let row = |s| table.row(s).clone();
        let (po, no, pn, np) = (
            row(ConflictStrategy::PosOnly),
            row(ConflictStrategy::NegOnly),
            row(ConflictStrategy::PosThenNeg),
            row(ConflictStrategy::NegThenPos),
        );
        let (mixed, gapt) = (row(ConflictStrategy::Mixed), row(ConflictStrategy::GaptMbe));
        let forget = (pn.l1_pos / po.l1_pos, np.l1_neg / no.l1_neg);
        let dl1 = (gapt.l1_pos - mixed.l1_pos, gapt.l1_neg - mixed.l1_neg);
        let mbe_cut = 1.0 - gapt.mean_mbe() / mixed.mean_mbe();
        let sep_gain = gapt.separation_ratio / mixed.separation_ratio - 1.0;
        let ok = [
            forget.0 >= 5.0 && forget.1 >= 5.0,
            dl1.0 <= 0.02 && dl1.1 <= 0.02,
            mbe_cut >= 0.5,
            sep_gain >= 0.5,
        ];
        for (t, o) in tally.iter_mut().zip(ok) {
            *t += o as usize;
        }
        v.note(format!(
            "seed {seed}: forgetting {:.1}x/{:.1}x, L1 vs mixed {:+.3}/{:+.3}, MBE {:+.0}%, separation {:+.0}%",
            forget.0,
            forget.1,
            dl1.0,
            dl1.1,
            -100.0 * mbe_cut,
            100.0 * sep_gain
        ));
    }
    for (name, n) in [
        "(a) forgetting >= 5x",
        "(b) L1 within +0.02 of mixed",
        "(c) MBE cut >= 50%",
        "(d) separation gain >= 50%",
    ]
    .iter()
    .zip(tally)
    {
        v.check(format!("{name} on {n}/5 seeds"), n >= 4);
    }
    v
}

/// Desk language-model settings shared by the oscillation and collapse runs.
fn lm_config(extra: serde_json::Value) -> RunConfig {
    let mut base = json!({
        "experiment": "lm-pretrain",
        "batch_size": 8,
        "model": {"transformer": {"context_length": 32}}
    });
    if let (Some(b), Some(e)) = (base.as_object_mut(), extra.as_object()) {
        for (k, val) in e {
            if k == "model" {
                b["model"]["transformer"]
                    .as_object_mut()
                    .unwrap()
                    .extend(val["transformer"].as_object().unwrap().clone());
            } else {
                b.insert(k.clone(), val.clone());
            }
        }
    }
    RunConfig::from_value(base).unwrap()
}

const AC5_STEPS: u64 = 5000;

fn ac5() -> Verdict {
    let mut v = Verdict::new();
    let cfg = lm_config(json!({
        "experiment": "grad-scan",
        "total_steps": AC5_STEPS,
        "eval_every": 500,
        "task": {"grad_scan": {"batches": 2}}
    }));
    let t = &cfg.model.transformer;
    v.check(
        format!(
            "setup: {} layers, dim {}, {} steps",
            t.layers, t.model_dim, cfg.total_steps
        ),
        t.layers == 4 && t.model_dim == 64 && cfg.total_steps >= 5000,
    );
    v.check(
        "setup: corpus >= 1 MB",
        cfg.task.corpus.synthetic_bytes >= 1 << 20,
    );
    let mut w = build_workload(&cfg).unwrap();
    let out = run_grad_scan(&cfg, w.as_mut(), None).unwrap();
    v.check("run completed", out.log.summary.status == RunStatus::Completed);

    let groups = out.scan.alignment.len();
    v.check(
        format!("all {groups} groups have statistics"),
        groups > 0 && out.scan.stats.len() == groups,
    );
    for g in &out.scan.stats {
        v.note(format!(
            "{}: zero-crossing rate {:.3}, both signs {}, PSD peak/mean {:.1}",
            g.group, g.stats.zero_crossing_rate, g.has_both_signs, g.stats.psd_peak_to_mean
        ));
        v.check(
            format!("{} oscillates", g.group),
            g.has_both_signs && g.stats.zero_crossing_rate > 0.02,
        );
    }

    let at = |step: usize| &out.log.records[step - 1].mbe;
    let last = out.log.records.len();
    let mut lower = 0;
    for (layer, early) in at(100) {
        let late = at(last)[layer];
        v.note(format!(
            "layer {layer} entropy: step 100 {early:.4}, step {last} {late:.4}"
        ));
        lower += (late < *early) as usize;
    }
    let layers = at(100).len();
    v.note(format!(
        "final val CE {:.3}",
        out.log.summary.final_val_ce.unwrap_or(f64::NAN)
    ));
    v.check(
        format!("final entropy below step 100 in {lower}/{layers} layers"),
        2 * lower > layers,
    );
    v
}

const AC6_STEPS: u64 = 1500;
const AC6_LAMBDA: f64 = 1.0;

/// Trains one desk LM run; also returns the regularized layers.
fn lm_run(seed: u64, mode: ControllerMode, lambda: f64) -> (RunSummary, Vec<usize>) {
    let cfg = lm_config(json!({
        "seed": seed,
        "total_steps": AC6_STEPS,
        "eval_every": 250,
        "controller": mode,
        "gapt": {"lambda_mbe": lambda}
    }));
    let layers = cfg.gapt.regularized_layers.iter().copied().collect();
    (train(&cfg).unwrap().summary, layers)
}

fn ac6() -> Verdict {
    let mut v = Verdict::new();
    let default_lambda = GaptConfig::default().lambda_mbe;
    v.check(
        format!("fixed weight {AC6_LAMBDA} is >= 10x the default {default_lambda}"),
        AC6_LAMBDA >= 10.0 * default_lambda,
    );
    let mut collapse = 0;
    let mut near_baseline = 0;
    for seed in 1..=5u64 {
        let (base, layers) = lm_run(seed, ControllerMode::CeOnly, default_lambda);
        let (gapt, _) = lm_run(seed, ControllerMode::Gapt, default_lambda);
        let (fixed, _) = lm_run(seed, ControllerMode::Lagrangian, AC6_LAMBDA);
        let (mb, mf) = (base.mean_mbe(&layers), fixed.mean_mbe(&layers));
        let ce = |s: &RunSummary| s.final_val_ce.unwrap_or(f64::INFINITY);
        let collapsed = mf < 0.05 * mb && ce(&fixed) > ce(&gapt);
        let close = ce(&gapt) <= ce(&base) * 1.01;
        collapse += collapsed as usize;
        near_baseline += close as usize;
        v.note(format!(
            "seed {seed}: val CE base {:.3} gapt {:.3} fixed {:.3}; regularized MBE base {mb:.4} fixed {mf:.4} ({:.1}%); gapt transitions {}",
            ce(&base),
            ce(&gapt),
            ce(&fixed),
            100.0 * mf / mb,
            gapt.transitions
        ));
    }
    v.check(
        format!("fixed weight collapses above the gated run on {collapse}/5 seeds"),
        collapse == 5,
    );
    v.check(
        format!("gated run within 1% of baseline on {near_baseline}/5 seeds"),
        near_baseline >= 3,
    );
    v
}

const AC7_STEPS: u64 = 2000;

fn arithmetic_run(seed: u64, mode: ControllerMode) -> RunSummary {
    let cfg = RunConfig::from_value(json!({
        "experiment": "arithmetic",
        "seed": seed,
        "controller": mode,
        "total_steps": AC7_STEPS,
        "eval_every": 100
    }))
    .unwrap();
    assert!(cfg.early_stop.enabled);
    assert_eq!(cfg.task.arithmetic.count_train, 100_000);
    train(&cfg).unwrap().summary
}

fn ac7() -> Verdict {
    let mut v = Verdict::new();
    let mut both = 0;
    for seed in 1..=5u64 {
        let base = arithmetic_run(seed, ControllerMode::CeOnly);
        let gapt = arithmetic_run(seed, ControllerMode::Gapt);
        let ood = |s: &RunSummary| s.metrics["test_ood_ce"];
        let (mb, mg) = (base.mean_mbe(&[]), gapt.mean_mbe(&[]));
        let ok = ood(&gapt) <= ood(&base) && mg < mb;
        both += ok as usize;
        v.note(format!(
            "seed {seed}: OOD CE base {:.3} gapt {:.3}; mean MBE base {mb:.4} gapt {mg:.4}; stopped at {:?}/{:?}",
            ood(&base),
            ood(&gapt),
            base.early_stop_step,
            gapt.early_stop_step
        ));
    }
    v.check(
        format!("gated run lower on OOD CE and MBE on {both}/5 seeds"),
        both >= 3,
    );
    v
}

/// A distribution over `n` outcomes with every probability at least `floor`.
/// Gamma weights of random concentration spread the draws from flat to
/// nearly one-hot.
fn constrained(n: usize, floor: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let shape = [0.02, 0.1, 0.5, 1.0, 5.0][rng.random_range(0..5)];
    let gamma = Gamma::new(shape, 1.0).unwrap();
    let mut w: Vec<f64> = (0..n).map(|_| gamma.sample(rng) + 1e-300).collect();
    let total: f64 = w.iter().sum();
    let free = 1.0 - floor * n as f64;
    for x in &mut w {
        *x = floor + free * *x / total;
    }
    w
}

fn ac8() -> Verdict {
    let mut v = Verdict::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let settings = [(4usize, 0.1), (16, 0.01), (64, 0.005), (256, 0.002)];
    let mut violations = 0;
    let mut closest = f64::INFINITY;
    for i in 0..100_000 {
        let (n, floor) = settings[i % settings.len()];
        let bound = min_prob_entropy_bound(n as u64, floor).unwrap();
        let h = shannon_entropy(&constrained(n, floor, &mut rng)).unwrap();
        violations += (bound.exact > h + 1e-12) as usize;
        closest = closest.min(h - bound.exact);
    }
    v.note(format!(
        "smallest sampled entropy minus bound: {closest:+.2e} bits"
    ));
    v.check(
        format!("exact bound dominates 100000 samples ({violations} violations)"),
        violations == 0,
    );

    let boundary = [2u64, 3, 10, 64, 1000]
        .iter()
        .all(|&n| min_prob_entropy_bound(n, 1.0 / n as f64).unwrap().exact == (n as f64).log2());
    v.check("boundary alpha_min = 1/n gives log2 n", boundary);

    let gap = generalization_gap_bound(&BoundInputs {
        samples: 1024,
        layer_entropies: vec![2.0, 3.0],
        alpha: 1.0,
    })
    .unwrap();
    v.check(
        format!("gap bound N=1024, H=[2,3] is {gap} (want 1.25)"),
        (gap - 1.25).abs() <= 1e-12,
    );

    let mut monotone = true;
    for alpha in [1.0, 1.5, 2.0] {
        for k in 4..=12 {
            let mut prev = f64::NEG_INFINITY;
            for i in 0..=32 {
                let h = i as f64 * 0.25;
                let g = generalization_gap_bound(&BoundInputs {
                    samples: 1 << k,
                    layer_entropies: vec![h, 9.0],
                    alpha,
                })
                .unwrap();
                monotone &= g > prev;
                prev = g;
            }
        }
        for i in 0..=32 {
            let mut prev = f64::INFINITY;
            for k in 4..=12 {
                let g = generalization_gap_bound(&BoundInputs {
                    samples: 1 << k,
                    layer_entropies: vec![i as f64 * 0.25],
                    alpha,
                })
                .unwrap();
                monotone &= g < prev;
                prev = g;
            }
        }
    }
    v.check("monotonicity grid", monotone);
    v
}

fn lm_summary(val: f64, layer4: f64) -> RunSummary {
    RunSummary {
        experiment: Experiment::LmPretrain,
        controller: ControllerMode::CeOnly,
        strategy: None,
        seed: 0,
        status: RunStatus::Completed,
        steps_run: 0,
        final_val_ce: Some(val),
        best_val_ce: Some(val),
        final_mbe: BTreeMap::from([(4, layer4)]),
        metrics: BTreeMap::new(),
        separation: None,
        transitions: 0,
        early_stop_step: None,
        abort: None,
        notes: vec![],
    }
}

fn ac9() -> Verdict {
    let mut v = Verdict::new();
    let base = lm_summary(3.31, 0.6094);
    let gapt = lm_summary(3.15, 0.1465);
    let c = compare(&base, &gapt).unwrap();
    let ce = format_pct(
        c.scalars
            .iter()
            .find(|r| r.metric == "final_val_ce")
            .unwrap()
            .change_pct,
    );
    let mbe = format_pct(c.layers.iter().find(|r| r.layer == 4).unwrap().change_pct);
    let text = c.render("baseline", "gapt");
    v.note(format!("CE change {ce}, layer-4 entropy change {mbe}"));
    // 3.31 -> 3.15 is -4.834%, which reads -4.8% at one decimal.
    let one_decimal = ce
        .trim_end_matches('%')
        .parse::<f64>()
        .map(|p| format!("{p:.1}%"));
    v.check(
        "CE pair renders -4.83%, i.e. -4.8% at one decimal",
        ce == "-4.83%" && one_decimal.as_deref() == Ok("-4.8%"),
    );
    v.check("layer-4 pair renders -75.96%", mbe == "-75.96%");
    v.check(
        "rendered table carries both",
        text.contains("-4.83%") && text.contains("-75.96%"),
    );
    v
}
