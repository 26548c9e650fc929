use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use iblm_core::entropy::{
    generalization_gap_bound, min_prob_entropy_bound, shannon_entropy, spectrum_report, BoundInputs,
    MbeConfig,
};
use iblm_core::tasks::{gen_multiplication_data, synthetic_corpus};
use iblm_core::Tensor;
use iblm_harness::config::ConfigError;
use iblm_harness::report::{compare, load_summary};
use iblm_harness::suite::run_conflict_suite;
use iblm_harness::workload::{build_workload, conflict_datasets};
use iblm_harness::{run, run_grad_scan, Experiment, RunConfig, RunError, RunLog, RunStatus};
use thiserror::Error;

#[derive(Parser)]
#[command(
    name = "iblm",
    version,
    about = "Phase-gated entropy-regularized training experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON run config; omitted fields take the experiment's defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override such as `optimizer.learning_rate=1e-3`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write task datasets to disk.
    GenData {
        #[command(subcommand)]
        kind: GenKind,
    },
    /// Train one run and write its step log and summary.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory; defaults to the config's output_dir, then runs/<experiment>-<controller>-seed<n>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the byte-level LM with per-step CE and MBE gradient snapshots.
    GradScan {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory; defaults to the config's output_dir, then runs/<experiment>-<controller>-seed<n>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train all six conflicting-teacher strategies from one initialization.
    ConflictSuite {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory; defaults to the config's output_dir, then runs/<experiment>-<controller>-seed<n>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare candidate runs against a baseline run.
    Report {
        /// Baseline run directory or summary.json.
        baseline: PathBuf,
        /// Candidate run directories or summary files.
        #[arg(required = true)]
        candidates: Vec<PathBuf>,
        /// Where to write report.csv and mbe_layers.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Entropy and bound calculators.
    Bounds {
        #[command(subcommand)]
        which: BoundKind,
    },
}

#[derive(Subcommand)]
enum GenKind {
    /// Multiplication splits plus manifest.json.
    Arithmetic {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory to write into.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and test clouds with their teacher targets, one CSV per task.
    Conflict {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory to write into.
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthetic English-like byte corpus.
    Corpus {
        /// Corpus size in bytes.
        #[arg(long, default_value_t = 1 << 20)]
        bytes: usize,
        /// Generator seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// File to write.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum BoundKind {
    /// Entropy floor for distributions whose every probability is at least `alpha_min`.
    MinProb {
        #[arg(long)]
        n: u64,
        #[arg(long)]
        alpha_min: f64,
    },
    /// Generalization-gap expression from per-layer entropies in bits.
    Gap {
        #[arg(long)]
        samples: u64,
        #[arg(long, value_delimiter = ',', required = true)]
        entropies: Vec<f64>,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
    },
    /// Shannon entropy in bits of a probability vector read from stdin.
    Shannon,
    /// MBE of a matrix read from stdin, one whitespace-separated row per line.
    Mbe {
        #[arg(long, default_value_t = 2.0)]
        alpha: f64,
        #[arg(long)]
        normalize: bool,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("run aborted: {0}")]
    Aborted(String),
    #[error("bad input: {0}")]
    Input(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Entropy(#[from] iblm_core::entropy::EntropyError),
    #[error(transparent)]
    Task(#[from] iblm_core::tasks::TaskError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Run(RunError::Config(_)) => 2,
            CliError::Aborted(_) | CliError::Run(RunError::NonFinite(_)) => 3,
            _ => 1,
        }
    }
}

fn load(cfg: &ConfigArgs, forced: Option<Experiment>) -> Result<RunConfig, ConfigError> {
    let mut sets = Vec::with_capacity(cfg.set.len() + 1);
    if let Some(e) = forced {
        sets.push(format!("experiment={}", e.as_str()));
    }
    sets.extend(cfg.set.iter().cloned());
    RunConfig::load(cfg.config.as_deref(), &sets)
}

fn output_dir(config: &RunConfig, out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| config.output_dir.clone()).unwrap_or_else(|| {
        PathBuf::from("runs").join(format!(
            "{}-{}-seed{}",
            config.experiment.as_str(),
            config.controller.as_str(),
            config.seed
        ))
    })
}

fn print_run(log: &RunLog, dir: &Path) -> Result<(), CliError> {
    let s = &log.summary;
    println!("run directory: {}", dir.display());
    println!("status: {} after {} steps", s.status.as_str(), s.steps_run);
    if let Some(v) = s.final_val_ce {
        println!("final val CE: {v:.4}");
    }
    for (l, v) in &s.final_mbe {
        println!("final MBE layer {l}: {v:.4}");
    }
    for (k, v) in &s.metrics {
        println!("{k}: {v:.4}");
    }
    if s.status == RunStatus::Aborted {
        let what = s
            .abort
            .as_ref()
            .map(|a| {
                format!(
                    "step {} ({}): {} = {}",
                    a.step,
                    a.phase.as_str(),
                    a.quantity,
                    a.value
                )
            })
            .unwrap_or_default();
        return Err(CliError::Aborted(what));
    }
    Ok(())
}

fn train_cmd(cfg: &ConfigArgs, out: Option<PathBuf>, forced: Option<Experiment>) -> Result<(), CliError> {
    let mut config = load(cfg, forced)?;
    let dir = output_dir(&config, out);
    config.output_dir = Some(dir.clone());
    let mut workload = build_workload(&config)?;
    let log = if config.experiment == Experiment::GradScan {
        let scan = run_grad_scan(&config, workload.as_mut(), Some(&dir))?;
        for g in &scan.scan.stats {
            println!(
                "{}: std {:.4}, zero-crossing rate {:.4}, both signs {}",
                g.group, g.stats.std, g.stats.zero_crossing_rate, g.has_both_signs
            );
        }
        scan.log
    } else {
        run(&config, workload.as_mut(), Some(&dir))?
    };
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&config)?)?;
    print_run(&log, &dir)
}

fn write_task_csv(path: &Path, x: &Tensor, y: &Tensor) -> Result<(), CliError> {
    let (n, dx) = x
        .dims2()
        .ok_or_else(|| CliError::Input("inputs are not a matrix".into()))?;
    let (_, dy) = y
        .dims2()
        .ok_or_else(|| CliError::Input("targets are not a matrix".into()))?;
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<String> = (0..dx)
        .map(|j| format!("x{j}"))
        .chain((0..dy).map(|j| format!("y{j}")))
        .collect();
    w.write_record(&header)?;
    for i in 0..n {
        let row: Vec<String> = x.row(i).iter().chain(y.row(i)).map(f64::to_string).collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn gen_data(kind: GenKind) -> Result<(), CliError> {
    match kind {
        GenKind::Arithmetic { cfg, out } => {
            let config = load(&cfg, Some(Experiment::Arithmetic))?;
            let spec = &config.task.arithmetic;
            gen_multiplication_data(spec)?.write(spec, &out)?;
            println!("wrote arithmetic splits to {}", out.display());
        }
        GenKind::Conflict { cfg, out } => {
            let config = load(&cfg, Some(Experiment::Conflict))?;
            let (_, train, test) = conflict_datasets(&config)?;
            std::fs::create_dir_all(&out)?;
            for (name, data) in [("train", &train), ("test", &test)] {
                write_task_csv(&out.join(format!("{name}_pos.csv")), &data.x1, &data.y1)?;
                write_task_csv(&out.join(format!("{name}_neg.csv")), &data.x2, &data.y2)?;
            }
            println!("wrote conflict data to {}", out.display());
        }
        GenKind::Corpus { bytes, seed, out } => {
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(&out, synthetic_corpus(bytes, seed))?;
            println!("wrote {bytes} bytes to {}", out.display());
        }
    }
    Ok(())
}

fn read_numbers(text: &str) -> Result<Vec<Vec<f64>>, CliError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(|c: char| c.is_whitespace() || c == ',')
                .filter(|t| !t.is_empty())
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| CliError::Input(format!("not a number: {t:?}")))
                })
                .collect()
        })
        .collect()
}

fn read_stdin() -> Result<String, CliError> {
    let mut s = String::new();
    std::io::stdin().read_to_string(&mut s)?;
    Ok(s)
}

fn bounds(which: BoundKind) -> Result<(), CliError> {
    let value = match which {
        BoundKind::MinProb { n, alpha_min } => serde_json::to_value(min_prob_entropy_bound(n, alpha_min)?)?,
        BoundKind::Gap {
            samples,
            entropies,
            alpha,
        } => serde_json::json!({
            "gap": generalization_gap_bound(&BoundInputs {
                samples,
                layer_entropies: entropies,
                alpha,
            })?
        }),
        BoundKind::Shannon => {
            let p: Vec<f64> = read_numbers(&read_stdin()?)?.into_iter().flatten().collect();
            serde_json::json!({ "bits": shannon_entropy(&p)? })
        }
        BoundKind::Mbe { alpha, normalize } => {
            let rows = read_numbers(&read_stdin()?)?;
            let r = Tensor::from_rows(&rows).map_err(|e| CliError::Input(e.to_string()))?;
            let mut cfg = MbeConfig::with_alpha(alpha);
            if normalize {
                cfg = cfg.normalized();
            }
            serde_json::to_value(spectrum_report(&r, &cfg)?)?
        }
    };
    println!("{value}");
    Ok(())
}

fn report(baseline: &Path, candidates: &[PathBuf], out: Option<PathBuf>) -> Result<(), CliError> {
    let base = load_summary(baseline)?;
    let label = |p: &Path| {
        p.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| p.display().to_string())
    };
    for (i, c) in candidates.iter().enumerate() {
        let cmp = compare(&base, &load_summary(c)?)?;
        print!("{}", cmp.render(&label(baseline), &label(c)));
        if let Some(dir) = &out {
            let dir = if candidates.len() == 1 {
                dir.clone()
            } else {
                dir.join(format!("{i}-{}", label(c)))
            };
            cmp.write_csv(&dir)?;
        }
        if i + 1 < candidates.len() {
            println!();
        }
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { kind } => gen_data(kind),
        Command::Train { cfg, out } => train_cmd(&cfg, out, None),
        Command::GradScan { cfg, out } => train_cmd(&cfg, out, Some(Experiment::GradScan)),
        Command::ConflictSuite { cfg, out } => {
            let config = load(&cfg, Some(Experiment::Conflict))?;
            let dir = output_dir(&config, out);
            let table = run_conflict_suite(&config, Some(&dir))?;
            print!("{}", table.render());
            Ok(())
        }
        Command::Report {
            baseline,
            candidates,
            out,
        } => report(&baseline, &candidates, out),
        Command::Bounds { which } => bounds(which),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
