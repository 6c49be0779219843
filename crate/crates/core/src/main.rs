use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use ticketlab::experiments::{
    find_theta_mem, plot, run_controlled, run_dense, run_edge_popup, run_no_wd_critical, run_pai, run_ticket,
    store, sweep, sweep_csv, ExperimentConfig, ExperimentError, Regime, RunResult, RunSummary, SweepAxis,
};
use ticketlab::pruning::{PruneMethod, PruneSpec};

#[derive(Parser)]
#[command(name = "ticketlab", version, about = "Grokking and lottery-ticket experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; one `seed_<n>` subdirectory per seed.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the dense baseline.
    Train(Common),
    /// Retrain a ticket (or controlled-norm / weight-decay-free variant) from a source run.
    Ticket {
        #[command(flatten)]
        common: Common,
        /// Directory written by `train`.
        #[arg(long)]
        source: PathBuf,
        /// Epoch whose weights give the mask; default is the first checkpoint at or after t_gen.
        #[arg(long)]
        timing: Option<usize>,
        #[arg(long)]
        rate: Option<f64>,
    },
    /// Prune at initialisation and train.
    Pai {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        method: PaiMethod,
        #[arg(long, default_value_t = 0.6)]
        rate: f64,
    },
    /// Continue from a memorising checkpoint under an edge-popup regime.
    Edgepopup {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source: PathBuf,
        #[arg(long, value_enum)]
        regime: Option<EpRegime>,
    },
    /// One ticket per value and seed; writes `sweep.csv`.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        /// Pruning epoch for a rate sweep; default is the grokked checkpoint.
        #[arg(long)]
        timing: Option<usize>,
    },
    /// Recompute a run's summary from its trace and check it against the stored one.
    Metrics {
        #[arg(long)]
        run: PathBuf,
    },
    /// Draw accuracy and norm charts from a run's trace.
    Plot {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PaiMethod {
    Random,
    Snip,
    Grasp,
    Synflow,
}

#[derive(Clone, Copy, ValueEnum)]
enum EpRegime {
    Wd,
    Only,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Rate,
    Timing,
}

fn load_config(c: &Common) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &c.out {
        cfg.out_dir = Some(o.clone());
    }
    if let Some(e) = c.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed_{seed}"))
}

fn out_root(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs"))
}

fn finish(cfg: &ExperimentConfig, run: &RunResult) -> Result<serde_json::Value, ExperimentError> {
    let dir = seed_dir(&out_root(cfg), run.seed);
    run.save(&dir, cfg)?;
    Ok(json!({ "seed": run.seed, "dir": dir, "summary": run.summary }))
}

fn load_source(source: &Path, seed: u64) -> Result<RunResult, ExperimentError> {
    Ok(RunResult::load(&seed_dir(source, seed))?.1)
}

fn execute(cli: Cli) -> Result<serde_json::Value, ExperimentError> {
    match cli.command {
        Command::Train(c) => {
            let cfg = load_config(&c)?.with_regime(Regime::Dense);
            let mut out = Vec::new();
            for &seed in &cfg.seeds {
                out.push(finish(&cfg, &run_dense(&cfg, seed)?)?);
            }
            Ok(json!({ "runs": out }))
        }
        Command::Ticket {
            common,
            source,
            timing,
            rate,
        } => {
            let mut cfg = load_config(&common)?;
            if !matches!(cfg.regime, Regime::Ticket | Regime::ControlledDense | Regime::NoWdCritical) {
                cfg.regime = Regime::Ticket;
            }
            let spec = cfg.prune;
            let t = timing.or(spec.and_then(|p| p.timing));
            let k = rate.or(spec.map(|p| p.rate)).unwrap_or(0.6);
            let mut out = Vec::new();
            for &seed in &cfg.seeds {
                let src = load_source(&source, seed)?;
                let run = match cfg.regime {
                    Regime::ControlledDense => run_controlled(&cfg, &src, t, k, cfg.norm)?,
                    Regime::NoWdCritical => run_no_wd_critical(&cfg, &src, t, k)?,
                    _ => run_ticket(&cfg, &src, t, k)?,
                };
                let mut v = finish(&cfg, &run)?;
                if cfg.regime == Regime::NoWdCritical {
                    v["generalised"] = json!(run.summary.t_gen.is_some());
                }
                out.push(v);
            }
            Ok(json!({ "runs": out }))
        }
        Command::Pai { common, method, rate } => {
            let cfg = load_config(&common)?.with_regime(Regime::Pai);
            let method = match method {
                PaiMethod::Random => PruneMethod::Random,
                PaiMethod::Snip => PruneMethod::Snip,
                PaiMethod::Grasp => PruneMethod::Grasp,
                PaiMethod::Synflow => PruneMethod::Synflow,
            };
            let mut out = Vec::new();
            for &seed in &cfg.seeds {
                out.push(finish(&cfg, &run_pai(&cfg, seed, method, rate)?)?);
            }
            Ok(json!({ "runs": out }))
        }
        Command::Edgepopup {
            common,
            source,
            regime,
        } => {
            let mut cfg = load_config(&common)?;
            cfg.regime = match regime {
                Some(EpRegime::Wd) => Regime::EdgePopupWd,
                Some(EpRegime::Only) => Regime::EdgePopupOnly,
                Some(EpRegime::Both) => Regime::EdgePopupBoth,
                None if cfg.regime.is_edge_popup() => cfg.regime,
                None => Regime::EdgePopupOnly,
            };
            let mut out = Vec::new();
            for &seed in &cfg.seeds {
                let src = load_source(&source, seed)?;
                let theta = find_theta_mem(&src, cfg.edge_popup.theta_mem_train, cfg.edge_popup.theta_mem_test)?;
                let run = run_edge_popup(&cfg, &theta, seed, cfg.regime)?;
                let mut v = finish(&cfg, &run)?;
                v["theta_mem_epoch"] = json!(theta.epoch);
                v["report"] = json!(cfg
                    .edge_popup
                    .report_epochs
                    .iter()
                    .map(|&e| json!({ "epoch": e, "test_acc": run.test_acc_at(e) }))
                    .collect::<Vec<_>>());
                out.push(v);
            }
            Ok(json!({ "runs": out }))
        }
        Command::Sweep {
            common,
            source,
            axis,
            values,
            timing,
        } => {
            let mut cfg = load_config(&common)?;
            if timing.is_some() {
                cfg.prune = Some(PruneSpec {
                    timing,
                    ..cfg.prune_spec()
                });
            }
            let sources = cfg
                .seeds
                .iter()
                .map(|&s| load_source(&source, s))
                .collect::<Result<Vec<_>, _>>()?;
            let axis = match axis {
                Axis::Rate => SweepAxis::PruneRate,
                Axis::Timing => SweepAxis::PruneTiming,
            };
            let rows = sweep(&cfg, &sources, axis, &values)?;
            let path = out_root(&cfg).join("sweep.csv");
            store::save_text(&path, &sweep_csv(&rows))?;
            Ok(json!({ "csv": path, "rows": rows }))
        }
        Command::Metrics { run } => {
            let (cfg, result) = RunResult::load(&run)?;
            let recomputed = RunSummary::from_trace(&result.trace, cfg.threshold);
            let consistent = result.summary.matches_trace(&result.trace, cfg.threshold);
            if !consistent {
                return Err(ExperimentError::Config(format!(
                    "stored summary in {} disagrees with its trace",
                    run.display()
                )));
            }
            Ok(json!({
                "config_hash": result.config_hash,
                "summary": recomputed,
                "snapshots": result.trace.snapshots,
            }))
        }
        Command::Plot { run, out } => {
            let (_, result) = RunResult::load(&run)?;
            let dir = out.unwrap_or_else(|| run.clone());
            let acc = dir.join("accuracy.svg");
            let norm = dir.join("norm.svg");
            store::save_text(&acc, &plot::accuracy_chart("accuracy", &result.trace))?;
            store::save_text(&norm, &plot::norm_chart("L2 norm", &result.trace))?;
            Ok(json!({ "accuracy": acc, "norm": norm }))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let kind = match &e {
                ExperimentError::Config(_) | ExperimentError::Json(_) | ExperimentError::Task(_) => "config",
                ExperimentError::HashMismatch { .. } => "hash_mismatch",
                ExperimentError::Store(_) => "io",
                ExperimentError::RegimeMismatch { .. } => "regime_mismatch",
                ExperimentError::MissingCheckpoint(_) | ExperimentError::NoThetaMem { .. } => "missing_checkpoint",
                _ => "run",
            };
            eprintln!("{}", json!({ "error": kind, "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
