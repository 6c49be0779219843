//! Config-driven runs: dense baselines, lottery tickets, norm-controlled
//! dense models, pruning at initialisation, edge-popup regimes, sweeps and
//! the weight-decay-free critical ratio.

pub mod plot;
pub mod store;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics::{
    accuracy, avg_path_length, build_relational_graph, clustering_coefficient, fourier_entropy, jaccard_distance,
    norms, ramanujan_gap, regression_accuracy, threshold_times, weighted_spectral_gap, w_inproj, EpochRecord,
    LayerStructure, MetricsError, NonTrivialEigen, StructuralSnapshot, ThresholdTimes, TrainingTrace,
};
use crate::model::{
    backward, batch_loss, forward, init_params, Layer, LossKind, MaskSet, ModelDims, ModelError, ModelParams,
};
use crate::numerics::{Matrix, SeededRng};
use crate::optim::{adamw_step, adamw_update, AdamWConfig, AdamWState, OptimError};
use crate::pruning::{
    controlled_dense, init_edge_popup_scores, magnitude_mask, pai_mask, EdgePopup, NormKind, PruneError, PruneMethod,
    PruneSpec, ScoreOptimizer,
};
use crate::tasks::{Batch, Dataset, TaskError, TaskKind, TaskSpec, Targets};
use store::{RunLayout, StoreError};

/// Absolute error under which a regression prediction counts as correct.
pub const REGRESSION_TOLERANCE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("source run has no checkpoint at epoch {0}")]
    MissingCheckpoint(usize),
    #[error("source run never generalised; no grokked checkpoint available")]
    NotGeneralised,
    #[error("no checkpoint with train accuracy >= {train} and test accuracy <= {test}")]
    NoThetaMem { train: f64, test: f64 },
    #[error("regime mismatch: operation needs {expected}, config has {got:?}")]
    RegimeMismatch { expected: String, got: Regime },
    #[error("config hash mismatch in {path}: expected {expected}, found {found}")]
    HashMismatch { path: PathBuf, expected: String, found: String },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Dense,
    Ticket,
    ControlledDense,
    Pai,
    EdgePopupWd,
    EdgePopupOnly,
    EdgePopupBoth,
    NoWdCritical,
}

impl Regime {
    pub fn is_edge_popup(self) -> bool {
        matches!(self, Regime::EdgePopupWd | Regime::EdgePopupOnly | Regime::EdgePopupBoth)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_emb: usize,
    pub d_hid: usize,
    /// Initialisation scale κ in `N(0, κ/√fan_in)`.
    pub kappa: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_emb: 500,
            d_hid: 48,
            kappa: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StructureConfig {
    /// Magnitude rate for the structural mask of unmasked runs.
    pub snapshot_rate: f64,
    pub graph_nodes: usize,
    pub mu: NonTrivialEigen,
}

impl Default for StructureConfig {
    fn default() -> Self {
        Self {
            snapshot_rate: 0.6,
            graph_nodes: 48,
            mu: NonTrivialEigen::ThirdLargest,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EdgePopupConfig {
    pub rate: f64,
    pub optimizer: ScoreOptimizer,
    /// Epochs at which accuracy and graph metrics are reported.
    pub report_epochs: Vec<usize>,
    pub theta_mem_train: f64,
    pub theta_mem_test: f64,
}

impl Default for EdgePopupConfig {
    fn default() -> Self {
        Self {
            rate: 0.6,
            optimizer: ScoreOptimizer::default(),
            report_epochs: vec![600, 1000, 1400, 2000],
            theta_mem_train: 0.99,
            theta_mem_test: 0.20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    PruneRate,
    PruneTiming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub regime: Regime,
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    /// Accuracy threshold `P` in percent.
    pub threshold: f64,
    pub snapshot_interval: usize,
    /// Defaults to the snapshot interval.
    pub checkpoint_interval: Option<usize>,
    /// Stop this many epochs after test accuracy first crosses the threshold.
    pub early_stop_patience: Option<usize>,
    pub prune: Option<PruneSpec>,
    pub norm: NormKind,
    pub edge_popup: EdgePopupConfig,
    pub structure: StructureConfig,
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Dense,
            task: TaskSpec::default(),
            model: ModelConfig::default(),
            optimizer: AdamWConfig::default(),
            epochs: 40_000,
            threshold: 95.0,
            snapshot_interval: 2000,
            checkpoint_interval: None,
            early_stop_patience: None,
            prune: None,
            norm: NormKind::L2,
            edge_popup: EdgePopupConfig::default(),
            structure: StructureConfig::default(),
            seeds: vec![0],
            out_dir: None,
            workers: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&store::load_text(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn with_regime(&self, regime: Regime) -> Self {
        Self {
            regime,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.seeds.is_empty() {
            return Err(ExperimentError::Config("seeds must be nonempty".into()));
        }
        if self.model.d_emb == 0 || self.model.d_hid == 0 {
            return Err(ExperimentError::Config("model widths must be positive".into()));
        }
        if !(self.model.kappa.is_finite() && self.model.kappa > 0.0) {
            return Err(ExperimentError::Config("kappa must be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 100.0) {
            return Err(ExperimentError::Config("threshold must lie in (0, 100)".into()));
        }
        if self.checkpoint_interval == Some(0) {
            return Err(ExperimentError::Config("checkpoint_interval must be positive".into()));
        }
        if let Some(p) = &self.prune {
            p.validate(self.epochs)?;
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.weight_decay >= 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2))
        {
            return Err(ExperimentError::Config("optimizer hyperparameters out of range".into()));
        }
        crate::pruning::PruneSpec {
            method: PruneMethod::EdgePopup,
            rate: self.edge_popup.rate,
            timing: None,
            seed: 0,
        }
        .validate(self.epochs)?;
        if self.structure.graph_nodes < 2 {
            return Err(ExperimentError::Config("graph_nodes must be >= 2".into()));
        }
        Ok(())
    }

    fn require(&self, expected: &[Regime]) -> Result<()> {
        if expected.contains(&self.regime) {
            Ok(())
        } else {
            Err(ExperimentError::RegimeMismatch {
                expected: expected.iter().map(|r| format!("{r:?}")).collect::<Vec<_>>().join(" or "),
                got: self.regime,
            })
        }
    }

    pub fn prune_spec(&self) -> PruneSpec {
        self.prune.unwrap_or(PruneSpec {
            method: PruneMethod::Magnitude,
            rate: 0.6,
            timing: None,
            seed: 0,
        })
    }

    pub fn dims(&self, data: &Dataset) -> ModelDims {
        ModelDims {
            d_in: data.input_dim(),
            d_emb: self.model.d_emb,
            d_hid: self.model.d_hid,
            d_out: data.output_dim(),
        }
    }

    /// The task spec with its seed replaced by the run seed.
    pub fn task_for(&self, seed: u64) -> TaskSpec {
        TaskSpec {
            seed,
            ..self.task.clone()
        }
    }

    pub fn dataset(&self, seed: u64) -> Result<Dataset> {
        Ok(self.task_for(seed).generate()?)
    }

    /// θ₀ for a seed; every regime of the same seed shares it.
    pub fn initial_params(&self, data: &Dataset, seed: u64) -> Result<ModelParams> {
        let mut rng = SeededRng::new(seed).derive(1);
        Ok(init_params(self.dims(data), self.model.kappa, &mut rng)?)
    }

    /// SHA-256 over the canonical JSON of this config for one seed, with the
    /// output directory and worker count left out.
    pub fn cell_hash(&self, seed: u64) -> String {
        let cell = Self {
            seeds: vec![seed],
            out_dir: None,
            workers: 1,
            ..self.clone()
        };
        let json = serde_json::to_string(&cell).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    fn checkpoint_every(&self) -> usize {
        self.checkpoint_interval.unwrap_or(self.snapshot_interval)
    }
}

pub fn loss_for(data: &Dataset) -> LossKind {
    match data.kind {
        TaskKind::PolyRegression => LossKind::Mse,
        _ => LossKind::CrossEntropy,
    }
}

pub fn batch_accuracy(logits: &Matrix, targets: &Targets) -> f64 {
    match targets {
        Targets::Classes(c) => accuracy(logits, c),
        Targets::Values(v) => regression_accuracy(logits, v, REGRESSION_TOLERANCE),
    }
}

/// How the mask evolves during a run.
#[derive(Debug, Clone)]
pub enum MaskMode {
    Dense,
    Fixed(MaskSet),
    EdgePopup(Box<EdgePopup>),
}

impl MaskMode {
    fn current(&self) -> Option<MaskSet> {
        match self {
            MaskMode::Dense => None,
            MaskMode::Fixed(m) => Some(m.clone()),
            MaskMode::EdgePopup(ep) => Some(ep.mask()),
        }
    }
}

/// Everything one training loop needs.
#[derive(Debug, Clone)]
pub struct TrainPlan {
    pub init: ModelParams,
    pub mask: MaskMode,
    pub update_weights: bool,
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    pub threshold: f64,
    pub snapshot_interval: usize,
    pub snapshot_epochs: Vec<usize>,
    pub checkpoint_interval: usize,
    pub early_stop_patience: Option<usize>,
    pub structure: StructureConfig,
}

impl TrainPlan {
    pub fn from_config(cfg: &ExperimentConfig, init: ModelParams, mask: MaskMode) -> Self {
        Self {
            init,
            mask,
            update_weights: true,
            optimizer: cfg.optimizer,
            epochs: cfg.epochs,
            threshold: cfg.threshold,
            snapshot_interval: cfg.snapshot_interval,
            snapshot_epochs: Vec::new(),
            checkpoint_interval: cfg.checkpoint_every(),
            early_stop_patience: cfg.early_stop_patience,
            structure: cfg.structure,
        }
    }

    fn is_snapshot(&self, e: usize) -> bool {
        (self.snapshot_interval > 0 && e.is_multiple_of(self.snapshot_interval)) || self.snapshot_epochs.contains(&e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub t_mem: Option<usize>,
    pub t_gen: Option<usize>,
    pub tau_grok: Option<f64>,
    pub final_train_acc: Option<f64>,
    pub final_test_acc: Option<f64>,
    pub epochs_run: usize,
    pub stopped_early: bool,
    /// Reason the run was cut short by divergence.
    pub aborted: Option<String>,
}

impl RunSummary {
    pub fn from_trace(trace: &TrainingTrace, threshold: f64) -> Self {
        let ThresholdTimes { t_mem, t_gen, tau_grok } = threshold_times(trace, threshold);
        let last = trace.records.last();
        Self {
            t_mem,
            t_gen,
            tau_grok,
            final_train_acc: last.map(|r| r.train_acc),
            final_test_acc: last.map(|r| r.test_acc),
            epochs_run: last.map_or(0, |r| r.epoch),
            stopped_early: false,
            aborted: None,
        }
    }

    /// True when the fields derivable from a trace agree with `trace`.
    pub fn matches_trace(&self, trace: &TrainingTrace, threshold: f64) -> bool {
        let re = Self::from_trace(trace, threshold);
        re.t_mem == self.t_mem
            && re.t_gen == self.t_gen
            && re.tau_grok == self.tau_grok
            && re.final_train_acc == self.final_train_acc
            && re.final_test_acc == self.final_test_acc
            && re.epochs_run == self.epochs_run
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub regime: Regime,
    pub seed: u64,
    pub config_hash: String,
    pub trace: TrainingTrace,
    pub summary: RunSummary,
    pub init: ModelParams,
    /// Parameters at every checkpoint epoch, ascending; epoch 0 is θ₀.
    pub checkpoints: Vec<(usize, ModelParams)>,
    /// Mask in force at every snapshot epoch (absent for unmasked runs).
    pub masks: Vec<(usize, MaskSet)>,
    pub final_params: ModelParams,
    pub final_mask: Option<MaskSet>,
}

impl RunResult {
    pub fn checkpoint(&self, epoch: usize) -> Option<&ModelParams> {
        self.checkpoints
            .binary_search_by_key(&epoch, |(e, _)| *e)
            .ok()
            .map(|i| &self.checkpoints[i].1)
    }

    pub fn test_acc_at(&self, epoch: usize) -> Option<f64> {
        self.trace.record_at(epoch).map(|r| r.test_acc)
    }

    /// Writes the run directory; refuses to overwrite a run made from a
    /// different config.
    pub fn save(&self, dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
        let layout = RunLayout::new(dir);
        check_manifest(&layout, &self.config_hash)?;
        let dims = self.init.dims;
        store::save_text(&layout.config(), &cfg.to_json())?;
        let manifest = serde_json::json!({
            "config_hash": self.config_hash,
            "regime": self.regime,
            "seed": self.seed,
            "checkpoints": self.checkpoints.iter().map(|(e, _)| e).collect::<Vec<_>>(),
        });
        store::save_text(&layout.manifest(), &serde_json::to_string_pretty(&manifest)?)?;
        store::save_text(&layout.trace(), &self.trace.to_csv(Some(&format!("config_hash={}", self.config_hash))))?;
        let summary = serde_json::json!({ "config_hash": self.config_hash, "summary": self.summary });
        store::save_text(&layout.summary(), &serde_json::to_string_pretty(&summary)?)?;
        for s in &self.trace.snapshots {
            let body = serde_json::json!({ "config_hash": self.config_hash, "snapshot": s });
            store::save_text(&layout.snapshot(s.epoch), &serde_json::to_string_pretty(&body)?)?;
        }
        store::save_checkpoint(&layout.init_checkpoint(), &self.init)?;
        for (e, p) in &self.checkpoints {
            store::save_checkpoint(&layout.checkpoint(*e), p)?;
        }
        store::save_checkpoint(&layout.final_checkpoint(), &self.final_params)?;
        for (e, m) in &self.masks {
            store::save_mask(&layout.mask(&format!("epoch_{e:06}")), &dims, m)?;
        }
        if let Some(m) = &self.final_mask {
            store::save_mask(&layout.mask("final"), &dims, m)?;
        }
        Ok(())
    }

    /// Reads a run directory written by [`RunResult::save`].
    pub fn load(dir: &Path) -> Result<(ExperimentConfig, RunResult)> {
        let layout = RunLayout::new(dir);
        let cfg: ExperimentConfig = serde_json::from_str(&store::load_text(&layout.config())?)?;
        let manifest: serde_json::Value = serde_json::from_str(&store::load_text(&layout.manifest())?)?;
        let seed = manifest["seed"]
            .as_u64()
            .ok_or_else(|| ExperimentError::Config("manifest lacks a seed".into()))?;
        let regime: Regime = serde_json::from_value(manifest["regime"].clone())?;
        let hash = manifest["config_hash"].as_str().unwrap_or_default().to_string();
        let expected = cfg.cell_hash(seed);
        if hash != expected {
            return Err(ExperimentError::HashMismatch {
                path: layout.manifest(),
                expected,
                found: hash,
            });
        }
        let trace_text = store::load_text(&layout.trace())?;
        check_trace_hash(&trace_text, &expected, &layout.trace())?;
        let mut trace = TrainingTrace::from_csv(&trace_text)?;
        let mut snaps_epochs: Vec<usize> = Vec::new();
        if let Ok(rd) = std::fs::read_dir(dir.join("snapshots")) {
            for e in rd.flatten() {
                let name = e.file_name().into_string().unwrap_or_default();
                if let Some(n) = name.strip_prefix("epoch_").and_then(|s| s.strip_suffix(".json")) {
                    if let Ok(n) = n.parse() {
                        snaps_epochs.push(n);
                    }
                }
            }
        }
        snaps_epochs.sort_unstable();
        for e in snaps_epochs {
            let v: serde_json::Value = serde_json::from_str(&store::load_text(&layout.snapshot(e))?)?;
            trace.snapshots.push(serde_json::from_value(v["snapshot"].clone())?);
        }
        let summary_v: serde_json::Value = serde_json::from_str(&store::load_text(&layout.summary())?)?;
        let summary: RunSummary = serde_json::from_value(summary_v["summary"].clone())?;
        let init = store::load_checkpoint(&layout.init_checkpoint())?;
        let checkpoints = layout
            .checkpoint_epochs()
            .into_iter()
            .map(|e| Ok((e, store::load_checkpoint(&layout.checkpoint(e))?)))
            .collect::<Result<Vec<_>>>()?;
        let final_params = store::load_checkpoint(&layout.final_checkpoint())?;
        let final_mask = if layout.mask("final").exists() {
            Some(store::load_mask(&layout.mask("final"))?)
        } else {
            None
        };
        let run = RunResult {
            regime,
            seed,
            config_hash: hash,
            trace,
            summary,
            init,
            checkpoints,
            masks: Vec::new(),
            final_params,
            final_mask,
        };
        Ok((cfg, run))
    }
}

fn check_manifest(layout: &RunLayout, hash: &str) -> Result<()> {
    let path = layout.manifest();
    if !path.exists() {
        return Ok(());
    }
    let v: serde_json::Value = serde_json::from_str(&store::load_text(&path)?)?;
    let found = v["config_hash"].as_str().unwrap_or_default();
    if found != hash {
        return Err(ExperimentError::HashMismatch {
            path,
            expected: hash.to_string(),
            found: found.to_string(),
        });
    }
    Ok(())
}

/// Checks the `# config_hash=` line of a trace file.
pub fn check_trace_hash(text: &str, expected: &str, path: &Path) -> Result<()> {
    let found = text
        .lines()
        .find_map(|l| l.strip_prefix("# config_hash="))
        .unwrap_or_default()
        .trim();
    if found != expected {
        return Err(ExperimentError::HashMismatch {
            path: path.to_path_buf(),
            expected: expected.to_string(),
            found: found.to_string(),
        });
    }
    Ok(())
}

/// Mask used for structural statistics: the run's own mask, or the
/// magnitude mask at the configured rate for unmasked runs.
fn structural_mask(params: &ModelParams, mask: Option<&MaskSet>, rate: f64) -> Result<MaskSet> {
    match mask {
        Some(m) => Ok(m.clone()),
        None => Ok(magnitude_mask(params, rate)?),
    }
}

/// Structural statistics of one parameter state.
pub fn structural_snapshot(
    epoch: usize,
    params: &ModelParams,
    run_mask: Option<&MaskSet>,
    previous: Option<&MaskSet>,
    structure: &StructureConfig,
    accuracies: (f64, f64),
) -> Result<(StructuralSnapshot, MaskSet)> {
    let mask = structural_mask(params, run_mask, structure.snapshot_rate)?;
    let mut layers = Vec::with_capacity(4);
    for l in Layer::ALL {
        let jaccard = match previous {
            Some(prev) => Some(jaccard_distance(&prev[l], &mask[l])?),
            None => None,
        };
        let spectral_gap = weighted_spectral_gap(&params[l], Some(&mask[l]))?;
        let ramanujan = if mask.kept(l) == 0 {
            0.0
        } else {
            ramanujan_gap(&mask[l], structure.mu)?
        };
        layers.push((
            l.name().to_string(),
            LayerStructure {
                jaccard,
                spectral_gap,
                ramanujan_gap: ramanujan,
            },
        ));
    }
    let fe = fourier_entropy(&w_inproj(params, run_mask)?)?;
    let graph = build_relational_graph(&mask, structure.graph_nodes)?;
    let snap = StructuralSnapshot {
        epoch,
        train_acc: accuracies.0,
        test_acc: accuracies.1,
        layers,
        fe,
        path_length: avg_path_length(&graph)?,
        clustering: clustering_coefficient(&graph),
    };
    Ok((snap, mask))
}

/// Full-batch training loop shared by every regime.
///
/// Record `e` of the trace describes the parameters after `e` updates;
/// snapshots and checkpoints at epoch 0 describe the starting point.
pub fn train(plan: TrainPlan, data: &Dataset, regime: Regime, seed: u64, config_hash: String) -> Result<RunResult> {
    let train_set: Batch = data.train();
    let test_set: Batch = data.test();
    let loss = loss_for(data);
    let TrainPlan { init, mut mask, .. } = plan.clone();
    let mut params = init.clone();
    let mut adam = AdamWState::new(plan.optimizer, &params.weights);
    let mut trace = TrainingTrace::default();
    let mut checkpoints = Vec::new();
    let mut masks = Vec::new();
    let mut prev_struct: Option<MaskSet> = None;
    let mut stopped_early = false;
    let mut aborted = None;
    let level = plan.threshold / 100.0;
    let mut t_gen: Option<usize> = None;

    for e in 0..=plan.epochs {
        let current = mask.current();
        let cache = forward(&params, current.as_ref(), &train_set.inputs)?;
        let train_loss = batch_loss(&cache, &train_set.targets, loss)?;
        let train_acc = batch_accuracy(&cache.logits, &train_set.targets);
        let snapshot_due = plan.is_snapshot(e);
        let need_test = e > 0 || snapshot_due;
        let (test_loss, test_acc) = if need_test {
            let tc = forward(&params, current.as_ref(), &test_set.inputs)?;
            (batch_loss(&tc, &test_set.targets, loss)?, batch_accuracy(&tc.logits, &test_set.targets))
        } else {
            (f64::NAN, f64::NAN)
        };
        if !train_loss.is_finite() || (need_test && !test_loss.is_finite()) {
            aborted = Some(format!("non-finite loss at epoch {e}"));
            break;
        }
        if e > 0 {
            let (l1, l2) = norms(&params, current.as_ref());
            trace.push(EpochRecord {
                epoch: e,
                train_loss,
                test_loss,
                train_acc,
                test_acc,
                l1,
                l2,
            })?;
            if t_gen.is_none() && test_acc > level {
                t_gen = Some(e);
            }
        }
        if snapshot_due {
            let (snap, smask) = structural_snapshot(
                e,
                &params,
                current.as_ref(),
                prev_struct.as_ref(),
                &plan.structure,
                (train_acc, test_acc),
            )?;
            trace.snapshots.push(snap);
            if let Some(m) = &current {
                masks.push((e, m.clone()));
            }
            prev_struct = Some(smask);
        }
        let stop = match (t_gen, plan.early_stop_patience) {
            (Some(g), Some(p)) => e >= g + p,
            _ => false,
        };
        if (plan.checkpoint_interval > 0 && e.is_multiple_of(plan.checkpoint_interval)) || e == plan.epochs || stop {
            checkpoints.push((e, params.clone()));
        }
        if stop && e < plan.epochs {
            stopped_early = true;
            break;
        }
        if e == plan.epochs {
            break;
        }
        let step = (|| -> Result<()> {
            match &mut mask {
                MaskMode::Dense => {
                    let g = backward(&params, None, &cache, &train_set.targets, loss)?;
                    adamw_step(&mut params, &g, &mut adam, None)?;
                }
                MaskMode::Fixed(m) => {
                    let g = backward(&params, Some(m), &cache, &train_set.targets, loss)?;
                    adamw_step(&mut params, &g, &mut adam, Some(m))?;
                }
                MaskMode::EdgePopup(ep) => {
                    let g = if plan.update_weights {
                        Some(backward(&params, current.as_ref(), &cache, &train_set.targets, loss)?)
                    } else {
                        None
                    };
                    ep.step(&params, &cache, &train_set.targets, loss)?;
                    if let Some(g) = g {
                        // Pruned weights get a zero gradient but still decay.
                        adamw_update(&mut params.weights, &g.0, &mut adam, None)?;
                    }
                }
            }
            Ok(())
        })();
        if let Err(err) = step {
            match err {
                ExperimentError::Optim(OptimError::NonFiniteGradient { .. }) => {
                    aborted = Some(format!("{err} at epoch {e}"));
                    break;
                }
                other => return Err(other),
            }
        }
    }

    let final_mask = mask.current();
    let mut summary = RunSummary::from_trace(&trace, plan.threshold);
    summary.stopped_early = stopped_early;
    summary.aborted = aborted;
    Ok(RunResult {
        regime,
        seed,
        config_hash,
        trace,
        summary,
        init,
        checkpoints,
        masks,
        final_params: params,
        final_mask,
    })
}

/// Dense baseline from θ₀ of `seed`.
pub fn run_dense(cfg: &ExperimentConfig, seed: u64) -> Result<RunResult> {
    cfg.require(&[Regime::Dense])?;
    cfg.validate()?;
    let data = cfg.dataset(seed)?;
    let init = cfg.initial_params(&data, seed)?;
    train(
        TrainPlan::from_config(cfg, init, MaskMode::Dense),
        &data,
        Regime::Dense,
        seed,
        cfg.cell_hash(seed),
    )
}

/// First checkpoint epoch at or after the source's `t_gen`.
pub fn grokked_epoch(source: &RunResult) -> Result<usize> {
    let t_gen = source.summary.t_gen.ok_or(ExperimentError::NotGeneralised)?;
    source
        .checkpoints
        .iter()
        .map(|(e, _)| *e)
        .find(|&e| e >= t_gen)
        .ok_or(ExperimentError::MissingCheckpoint(t_gen))
}

/// Magnitude mask from the source checkpoint at `t` (or the first grokked
/// checkpoint when `t` is absent).
pub fn ticket_mask(source: &RunResult, t: Option<usize>, k: f64) -> Result<(usize, MaskSet)> {
    let t = match t {
        Some(t) => t,
        None => grokked_epoch(source)?,
    };
    let params = source.checkpoint(t).ok_or(ExperimentError::MissingCheckpoint(t))?;
    Ok((t, magnitude_mask(params, k)?))
}

fn ticket_config(cfg: &ExperimentConfig, t: usize, k: f64) -> ExperimentConfig {
    let spec = cfg.prune_spec();
    ExperimentConfig {
        prune: Some(PruneSpec {
            method: PruneMethod::Magnitude,
            rate: k,
            timing: Some(t),
            ..spec
        }),
        ..cfg.clone()
    }
}

/// Lottery ticket: magnitude mask at epoch `t` of the source, rewound to
/// the source's θ₀ and retrained under the frozen mask.
pub fn run_ticket(cfg: &ExperimentConfig, source: &RunResult, t: Option<usize>, k: f64) -> Result<RunResult> {
    cfg.require(&[Regime::Ticket])?;
    cfg.validate()?;
    let (t, mask) = ticket_mask(source, t, k)?;
    let cell = ticket_config(cfg, t, k);
    let data = cfg.dataset(source.seed)?;
    train(
        TrainPlan::from_config(&cell, source.init.clone(), MaskMode::Fixed(mask)),
        &data,
        Regime::Ticket,
        source.seed,
        cell.cell_hash(source.seed),
    )
}

/// Dense model whose per-matrix norms match the ticket at `(t, k)`.
pub fn run_controlled(
    cfg: &ExperimentConfig,
    source: &RunResult,
    t: Option<usize>,
    k: f64,
    norm: NormKind,
) -> Result<RunResult> {
    cfg.require(&[Regime::ControlledDense])?;
    cfg.validate()?;
    let (t, mask) = ticket_mask(source, t, k)?;
    let cell = ExperimentConfig {
        norm,
        ..ticket_config(cfg, t, k)
    };
    let init = controlled_dense(&source.init, &mask, norm)?;
    let data = cfg.dataset(source.seed)?;
    train(
        TrainPlan::from_config(&cell, init, MaskMode::Dense),
        &data,
        Regime::ControlledDense,
        source.seed,
        cell.cell_hash(source.seed),
    )
}

/// Pruning at initialisation from θ₀ of `seed`, then masked training.
pub fn run_pai(cfg: &ExperimentConfig, seed: u64, method: PruneMethod, k: f64) -> Result<RunResult> {
    cfg.require(&[Regime::Pai])?;
    let cell = ExperimentConfig {
        prune: Some(PruneSpec {
            method,
            rate: k,
            timing: None,
            seed,
        }),
        ..cfg.clone()
    };
    cell.validate()?;
    let data = cfg.dataset(seed)?;
    let init = cfg.initial_params(&data, seed)?;
    let mask = pai_mask(method, &init, &data.train(), loss_for(&data), k, seed)?;
    train(
        TrainPlan::from_config(&cell, init, MaskMode::Fixed(mask)),
        &data,
        Regime::Pai,
        seed,
        cell.cell_hash(seed),
    )
}

/// A memorising checkpoint of a source run.
#[derive(Debug, Clone)]
pub struct ThetaMem {
    pub epoch: usize,
    pub params: ModelParams,
    pub train_acc: f64,
    pub test_acc: f64,
}

/// First checkpoint with train accuracy ≥ `train_min` and test accuracy ≤
/// `test_max`.
pub fn find_theta_mem(source: &RunResult, train_min: f64, test_max: f64) -> Result<ThetaMem> {
    source
        .checkpoints
        .iter()
        .find_map(|(e, p)| {
            let r = source.trace.record_at(*e)?;
            (r.train_acc >= train_min && r.test_acc <= test_max).then(|| ThetaMem {
                epoch: *e,
                params: p.clone(),
                train_acc: r.train_acc,
                test_acc: r.test_acc,
            })
        })
        .ok_or(ExperimentError::NoThetaMem {
            train: train_min,
            test: test_max,
        })
}

/// Continues from θ_mem under one of the three edge-popup regimes. The
/// optimiser state starts fresh.
pub fn run_edge_popup(cfg: &ExperimentConfig, theta_mem: &ThetaMem, seed: u64, regime: Regime) -> Result<RunResult> {
    if !regime.is_edge_popup() {
        return Err(ExperimentError::RegimeMismatch {
            expected: "an edge-popup regime".into(),
            got: regime,
        });
    }
    cfg.require(&[regime])?;
    cfg.validate()?;
    let ep_cfg = &cfg.edge_popup;
    let (mode, update_weights) = match regime {
        Regime::EdgePopupWd => (MaskMode::Dense, true),
        _ => {
            let ep = EdgePopup::new(init_edge_popup_scores(&theta_mem.params), ep_cfg.rate, ep_cfg.optimizer)?;
            (MaskMode::EdgePopup(Box::new(ep)), regime == Regime::EdgePopupBoth)
        }
    };
    let data = cfg.dataset(seed)?;
    let mut plan = TrainPlan::from_config(cfg, theta_mem.params.clone(), mode);
    plan.update_weights = update_weights;
    plan.snapshot_epochs = ep_cfg.report_epochs.clone();
    let hash = {
        let mut h = Sha256::new();
        h.update(cfg.cell_hash(seed).as_bytes());
        h.update(theta_mem.epoch.to_le_bytes());
        hex::encode(h.finalize())
    };
    train(plan, &data, regime, seed, hash)
}

/// Ticket at rate `k` retrained without weight decay.
pub fn run_no_wd_critical(cfg: &ExperimentConfig, source: &RunResult, t: Option<usize>, k: f64) -> Result<RunResult> {
    cfg.require(&[Regime::NoWdCritical])?;
    cfg.validate()?;
    let (t, mask) = if k == 0.0 {
        (t.unwrap_or(0), MaskSet::ones(&source.init.dims))
    } else {
        ticket_mask(source, t, k)?
    };
    let mut cell = ticket_config(cfg, t, k);
    cell.optimizer.weight_decay = 0.0;
    let data = cfg.dataset(source.seed)?;
    let mode = if k == 0.0 {
        MaskMode::Dense
    } else {
        MaskMode::Fixed(mask)
    };
    train(
        TrainPlan::from_config(&cell, source.init.clone(), mode),
        &data,
        Regime::NoWdCritical,
        source.seed,
        cell.cell_hash(source.seed),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub t_mem: Option<usize>,
    pub t_gen: Option<usize>,
    pub tau_grok: Option<f64>,
}

pub const SWEEP_HEADER: &str = "value,seed,t_mem,t_gen,tau_grok";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let opt = |v: Option<String>| v.unwrap_or_else(|| "not_reached".into());
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.value,
            r.seed,
            opt(r.t_mem.map(|v| v.to_string())),
            opt(r.t_gen.map(|v| v.to_string())),
            opt(r.tau_grok.map(|v| format!("{v:?}"))),
        ));
    }
    out
}

/// One ticket per (value, source run); rows ordered by value then seed
/// regardless of execution order.
pub fn sweep(cfg: &ExperimentConfig, sources: &[RunResult], axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepRow>> {
    let ticket_cfg = cfg.with_regime(Regime::Ticket);
    let base = cfg.prune_spec();
    let mut cells = Vec::new();
    for &v in values {
        for src in sources {
            cells.push((v, src));
        }
    }
    let run_cell = |(v, src): (f64, &RunResult)| -> Result<SweepRow> {
        let (t, k) = match axis {
            SweepAxis::PruneRate => (base.timing, v),
            SweepAxis::PruneTiming => {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(ExperimentError::Config(format!("timing {v} is not an epoch")));
                }
                (Some(v as usize), base.rate)
            }
        };
        let r = run_ticket(&ticket_cfg, src, t, k)?;
        Ok(SweepRow {
            value: v,
            seed: src.seed,
            t_mem: r.summary.t_mem,
            t_gen: r.summary.t_gen,
            tau_grok: r.summary.tau_grok,
        })
    };
    parallel_map(cells, cfg.workers.max(1), run_cell).into_iter().collect()
}

/// Maps `f` over `items` on up to `workers` threads, preserving order.
pub fn parallel_map<T, R, F>(items: Vec<T>, workers: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    if workers <= 1 || items.len() <= 1 {
        return items.into_iter().map(f).collect();
    }
    let n = items.len();
    let queue = std::sync::Mutex::new(items.into_iter().enumerate().collect::<Vec<_>>());
    let results = std::sync::Mutex::new((0..n).map(|_| None).collect::<Vec<Option<R>>>());
    std::thread::scope(|s| {
        for _ in 0..workers.min(n) {
            s.spawn(|| loop {
                let next = queue.lock().expect("queue lock").pop();
                let Some((i, item)) = next else { break };
                let r = f(item);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect()
}
