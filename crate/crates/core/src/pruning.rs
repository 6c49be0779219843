//! Mask-producing procedures: magnitude pruning and lottery tickets,
//! norm-controlled dense baselines, pruning-at-initialisation scores
//! (SNIP, GraSP, SynFlow, random) and edge-popup score updates.
//!
//! Pruning is layer-wise: every matrix keeps exactly `⌈(1−k)·n⌉` entries.
//! Ties in any ranking go to the lower flat index.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    self, effective_gradients, forward, Gradients, Layer, LossKind, MaskSet, ModelError, ModelParams, Tensors,
};
use crate::numerics::{Matrix, SeededRng};
use crate::optim::{adamw_update, AdamWConfig, AdamWState, OptimError};
use crate::tasks::Batch;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PruneError {
    #[error("pruning rate {0} must lie in [0, 1)")]
    BadRate(f64),
    #[error("{0} has zero norm; cannot rescale")]
    ZeroNorm(&'static str),
    #[error("{0} mask is empty")]
    EmptyMask(&'static str),
    #[error("finite-difference step {0:e} underflows")]
    StepUnderflow(f64),
    #[error("method {0:?} does not produce masks at initialisation")]
    NotPai(PruneMethod),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

pub type Result<T> = std::result::Result<T, PruneError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMethod {
    Magnitude,
    Random,
    Snip,
    Grasp,
    Synflow,
    EdgePopup,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneSpec {
    pub method: PruneMethod,
    pub rate: f64,
    /// Epoch whose weights feed magnitude pruning.
    #[serde(default)]
    pub timing: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl PruneSpec {
    pub fn validate(&self, total_epochs: usize) -> Result<()> {
        check_rate(self.rate)?;
        if let Some(t) = self.timing {
            if t > total_epochs {
                return Err(PruneError::Model(ModelError::Invalid(format!(
                    "pruning timing {t} exceeds the {total_epochs}-epoch budget"
                ))));
            }
        }
        Ok(())
    }
}

/// Real-valued per-weight scores (saliencies or edge-popup scores).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet(pub Tensors);

impl std::ops::Index<Layer> for ScoreSet {
    type Output = Matrix;
    fn index(&self, l: Layer) -> &Matrix {
        &self.0[l]
    }
}

fn check_rate(k: f64) -> Result<()> {
    if !(0.0..1.0).contains(&k) || !k.is_finite() {
        return Err(PruneError::BadRate(k));
    }
    Ok(())
}

/// Number of entries kept out of `n` at pruning rate `k`: `⌈(1−k)·n⌉`.
pub fn keep_count(n: usize, k: f64) -> usize {
    keep_fraction_count(n, 1.0 - k)
}

fn keep_fraction_count(n: usize, frac: f64) -> usize {
    // Absorb representation error such as 0.4 * 33500 = 13400.000000000002.
    let raw = frac * n as f64;
    let rounded = raw.round();
    let c = if (raw - rounded).abs() <= 1e-9 * raw.max(1.0) {
        rounded
    } else {
        raw.ceil()
    };
    (c as usize).min(n)
}

/// Indices ordered by descending score, lower index first on ties.
fn ranking(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// 0/1 matrix keeping the `keep` highest-scoring entries.
pub fn top_k_matrix(scores: &Matrix, keep: usize) -> Matrix {
    let mut mask = Matrix::zeros(scores.rows(), scores.cols());
    for &i in ranking(scores.data()).iter().take(keep) {
        mask.data_mut()[i] = 1.0;
    }
    mask
}

/// Layer-wise mask keeping the top `⌈(1−k)·n⌉` scores of every matrix.
pub fn mask_from_scores(scores: &ScoreSet, k: f64) -> Result<MaskSet> {
    check_rate(k)?;
    Ok(MaskSet(scores.0.map(|_, s| top_k_matrix(s, keep_count(s.len(), k)))))
}

/// Keep the largest `|θ|` in every matrix.
pub fn magnitude_mask(params: &ModelParams, k: f64) -> Result<MaskSet> {
    mask_from_scores(&ScoreSet(params.weights.map(|_, m| m.abs())), k)
}

/// Uniformly chosen survivors, `⌈(1−k)·n⌉` per matrix.
pub fn random_mask(dims: &model::ModelDims, k: f64, rng: &mut SeededRng) -> Result<MaskSet> {
    check_rate(k)?;
    let t = Tensors::zeros(dims).map(|_, m| {
        let mut order: Vec<usize> = (0..m.len()).collect();
        rng.shuffle(&mut order);
        let mut out = Matrix::zeros(m.rows(), m.cols());
        for &i in order.iter().take(keep_count(m.len(), k)) {
            out.data_mut()[i] = 1.0;
        }
        out
    });
    Ok(MaskSet(t))
}

/// A lottery ticket: the initial weights together with a frozen mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Ticket {
    pub init: ModelParams,
    pub mask: MaskSet,
}

pub fn make_ticket(init: &ModelParams, mask: &MaskSet) -> Result<Ticket> {
    mask.0.check_shapes(&init.dims)?;
    Ok(Ticket {
        init: init.clone(),
        mask: mask.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    L1,
    L2,
}

impl NormKind {
    pub fn of(self, m: &Matrix) -> f64 {
        match self {
            NormKind::L1 => m.l1_norm(),
            NormKind::L2 => m.frobenius_norm(),
        }
    }
}

/// Dense weights `θ₀ · r` with `r = ‖θ₀ ⊙ m‖ / ‖θ₀‖` per matrix, so every
/// matrix starts with the norm of the corresponding ticket matrix.
pub fn controlled_dense(init: &ModelParams, mask: &MaskSet, norm: NormKind) -> Result<ModelParams> {
    mask.0.check_shapes(&init.dims)?;
    let mut out = init.clone();
    for l in Layer::ALL {
        if mask.kept(l) == 0 {
            return Err(PruneError::EmptyMask(l.name()));
        }
        let full = norm.of(&init[l]);
        if full == 0.0 {
            return Err(PruneError::ZeroNorm(l.name()));
        }
        let ticket = norm.of(&init[l].hadamard(&mask[l]).map_err(ModelError::from)?);
        out[l] = init[l].scale(ticket / full);
    }
    Ok(out)
}

fn full_batch_gradient(params: &ModelParams, batch: &Batch, loss: LossKind) -> Result<Tensors> {
    let cache = forward(params, None, &batch.inputs)?;
    Ok(effective_gradients(&cache, &batch.targets, loss)?.0)
}

/// SNIP saliency `|∂L/∂θ ⊙ θ|` from one full-batch gradient.
pub fn snip_scores(params: &ModelParams, batch: &Batch, loss: LossKind) -> Result<ScoreSet> {
    let g = full_batch_gradient(params, batch, loss)?;
    let s = g.hadamard(&params.weights)?;
    Ok(ScoreSet(s.map(|_, m| m.abs())))
}

fn tensors_norm(t: &Tensors) -> f64 {
    t.0.iter()
        .map(|m| m.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

fn axpy_tensors(base: &Tensors, dir: &Tensors, step: f64) -> Tensors {
    let mut out = base.clone();
    for l in Layer::ALL {
        for (o, d) in out[l].data_mut().iter_mut().zip(dir[l].data()) {
            *o += step * d;
        }
    }
    out
}

/// Central-difference Hessian-vector product `H g` at `θ`, with
/// `g = ∇L(θ)` and step `ε = 1e-3·(1+‖θ‖)/(1+‖g‖)`.
///
/// `grad` evaluates the gradient at arbitrary weights.
pub fn hessian_gradient_product<F>(theta: &Tensors, mut grad: F) -> Result<(Tensors, Tensors)>
where
    F: FnMut(&Tensors) -> Result<Tensors>,
{
    let g = grad(theta)?;
    let eps = 1e-3 * (1.0 + tensors_norm(theta)) / (1.0 + tensors_norm(&g));
    if !eps.is_normal() {
        return Err(PruneError::StepUnderflow(eps));
    }
    let plus = grad(&axpy_tensors(theta, &g, eps))?;
    let minus = grad(&axpy_tensors(theta, &g, -eps))?;
    let mut hg = plus.clone();
    for l in Layer::ALL {
        for (h, m) in hg[l].data_mut().iter_mut().zip(minus[l].data()) {
            *h = (*h - m) / (2.0 * eps);
        }
    }
    Ok((g, hg))
}

/// GraSP score `−(H g) ⊙ θ` for an arbitrary differentiable objective.
pub fn grasp_scores_with<F>(theta: &Tensors, grad: F) -> Result<ScoreSet>
where
    F: FnMut(&Tensors) -> Result<Tensors>,
{
    let (_, hg) = hessian_gradient_product(theta, grad)?;
    let s = hg.hadamard(theta)?;
    Ok(ScoreSet(s.map(|_, m| m.scale(-1.0))))
}

/// GraSP scores of the model's full-batch training loss at `params`.
pub fn grasp_scores(params: &ModelParams, batch: &Batch, loss: LossKind) -> Result<ScoreSet> {
    let dims = params.dims;
    grasp_scores_with(&params.weights, |w| {
        let p = ModelParams {
            dims,
            weights: w.clone(),
        };
        full_batch_gradient(&p, batch, loss)
    })
}

/// GraSP removes the weights whose removal least reduces gradient flow,
/// i.e. those with the highest `−(Hg)⊙θ`; the lowest scores survive.
pub fn grasp_mask(scores: &ScoreSet, k: f64) -> Result<MaskSet> {
    mask_from_scores(&ScoreSet(scores.0.map(|_, m| m.scale(-1.0))), k)
}

/// SynFlow saliency `(∂R/∂θ) ⊙ θ` with `R = 1ᵀ(∏|θ_l|)1`, evaluated on the
/// absolute (optionally masked) weights with an all-ones input.
pub fn synflow_scores(params: &ModelParams, mask: Option<&MaskSet>) -> Result<ScoreSet> {
    let w = match mask {
        Some(m) => params.weights.hadamard(&m.0)?,
        None => params.weights.clone(),
    }
    .map(|_, m| m.abs());
    let (emb, w_in, w_out, unemb) = (&w[Layer::Emb], &w[Layer::In], &w[Layer::Out], &w[Layer::Unemb]);

    // Forward signal with x = 1.
    let e: Vec<f64> = (0..emb.rows()).map(|r| emb.row(r).iter().sum()).collect();
    let pre = row_vec_times(&e, w_in);
    let z = row_vec_times(&pre, w_out);
    // Backward signal ∂R/∂(activation).
    let bz: Vec<f64> = (0..unemb.rows()).map(|r| unemb.row(r).iter().sum()).collect();
    let bpre = mat_times_vec(w_out, &bz);
    let be = mat_times_vec(w_in, &bpre);

    let outer = |m: &Matrix, left: &[f64], right: &[f64]| {
        let mut s = m.clone();
        for r in 0..s.rows() {
            for (c, v) in s.row_mut(r).iter_mut().enumerate() {
                *v *= left[r] * right[c];
            }
        }
        s
    };
    let ones_in = vec![1.0; emb.cols()];
    let ones_out = vec![1.0; unemb.cols()];
    Ok(ScoreSet(Tensors([
        outer(emb, &be, &ones_in),
        outer(w_in, &e, &bpre),
        outer(w_out, &pre, &bz),
        outer(unemb, &z, &ones_out),
    ])))
}

fn row_vec_times(v: &[f64], m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for (r, &x) in v.iter().enumerate() {
        for (o, w) in out.iter_mut().zip(m.row(r)) {
            *o += x * w;
        }
    }
    out
}

fn mat_times_vec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|r| m.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

pub const SYNFLOW_ROUNDS: usize = 100;

/// Iterative SynFlow: `rounds` prune-and-rescore rounds on the exponential
/// schedule `(1−k)^(r/rounds)`, ending at exactly `⌈(1−k)·n⌉` per matrix.
pub fn synflow_mask(params: &ModelParams, k: f64, rounds: usize) -> Result<MaskSet> {
    check_rate(k)?;
    let rounds = rounds.max(1);
    let mut mask = MaskSet::ones(&params.dims);
    for r in 1..=rounds {
        let frac = (1.0 - k).powf(r as f64 / rounds as f64);
        let scores = synflow_scores(params, Some(&mask))?;
        let next = scores.0.map(|l, s| {
            // Already-pruned entries can never return.
            let mut s = s.clone();
            for (v, m) in s.data_mut().iter_mut().zip(mask[l].data()) {
                if *m == 0.0 {
                    *v = -1.0;
                }
            }
            let keep = if r == rounds {
                keep_count(s.len(), k)
            } else {
                keep_fraction_count(s.len(), frac)
            };
            top_k_matrix(&s, keep)
        });
        mask = MaskSet(next);
    }
    Ok(mask)
}

/// Pruning-at-initialisation mask for one of the baseline methods.
pub fn pai_mask(
    method: PruneMethod,
    params: &ModelParams,
    batch: &Batch,
    loss: LossKind,
    k: f64,
    seed: u64,
) -> Result<MaskSet> {
    check_rate(k)?;
    match method {
        PruneMethod::Random => random_mask(&params.dims, k, &mut SeededRng::new(seed)),
        PruneMethod::Snip => mask_from_scores(&snip_scores(params, batch, loss)?, k),
        PruneMethod::Grasp => grasp_mask(&grasp_scores(params, batch, loss)?, k),
        PruneMethod::Synflow => synflow_mask(params, k, SYNFLOW_ROUNDS),
        PruneMethod::Magnitude => magnitude_mask(params, k),
        PruneMethod::EdgePopup => Err(PruneError::NotPai(method)),
    }
}

/// Initial edge-popup scores: `|θ|` scaled to a per-matrix maximum of 1, so
/// the first subnetwork coincides with the magnitude mask.
pub fn init_edge_popup_scores(params: &ModelParams) -> ScoreSet {
    ScoreSet(params.weights.map(|_, m| {
        let max = m.max_abs();
        if max == 0.0 {
            Matrix::zeros(m.rows(), m.cols())
        } else {
            m.map(|v| v.abs() / max)
        }
    }))
}

/// Edge-popup score gradient `∂L/∂I_j · Z_i · w_ij` for every edge,
/// including edges outside the current subnetwork.
pub fn edge_popup_score_gradient(
    params: &ModelParams,
    cache: &model::ForwardCache,
    batch_targets: &crate::tasks::Targets,
    loss: LossKind,
) -> Result<Tensors> {
    let Gradients(g) = effective_gradients(cache, batch_targets, loss)?;
    Ok(g.hadamard(&params.weights)?)
}

/// One plain edge-popup step: `s ← s − α·(∂L/∂I_j)·Z_i·w_ij`.
///
/// `cache` must come from a forward pass under the top-scored mask.
pub fn edge_popup_step(
    params: &ModelParams,
    scores: &ScoreSet,
    cache: &model::ForwardCache,
    targets: &crate::tasks::Targets,
    loss: LossKind,
    lr: f64,
) -> Result<ScoreSet> {
    let grad = edge_popup_score_gradient(params, cache, targets, loss)?;
    Ok(ScoreSet(axpy_tensors(&scores.0, &grad, -lr)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScoreOptimizer {
    Sgd { lr: f64 },
    Adam { config: AdamWConfig },
}

impl Default for ScoreOptimizer {
    fn default() -> Self {
        ScoreOptimizer::Sgd { lr: 1e-3 }
    }
}

/// Edge-popup search state: scores, rate and the score optimiser.
#[derive(Debug, Clone)]
pub struct EdgePopup {
    pub scores: ScoreSet,
    pub rate: f64,
    pub optimizer: ScoreOptimizer,
    adam: Option<AdamWState>,
}

impl EdgePopup {
    pub fn new(scores: ScoreSet, rate: f64, optimizer: ScoreOptimizer) -> Result<Self> {
        check_rate(rate)?;
        let adam = match optimizer {
            ScoreOptimizer::Adam { config } => Some(AdamWState::new(config, &scores.0)),
            ScoreOptimizer::Sgd { .. } => None,
        };
        Ok(Self {
            scores,
            rate,
            optimizer,
            adam,
        })
    }

    /// Current subnetwork: top `(1−k)` scores per matrix.
    pub fn mask(&self) -> MaskSet {
        mask_from_scores(&self.scores, self.rate).expect("rate validated at construction")
    }

    /// Updates the scores from a forward pass run under [`EdgePopup::mask`].
    pub fn step(
        &mut self,
        params: &ModelParams,
        cache: &model::ForwardCache,
        targets: &crate::tasks::Targets,
        loss: LossKind,
    ) -> Result<()> {
        match self.optimizer {
            ScoreOptimizer::Sgd { lr } => {
                self.scores = edge_popup_step(params, &self.scores, cache, targets, loss, lr)?;
            }
            ScoreOptimizer::Adam { .. } => {
                let grad = edge_popup_score_gradient(params, cache, targets, loss)?;
                let state = self.adam.as_mut().expect("adam state present");
                adamw_update(&mut self.scores.0, &grad, state, None)?;
            }
        }
        Ok(())
    }
}
