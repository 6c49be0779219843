//! The maskable embedding MLP:
//! `softmax(relu((E_a + E_b) W_in) W_out W_unemb)` with `E_x = W_emb x`.
//!
//! Every parameter matrix has a matching 0/1 mask. The forward pass works on
//! the effective weights `W ⊙ m`; gradients are taken with respect to those
//! effective weights and then multiplied by the mask, so pruned entries never
//! receive an update.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{gaussian_matrix, Matrix, NumericsError, SeededRng};
use crate::tasks::{Inputs, Targets};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("input index {index} out of range for input width {width}")]
    IndexOutOfRange { index: usize, width: usize },
    #[error("shape mismatch for {layer}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        layer: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("loss {loss:?} cannot be used with {targets} targets")]
    LossMismatch { loss: LossKind, targets: &'static str },
    #[error("batch of {inputs} inputs but {targets} targets")]
    BatchMismatch { inputs: usize, targets: usize },
    #[error("invalid model configuration: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layer {
    Emb,
    In,
    Out,
    Unemb,
}

impl Layer {
    pub const ALL: [Layer; 4] = [Layer::Emb, Layer::In, Layer::Out, Layer::Unemb];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Layer::Emb => "W_emb",
            Layer::In => "W_in",
            Layer::Out => "W_out",
            Layer::Unemb => "W_unemb",
        }
    }

    pub fn from_name(name: &str) -> Option<Layer> {
        Layer::ALL.into_iter().find(|l| l.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Input width (`p` for modular tasks).
    pub d_in: usize,
    pub d_emb: usize,
    pub d_hid: usize,
    /// Output width (`p` for modular tasks).
    pub d_out: usize,
}

impl ModelDims {
    pub fn modular(p: usize, d_emb: usize, d_hid: usize) -> Self {
        Self {
            d_in: p,
            d_emb,
            d_hid,
            d_out: p,
        }
    }

    /// `(rows, cols)` of a parameter matrix.
    pub fn shape(&self, layer: Layer) -> (usize, usize) {
        match layer {
            Layer::Emb => (self.d_emb, self.d_in),
            Layer::In => (self.d_emb, self.d_hid),
            Layer::Out => (self.d_hid, self.d_emb),
            Layer::Unemb => (self.d_emb, self.d_out),
        }
    }

    /// Width of the representation a matrix reads from.
    pub fn fan_in(&self, layer: Layer) -> usize {
        match layer {
            Layer::Emb => self.d_in,
            Layer::In => self.d_emb,
            Layer::Out => self.d_hid,
            Layer::Unemb => self.d_emb,
        }
    }

    pub fn param_count(&self) -> usize {
        Layer::ALL
            .iter()
            .map(|&l| {
                let (r, c) = self.shape(l);
                r * c
            })
            .sum()
    }

    fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_emb == 0 || self.d_hid == 0 || self.d_out == 0 {
            return Err(ModelError::Invalid(format!("all dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

/// One matrix per layer, indexed by [`Layer`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensors(pub [Matrix; 4]);

impl Tensors {
    pub fn zeros(dims: &ModelDims) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: &ModelDims, value: f64) -> Self {
        Tensors(Layer::ALL.map(|l| {
            let (r, c) = dims.shape(l);
            Matrix::filled(r, c, value)
        }))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Layer, &Matrix)> {
        Layer::ALL.into_iter().zip(self.0.iter())
    }

    pub fn map(&self, mut f: impl FnMut(Layer, &Matrix) -> Matrix) -> Tensors {
        Tensors(Layer::ALL.map(|l| f(l, &self[l])))
    }

    pub fn shapes(&self) -> [(usize, usize); 4] {
        Layer::ALL.map(|l| self[l].shape())
    }

    pub fn total_len(&self) -> usize {
        self.0.iter().map(Matrix::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Matrix::is_finite)
    }

    pub fn check_shapes(&self, dims: &ModelDims) -> Result<()> {
        for (l, m) in self.iter() {
            if m.shape() != dims.shape(l) {
                return Err(ModelError::ShapeMismatch {
                    layer: l.name(),
                    expected: dims.shape(l),
                    got: m.shape(),
                });
            }
        }
        Ok(())
    }

    /// Elementwise product with another set of the same shapes.
    pub fn hadamard(&self, other: &Tensors) -> Result<Tensors> {
        let mut out = self.clone();
        for l in Layer::ALL {
            out[l] = self[l].hadamard(&other[l])?;
        }
        Ok(out)
    }
}

impl Index<Layer> for Tensors {
    type Output = Matrix;
    fn index(&self, l: Layer) -> &Matrix {
        &self.0[l.index()]
    }
}

impl IndexMut<Layer> for Tensors {
    fn index_mut(&mut self, l: Layer) -> &mut Matrix {
        &mut self.0[l.index()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub weights: Tensors,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            weights: Tensors::zeros(&dims),
            dims,
        }
    }

    pub fn from_tensors(dims: ModelDims, weights: Tensors) -> Result<Self> {
        dims.validate()?;
        weights.check_shapes(&dims)?;
        Ok(Self { dims, weights })
    }
}

impl Index<Layer> for ModelParams {
    type Output = Matrix;
    fn index(&self, l: Layer) -> &Matrix {
        &self.weights[l]
    }
}

impl IndexMut<Layer> for ModelParams {
    fn index_mut(&mut self, l: Layer) -> &mut Matrix {
        &mut self.weights[l]
    }
}

/// Per-layer 0/1 masks; 1 marks a surviving weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSet(pub Tensors);

impl MaskSet {
    pub fn ones(dims: &ModelDims) -> Self {
        MaskSet(Tensors::filled(dims, 1.0))
    }

    pub fn zeros(dims: &ModelDims) -> Self {
        MaskSet(Tensors::zeros(dims))
    }

    pub fn from_tensors(t: Tensors) -> Result<Self> {
        for (l, m) in t.iter() {
            if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(ModelError::Invalid(format!("mask for {} is not 0/1", l.name())));
            }
        }
        Ok(MaskSet(t))
    }

    pub fn kept(&self, l: Layer) -> usize {
        self.0[l].data().iter().filter(|&&v| v != 0.0).count()
    }

    pub fn density(&self, l: Layer) -> f64 {
        self.kept(l) as f64 / self.0[l].len() as f64
    }

    pub fn is_all_ones(&self) -> bool {
        self.0 .0.iter().all(|m| m.data().iter().all(|&v| v == 1.0))
    }
}

impl Index<Layer> for MaskSet {
    type Output = Matrix;
    fn index(&self, l: Layer) -> &Matrix {
        &self.0[l]
    }
}

/// Gradients of the mean batch loss, one matrix per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Tensors);

impl Index<Layer> for Gradients {
    type Output = Matrix;
    fn index(&self, l: Layer) -> &Matrix {
        &self.0[l]
    }
}

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.0.is_finite()
    }

    pub fn norm(&self) -> f64 {
        self.0
             .0
            .iter()
            .map(|m| m.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

/// Entries drawn from `N(0, (κ/√fan_in)²)`, layer by layer in `Layer::ALL`
/// order from a single stream.
pub fn init_params(dims: ModelDims, kappa: f64, rng: &mut SeededRng) -> Result<ModelParams> {
    dims.validate()?;
    if !(kappa.is_finite() && kappa > 0.0) {
        return Err(ModelError::Invalid(format!("kappa must be positive, got {kappa}")));
    }
    let mut layers = Vec::with_capacity(4);
    for l in Layer::ALL {
        let (r, c) = dims.shape(l);
        let std = kappa / (dims.fan_in(l) as f64).sqrt();
        layers.push(gaussian_matrix(rng, r, c, std)?);
    }
    let layers: [Matrix; 4] = layers.try_into().expect("four layers");
    Ok(ModelParams {
        dims,
        weights: Tensors(layers),
    })
}

/// Intermediate values retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `W ⊙ m` for each layer.
    pub effective: Tensors,
    /// `W_embᵀ W_in` (d_in × d_hid): hidden pre-activation per input unit.
    pub in_proj: Matrix,
    /// `W_out W_unemb` (d_hid × d_out).
    pub out_proj: Matrix,
    pub pre: Matrix,
    pub hidden: Matrix,
    pub logits: Matrix,
    pub probs: Matrix,
    /// Per-row `ln Σ exp(z − max z)` and `max z`, shared with the loss.
    log_sum: Vec<f64>,
    row_max: Vec<f64>,
    inputs: Inputs,
}

impl ForwardCache {
    pub fn batch_len(&self) -> usize {
        self.logits.rows()
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    softmax_with_norms(logits).0
}

fn softmax_with_norms(logits: &Matrix) -> (Matrix, Vec<f64>, Vec<f64>) {
    let mut out = logits.clone();
    let mut log_sum = Vec::with_capacity(out.rows());
    let mut row_max = Vec::with_capacity(out.rows());
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
        log_sum.push(sum.ln());
        row_max.push(max);
    }
    (out, log_sum, row_max)
}

fn effective_weights(params: &ModelParams, masks: Option<&MaskSet>) -> Result<Tensors> {
    match masks {
        None => Ok(params.weights.clone()),
        Some(m) => {
            m.0.check_shapes(&params.dims)?;
            Ok(params.weights.hadamard(&m.0)?)
        }
    }
}

pub fn forward(params: &ModelParams, masks: Option<&MaskSet>, inputs: &Inputs) -> Result<ForwardCache> {
    let dims = params.dims;
    let effective = effective_weights(params, masks)?;
    let in_proj = effective[Layer::Emb].t_matmul(&effective[Layer::In])?;
    let pre = match inputs {
        Inputs::Pairs(pairs) => {
            let mut pre = Matrix::zeros(pairs.len(), dims.d_hid);
            for (n, &(a, b)) in pairs.iter().enumerate() {
                for index in [a, b] {
                    if index >= dims.d_in {
                        return Err(ModelError::IndexOutOfRange {
                            index,
                            width: dims.d_in,
                        });
                    }
                }
                let (ra, rb) = (in_proj.row(a), in_proj.row(b));
                for ((o, x), y) in pre.row_mut(n).iter_mut().zip(ra).zip(rb) {
                    *o = x + y;
                }
            }
            pre
        }
        Inputs::Vectors(x) => x.matmul(&in_proj)?,
    };
    let hidden = pre.map(|v| v.max(0.0));
    let out_proj = effective[Layer::Out].matmul(&effective[Layer::Unemb])?;
    let logits = hidden.matmul(&out_proj)?;
    let (probs, log_sum, row_max) = softmax_with_norms(&logits);
    Ok(ForwardCache {
        effective,
        in_proj,
        out_proj,
        pre,
        hidden,
        logits,
        probs,
        log_sum,
        row_max,
        inputs: inputs.clone(),
    })
}

/// Gradient of the mean loss with respect to the logits.
pub fn logit_gradient(cache: &ForwardCache, targets: &Targets, loss: LossKind) -> Result<Matrix> {
    let n = cache.batch_len();
    if targets.len() != n {
        return Err(ModelError::BatchMismatch {
            inputs: n,
            targets: targets.len(),
        });
    }
    match (loss, targets) {
        (LossKind::CrossEntropy, Targets::Classes(classes)) => {
            let mut g = cache.probs.clone();
            let scale = 1.0 / n as f64;
            for (r, &c) in classes.iter().enumerate() {
                if c >= g.cols() {
                    return Err(ModelError::IndexOutOfRange {
                        index: c,
                        width: g.cols(),
                    });
                }
                let row = g.row_mut(r);
                row[c] -= 1.0;
                row.iter_mut().for_each(|v| *v *= scale);
            }
            Ok(g)
        }
        (LossKind::Mse, Targets::Values(values)) => {
            let mut g = cache.logits.clone();
            let scale = 2.0 / (n * g.cols()) as f64;
            for (r, &y) in values.iter().enumerate() {
                g.row_mut(r).iter_mut().for_each(|v| *v = scale * (*v - y));
            }
            Ok(g)
        }
        (loss, Targets::Classes(_)) => Err(ModelError::LossMismatch {
            loss,
            targets: "class",
        }),
        (loss, Targets::Values(_)) => Err(ModelError::LossMismatch {
            loss,
            targets: "real-valued",
        }),
    }
}

/// Gradients with respect to the effective weights `W ⊙ m`, not yet masked.
///
/// Entry `(i, j)` is `Σ_n ∂L/∂I_j · Z_i`, the quantity edge-popup needs.
pub fn effective_gradients(cache: &ForwardCache, targets: &Targets, loss: LossKind) -> Result<Gradients> {
    let g_logits = logit_gradient(cache, targets, loss)?;
    let eff = &cache.effective;
    let d_out_proj = cache.hidden.t_matmul(&g_logits)?;
    let mut d_pre = g_logits.matmul_t(&cache.out_proj)?;
    for (d, &p) in d_pre.data_mut().iter_mut().zip(cache.pre.data()) {
        if p <= 0.0 {
            *d = 0.0;
        }
    }
    let d_in_proj = match &cache.inputs {
        Inputs::Pairs(pairs) => {
            let mut d = Matrix::zeros(cache.in_proj.rows(), cache.in_proj.cols());
            for (n, &(a, b)) in pairs.iter().enumerate() {
                let src = d_pre.row(n);
                for idx in [a, b] {
                    for (o, s) in d.row_mut(idx).iter_mut().zip(src) {
                        *o += s;
                    }
                }
            }
            d
        }
        Inputs::Vectors(x) => x.t_matmul(&d_pre)?,
    };
    let d_emb = eff[Layer::In].matmul_t(&d_in_proj)?;
    let d_in = eff[Layer::Emb].matmul(&d_in_proj)?;
    let d_out = d_out_proj.matmul_t(&eff[Layer::Unemb])?;
    let d_unemb = eff[Layer::Out].t_matmul(&d_out_proj)?;
    Ok(Gradients(Tensors([d_emb, d_in, d_out, d_unemb])))
}

/// Gradients of the mean loss, zeroed wherever the mask is 0.
pub fn backward(
    params: &ModelParams,
    masks: Option<&MaskSet>,
    cache: &ForwardCache,
    targets: &Targets,
    loss: LossKind,
) -> Result<Gradients> {
    let mut grads = effective_gradients(cache, targets, loss)?;
    grads.0.check_shapes(&params.dims)?;
    if let Some(m) = masks {
        grads = Gradients(grads.0.hadamard(&m.0)?);
    }
    Ok(grads)
}

/// Mean loss of a forward pass.
pub fn batch_loss(cache: &ForwardCache, targets: &Targets, loss: LossKind) -> Result<f64> {
    let n = cache.batch_len();
    if targets.len() != n {
        return Err(ModelError::BatchMismatch {
            inputs: n,
            targets: targets.len(),
        });
    }
    if n == 0 {
        return Ok(0.0);
    }
    match (loss, targets) {
        (LossKind::CrossEntropy, Targets::Classes(c)) => {
            let mut total = 0.0;
            for (r, &t) in c.iter().enumerate() {
                let row = cache.logits.row(r);
                if t >= row.len() {
                    return Err(ModelError::IndexOutOfRange {
                        index: t,
                        width: row.len(),
                    });
                }
                // Same arithmetic as `optim::cross_entropy`, reusing the softmax sums.
                total += cache.log_sum[r] - (row[t] - cache.row_max[r]);
            }
            Ok(total / n as f64)
        }
        (LossKind::Mse, Targets::Values(v)) => {
            let mut total = 0.0;
            for (r, &y) in v.iter().enumerate() {
                let row = cache.logits.row(r);
                total += crate::optim::mse(row, &vec![y; row.len()]);
            }
            Ok(total / n as f64)
        }
        (loss, Targets::Classes(_)) => Err(ModelError::LossMismatch {
            loss,
            targets: "class",
        }),
        (loss, Targets::Values(_)) => Err(ModelError::LossMismatch {
            loss,
            targets: "real-valued",
        }),
    }
}
