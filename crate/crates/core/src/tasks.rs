//! Dataset generation: modular arithmetic, sparse parity, polynomial regression.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Matrix, SeededRng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("modulus {0} must be a prime >= 2")]
    BadModulus(usize),
    #[error("train fraction {0} must lie strictly between 0 and 1")]
    BadFraction(f64),
    #[error("invalid task parameters: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ModularAdd,
    ModularSub,
    ModularMul,
    /// `a² + ab + b² mod p`.
    ModularMixed,
    SparseParity,
    PolyRegression,
}

impl TaskKind {
    pub fn is_modular(self) -> bool {
        matches!(
            self,
            TaskKind::ModularAdd | TaskKind::ModularSub | TaskKind::ModularMul | TaskKind::ModularMixed
        )
    }

    /// The modular operation, reduced mod `p`.
    pub fn apply(self, a: usize, b: usize, p: usize) -> Option<usize> {
        let (a, b, p) = (a as u64, b as u64, p as u64);
        let c = match self {
            TaskKind::ModularAdd => (a + b) % p,
            TaskKind::ModularSub => (a + p - b % p) % p,
            TaskKind::ModularMul => (a * b) % p,
            TaskKind::ModularMixed => (a * a + a * b + b * b) % p,
            _ => return None,
        };
        Some(c as usize)
    }
}

fn default_p() -> usize {
    67
}
fn default_fraction() -> f64 {
    0.4
}
fn default_n_bits() -> usize {
    40
}
fn default_k_bits() -> usize {
    3
}
fn default_samples() -> usize {
    1000
}
fn default_dim() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Modulus for modular tasks.
    #[serde(default = "default_p")]
    pub p: usize,
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n_bits")]
    pub n_bits: usize,
    #[serde(default = "default_k_bits")]
    pub k_bits: usize,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self::modular(TaskKind::ModularAdd, default_p(), default_fraction(), 0)
    }
}

impl TaskSpec {
    pub fn modular(kind: TaskKind, p: usize, train_fraction: f64, seed: u64) -> Self {
        Self {
            kind,
            p,
            train_fraction,
            seed,
            n_bits: default_n_bits(),
            k_bits: default_k_bits(),
            n_samples: default_samples(),
            dim: default_dim(),
        }
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(TaskError::BadFraction(self.train_fraction));
        }
        if self.kind.is_modular() && !is_prime(self.p) {
            return Err(TaskError::BadModulus(self.p));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<Dataset, TaskError> {
        match self.kind {
            k if k.is_modular() => gen_modular(self),
            TaskKind::SparseParity => gen_sparse_parity(
                self.n_bits,
                self.k_bits,
                self.n_samples,
                self.train_fraction,
                self.seed,
            ),
            TaskKind::PolyRegression => {
                gen_poly_regression(self.dim, self.n_samples, self.train_fraction, self.seed)
            }
            _ => unreachable!(),
        }
    }
}

pub fn is_prime(n: usize) -> bool {
    if n < 2 {
        return false;
    }
    let mut d = 2;
    while d * d <= n {
        if n.is_multiple_of(d) {
            return false;
        }
        d += 1;
    }
    true
}

/// Model inputs for a set of examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Inputs {
    /// Token pairs; each is fed as the sum of two one-hot vectors.
    Pairs(Vec<(usize, usize)>),
    /// Dense real-valued feature rows.
    Vectors(Matrix),
}

impl Inputs {
    pub fn len(&self) -> usize {
        match self {
            Inputs::Pairs(p) => p.len(),
            Inputs::Vectors(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Inputs {
        match self {
            Inputs::Pairs(p) => Inputs::Pairs(idx.iter().map(|&i| p[i]).collect()),
            Inputs::Vectors(m) => {
                let mut out = Matrix::zeros(idx.len(), m.cols());
                for (r, &i) in idx.iter().enumerate() {
                    out.row_mut(r).copy_from_slice(m.row(i));
                }
                Inputs::Vectors(out)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// A set of examples with its inputs and targets materialised.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Inputs,
    pub targets: Targets,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: TaskKind,
    /// Modulus for modular tasks; input dimensionality otherwise.
    pub p_or_dim: usize,
    pub inputs: Inputs,
    pub targets: Targets,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

#[derive(Serialize)]
struct DatasetExport<'a> {
    kind: TaskKind,
    p: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pairs: Option<&'a [(usize, usize)]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    vectors: Option<Vec<&'a [f64]>>,
    targets: &'a Targets,
    train_idx: &'a [usize],
    test_idx: &'a [usize],
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Input width of the model: `p` for token pairs, feature count otherwise.
    pub fn input_dim(&self) -> usize {
        match &self.inputs {
            Inputs::Pairs(_) => self.p_or_dim,
            Inputs::Vectors(m) => m.cols(),
        }
    }

    /// Output width of the model: number of classes, or 1 for regression.
    pub fn output_dim(&self) -> usize {
        match self.kind {
            TaskKind::SparseParity => 2,
            TaskKind::PolyRegression => 1,
            _ => self.p_or_dim,
        }
    }

    pub fn train(&self) -> Batch {
        self.batch(&self.train_idx)
    }

    pub fn test(&self) -> Batch {
        self.batch(&self.test_idx)
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select(idx),
            targets: self.targets.select(idx),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let export = DatasetExport {
            kind: self.kind,
            p: self.p_or_dim,
            pairs: match &self.inputs {
                Inputs::Pairs(p) => Some(p),
                _ => None,
            },
            vectors: match &self.inputs {
                Inputs::Vectors(m) => Some((0..m.rows()).map(|r| m.row(r)).collect()),
                _ => None,
            },
            targets: &self.targets,
            train_idx: &self.train_idx,
            test_idx: &self.test_idx,
        };
        serde_json::to_value(export).expect("dataset export is always serialisable")
    }
}

fn split(n: usize, train_fraction: f64, rng: &mut SeededRng) -> Result<(Vec<usize>, Vec<usize>), TaskError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(TaskError::BadFraction(train_fraction));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let n_train = (train_fraction * n as f64).floor() as usize;
    let test = order.split_off(n_train);
    Ok((order, test))
}

/// All pairs `a > b` over `0..p` with `c = op(a, b) mod p`, split by a
/// seeded shuffle.
pub fn gen_modular(spec: &TaskSpec) -> Result<Dataset, TaskError> {
    if !spec.kind.is_modular() {
        return Err(TaskError::Invalid(format!("{:?} is not a modular task", spec.kind)));
    }
    spec.validate()?;
    let p = spec.p;
    let mut pairs = Vec::with_capacity(p * (p - 1) / 2);
    let mut targets = Vec::with_capacity(p * (p - 1) / 2);
    for a in 0..p {
        for b in 0..a {
            pairs.push((a, b));
            targets.push(spec.kind.apply(a, b, p).expect("modular kind"));
        }
    }
    let mut rng = SeededRng::new(spec.seed);
    let (train_idx, test_idx) = split(pairs.len(), spec.train_fraction, &mut rng)?;
    Ok(Dataset {
        kind: spec.kind,
        p_or_dim: p,
        inputs: Inputs::Pairs(pairs),
        targets: Targets::Classes(targets),
        train_idx,
        test_idx,
    })
}

/// Label is 1 when the product of the first `k` ±1 coordinates is +1.
pub fn parity_label(x: &[f64], k: usize) -> usize {
    let prod: f64 = x[..k].iter().product();
    usize::from(prod > 0.0)
}

pub fn gen_sparse_parity(
    n_bits: usize,
    k: usize,
    n_samples: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<Dataset, TaskError> {
    if k == 0 || k > n_bits {
        return Err(TaskError::Invalid(format!("need 1 <= k <= n_bits, got k={k}, n={n_bits}")));
    }
    let mut rng = SeededRng::new(seed);
    let mut x = Matrix::zeros(n_samples, n_bits);
    let mut labels = Vec::with_capacity(n_samples);
    for r in 0..n_samples {
        for v in x.row_mut(r) {
            *v = if rng.next_u64() & 1 == 1 { 1.0 } else { -1.0 };
        }
        labels.push(parity_label(x.row(r), k));
    }
    let (train_idx, test_idx) = split(n_samples, train_fraction, &mut rng)?;
    Ok(Dataset {
        kind: TaskKind::SparseParity,
        p_or_dim: n_bits,
        inputs: Inputs::Vectors(x),
        targets: Targets::Classes(labels),
        train_idx,
        test_idx,
    })
}

/// Unit teacher direction drawn from the seed.
pub fn teacher_direction(dim: usize, rng: &mut SeededRng) -> Vec<f64> {
    loop {
        let u: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return u.into_iter().map(|v| v / norm).collect();
        }
    }
}

pub fn teacher_value(u: &[f64], x: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(x).map(|(a, b)| a * b).sum();
    dot * dot
}

/// `x ~ N(0, I)`, `y = (u·x)²` for a seeded unit vector `u`.
pub fn gen_poly_regression(
    dim: usize,
    n_samples: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<Dataset, TaskError> {
    if dim == 0 {
        return Err(TaskError::Invalid("dim must be >= 1".into()));
    }
    let mut rng = SeededRng::new(seed);
    let u = teacher_direction(dim, &mut rng);
    let mut x = Matrix::zeros(n_samples, dim);
    let mut y = Vec::with_capacity(n_samples);
    for r in 0..n_samples {
        for v in x.row_mut(r) {
            *v = rng.standard_normal();
        }
        y.push(teacher_value(&u, x.row(r)));
    }
    let (train_idx, test_idx) = split(n_samples, train_fraction, &mut rng)?;
    Ok(Dataset {
        kind: TaskKind::PolyRegression,
        p_or_dim: dim,
        inputs: Inputs::Vectors(x),
        targets: Targets::Values(y),
        train_idx,
        test_idx,
    })
}
