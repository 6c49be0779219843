//! Progress measures and structural statistics: accuracies and threshold
//! crossing times, mask Jaccard distance, Fourier entropy of the input
//! projection, spectral and Ramanujan gaps, and relational-graph statistics.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Layer, MaskSet, ModelParams};
use crate::numerics::{singular_values, Matrix, NumericsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("{0}")]
    Invalid(String),
    #[error("trace parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the target class.
pub fn accuracy(logits: &Matrix, targets: &[usize]) -> f64 {
    assert_eq!(logits.rows(), targets.len(), "accuracy on mismatched batch");
    if targets.is_empty() {
        return 0.0;
    }
    let hits = targets
        .iter()
        .enumerate()
        .filter(|&(r, &t)| argmax(logits.row(r)) == t)
        .count();
    hits as f64 / targets.len() as f64
}

/// Regression "accuracy": fraction of predictions (first output column)
/// within `tol` of the target.
pub fn regression_accuracy(predictions: &Matrix, targets: &[f64], tol: f64) -> f64 {
    assert_eq!(predictions.rows(), targets.len(), "accuracy on mismatched batch");
    if targets.is_empty() {
        return 0.0;
    }
    let hits = targets
        .iter()
        .enumerate()
        .filter(|&(r, &y)| (predictions.get(r, 0) - y).abs() <= tol)
        .count();
    hits as f64 / targets.len() as f64
}

/// One row of the training trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub l1: f64,
    pub l2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerStructure {
    /// Distance to the previous snapshot's mask; absent on the first one.
    pub jaccard: Option<f64>,
    pub spectral_gap: f64,
    pub ramanujan_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralSnapshot {
    pub epoch: usize,
    #[serde(default)]
    pub train_acc: f64,
    #[serde(default)]
    pub test_acc: f64,
    pub layers: Vec<(String, LayerStructure)>,
    pub fe: f64,
    pub path_length: f64,
    pub clustering: f64,
}

impl StructuralSnapshot {
    pub fn layer(&self, l: Layer) -> Option<&LayerStructure> {
        self.layers.iter().find(|(n, _)| n == l.name()).map(|(_, s)| s)
    }

    /// Arithmetic mean of the weighted spectral gap over layers.
    pub fn mean_spectral_gap(&self) -> f64 {
        mean(self.layers.iter().map(|(_, s)| s.spectral_gap))
    }

    pub fn mean_ramanujan_gap(&self) -> f64 {
        mean(self.layers.iter().map(|(_, s)| s.ramanujan_gap))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub records: Vec<EpochRecord>,
    pub snapshots: Vec<StructuralSnapshot>,
}

pub const TRACE_HEADER: &str = "epoch,train_loss,test_loss,train_acc,test_acc,l1,l2";

impl TrainingTrace {
    pub fn push(&mut self, r: EpochRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if r.epoch <= last.epoch {
                return Err(MetricsError::Invalid(format!(
                    "epoch {} does not follow {}",
                    r.epoch, last.epoch
                )));
            }
        }
        if !(0.0..=1.0).contains(&r.train_acc) || !(0.0..=1.0).contains(&r.test_acc) {
            return Err(MetricsError::Invalid(format!("accuracy outside [0, 1] at epoch {}", r.epoch)));
        }
        self.records.push(r);
        Ok(())
    }

    pub fn record_at(&self, epoch: usize) -> Option<&EpochRecord> {
        self.records
            .binary_search_by_key(&epoch, |r| r.epoch)
            .ok()
            .map(|i| &self.records[i])
    }

    pub fn snapshot_at(&self, epoch: usize) -> Option<&StructuralSnapshot> {
        self.snapshots.iter().find(|s| s.epoch == epoch)
    }

    /// CSV body: optional `#` comment lines, the header, one row per epoch.
    /// Values use Rust's shortest round-trip formatting.
    pub fn to_csv(&self, comment: Option<&str>) -> String {
        let mut out = String::new();
        if let Some(c) = comment {
            for line in c.lines() {
                let _ = writeln!(out, "# {line}");
            }
        }
        out.push_str(TRACE_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:?},{:?},{:?},{:?},{:?},{:?}",
                r.epoch, r.train_loss, r.test_loss, r.train_acc, r.test_acc, r.l1, r.l2
            );
        }
        out
    }

    /// Parses the CSV written by [`TrainingTrace::to_csv`]; snapshots are not
    /// part of the CSV and come back empty.
    pub fn from_csv(text: &str) -> Result<TrainingTrace> {
        let mut trace = TrainingTrace::default();
        let mut saw_header = false;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !saw_header {
                if line != TRACE_HEADER {
                    return Err(MetricsError::Parse {
                        line: i + 1,
                        msg: format!("expected header `{TRACE_HEADER}`"),
                    });
                }
                saw_header = true;
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 7 {
                return Err(MetricsError::Parse {
                    line: i + 1,
                    msg: format!("expected 7 fields, got {}", fields.len()),
                });
            }
            let num = |j: usize| -> Result<f64> {
                fields[j].parse::<f64>().map_err(|e| MetricsError::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })
            };
            let epoch = fields[0].parse::<usize>().map_err(|e| MetricsError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            trace.push(EpochRecord {
                epoch,
                train_loss: num(1)?,
                test_loss: num(2)?,
                train_acc: num(3)?,
                test_acc: num(4)?,
                l1: num(5)?,
                l2: num(6)?,
            })?;
        }
        Ok(trace)
    }
}

/// First-crossing epochs of train (`t_mem`) and test (`t_gen`) accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTimes {
    pub t_mem: Option<usize>,
    pub t_gen: Option<usize>,
    /// `t_gen / t_mem`; absent when either crossing is missing or `t_mem` is 0.
    pub tau_grok: Option<f64>,
}

/// Crossing times at threshold `P` percent (strictly exceeding `P/100`).
pub fn threshold_times(trace: &TrainingTrace, percent: f64) -> ThresholdTimes {
    let level = percent / 100.0;
    let t_mem = trace.records.iter().find(|r| r.train_acc > level).map(|r| r.epoch);
    let t_gen = trace.records.iter().find(|r| r.test_acc > level).map(|r| r.epoch);
    let tau_grok = match (t_mem, t_gen) {
        (Some(m), Some(g)) if m > 0 => Some(g as f64 / m as f64),
        _ => None,
    };
    ThresholdTimes { t_mem, t_gen, tau_grok }
}

/// `1 − |a∩b| / |a∪b|` over the 1-entries; two empty masks are at distance 0.
pub fn jaccard_distance(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(MetricsError::ShapeMismatch(a.shape(), b.shape()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x != 0.0, y != 0.0);
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 {
        0.0
    } else {
        1.0 - inter as f64 / union as f64
    })
}

pub fn jaccard_per_layer(a: &MaskSet, b: &MaskSet) -> Result<[f64; 4]> {
    let mut out = [0.0; 4];
    for l in Layer::ALL {
        out[l.index()] = jaccard_distance(&a[l], &b[l])?;
    }
    Ok(out)
}

/// `W_inᵀ W_emb` (d_hid × d_in): each hidden neuron's profile over input
/// tokens. Masks, when given, are applied to both factors first.
pub fn w_inproj(params: &ModelParams, masks: Option<&MaskSet>) -> Result<Matrix> {
    let (emb, w_in) = match masks {
        Some(m) => (
            params[Layer::Emb].hadamard(&m[Layer::Emb])?,
            params[Layer::In].hadamard(&m[Layer::In])?,
        ),
        None => (params[Layer::Emb].clone(), params[Layer::In].clone()),
    };
    Ok(w_in.t_matmul(&emb)?)
}

/// Magnitudes `|F(ω)|`, `ω = 0..N−1`, of a real sequence by direct summation.
pub fn dft_magnitudes(row: &[f64]) -> Vec<f64> {
    let n = row.len();
    (0..n)
        .map(|w| {
            let (mut re, mut im) = (0.0, 0.0);
            for (x, &f) in row.iter().enumerate() {
                // Reduce the phase index first to keep the angle small.
                let k = (w * x) % n;
                let ang = -2.0 * std::f64::consts::PI * k as f64 / n as f64;
                re += f * ang.cos();
                im += f * ang.sin();
            }
            (re * re + im * im).sqrt()
        })
        .collect()
}

/// Shannon entropy (nats) of one row's non-DC DFT magnitude distribution.
/// A row with no non-DC energy gets the maximal value `ln(N−1)`.
pub fn row_fourier_entropy(row: &[f64]) -> f64 {
    let mags = dft_magnitudes(row);
    let ac = &mags[1..];
    let total: f64 = ac.iter().sum();
    let max_entropy = (ac.len() as f64).ln();
    let floor = 1e-12 * (1.0 + row.iter().map(|v| v.abs()).sum::<f64>());
    if total.is_nan() || total <= floor {
        return max_entropy;
    }
    -ac.iter()
        .map(|m| m / total)
        .filter(|&q| q > 0.0)
        .map(|q| q * q.ln())
        .sum::<f64>()
}

/// Mean over neurons (rows) of the per-row Fourier entropy.
pub fn fourier_entropy(w_inproj: &Matrix) -> Result<f64> {
    if w_inproj.cols() < 2 {
        return Err(MetricsError::Invalid("Fourier entropy needs rows of length >= 2".into()));
    }
    if w_inproj.rows() == 0 {
        return Err(MetricsError::Invalid("Fourier entropy of an empty matrix".into()));
    }
    Ok(mean((0..w_inproj.rows()).map(|r| row_fourier_entropy(w_inproj.row(r)))))
}

/// `σ₀ − σ₁` of `|W ⊙ m|`; the bipartite adjacency spectrum is `±σᵢ`.
pub fn weighted_spectral_gap(weights: &Matrix, mask: Option<&Matrix>) -> Result<f64> {
    let w = match mask {
        Some(m) => weights.hadamard(m)?,
        None => weights.clone(),
    }
    .abs();
    let sv = match singular_values(&w) {
        Ok(sv) => sv,
        Err(NumericsError::NoConvergence { estimate, .. }) => estimate,
        Err(e) => return Err(e.into()),
    };
    let s0 = sv.first().copied().unwrap_or(0.0);
    let s1 = sv.get(1).copied().unwrap_or(0.0);
    Ok(s0 - s1)
}

/// Which eigenvalue stands in for the largest non-trivial one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonTrivialEigen {
    /// Third-largest adjacency eigenvalue (σ₂ for distinct singular values).
    #[default]
    ThirdLargest,
    /// Second-largest adjacency eigenvalue (σ₁).
    SecondLargest,
}

/// Full adjacency spectrum of the bipartite graph of a 0/1 mask, descending:
/// `σ₀ … σ_{m−1}`, then `|rows − cols|` zeros, then `−σ_{m−1} … −σ₀`.
pub fn bipartite_spectrum(mask: &Matrix) -> Result<Vec<f64>> {
    let sv = match singular_values(mask) {
        Ok(sv) => sv,
        Err(NumericsError::NoConvergence { estimate, .. }) => estimate,
        Err(e) => return Err(e.into()),
    };
    let zeros = mask.rows().abs_diff(mask.cols());
    let mut spec = sv.clone();
    spec.extend(std::iter::repeat_n(0.0, zeros));
    spec.extend(sv.iter().rev().map(|s| -s));
    Ok(spec)
}

/// `√(2·d_avg − 1) − μ̂` for the bipartite graph of a mask, with
/// `d_avg = 2·edges / (rows + cols)`.
pub fn ramanujan_gap(mask: &Matrix, choice: NonTrivialEigen) -> Result<f64> {
    let edges = mask.data().iter().filter(|&&v| v != 0.0).count();
    if edges == 0 {
        return Err(MetricsError::Invalid("Ramanujan gap of a mask without edges".into()));
    }
    let binary = mask.map(|v| if v != 0.0 { 1.0 } else { 0.0 });
    let spec = bipartite_spectrum(&binary)?;
    let pos = match choice {
        NonTrivialEigen::ThirdLargest => 2,
        NonTrivialEigen::SecondLargest => 1,
    };
    let mu = spec.get(pos).map_or(0.0, |v| v.abs());
    let d_avg = 2.0 * edges as f64 / (mask.rows() + mask.cols()) as f64;
    Ok((2.0 * d_avg - 1.0).max(0.0).sqrt() - mu)
}

/// Undirected simple graph over grouped neurons, stored as bitset rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationalGraph {
    n: usize,
    words: usize,
    bits: Vec<u64>,
}

impl RelationalGraph {
    pub fn new(n: usize) -> Self {
        let words = n.div_ceil(64).max(1);
        Self {
            n,
            words,
            bits: vec![0; n * words],
        }
    }

    pub fn complete(n: usize) -> Self {
        let mut g = Self::new(n);
        for u in 0..n {
            for v in (u + 1)..n {
                g.add_edge(u, v);
            }
        }
        g
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut g = Self::new(n);
        for &(u, v) in edges {
            g.add_edge(u, v);
        }
        g
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    /// Adds `{u, v}`; self-loops are ignored.
    pub fn add_edge(&mut self, u: usize, v: usize) {
        assert!(u < self.n && v < self.n, "node out of range");
        if u == v {
            return;
        }
        self.bits[u * self.words + v / 64] |= 1 << (v % 64);
        self.bits[v * self.words + u / 64] |= 1 << (u % 64);
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.bits[u * self.words + v / 64] & (1 << (v % 64)) != 0
    }

    pub fn neighbors(&self, u: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |&v| self.has_edge(u, v))
    }

    pub fn degree(&self, u: usize) -> usize {
        self.bits[u * self.words..(u + 1) * self.words]
            .iter()
            .map(|w| w.count_ones() as usize)
            .sum()
    }

    pub fn edge_count(&self) -> usize {
        (0..self.n).map(|u| self.degree(u)).sum::<usize>() / 2
    }

    fn bfs(&self, src: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n];
        dist[src] = Some(0);
        let mut queue = VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            let d = dist[u].expect("queued nodes have a distance");
            for v in self.neighbors(u) {
                if dist[v].is_none() {
                    dist[v] = Some(d + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Nodes of the largest connected component; the component containing
    /// the lowest node index wins ties.
    pub fn largest_component(&self) -> Vec<usize> {
        let mut seen = vec![false; self.n];
        let mut best: Vec<usize> = Vec::new();
        for s in 0..self.n {
            if seen[s] {
                continue;
            }
            let comp: Vec<usize> = self
                .bfs(s)
                .iter()
                .enumerate()
                .filter_map(|(v, d)| d.map(|_| v))
                .collect();
            for &v in &comp {
                seen[v] = true;
            }
            if comp.len() > best.len() {
                best = comp;
            }
        }
        best
    }
}

/// Groups each layer's units round-robin into `n_nodes` nodes and joins two
/// distinct nodes whenever a surviving weight connects their units.
pub fn build_relational_graph(masks: &MaskSet, n_nodes: usize) -> Result<RelationalGraph> {
    if n_nodes < 2 {
        return Err(MetricsError::Invalid(format!("relational graph needs >= 2 nodes, got {n_nodes}")));
    }
    let mut g = RelationalGraph::new(n_nodes);
    for l in Layer::ALL {
        let m = &masks[l];
        for r in 0..m.rows() {
            let u = r % n_nodes;
            for (c, &v) in m.row(r).iter().enumerate() {
                if v != 0.0 {
                    g.add_edge(u, c % n_nodes);
                }
            }
        }
    }
    Ok(g)
}

/// Mean shortest-path length over ordered pairs of the largest component.
pub fn avg_path_length(g: &RelationalGraph) -> Result<f64> {
    if g.node_count() < 2 {
        return Err(MetricsError::Invalid("average path length needs >= 2 nodes".into()));
    }
    let comp = g.largest_component();
    if comp.len() < 2 {
        return Ok(0.0);
    }
    let mut total = 0usize;
    for &s in &comp {
        let dist = g.bfs(s);
        total += comp.iter().filter(|&&t| t != s).map(|&t| dist[t].expect("same component")).sum::<usize>();
    }
    let pairs = comp.len() * (comp.len() - 1);
    Ok(total as f64 / pairs as f64)
}

/// Mean local clustering coefficient; nodes of degree < 2 contribute 0.
pub fn clustering_coefficient(g: &RelationalGraph) -> f64 {
    if g.node_count() == 0 {
        return 0.0;
    }
    let total: f64 = (0..g.node_count())
        .map(|u| {
            let nb: Vec<usize> = g.neighbors(u).collect();
            let k = nb.len();
            if k < 2 {
                return 0.0;
            }
            let mut links = 0usize;
            for (i, &a) in nb.iter().enumerate() {
                for &b in &nb[i + 1..] {
                    links += usize::from(g.has_edge(a, b));
                }
            }
            2.0 * links as f64 / (k * (k - 1)) as f64
        })
        .sum();
    total / g.node_count() as f64
}

/// L1 and L2 norms of the surviving coordinates of the whole parameter vector.
pub fn norms(params: &ModelParams, masks: Option<&MaskSet>) -> (f64, f64) {
    let (mut l1, mut sq) = (0.0, 0.0);
    for l in Layer::ALL {
        let w = params[l].data();
        match masks {
            Some(m) => {
                for (v, k) in w.iter().zip(m[l].data()) {
                    if *k != 0.0 {
                        l1 += v.abs();
                        sq += v * v;
                    }
                }
            }
            None => {
                for v in w {
                    l1 += v.abs();
                    sq += v * v;
                }
            }
        }
    }
    (l1, sq.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelDims, Tensors};

    fn rec(epoch: usize, train: f64, test: f64) -> EpochRecord {
        EpochRecord {
            epoch,
            train_loss: 0.0,
            test_loss: 0.0,
            train_acc: train,
            test_acc: test,
            l1: 0.0,
            l2: 0.0,
        }
    }

    #[test]
    fn accuracy_cases() {
        let logits = Matrix::from_rows(&[vec![0.1, 0.9], vec![2.0, 1.0], vec![0.5, 0.5]]).unwrap();
        assert_eq!(accuracy(&logits, &[1, 0, 0]), 1.0);
        assert_eq!(accuracy(&logits, &[0, 1, 1]), 0.0);
    }

    #[test]
    fn threshold_crossings() {
        let mut t = TrainingTrace::default();
        for (e, tr, te) in [(0, 0.5, 0.0), (10, 0.97, 0.1), (20, 1.0, 0.96)] {
            t.push(rec(e, tr, te)).unwrap();
        }
        let times = threshold_times(&t, 95.0);
        assert_eq!(times.t_mem, Some(10));
        assert_eq!(times.t_gen, Some(20));
        assert_eq!(times.tau_grok, Some(2.0));

        let mut t = TrainingTrace::default();
        t.push(rec(100, 1.0, 0.0)).unwrap();
        t.push(rec(1000, 1.0, 1.0)).unwrap();
        assert_eq!(threshold_times(&t, 95.0).tau_grok, Some(10.0));

        let mut t = TrainingTrace::default();
        t.push(rec(5, 0.2, 0.0)).unwrap();
        let times = threshold_times(&t, 95.0);
        assert_eq!((times.t_mem, times.t_gen, times.tau_grok), (None, None, None));
        assert!(t.push(rec(5, 0.2, 0.0)).is_err());
    }

    #[test]
    fn jaccard_cases() {
        let a = Matrix::from_vec(1, 4, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let b = Matrix::from_vec(1, 4, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let c = Matrix::from_vec(1, 4, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(jaccard_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(jaccard_distance(&a, &c).unwrap(), 1.0);
        assert!((jaccard_distance(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let z = Matrix::zeros(1, 4);
        assert_eq!(jaccard_distance(&z, &z).unwrap(), 0.0);
        assert!(jaccard_distance(&a, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn w_inproj_identity_embedding() {
        let dims = ModelDims {
            d_in: 4,
            d_emb: 4,
            d_hid: 3,
            d_out: 4,
        };
        let mut w = Tensors::zeros(&dims);
        w[Layer::Emb] = Matrix::identity(4);
        w[Layer::In] = Matrix::from_vec(4, 3, (0..12).map(f64::from).collect()).unwrap();
        let p = ModelParams::from_tensors(dims, w).unwrap();
        let proj = w_inproj(&p, None).unwrap();
        assert_eq!(proj, p[Layer::In].transpose());
    }

    #[test]
    fn fourier_entropy_cases() {
        let constant = Matrix::filled(1, 67, 0.3);
        assert!((fourier_entropy(&constant).unwrap() - 66f64.ln()).abs() < 1e-12);
        let zero = Matrix::zeros(2, 67);
        assert!((fourier_entropy(&zero).unwrap() - 66f64.ln()).abs() < 1e-12);
        let cos: Vec<f64> = (0..67)
            .map(|x| (2.0 * std::f64::consts::PI * 3.0 * x as f64 / 67.0).cos())
            .collect();
        let m = Matrix::from_vec(1, 67, cos).unwrap();
        assert!((fourier_entropy(&m).unwrap() - 2f64.ln()).abs() < 1e-9);
        assert!(fourier_entropy(&Matrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn spectral_gap_cases() {
        assert!((weighted_spectral_gap(&Matrix::diag(&[3.0, 1.0]), None).unwrap() - 2.0).abs() < 1e-12);
        assert!((weighted_spectral_gap(&Matrix::filled(2, 2, 1.0), None).unwrap() - 2.0).abs() < 1e-12);
        let w = Matrix::diag(&[-3.0, 1.0]);
        let mask = Matrix::diag(&[1.0, 0.0]);
        assert!((weighted_spectral_gap(&w, Some(&mask)).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn ramanujan_known_spectra() {
        let k33 = Matrix::filled(3, 3, 1.0);
        let gap = ramanujan_gap(&k33, NonTrivialEigen::ThirdLargest).unwrap();
        assert!((gap - 5f64.sqrt()).abs() < 1e-10);
        let matching = Matrix::identity(3);
        assert!(ramanujan_gap(&matching, NonTrivialEigen::ThirdLargest).unwrap().abs() < 1e-10);
        assert!(ramanujan_gap(&Matrix::zeros(2, 2), NonTrivialEigen::ThirdLargest).is_err());
        // K3,3 with the σ₁ convention: μ̂ = 0 as well.
        let gap = ramanujan_gap(&k33, NonTrivialEigen::SecondLargest).unwrap();
        assert!((gap - 5f64.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn relational_graph_extremes() {
        let dims = ModelDims::modular(7, 10, 6);
        let g = build_relational_graph(&MaskSet::ones(&dims), 5).unwrap();
        assert_eq!(g, RelationalGraph::complete(5));
        let g = build_relational_graph(&MaskSet::zeros(&dims), 5).unwrap();
        assert_eq!(g.edge_count(), 0);
        assert!(build_relational_graph(&MaskSet::ones(&dims), 1).is_err());
    }

    #[test]
    fn path_length_and_clustering() {
        let k3 = RelationalGraph::complete(3);
        assert_eq!(avg_path_length(&k3).unwrap(), 1.0);
        assert_eq!(clustering_coefficient(&k3), 1.0);
        let path = RelationalGraph::from_edges(3, &[(0, 1), (1, 2)]);
        assert!((avg_path_length(&path).unwrap() - 4.0 / 3.0).abs() < 1e-15);
        let star = RelationalGraph::from_edges(5, &[(0, 1), (0, 2), (0, 3), (0, 4)]);
        assert_eq!(clustering_coefficient(&star), 0.0);
        // Largest component only: a triangle plus an isolated edge.
        let g = RelationalGraph::from_edges(5, &[(0, 1), (1, 2), (0, 2), (3, 4)]);
        assert_eq!(avg_path_length(&g).unwrap(), 1.0);
        for n in 3..8 {
            let k = RelationalGraph::complete(n);
            assert_eq!(avg_path_length(&k).unwrap(), 1.0);
            assert_eq!(clustering_coefficient(&k), 1.0);
        }
    }

    #[test]
    fn norm_cases() {
        let dims = ModelDims {
            d_in: 1,
            d_emb: 1,
            d_hid: 1,
            d_out: 1,
        };
        let mut w = Tensors::zeros(&dims);
        w[Layer::Emb] = Matrix::from_vec(1, 1, vec![3.0]).unwrap();
        w[Layer::In] = Matrix::from_vec(1, 1, vec![-4.0]).unwrap();
        let p = ModelParams::from_tensors(dims, w).unwrap();
        assert_eq!(norms(&p, None), (7.0, 5.0));
        assert_eq!(norms(&p, Some(&MaskSet::ones(&dims))), (7.0, 5.0));
        assert_eq!(norms(&p, Some(&MaskSet::zeros(&dims))), (0.0, 0.0));
    }

    #[test]
    fn csv_round_trip() {
        let mut t = TrainingTrace::default();
        t.push(EpochRecord {
            epoch: 0,
            train_loss: 4.2,
            test_loss: 4.25,
            train_acc: 0.01,
            test_acc: 0.0,
            l1: 1234.5,
            l2: 33.1,
        })
        .unwrap();
        t.push(rec(1, 0.1, 0.2)).unwrap();
        let csv = t.to_csv(Some("config_hash=abc"));
        assert!(csv.starts_with("# config_hash=abc\nepoch,train_loss"));
        assert_eq!(TrainingTrace::from_csv(&csv).unwrap(), t);
        assert!(TrainingTrace::from_csv("bad,header\n").is_err());
    }
}
