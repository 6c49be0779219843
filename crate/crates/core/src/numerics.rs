//! Dense row-major matrices, a portable seeded RNG and singular values.
//!
//! Everything here is deterministic: products accumulate over the shared
//! dimension in index order, and the RNG is ChaCha8 with a fixed stream, so
//! identical seeds give identical bits on every platform.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("Jacobi SVD did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize, estimate: Vec<f64> },
}

pub type Result<T> = std::result::Result<T, NumericsError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(NumericsError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(NumericsError::BadLength {
                    rows: r,
                    cols: c,
                    len: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: r,
            cols: c,
            data,
        })
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`. Each output entry accumulates over the shared index
    /// in increasing order.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(NumericsError::DimensionMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        matmul_into(self, other, &mut out);
        Ok(out)
    }

    /// `selfᵀ · other` without materialising the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(NumericsError::DimensionMismatch {
                op: "t_matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm(&self.data, 1, self.cols, &other.data, self.cols, self.rows, other.cols, &mut out.data);
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(NumericsError::DimensionMismatch {
                op: "matmul_t",
                left: self.shape(),
                right: other.shape(),
            });
        }
        self.matmul(&other.transpose())
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(NumericsError::DimensionMismatch {
                op: "hadamard",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn abs(&self) -> Matrix {
        self.map(f64::abs)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Writes `a · b` into `out`, overwriting it. Shapes are the caller's
/// responsibility.
pub(crate) fn matmul_into(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!(out.shape(), (a.rows, b.cols));
    gemm(&a.data, a.cols, 1, &b.data, a.rows, a.cols, b.cols, &mut out.data);
}

/// `out = A·B` where `A[i][k] = a[i·row_stride + k·k_stride]` (m × kdim) and
/// `b` is row-major kdim × n. Every output entry is accumulated from 0 over
/// increasing `k` with separate multiply and add, so the wide and scalar
/// paths agree bit for bit.
#[allow(clippy::too_many_arguments)]
fn gemm(a: &[f64], row_stride: usize, k_stride: usize, b: &[f64], m: usize, kdim: usize, n: usize, out: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            unsafe { gemm_avx2(a, row_stride, k_stride, b, m, kdim, n, out) };
            return;
        }
    }
    gemm_portable(a, row_stride, k_stride, b, m, kdim, n, out);
}

const MR: usize = 4;
const NR: usize = 8;

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn gemm_portable(
    a: &[f64],
    row_stride: usize,
    k_stride: usize,
    b: &[f64],
    m: usize,
    kdim: usize,
    n: usize,
    out: &mut [f64],
) {
    debug_assert!(out.len() == m * n && b.len() == kdim * n);
    if n == 0 {
        return;
    }
    // Rows i..i+MR of A, packed k-major so each step reads one contiguous chunk.
    let mut packed = vec![0.0f64; kdim * MR];
    let mut i = 0;
    while i < m {
        let mr = MR.min(m - i);
        for k in 0..kdim {
            for r in 0..mr {
                packed[k * MR + r] = a[(i + r) * row_stride + k * k_stride];
            }
        }
        let mut j = 0;
        while j < n {
            let nr = NR.min(n - j);
            let mut acc = [[0.0f64; NR]; MR];
            if nr == NR {
                for (ak, brow) in packed.chunks_exact(MR).zip(b.chunks_exact(n)) {
                    let bk: &[f64; NR] = brow[j..j + NR].try_into().expect("tile width");
                    for (row, &av) in acc.iter_mut().zip(ak) {
                        for (o, &bv) in row.iter_mut().zip(bk) {
                            *o += av * bv;
                        }
                    }
                }
            } else {
                for (ak, brow) in packed.chunks_exact(MR).zip(b.chunks_exact(n)) {
                    let bk = &brow[j..j + nr];
                    for (row, &av) in acc.iter_mut().zip(ak) {
                        for (o, &bv) in row.iter_mut().zip(bk) {
                            *o += av * bv;
                        }
                    }
                }
            }
            for (r, row) in acc.iter().enumerate().take(mr) {
                out[(i + r) * n + j..(i + r) * n + j + nr].copy_from_slice(&row[..nr]);
            }
            j += NR;
        }
        i += MR;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_avx2(
    a: &[f64],
    row_stride: usize,
    k_stride: usize,
    b: &[f64],
    m: usize,
    kdim: usize,
    n: usize,
    out: &mut [f64],
) {
    gemm_portable(a, row_stride, k_stride, b, m, kdim, n, out);
}

/// Seeded ChaCha8 stream with Box–Muller normals.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// An independent stream derived from this rng's seed and a label.
    pub fn derive(&self, stream: u64) -> Self {
        let mixed = splitmix64(self.seed ^ splitmix64(stream.wrapping_add(0x9e37_79b9_7f4a_7c15)));
        Self::new(mixed)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n) by rejection, so there is no modulo bias.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fisher–Yates, walking from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// I.i.d. `N(0, std²)` entries drawn row by row.
pub fn gaussian_matrix(rng: &mut SeededRng, rows: usize, cols: usize, std: f64) -> Result<Matrix> {
    if !(std.is_finite() && std > 0.0) {
        return Err(NumericsError::InvalidArgument(format!(
            "standard deviation must be positive, got {std}"
        )));
    }
    let data = (0..rows * cols).map(|_| std * rng.standard_normal()).collect();
    Matrix::from_vec(rows, cols, data)
}

pub const SVD_TOLERANCE: f64 = 1e-10;
pub const SVD_MAX_SWEEPS: usize = 100;

/// Singular values in descending order via one-sided Jacobi rotations.
///
/// The matrix is oriented so that the columns being orthogonalised are the
/// shorter side; the result has `min(rows, cols)` entries.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    if !m.is_finite() {
        return Err(NumericsError::NonFinite("singular_values input"));
    }
    if m.is_empty() {
        return Ok(Vec::new());
    }
    // Work column-major on the orientation with fewer columns.
    let work = if m.cols() <= m.rows() { m.transpose() } else { m.clone() };
    // `work` rows are the vectors to orthogonalise.
    let n = work.rows();
    let len = work.cols();
    let mut vecs: Vec<Vec<f64>> = (0..n).map(|i| work.row(i).to_vec()).collect();
    // Columns below this squared norm are numerically zero and left alone.
    let negligible = (f64::EPSILON * m.frobenius_norm()).powi(2);
    let mut converged = false;
    for _ in 0..SVD_MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let (alpha, beta, gamma) = {
                    let (a, b) = (&vecs[i], &vecs[j]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for k in 0..len {
                        alpha += a[k] * a[k];
                        beta += b[k] * b[k];
                        gamma += a[k] * b[k];
                    }
                    (alpha, beta, gamma)
                };
                if alpha.min(beta) <= negligible
                    || gamma.abs() <= SVD_TOLERANCE * (alpha * beta).sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = vecs.split_at_mut(j);
                let a = &mut lo[i];
                let b = &mut hi[0];
                for k in 0..len {
                    let x = a[k];
                    let y = b[k];
                    a[k] = c * x - s * y;
                    b[k] = s * x + c * y;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    let mut sv: Vec<f64> = vecs
        .iter()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if converged {
        Ok(sv)
    } else {
        Err(NumericsError::NoConvergence {
            sweeps: SVD_MAX_SWEEPS,
            estimate: sv,
        })
    }
}
