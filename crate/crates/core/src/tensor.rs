// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense numerical kernels: row-major `f32` matrices, softmax, norms,
//! one-sided Jacobi SVD and PCA.
//!
//! Storage is `f32`. Reductions that feed analysis results (dot products,
//! norms, SVD, PCA) accumulate in `f64`. The engine's large products go
//! through [`Matrix::matmul`], which uses a packed `sgemm` kernel and is
//! deterministic for a given shape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Row-major dense matrix of `f32`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    /// Build a matrix from row-major data; the length must equal `rows * cols`.
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("data length {} does not match {rows}x{cols}", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Stack equal-length rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!("row {i} has length {} (expected {cols})", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    /// Matrix whose columns are the given vectors.
    pub fn from_columns(cols: &[Vec<f32>]) -> Result<Self> {
        Ok(Self::from_rows(cols)?.transpose())
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
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f32> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Error unless every entry is finite.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Copy of rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self { rows: end - start, cols: self.cols, data: self.data[start * self.cols..end * self.cols].to_vec() }
    }

    /// Copy of columns `start..end`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Self {
        Self::from_fn(self.rows, end - start, |i, j| self.get(i, start + j))
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!("matmul {}x{} by {}x{}", self.rows, self.cols, other.rows, other.cols)));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(
            self.rows,
            self.cols,
            other.cols,
            &self.data,
            (self.cols as isize, 1),
            &other.data,
            (other.cols as isize, 1),
            &mut out.data,
        );
        Ok(out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "matmul_t {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(
            self.rows,
            self.cols,
            other.rows,
            &self.data,
            (self.cols as isize, 1),
            &other.data,
            (1, other.cols as isize),
            &mut out.data,
        );
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!(
                "t_matmul ({}x{})ᵀ by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm(
            self.cols,
            self.rows,
            other.cols,
            &self.data,
            (1, self.cols as isize),
            &other.data,
            (other.cols as isize, 1),
            &mut out.data,
        );
        Ok(out)
    }

    /// Row vector times matrix: `v · self`, accumulated in `f64`.
    pub fn vec_mul(&self, v: &[f32]) -> Result<Vec<f32>> {
        if v.len() != self.rows {
            return Err(Error::Shape(format!("vector of length {} times {}x{}", v.len(), self.rows, self.cols)));
        }
        let mut acc = vec![0.0f64; self.cols];
        for (i, &x) in v.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let x = f64::from(x);
            for (a, &w) in acc.iter_mut().zip(self.row(i)) {
                *a += x * f64::from(w);
            }
        }
        Ok(acc.into_iter().map(|a| a as f32).collect())
    }

    /// Matrix times column vector: `self · v`, accumulated in `f64`.
    pub fn mul_vec(&self, v: &[f32]) -> Result<Vec<f32>> {
        if v.len() != self.cols {
            return Err(Error::Shape(format!("{}x{} times vector of length {}", self.rows, self.cols, v.len())));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v) as f32).collect())
    }

    pub fn scale(&self, s: f32) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f32, f32) -> f32) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!("elementwise {:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Frobenius norm with an `f64` accumulator.
    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    c: &mut [f32],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    // SAFETY: the slices cover every element addressed by the given
    // dimensions and strides (checked by the callers' shape tests), and
    // `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

// ---------------------------------------------------------------------------
// Vector helpers
// ---------------------------------------------------------------------------

/// Dot product with an `f64` accumulator.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

#[inline]
pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity `u·v / (‖u‖‖v‖)`, clamped to `[-1, 1]`.
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("cosine of vectors with lengths {} and {}", u.len(), v.len())));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Degenerate("cosine of a zero vector".into()));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Scale `v` to unit length.
pub fn normalized(v: &[f32]) -> Result<Vec<f32>> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Degenerate("cannot normalize a zero vector".into()));
    }
    Ok(v.iter().map(|&x| (f64::from(x) / n) as f32).collect())
}

/// Numerically stable in-place softmax; the normalizer is summed in `f64`.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    if !max.is_finite() {
        return;
    }
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        let e = (*v - max).exp();
        *v = e;
        sum += f64::from(e);
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v = (f64::from(*v) * inv) as f32;
    }
}

/// Softmax over `f32` logits returning `f64` probabilities.
pub fn softmax_f64(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
    let exps: Vec<f64> = logits.iter().map(|&v| (f64::from(v) - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// LayerNorm over one row: `(x − mean) / sqrt(var + eps) · gain + bias`.
pub fn layer_norm_row(x: &[f32], gain: &[f32], bias: Option<&[f32]>, eps: f32, out: &mut [f32]) {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = x
        .iter()
        .map(|&v| {
            let d = f64::from(v) - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let inv = 1.0 / (var + f64::from(eps)).sqrt();
    for (i, o) in out.iter_mut().enumerate() {
        let mut y = ((f64::from(x[i]) - mean) * inv) as f32 * gain[i];
        if let Some(b) = bias {
            y += b[i];
        }
        *o = y;
    }
}

/// RMSNorm over one row: `x / sqrt(mean(x²) + eps) · gain`.
pub fn rms_norm_row(x: &[f32], gain: &[f32], eps: f32, out: &mut [f32]) {
    let n = x.len() as f64;
    let ms = x.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / n;
    let inv = 1.0 / (ms + f64::from(eps)).sqrt();
    for (i, o) in out.iter_mut().enumerate() {
        *o = (f64::from(x[i]) * inv) as f32 * gain[i];
    }
}

// ---------------------------------------------------------------------------
// SVD
// ---------------------------------------------------------------------------

/// Thin singular value decomposition `A = U Σ Vᵀ`.
///
/// For an `m×n` input with `k = min(m, n)`: `left_vectors` is `m×k`,
/// `singular_values` has length `k` (non-increasing), `right_vectors` is
/// `n×k`. Both factor matrices are column-orthonormal even when `A` is
/// rank-deficient (null columns are completed to an orthonormal set).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdResult {
    pub left_vectors: Matrix,
    pub singular_values: Vec<f32>,
    pub right_vectors: Matrix,
}

impl SvdResult {
    /// `U Σ Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let (m, k) = self.left_vectors.shape();
        let n = self.right_vectors.rows();
        Matrix::from_fn(m, n, |i, j| {
            (0..k)
                .map(|r| {
                    f64::from(self.left_vectors.get(i, r))
                        * f64::from(self.singular_values[r])
                        * f64::from(self.right_vectors.get(j, r))
                })
                .sum::<f64>() as f32
        })
    }
}

const JACOBI_MAX_SWEEPS: usize = 80;
const JACOBI_TOL: f64 = 1e-15;

/// One-sided Jacobi SVD computed in `f64`.
///
/// Sign convention: the first entry of each right singular vector whose
/// magnitude exceeds `1e-12` is positive; the matching left vector is
/// flipped with it.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    a.ensure_finite("svd input")?;
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Err(Error::InvalidInput("svd of an empty matrix".into()));
    }
    if m >= n {
        let cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| f64::from(a.get(i, j))).collect()).collect();
        let (u, s, v) = jacobi_columns(cols, m);
        Ok(finish_svd(u, s, v, m, n, false))
    } else {
        // Work on Aᵀ (n×m, tall) and swap the factors.
        let cols: Vec<Vec<f64>> = (0..m).map(|i| a.row(i).iter().map(|&x| f64::from(x)).collect()).collect();
        let (u, s, v) = jacobi_columns(cols, n);
        Ok(finish_svd(u, s, v, m, n, true))
    }
}

/// Orthogonalizes the `k` columns (each of length `len`) by plane rotations.
/// Returns (left columns, singular values, right columns), unsorted.
fn jacobi_columns(mut cols: Vec<Vec<f64>>, len: usize) -> (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>) {
    let k = cols.len();
    let mut v: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            let mut e = vec![0.0; k];
            e[j] = 1.0;
            e
        })
        .collect();
    let mut norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum()).collect();

    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..k {
            for q in (p + 1)..k {
                let alpha = norms[p];
                let beta = norms[q];
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                if gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
                let (lo, hi) = v.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
                norms[p] = cols[p].iter().map(|x| x * x).sum();
                norms[q] = cols[q].iter().map(|x| x * x).sum();
            }
        }
        if !rotated {
            break;
        }
    }

    let sigma: Vec<f64> = norms.iter().map(|x| x.sqrt()).collect();
    let smax = sigma.iter().cloned().fold(0.0, f64::max);
    let cutoff = smax * 1e-10;
    let mut u: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut null_slots = Vec::new();
    for (j, col) in cols.into_iter().enumerate() {
        if sigma[j] > cutoff && sigma[j] > 0.0 {
            u.push(col.iter().map(|x| x / sigma[j]).collect());
        } else {
            null_slots.push(j);
            u.push(vec![0.0; len]);
        }
    }
    complete_orthonormal(&mut u, &null_slots, len);
    let sigma = sigma.into_iter().map(|s| if s > cutoff { s } else { 0.0 }).collect();
    (u, sigma, v)
}

#[inline]
fn rotate(a: &mut [f64], b: &mut [f64], c: f64, s: f64) {
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xa, yb) = (*x, *y);
        *x = c * xa - s * yb;
        *y = s * xa + c * yb;
    }
}

/// Fill the listed slots with unit vectors orthogonal to all other columns.
fn complete_orthonormal(cols: &mut [Vec<f64>], slots: &[usize], len: usize) {
    let mut candidate = 0usize;
    for &slot in slots {
        while candidate < len {
            let mut e = vec![0.0; len];
            e[candidate] = 1.0;
            candidate += 1;
            // Two passes of Gram-Schmidt against every filled column.
            for _ in 0..2 {
                for (j, c) in cols.iter().enumerate() {
                    if j == slot || (slots.contains(&j) && c.iter().all(|x| *x == 0.0)) {
                        continue;
                    }
                    let proj: f64 = e.iter().zip(c).map(|(x, y)| x * y).sum();
                    e.iter_mut().zip(c).for_each(|(x, y)| *x -= proj * y);
                }
            }
            let n: f64 = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                cols[slot] = e.into_iter().map(|x| x / n).collect();
                break;
            }
        }
    }
}

fn finish_svd(u: Vec<Vec<f64>>, s: Vec<f64>, v: Vec<Vec<f64>>, m: usize, n: usize, swapped: bool) -> SvdResult {
    // When swapped, the Jacobi "left" columns live in the row space of A.
    let (mut left, mut right) = if swapped { (v, u) } else { (u, v) };
    let k = s.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));

    for j in 0..k {
        let r = &right[j];
        let flip = r.iter().find(|x| x.abs() > 1e-12).is_some_and(|x| *x < 0.0);
        if flip {
            right[j].iter_mut().for_each(|x| *x = -*x);
            left[j].iter_mut().for_each(|x| *x = -*x);
        }
    }

    let left_m = Matrix::from_fn(m, k, |i, c| left[order[c]][i] as f32);
    let right_m = Matrix::from_fn(n, k, |i, c| right[order[c]][i] as f32);
    let sv = order.iter().map(|&j| s[j] as f32).collect();
    SvdResult { left_vectors: left_m, singular_values: sv, right_vectors: right_m }
}

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

/// Principal component basis fit to mean-centered samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    pub mean: Vec<f32>,
    /// `d × n_components`, columns are principal directions.
    pub components: Matrix,
    /// Fraction of total variance per retained component.
    pub explained_variance_ratio: Vec<f64>,
    /// Fraction of total variance for every available component.
    pub spectrum_ratio: Vec<f64>,
    /// Sample variance (`n − 1` denominator) per available component.
    pub explained_variance: Vec<f64>,
    /// Total variance is zero: ratios are reported as zero.
    pub degenerate: bool,
}

impl PcaBasis {
    pub fn n_components(&self) -> usize {
        self.components.cols()
    }

    /// Coordinates of `x − mean` in the component basis.
    pub fn project(&self, x: &[f32]) -> Vec<f32> {
        let centered: Vec<f32> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        (0..self.components.cols())
            .map(|c| {
                (0..self.components.rows())
                    .map(|i| f64::from(centered[i]) * f64::from(self.components.get(i, c)))
                    .sum::<f64>() as f32
            })
            .collect()
    }

    /// Map basis coordinates back to the ambient space (mean included).
    pub fn reconstruct(&self, coords: &[f32]) -> Vec<f32> {
        (0..self.components.rows())
            .map(|i| {
                let v: f64 =
                    coords.iter().enumerate().map(|(c, &z)| f64::from(z) * f64::from(self.components.get(i, c))).sum();
                (v + f64::from(self.mean[i])) as f32
            })
            .collect()
    }

    pub fn cumulative_ratio(&self) -> f64 {
        self.explained_variance_ratio.iter().sum()
    }
}

/// Fit PCA to `samples` (one sample per row).
pub fn pca_fit(samples: &Matrix, n_components: usize) -> Result<PcaBasis> {
    samples.ensure_finite("pca samples")?;
    let (n, d) = samples.shape();
    if n_components == 0 {
        return Err(Error::InvalidInput("n_components must be at least 1".into()));
    }
    if n_components > d {
        return Err(Error::InvalidInput(format!("n_components {n_components} exceeds feature dimension {d}")));
    }
    if n < n_components + 1 {
        return Err(Error::InvalidInput(format!(
            "pca needs at least {} samples for {n_components} components, got {n}",
            n_components + 1
        )));
    }
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for (m, &x) in mean.iter_mut().zip(samples.row(i)) {
            *m += f64::from(x);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = Matrix::from_fn(n, d, |i, j| (f64::from(samples.get(i, j)) - mean[j]) as f32);

    let svd = svd(&centered)?;
    let k_avail = svd.singular_values.len();
    let sq: Vec<f64> = svd.singular_values.iter().map(|&s| f64::from(s) * f64::from(s)).collect();
    let total: f64 = sq.iter().sum();
    let degenerate = total <= f64::MIN_POSITIVE;
    let spectrum_ratio: Vec<f64> = if degenerate { vec![0.0; k_avail] } else { sq.iter().map(|s| s / total).collect() };
    let explained_variance = sq.iter().map(|s| s / (n as f64 - 1.0)).collect();

    // Components beyond the available SVD rank (n − 1 < n_components is
    // excluded above, but k_avail can be < n_components when d > n is false
    // and n < d) are padded by orthonormal completion in `svd`.
    let mut components = Matrix::zeros(d, n_components);
    for c in 0..n_components.min(k_avail) {
        for i in 0..d {
            components.set(i, c, svd.right_vectors.get(i, c));
        }
    }
    let ratio = (0..n_components).map(|c| spectrum_ratio.get(c).copied().unwrap_or(0.0)).collect();

    Ok(PcaBasis {
        mean: mean.into_iter().map(|m| m as f32).collect(),
        components,
        explained_variance_ratio: ratio,
        spectrum_ratio,
        explained_variance,
        degenerate,
    })
}
