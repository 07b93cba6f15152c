//! Dense row-major matrices and the handful of primitives the gradient code
//! is built from: products, Kronecker lifts, vectorization and entrywise maps.
//!
//! Every public constructor and operation returns matrices whose entries are
//! all finite. Reductions go through [`pairwise_sum`] / [`pairwise_dot`] so
//! that results do not depend on thread count.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{dim_mismatch, Error, Result};

/// Largest argument for which `f64::exp` stays finite.
pub const EXP_ARG_MAX: f64 = 709.782_712_893_384;

/// Upper bound on the number of entries `kron` will materialize.
pub const KRON_ENTRY_CAP: usize = 100_000_000;

const PAIRWISE_BLOCK: usize = 32;

/// Sum with a fixed binary reduction tree.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= PAIRWISE_BLOCK {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Inner product accumulated with the same tree as [`pairwise_sum`].
pub fn pairwise_dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.len() <= PAIRWISE_BLOCK {
        return a.iter().zip(b).map(|(x, y)| x * y).sum();
    }
    let mid = a.len() / 2;
    pairwise_dot(&a[..mid], &b[..mid]) + pairwise_dot(&a[mid..], &b[mid..])
}

fn first_non_finite(data: &[f64]) -> Option<(usize, f64)> {
    data.iter().copied().enumerate().find(|(_, v)| !v.is_finite())
}

fn ensure_finite(data: &[f64]) -> Result<()> {
    match first_non_finite(data) {
        Some((index, value)) => Err(Error::NonFinite { index, value }),
        None => Ok(()),
    }
}

/// A dense column of finite `f64` values.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("vectors must be non-empty".into()));
        }
        ensure_finite(&data)?;
        Ok(Self { data })
    }

    pub fn zeros(len: usize) -> Self {
        assert!(len > 0, "vectors must be non-empty");
        Self { data: vec![0.0; len] }
    }

    pub fn ones(len: usize) -> Self {
        assert!(len > 0, "vectors must be non-empty");
        Self { data: vec![1.0; len] }
    }

    pub(crate) fn from_vec_unchecked(data: Vec<f64>) -> Self {
        debug_assert!(first_non_finite(&data).is_none());
        Self { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        if self.len() != other.len() {
            return Err(dim_mismatch(
                "dot",
                format!("lengths {} and {}", self.len(), other.len()),
            ));
        }
        Ok(pairwise_dot(&self.data, &other.data))
    }

    /// Entrywise (Hadamard) product.
    pub fn hadamard(&self, other: &Vector) -> Result<Vector> {
        if self.len() != other.len() {
            return Err(dim_mismatch(
                "hadamard",
                format!("lengths {} and {}", self.len(), other.len()),
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Ok(Self { data })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

/// Dense row-major matrix of finite `f64` values with positive dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyMatrix { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(dim_mismatch(
                "Matrix::new",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        ensure_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from row slices; all rows must share one length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(dim_mismatch(
                    "Matrix::from_rows",
                    format!("row {i} has {} entries, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrices must be non-empty");
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrices must be non-empty");
        assert!(value.is_finite());
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// `f` must return finite values.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrices must be non-empty");
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        assert!(first_non_finite(&data).is_none(), "from_fn produced a non-finite entry");
        Self { rows, cols, data }
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub(crate) fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Matrix::from_vec_unchecked(self.cols, self.rows, out)
    }

    /// Entrywise infinity norm, `max |m_ij|`.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_sq(&self) -> f64 {
        pairwise_dot(&self.data, &self.data)
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        let data = self.data.iter().map(|v| v * s).collect();
        Matrix::from_vec_unchecked(self.rows, self.cols, data)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("add", other, |a, b| a + b)
    }

    /// Entrywise (Hadamard) product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("hadamard", other, |a, b| a * b)
    }

    fn zip_with(&self, op: &'static str, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(dim_mismatch(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let data: Vec<f64> = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        ensure_finite(&data)?;
        Ok(Matrix::from_vec_unchecked(self.rows, self.cols, data))
    }

    /// `‖self − other‖∞`.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(dim_mismatch(
                "max_abs_diff",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn trace(&self) -> Result<f64> {
        if self.rows != self.cols {
            return Err(dim_mismatch("trace", format!("{}x{} is not square", self.rows, self.cols)));
        }
        let diag: Vec<f64> = (0..self.rows).map(|i| self.get(i, i)).collect();
        Ok(pairwise_sum(&diag))
    }
}

impl Serialize for Matrix {
    /// Serializes as a list of rows.
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeSeq;
        let mut seq = serializer.serialize_seq(Some(self.rows))?;
        for i in 0..self.rows {
            seq.serialize_element(self.row(i))?;
        }
        seq.end()
    }
}

/// Row-major flattening: `x[i0 * cols + i1] = X[i0, i1]`.
///
/// With the Kronecker layout of [`kron`] this ordering makes
/// `vec(A1 X A2ᵀ) = kron(A1, A2) vec(X)` hold.
pub fn vec(m: &Matrix) -> Vector {
    Vector::from_vec_unchecked(m.data.clone())
}

/// Inverse of [`vec`].
pub fn unvec(v: &Vector, rows: usize, cols: usize) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyMatrix { rows, cols });
    }
    if v.len() != rows * cols {
        return Err(dim_mismatch(
            "unvec",
            format!("length {} cannot fill {rows}x{cols}", v.len()),
        ));
    }
    Ok(Matrix::from_vec_unchecked(rows, cols, v.as_slice().to_vec()))
}

/// Kronecker product, `(A ⊗ B)[j0*n1 + j1, i0*m1 + i1] = A[j0,i0] B[j1,i1]`.
///
/// Only used as a test oracle, so the result is capped at
/// [`KRON_ENTRY_CAP`] entries.
pub fn kron(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let rows = a.rows.checked_mul(b.rows);
    let cols = a.cols.checked_mul(b.cols);
    let (rows, cols) = match (rows, cols) {
        (Some(r), Some(c)) if r.checked_mul(c).is_some_and(|e| e <= KRON_ENTRY_CAP) => (r, c),
        _ => {
            return Err(Error::KronTooLarge {
                rows: a.rows.saturating_mul(b.rows),
                cols: a.cols.saturating_mul(b.cols),
                cap: KRON_ENTRY_CAP,
            })
        }
    };
    let mut out = Matrix::zeros(rows, cols);
    for j0 in 0..a.rows {
        for i0 in 0..a.cols {
            let s = a.get(j0, i0);
            for j1 in 0..b.rows {
                for i1 in 0..b.cols {
                    out.set(j0 * b.rows + j1, i0 * b.cols + i1, s * b.get(j1, i1));
                }
            }
        }
    }
    ensure_finite(&out.data)?;
    Ok(out)
}

/// Row-wise Kronecker (face-splitting) product:
/// `(U1 ⊘ U2)[i, l1 + l2*k1] = U1[i,l1] U2[i,l2]`.
pub fn row_kronecker(u1: &Matrix, u2: &Matrix) -> Result<Matrix> {
    if u1.rows != u2.rows {
        return Err(dim_mismatch(
            "row_kronecker",
            format!("row counts {} and {}", u1.rows, u2.rows),
        ));
    }
    let (k1, k2) = (u1.cols, u2.cols);
    let width = k1 * k2;
    let mut data = vec![0.0; u1.rows * width];
    data.par_chunks_mut(width).enumerate().for_each(|(i, out)| {
        let r1 = u1.row(i);
        for (l2, &s) in u2.row(i).iter().enumerate() {
            for (o, &v) in out[l2 * k1..(l2 + 1) * k1].iter_mut().zip(r1) {
                *o = v * s;
            }
        }
    });
    ensure_finite(&data)?;
    Ok(Matrix::from_vec_unchecked(u1.rows, width, data))
}

/// Computes `Aᵀ (U1 ⊘ U2)` (a `d × k1·k2` matrix) one column block of the
/// row-wise Kronecker product at a time, so the `n × k1·k2` product is never
/// held in memory.
pub fn row_kronecker_contract(a: &Matrix, u1: &Matrix, u2: &Matrix) -> Result<Matrix> {
    if a.rows != u1.rows || u1.rows != u2.rows {
        return Err(dim_mismatch(
            "row_kronecker_contract",
            format!("row counts {}, {} and {}", a.rows, u1.rows, u2.rows),
        ));
    }
    let (n, d, k1, k2) = (a.rows, a.cols, u1.cols, u2.cols);
    let width = k1 * k2;
    let mut out = vec![0.0; d * width];
    let mut scaled = Matrix::zeros(n, d);
    let mut block = vec![0.0; d * k1];
    for l2 in 0..k2 {
        for i in 0..n {
            let s = u2.get(i, l2);
            for (o, &v) in scaled.row_mut(i).iter_mut().zip(a.row(i)) {
                *o = v * s;
            }
        }
        gemm_into(&scaled, true, u1, false, &mut block);
        for r in 0..d {
            out[r * width + l2 * k1..r * width + (l2 + 1) * k1]
                .copy_from_slice(&block[r * k1..(r + 1) * k1]);
        }
    }
    ensure_finite(&out)?;
    Ok(Matrix::from_vec_unchecked(d, width, out))
}

/// Entrywise exponential. Fails if any entry would overflow.
pub fn exp_entrywise(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    exp_in_place(&mut out)?;
    Ok(out)
}

pub(crate) fn exp_in_place(m: &mut Matrix) -> Result<()> {
    if let Some(&value) = m.data.iter().find(|v| **v > EXP_ARG_MAX) {
        return Err(Error::ExpOverflow { value });
    }
    let cols = m.cols;
    m.data.par_chunks_mut(cols).for_each(|row| {
        for v in row {
            *v = v.exp();
        }
    });
    Ok(())
}

/// `M 𝟏`.
pub fn row_sums(m: &Matrix) -> Vector {
    let sums = m.data.par_chunks(m.cols).map(pairwise_sum).collect();
    Vector::from_vec_unchecked(sums)
}

/// `diag(v) · M`.
pub fn diag_scale(v: &Vector, m: &Matrix) -> Result<Matrix> {
    if v.len() != m.rows {
        return Err(dim_mismatch(
            "diag_scale",
            format!("vector length {} vs {} rows", v.len(), m.rows),
        ));
    }
    let mut out = m.clone();
    for (i, &s) in v.as_slice().iter().enumerate() {
        for x in out.row_mut(i) {
            *x *= s;
        }
    }
    ensure_finite(&out.data)?;
    Ok(out)
}

/// Writes `op(a) · op(b)` into `out` (row-major, overwritten).
fn gemm_into(a: &Matrix, ta: bool, b: &Matrix, tb: bool, out: &mut [f64]) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let n = if tb { b.rows } else { b.cols };
    debug_assert_eq!(out.len(), m * n);
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides and extents describe the exact buffers of `a`, `b` and
    // `out`; `out` does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gemm(op: &'static str, a: &Matrix, ta: bool, b: &Matrix, tb: bool) -> Result<Matrix> {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    if k != kb {
        return Err(dim_mismatch(
            op,
            format!("inner dimensions {k} and {kb} (shapes {:?}, {:?})", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0; m * n];
    gemm_into(a, ta, b, tb, &mut out);
    ensure_finite(&out)?;
    Ok(Matrix::from_vec_unchecked(m, n, out))
}

/// `A · B`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    gemm("matmul", a, false, b, false)
}

/// `Aᵀ · B`.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    gemm("matmul_tn", a, true, b, false)
}

/// `A · Bᵀ`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    gemm("matmul_nt", a, false, b, true)
}

pub fn matvec(a: &Matrix, x: &Vector) -> Result<Vector> {
    if a.cols != x.len() {
        return Err(dim_mismatch(
            "matvec",
            format!("{} columns vs vector length {}", a.cols, x.len()),
        ));
    }
    let out: Vec<f64> = (0..a.rows).map(|i| pairwise_dot(a.row(i), x.as_slice())).collect();
    ensure_finite(&out)?;
    Ok(Vector::from_vec_unchecked(out))
}
