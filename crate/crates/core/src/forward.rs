//! Single-layer attention forward pass and the squared-error loss
//! `L(X) = ½‖D⁻¹ exp(A1 X A2ᵀ / d) A3 Y − E‖²_F`.

use rayon::prelude::*;

use crate::error::{dim_mismatch, Error, Result};
use crate::limits::Limits;
use crate::tensor::{matmul, matmul_nt, pairwise_sum, Matrix, Vector, EXP_ARG_MAX};

/// Largest entry bound accepted; keeps `exp(±B²)` representable.
pub const MAX_ENTRY_BOUND: f64 = 26.6;

const BOUND_SLACK: f64 = 1e-12;

/// One attention-loss problem: `A1, A2, A3, E` are `n × d`, `X, Y` are
/// `d × d`, and `B` bounds `‖A1 X‖∞` and `‖A2‖∞`.
#[derive(Clone, Debug)]
pub struct AttentionInstance {
    a1: Matrix,
    a2: Matrix,
    a3: Matrix,
    e: Matrix,
    x: Matrix,
    y: Matrix,
    bound: f64,
}

fn check_shape(name: &str, m: &Matrix, shape: (usize, usize)) -> Result<()> {
    if m.shape() != shape {
        return Err(Error::InvalidInstance(format!(
            "{name} is {}x{}, expected {}x{}",
            m.rows(),
            m.cols(),
            shape.0,
            shape.1
        )));
    }
    Ok(())
}

impl AttentionInstance {
    pub fn new(a1: Matrix, a2: Matrix, a3: Matrix, e: Matrix, x: Matrix, y: Matrix, bound: f64) -> Result<Self> {
        let (n, d) = a1.shape();
        check_shape("A2", &a2, (n, d))?;
        check_shape("A3", &a3, (n, d))?;
        check_shape("E", &e, (n, d))?;
        check_shape("X", &x, (d, d))?;
        check_shape("Y", &y, (d, d))?;
        if !(0.0..=MAX_ENTRY_BOUND).contains(&bound) {
            return Err(Error::InvalidInstance(format!(
                "entry bound B = {bound} must lie in [0, {MAX_ENTRY_BOUND}]"
            )));
        }
        let inst = Self { a1, a2, a3, e, x, y, bound };
        inst.check_bounds()?;
        Ok(inst)
    }

    fn check_bounds(&self) -> Result<()> {
        let limit = self.bound * (1.0 + BOUND_SLACK) + f64::MIN_POSITIVE;
        let qx = self.query()?.max_abs();
        if qx > limit {
            return Err(Error::InvalidInstance(format!("‖A1 X‖∞ = {qx} exceeds B = {}", self.bound)));
        }
        let k = self.a2.max_abs();
        if k > limit {
            return Err(Error::InvalidInstance(format!("‖A2‖∞ = {k} exceeds B = {}", self.bound)));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.a1.rows()
    }

    pub fn d(&self) -> usize {
        self.a1.cols()
    }

    pub fn a1(&self) -> &Matrix {
        &self.a1
    }

    pub fn a2(&self) -> &Matrix {
        &self.a2
    }

    pub fn a3(&self) -> &Matrix {
        &self.a3
    }

    pub fn e(&self) -> &Matrix {
        &self.e
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn y(&self) -> &Matrix {
        &self.y
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// `A1 X`, the rows that play the role of queries.
    pub fn query(&self) -> Result<Matrix> {
        matmul(&self.a1, &self.x)
    }

    pub fn with_e(&self, e: Matrix) -> Result<Self> {
        Self::new(self.a1.clone(), self.a2.clone(), self.a3.clone(), e, self.x.clone(), self.y.clone(), self.bound)
    }

    pub fn with_x(&self, x: Matrix) -> Result<Self> {
        Self::new(self.a1.clone(), self.a2.clone(), self.a3.clone(), self.e.clone(), x, self.y.clone(), self.bound)
    }
}

/// Softmax matrix `f`, its row normalizers `alpha = exp(·)𝟏`, and `h = A3 Y`.
#[derive(Clone, Debug)]
pub struct SoftmaxCache {
    pub f: Matrix,
    pub alpha: Vector,
    pub h: Matrix,
}

/// Forward quantities plus the residual `c = f h − E` and the loss.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub cache: SoftmaxCache,
    pub c: Matrix,
    pub loss: f64,
}

fn check_exact_cap(n: usize, limits: &Limits) -> Result<()> {
    if n > limits.exact_n_cap {
        return Err(Error::ExactCapExceeded { n, cap: limits.exact_n_cap });
    }
    Ok(())
}

/// `exp(A1 X A2ᵀ / d)`, materialized as an `n × n` matrix.
pub fn compute_exp_matrix(inst: &AttentionInstance) -> Result<Matrix> {
    compute_exp_matrix_with(inst, &Limits::from_env())
}

pub fn compute_exp_matrix_with(inst: &AttentionInstance, limits: &Limits) -> Result<Matrix> {
    exp_scores(&inst.a1, &inst.a2, &inst.x, limits)
}

fn exp_scores(a1: &Matrix, a2: &Matrix, x: &Matrix, limits: &Limits) -> Result<Matrix> {
    check_exact_cap(a1.rows(), limits)?;
    let d = a1.cols() as f64;
    let mut s = matmul_nt(&matmul(a1, x)?, a2)?;
    let scale = 1.0 / d;
    if let Some(&v) = s.as_slice().iter().find(|v| **v * scale > EXP_ARG_MAX) {
        return Err(Error::ExpOverflow { value: v * scale });
    }
    let n = s.cols();
    s.as_mut_slice().par_chunks_mut(n).for_each(|row| {
        for v in row {
            *v = (*v * scale).exp();
        }
    });
    Ok(s)
}

/// Normalizes the rows of a positive matrix: returns `(diag(alpha)⁻¹ M, alpha)`
/// with `alpha = M 𝟏`.
pub fn compute_softmax(m: Matrix) -> Result<(Matrix, Vector)> {
    let mut f = m;
    let cols = f.cols();
    let alpha: Vec<f64> = f
        .as_mut_slice()
        .par_chunks_mut(cols)
        .map(|row| {
            let sum = pairwise_sum(row);
            if sum > 0.0 && sum.is_finite() {
                let inv = 1.0 / sum;
                for v in row.iter_mut() {
                    *v *= inv;
                }
            }
            sum
        })
        .collect();
    if let Some((row, &value)) = alpha.iter().enumerate().find(|(_, s)| !(**s > 0.0 && s.is_finite())) {
        return Err(Error::NonPositiveRowSum { row, value });
    }
    Ok((f, Vector::from_vec_unchecked(alpha)))
}

/// `h = A3 Y`.
pub fn compute_h(a3: &Matrix, y: &Matrix) -> Result<Matrix> {
    if a3.cols() != y.rows() {
        return Err(dim_mismatch("compute_h", format!("A3 {:?} vs Y {:?}", a3.shape(), y.shape())));
    }
    matmul(a3, y)
}

pub fn softmax_cache(inst: &AttentionInstance) -> Result<SoftmaxCache> {
    Ok(evaluate(inst, &Limits::from_env())?.cache)
}

/// Attention output `f h`.
pub fn forward(inst: &AttentionInstance) -> Result<Matrix> {
    let cache = softmax_cache(inst)?;
    matmul(&cache.f, &cache.h)
}

/// Returns `(L, c)` with `c = f h − E` and `L = ½‖c‖²_F`.
pub fn loss(inst: &AttentionInstance) -> Result<(f64, Matrix)> {
    let eval = evaluate(inst, &Limits::from_env())?;
    Ok((eval.loss, eval.c))
}

pub fn evaluate(inst: &AttentionInstance, limits: &Limits) -> Result<LossEval> {
    evaluate_at(inst, &inst.x, limits)
}

/// Forward pass with `X` replaced, skipping the entry-bound check. Used by
/// the finite-difference oracle, whose perturbations may step just past `B`.
pub(crate) fn evaluate_at(inst: &AttentionInstance, x: &Matrix, limits: &Limits) -> Result<LossEval> {
    if x.shape() != inst.x.shape() {
        return Err(dim_mismatch("evaluate_at", format!("X {:?} vs {:?}", x.shape(), inst.x.shape())));
    }
    let m = exp_scores(&inst.a1, &inst.a2, x, limits)?;
    let (f, alpha) = compute_softmax(m)?;
    let h = compute_h(&inst.a3, &inst.y)?;
    let c = matmul(&f, &h)?.sub(&inst.e)?;
    let loss = 0.5 * c.frobenius_sq();
    Ok(LossEval { cache: SoftmaxCache { f, alpha, h }, c, loss })
}
