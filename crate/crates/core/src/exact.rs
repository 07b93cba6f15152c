//! Closed-form gradient of the attention loss with respect to `X`.
//!
//! With `c = f h − E`, `q = c hᵀ` and rows
//! `p_j = (diag(f_j) − f_j f_jᵀ) q_j`, the gradient is
//! `dL/dX = (1/d) A1ᵀ p A2`, returned flattened with [`vec`].

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{dim_mismatch, Error, Result};
use crate::forward::{evaluate, AttentionInstance, LossEval};
use crate::limits::Limits;
use crate::tensor::{matmul, matmul_nt, matmul_tn, pairwise_dot, unvec, vec, Matrix, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exact,
    Fast,
    FiniteDiff,
    BruteKron,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Exact => "exact",
            Method::Fast => "fast",
            Method::FiniteDiff => "finite_diff",
            Method::BruteKron => "brute_kron",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Ranks and polynomial degree used by the low-rank path.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FastDiagnostics {
    pub degree: usize,
    pub k1: usize,
    pub k2: usize,
    pub k3: usize,
    pub k4: usize,
    pub eps_prime: f64,
    pub exponent_bound: f64,
}

/// A gradient with respect to `X`: `g = vec(G)`.
#[derive(Clone, Debug, Serialize)]
pub struct GradientResult {
    pub g: Vector,
    #[serde(rename = "G")]
    pub grad: Matrix,
    pub method: Method,
    pub elapsed_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fast: Option<FastDiagnostics>,
}

impl GradientResult {
    pub(crate) fn from_matrix(grad: Matrix, method: Method, started: Instant) -> Self {
        Self {
            g: vec(&grad),
            grad,
            method,
            elapsed_seconds: started.elapsed().as_secs_f64(),
            fast: None,
        }
    }

    pub(crate) fn from_vector(g: Vector, d: usize, method: Method, started: Instant) -> Result<Self> {
        let grad = unvec(&g, d, d)?;
        Ok(Self { g, grad, method, elapsed_seconds: started.elapsed().as_secs_f64(), fast: None })
    }
}

/// `q = c hᵀ`.
pub fn compute_q(c: &Matrix, h: &Matrix) -> Result<Matrix> {
    compute_q_with(c, h, &Limits::from_env())
}

pub fn compute_q_with(c: &Matrix, h: &Matrix, limits: &Limits) -> Result<Matrix> {
    if c.shape() != h.shape() {
        return Err(dim_mismatch("compute_q", format!("c {:?} vs h {:?}", c.shape(), h.shape())));
    }
    if c.rows() > limits.exact_n_cap {
        return Err(Error::ExactCapExceeded { n: c.rows(), cap: limits.exact_n_cap });
    }
    matmul_nt(c, h)
}

/// Rows `p_j = f_j ∘ q_j − ⟨f_j, q_j⟩ f_j`.
pub fn compute_p(f: &Matrix, q: &Matrix) -> Result<Matrix> {
    let mut p = q.clone();
    p_in_place(f, &mut p)?;
    Ok(p)
}

fn p_in_place(f: &Matrix, q: &mut Matrix) -> Result<()> {
    if f.shape() != q.shape() {
        return Err(dim_mismatch("compute_p", format!("f {:?} vs q {:?}", f.shape(), q.shape())));
    }
    let n = f.cols();
    q.as_mut_slice()
        .par_chunks_mut(n)
        .zip(f.as_slice().par_chunks(n))
        .for_each(|(qrow, frow)| {
            let r = pairwise_dot(frow, qrow);
            for (qv, &fv) in qrow.iter_mut().zip(frow) {
                *qv = fv * *qv - r * fv;
            }
        });
    Ok(())
}

/// Exact gradient; materializes the `n × n` softmax and `p`.
pub fn gradient_exact(inst: &AttentionInstance) -> Result<GradientResult> {
    gradient_exact_with(inst, &Limits::from_env())
}

pub fn gradient_exact_with(inst: &AttentionInstance, limits: &Limits) -> Result<GradientResult> {
    let started = Instant::now();
    let LossEval { cache, c, .. } = evaluate(inst, limits)?;
    let grad = gradient_from_parts(inst, &cache.f, &cache.h, &c, limits)?;
    Ok(GradientResult::from_matrix(grad, Method::Exact, started))
}

fn gradient_from_parts(inst: &AttentionInstance, f: &Matrix, h: &Matrix, c: &Matrix, limits: &Limits) -> Result<Matrix> {
    let mut p = compute_q_with(c, h, limits)?;
    p_in_place(f, &mut p)?;
    let pa2 = matmul(&p, inst.a2())?;
    drop(p);
    Ok(matmul_tn(inst.a1(), &pa2)?.scaled(1.0 / inst.d() as f64))
}

/// Column `i` of the `j0`-th row block of `A1 ⊗ A2` (unscaled): the length-`n`
/// vector `j ↦ A1[j0, a] A2[j, b]` with `i = a·d + b`.
pub fn lifted_column(a1: &Matrix, a2: &Matrix, j0: usize, i: usize) -> Result<Vec<f64>> {
    let (n, d) = a1.shape();
    if a2.shape() != (n, d) {
        return Err(dim_mismatch("lifted_column", format!("A1 {:?} vs A2 {:?}", a1.shape(), a2.shape())));
    }
    if j0 >= n {
        return Err(Error::IndexOutOfRange { what: "j0", index: j0, limit: n });
    }
    if i >= d * d {
        return Err(Error::IndexOutOfRange { what: "i", index: i, limit: d * d });
    }
    let (a, b) = (i / d, i % d);
    let s = a1.get(j0, a);
    Ok((0..n).map(|j| s * a2.get(j, b)).collect())
}

/// `∂L_{j0,i0} / ∂x_i` for one residual entry, where
/// `L_{j0,i0} = ½ c_{j0,i0}²`. The lifted column carries the `1/d` factor.
pub fn grad_entry(inst: &AttentionInstance, j0: usize, i0: usize, i: usize) -> Result<f64> {
    let eval = evaluate(inst, &Limits::from_env())?;
    grad_entry_cached(inst, &eval, j0, i0, i)
}

/// [`grad_entry`] reusing a precomputed forward evaluation.
pub fn grad_entry_cached(inst: &AttentionInstance, eval: &LossEval, j0: usize, i0: usize, i: usize) -> Result<f64> {
    let (n, d) = (inst.n(), inst.d());
    if i0 >= d {
        return Err(Error::IndexOutOfRange { what: "i0", index: i0, limit: d });
    }
    let scale = 1.0 / d as f64;
    let lifted: Vec<f64> = lifted_column(inst.a1(), inst.a2(), j0, i)?.into_iter().map(|v| v * scale).collect();
    debug_assert_eq!(lifted.len(), n);
    let h_col = eval.cache.h.column(i0);
    Ok(entry_derivative(&lifted, eval.cache.f.row(j0), &h_col, eval.c.get(j0, i0)))
}

/// `(⟨h_col, a ∘ f⟩ − ⟨f, a⟩⟨h_col, f⟩) · c` for one lifted column `a`.
pub(crate) fn entry_derivative(lifted: &[f64], f_row: &[f64], h_col: &[f64], c: f64) -> f64 {
    let lifted_f: Vec<f64> = lifted.iter().zip(f_row).map(|(a, b)| a * b).collect();
    let first = pairwise_dot(h_col, &lifted_f);
    let second = pairwise_dot(f_row, lifted) * pairwise_dot(h_col, f_row);
    (first - second) * c
}
