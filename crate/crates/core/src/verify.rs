//! Oracles that check the gradient paths against each other.

use std::time::Instant;

use serde::Serialize;

use crate::error::{dim_mismatch, Error, Result};
use crate::exact::{entry_derivative, GradientResult, Method};
use crate::forward::{evaluate, evaluate_at, AttentionInstance};
use crate::limits::Limits;
use crate::tensor::{pairwise_sum, unvec, vec, Vector};

pub const DEFAULT_FD_STEP: f64 = 1e-4;

/// Size limits of [`brute_kron_gradient`], whose cost is `O(n² d³)`.
pub const BRUTE_N_CAP: usize = 64;
pub const BRUTE_D_CAP: usize = 8;

/// `(f(x + h) − f(x − h)) / 2h`.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, step: f64) -> f64 {
    (f(x + step) - f(x - step)) / (2.0 * step)
}

/// Central-difference gradient over the `d²` entries of `X`.
pub fn finite_diff_gradient(inst: &AttentionInstance, step: f64) -> Result<GradientResult> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let started = Instant::now();
    let limits = Limits::from_env();
    let d = inst.d();
    let base = vec(inst.x()).into_vec();
    let loss_at = |i: usize, delta: f64| -> Result<f64> {
        let mut x = base.clone();
        x[i] += delta;
        let x = unvec(&Vector::new(x)?, d, d)?;
        match evaluate_at(inst, &x, &limits) {
            Ok(eval) => Ok(eval.loss),
            Err(Error::ExpOverflow { value }) => Err(Error::InvalidArgument(format!(
                "perturbed exponent {value} overflows exp; use a smaller step"
            ))),
            Err(e) => Err(e),
        }
    };
    let mut g = Vec::with_capacity(d * d);
    for i in 0..d * d {
        g.push((loss_at(i, step)? - loss_at(i, -step)?) / (2.0 * step));
    }
    GradientResult::from_vector(Vector::new(g)?, d, Method::FiniteDiff, started)
}

/// Sums the per-entry derivative `∂L_{j0,i0}/∂x_i` over all `(j0, i0)`,
/// building each `n × d²` block of `A1 ⊗ A2` on the fly.
pub fn brute_kron_gradient(inst: &AttentionInstance) -> Result<GradientResult> {
    let (n, d) = (inst.n(), inst.d());
    if n > BRUTE_N_CAP || d > BRUTE_D_CAP {
        return Err(Error::OracleCapExceeded(format!(
            "brute_kron needs n <= {BRUTE_N_CAP} and d <= {BRUTE_D_CAP}, got n = {n}, d = {d}"
        )));
    }
    let started = Instant::now();
    let eval = evaluate(inst, &Limits::from_env())?;
    let h_cols: Vec<Vec<f64>> = (0..d).map(|i0| eval.cache.h.column(i0)).collect();
    let scale = 1.0 / d as f64;
    let width = d * d;

    let mut terms: Vec<Vec<f64>> = vec![Vec::with_capacity(n * d); width];
    let mut block = vec![0.0; n * width];
    let mut lifted = vec![0.0; n];
    for j0 in 0..n {
        // block[j, a*d + b] = A1[j0, a] A2[j, b] / d
        for j in 0..n {
            for a in 0..d {
                let s = inst.a1().get(j0, a) * scale;
                for b in 0..d {
                    block[j * width + a * d + b] = s * inst.a2().get(j, b);
                }
            }
        }
        let f_row = eval.cache.f.row(j0);
        for (i, acc) in terms.iter_mut().enumerate() {
            for (j, l) in lifted.iter_mut().enumerate() {
                *l = block[j * width + i];
            }
            for (i0, h_col) in h_cols.iter().enumerate() {
                acc.push(entry_derivative(&lifted, f_row, h_col, eval.c.get(j0, i0)));
            }
        }
    }
    let g: Vec<f64> = terms.iter().map(|t| pairwise_sum(t)).collect();
    GradientResult::from_vector(Vector::new(g)?, d, Method::BruteKron, started)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiffReport {
    pub max_abs: f64,
    pub argmax_index: usize,
    pub a_norm: f64,
    pub b_norm: f64,
}

/// `‖a.g − b.g‖∞` with its location; norms are `∞`-norms.
pub fn compare(a: &GradientResult, b: &GradientResult) -> Result<DiffReport> {
    compare_vectors(&a.g, &b.g)
}

pub fn compare_vectors(a: &Vector, b: &Vector) -> Result<DiffReport> {
    if a.len() != b.len() {
        return Err(dim_mismatch("compare", format!("lengths {} and {}", a.len(), b.len())));
    }
    let (argmax_index, max_abs) = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .enumerate()
        .fold((0, 0.0), |best, (i, v)| if v > best.1 { (i, v) } else { best });
    Ok(DiffReport { max_abs, argmax_index, a_norm: a.max_abs(), b_norm: b.max_abs() })
}
