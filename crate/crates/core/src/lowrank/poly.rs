//! Truncated-Taylor feature maps for `exp(qᵀk / d)`.
//!
//! For a degree `g`, the monomial map `φ` over `d` variables satisfies
//! `φ(q)·φ(k) = Σ_{ℓ≤g} (qᵀk/d)^ℓ / ℓ!`, so an `n × n` matrix of such
//! polynomial kernels factors through `C(d+g, g)` columns.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{dim_mismatch, Error, Result};
use crate::tensor::{Matrix, Vector};

const MAX_DEGREE: usize = 256;

/// Degree and feature width of a Taylor approximation to `exp` on
/// `[-bound², bound²]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PolyConfig {
    pub bound: f64,
    pub eps_prime: f64,
    pub degree: usize,
    pub d: usize,
    pub m_feat: usize,
}

/// `C(n, k)`, or `None` when it does not fit in a `usize`.
pub fn binomial(n: usize, k: usize) -> Option<usize> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > usize::MAX as u128 {
            return None;
        }
    }
    Some(acc as usize)
}

/// Lagrange bound `e^t t^{g+1} / (g+1)!` on `|exp(s) − P_g(s)|` for `|s| ≤ t`.
pub fn taylor_remainder_bound(t: f64, degree: usize) -> f64 {
    let mut term = t.exp();
    for l in 1..=degree + 1 {
        term *= t / l as f64;
    }
    term
}

/// `P_g(t) = Σ_{ℓ≤g} t^ℓ / ℓ!`, evaluated by Horner's rule.
pub fn taylor_exp(t: f64, degree: usize) -> f64 {
    let mut acc = 1.0;
    for l in (1..=degree).rev() {
        acc = 1.0 + acc * t / l as f64;
    }
    acc
}

/// Smallest degree whose remainder bound on `[-B², B²]` is at most
/// `eps_prime`. Fails when the feature width `C(d+g, g)` exceeds `rank_cap`.
pub fn select_degree(bound: f64, eps_prime: f64, d: usize, rank_cap: usize) -> Result<PolyConfig> {
    if !(bound >= 0.0 && bound.is_finite()) {
        return Err(Error::InvalidArgument(format!("bound must be finite and nonnegative, got {bound}")));
    }
    if eps_prime.is_nan() || eps_prime <= 0.0 {
        return Err(Error::InvalidArgument(format!("eps_prime must be positive, got {eps_prime}")));
    }
    if d == 0 {
        return Err(Error::InvalidArgument("d must be positive".into()));
    }
    let t = bound * bound;
    let degree = (0..=MAX_DEGREE)
        .find(|&g| taylor_remainder_bound(t, g) <= eps_prime)
        .ok_or(Error::RankBlowup { rank: usize::MAX, cap: rank_cap })?;
    let m_feat = binomial(d + degree, degree).unwrap_or(usize::MAX);
    if m_feat > rank_cap {
        return Err(Error::RankBlowup { rank: m_feat, cap: rank_cap });
    }
    Ok(PolyConfig { bound, eps_prime, degree, d, m_feat })
}

/// Monomials of total degree `≤ g` in `d` variables, graded and, within a
/// degree, in lexicographic order of their non-decreasing variable lists.
#[derive(Clone, Debug)]
pub struct MonomialBasis {
    d: usize,
    degree: usize,
    /// `(parent, var)`: monomial = parent monomial · x_var. Entry 0 is the constant.
    links: Vec<(usize, usize)>,
    coef: Vec<f64>,
}

impl MonomialBasis {
    pub fn new(d: usize, degree: usize) -> Self {
        assert!(d > 0);
        let mut links = vec![(0, 0)];
        let mut coef = vec![1.0];
        // run length of the last variable, for the Π β_k! factor
        let mut run = vec![0usize];
        let mut level = 0..1;
        for _ in 1..=degree {
            let start = links.len();
            for p in level.clone() {
                let last = if p == 0 { 0 } else { links[p].1 };
                for var in last..d {
                    let r = if p != 0 && var == last { run[p] + 1 } else { 1 };
                    links.push((p, var));
                    run.push(r);
                    coef.push(coef[p] / ((r * d) as f64).sqrt());
                }
            }
            level = start..links.len();
        }
        Self { d, degree, links, coef }
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Exponent vector of monomial `idx`.
    pub fn exponents(&self, idx: usize) -> Vec<usize> {
        let mut beta = vec![0; self.d];
        let mut cur = idx;
        while cur != 0 {
            let (p, var) = self.links[cur];
            beta[var] += 1;
            cur = p;
        }
        beta
    }

    fn fill(&self, v: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
        for idx in 1..self.links.len() {
            let (p, var) = self.links[idx];
            out[idx] = out[p] * v[var];
        }
        for (o, c) in out.iter_mut().zip(&self.coef) {
            *o *= c;
        }
    }

    /// Applies the feature map to every row of `m` (`n × d` → `n × len`).
    pub fn map_rows(&self, m: &Matrix) -> Result<Matrix> {
        if m.cols() != self.d {
            return Err(dim_mismatch("feature_map", format!("rows of length {} vs d = {}", m.cols(), self.d)));
        }
        let width = self.len();
        let mut out = vec![0.0; m.rows() * width];
        out.par_chunks_mut(width)
            .enumerate()
            .for_each(|(i, dst)| self.fill(m.row(i), dst));
        Matrix::new(m.rows(), width, out)
    }
}

/// `φ(v)` with coordinates `sqrt(1 / (Π β_k! · d^|β|)) · v^β`.
pub fn feature_map(v: &Vector, cfg: &PolyConfig) -> Result<Vector> {
    if v.len() != cfg.d {
        return Err(dim_mismatch("feature_map", format!("length {} vs d = {}", v.len(), cfg.d)));
    }
    let basis = MonomialBasis::new(cfg.d, cfg.degree);
    let mut out = vec![0.0; basis.len()];
    basis.fill(v.as_slice(), &mut out);
    Vector::new(out)
}
