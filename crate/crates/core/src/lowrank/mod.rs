//! Almost-linear-time approximate gradient.
//!
//! The softmax matrix is replaced by a rank-`k1` product `U1 V1ᵀ` built from
//! a polynomial feature map, and every later `n × n` quantity (`q`, `f ∘ q`,
//! `diag(r) f`) is carried as a pair of thin factors. The final contraction
//! `A1ᵀ (U3 V3ᵀ − U4 V4ᵀ) A2` is evaluated factor-first, so nothing of size
//! `n × n` is ever allocated.

pub mod poly;

use std::time::Instant;

use serde::Serialize;

pub use poly::{feature_map, select_degree, taylor_exp, MonomialBasis, PolyConfig};

use crate::error::{dim_mismatch, Error, Result};
use crate::exact::{FastDiagnostics, GradientResult, Method};
use crate::forward::{compute_h, AttentionInstance};
use crate::limits::Limits;
use crate::tensor::{
    diag_scale, matmul, matmul_nt, matmul_tn, pairwise_dot, row_kronecker, row_kronecker_contract, Matrix, Vector,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorTarget {
    ExpMatrix,
    SoftmaxF,
    QMatrix,
    P1,
    P2,
}

/// `U Vᵀ` with `U, V` both `n × k`.
#[derive(Clone, Debug)]
pub struct LowRankFactors {
    pub u: Matrix,
    pub v: Matrix,
    pub target: FactorTarget,
}

impl LowRankFactors {
    pub fn new(u: Matrix, v: Matrix, target: FactorTarget) -> Result<Self> {
        if u.shape() != v.shape() {
            return Err(dim_mismatch("LowRankFactors", format!("U {:?} vs V {:?}", u.shape(), v.shape())));
        }
        Ok(Self { u, v, target })
    }

    pub fn n(&self) -> usize {
        self.u.rows()
    }

    pub fn rank(&self) -> usize {
        self.u.cols()
    }

    /// Materializes `U Vᵀ`. Test-scale only.
    pub fn product(&self) -> Result<Matrix> {
        matmul_nt(&self.u, &self.v)
    }
}

/// Absolute tolerance for the Taylor approximation of `exp` on `[-t, t]`.
///
/// Since `exp(s) ≥ e^{-t}` there, an absolute error of `eps e^{-t} / 2`
/// per entry keeps every entry of the normalized softmax within relative
/// error about `eps` of the true one.
pub fn derive_eps_prime(eps: f64, t: f64) -> f64 {
    0.5 * eps * (-t).exp()
}

/// Rank-`k1` factors with `‖U1 V1ᵀ − f‖∞` small, where `f` is the softmax matrix.
///
/// `V1` rows are `φ(A2_j)`; `U1` rows are `φ((A1 X)_j)` divided by the
/// approximate row sums `φ((A1 X)_j) · V1ᵀ𝟏`, so rows of `U1 V1ᵀ` sum to one.
pub fn lowrank_softmax_factors(inst: &AttentionInstance, eps: f64) -> Result<(LowRankFactors, PolyConfig)> {
    lowrank_softmax_factors_with(inst, eps, &Limits::from_env())
}

pub fn lowrank_softmax_factors_with(
    inst: &AttentionInstance,
    eps: f64,
    limits: &Limits,
) -> Result<(LowRankFactors, PolyConfig)> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let queries = inst.query()?;
    let bound = inst.bound();
    let eps_prime = derive_eps_prime(eps, bound * bound);
    let cfg = select_degree(bound, eps_prime, inst.d(), limits.rank_cap)?;
    softmax_factors_for(&queries, inst.a2(), cfg)
}

/// Softmax factors for a fixed polynomial configuration.
pub fn softmax_factors_for(queries: &Matrix, keys: &Matrix, cfg: PolyConfig) -> Result<(LowRankFactors, PolyConfig)> {
    let basis = MonomialBasis::new(cfg.d, cfg.degree);
    let unnormalized = basis.map_rows(queries)?;
    let v1 = basis.map_rows(keys)?;
    let col_sums = matmul_tn(&v1, &Matrix::filled(keys.rows(), 1, 1.0))?;
    let row_sums = matmul(&unnormalized, &col_sums)?;
    let mut inv = Vec::with_capacity(row_sums.rows());
    for (row, &value) in row_sums.as_slice().iter().enumerate() {
        if value.is_nan() || value <= 0.0 {
            return Err(Error::RowSumCollapse { row, value });
        }
        inv.push(1.0 / value);
    }
    let u1 = diag_scale(&Vector::new(inv)?, &unnormalized)?;
    Ok((LowRankFactors::new(u1, v1, FactorTarget::SoftmaxF)?, cfg))
}

/// Factors of `q̃ = c̃ hᵀ` with `c̃ = U1 (V1ᵀ h) − E`; rank `d`.
pub fn lowrank_q_factors(f_factors: &LowRankFactors, h: &Matrix, e: &Matrix) -> Result<LowRankFactors> {
    if f_factors.target != FactorTarget::SoftmaxF {
        return Err(Error::InvalidArgument(format!("expected softmax factors, got {:?}", f_factors.target)));
    }
    if h.shape() != e.shape() || h.rows() != f_factors.n() {
        return Err(dim_mismatch(
            "lowrank_q_factors",
            format!("h {:?}, E {:?}, n = {}", h.shape(), e.shape(), f_factors.n()),
        ));
    }
    let w = matmul_tn(&f_factors.v, h)?;
    let c_approx = matmul(&f_factors.u, &w)?.sub(e)?;
    LowRankFactors::new(c_approx, h.clone(), FactorTarget::QMatrix)
}

fn check_pair(f: &LowRankFactors, q: &LowRankFactors) -> Result<()> {
    if f.target != FactorTarget::SoftmaxF || q.target != FactorTarget::QMatrix {
        return Err(Error::InvalidArgument(format!(
            "expected (softmax_f, q_matrix) factors, got ({:?}, {:?})",
            f.target, q.target
        )));
    }
    if f.n() != q.n() {
        return Err(dim_mismatch("factor pair", format!("n = {} vs {}", f.n(), q.n())));
    }
    Ok(())
}

/// `U3 = U1 ⊘ U2`, `V3 = V1 ⊘ V2`, so `U3 V3ᵀ = (U1 V1ᵀ) ∘ (U2 V2ᵀ)`.
pub fn lowrank_p1_factors(f: &LowRankFactors, q: &LowRankFactors, limits: &Limits) -> Result<LowRankFactors> {
    check_pair(f, q)?;
    let k3 = f.rank() * q.rank();
    if k3 > limits.rank_cap {
        return Err(Error::RankBlowup { rank: k3, cap: limits.rank_cap });
    }
    LowRankFactors::new(row_kronecker(&f.u, &q.u)?, row_kronecker(&f.v, &q.v)?, FactorTarget::P1)
}

/// `r̃_j = ⟨f̃_j, q̃_j⟩ = U1[j] (V1ᵀ V2) U2[j]ᵀ`.
pub fn p2_row_weights(f: &LowRankFactors, q: &LowRankFactors) -> Result<Vector> {
    check_pair(f, q)?;
    let inner = matmul_tn(&f.v, &q.v)?;
    let left = matmul(&f.u, &inner)?;
    let r: Vec<f64> = (0..f.n()).map(|j| pairwise_dot(left.row(j), q.u.row(j))).collect();
    Vector::new(r)
}

/// `U4 = diag(r̃) U1`, `V4 = V1`, approximating rows `⟨f_j, q_j⟩ f_j`.
pub fn lowrank_p2_factors(f: &LowRankFactors, q: &LowRankFactors) -> Result<LowRankFactors> {
    let r = p2_row_weights(f, q)?;
    LowRankFactors::new(diag_scale(&r, &f.u)?, f.v.clone(), FactorTarget::P2)
}

/// Approximate gradient in time linear in `n` for a fixed feature width.
pub fn gradient_fast(inst: &AttentionInstance, eps: f64) -> Result<GradientResult> {
    gradient_fast_with(inst, eps, &Limits::from_env())
}

pub fn gradient_fast_with(inst: &AttentionInstance, eps: f64, limits: &Limits) -> Result<GradientResult> {
    let started = Instant::now();
    let (f, cfg) = lowrank_softmax_factors_with(inst, eps, limits)?;
    let h = compute_h(inst.a3(), inst.y())?;
    let q = lowrank_q_factors(&f, &h, inst.e())?;
    let r = p2_row_weights(&f, &q)?;

    // A1ᵀ U3 and A2ᵀ V3, one column block of the row-wise Kronecker product at a time
    let left3 = row_kronecker_contract(inst.a1(), &f.u, &q.u)?;
    let right3 = row_kronecker_contract(inst.a2(), &f.v, &q.v)?;
    let g1 = matmul_nt(&left3, &right3)?;

    let left4 = matmul_tn(&diag_scale(&r, inst.a1())?, &f.u)?;
    let right4 = matmul_tn(inst.a2(), &f.v)?;
    let g2 = matmul_nt(&left4, &right4)?;

    let grad = g1.sub(&g2)?.scaled(1.0 / inst.d() as f64);
    let mut result = GradientResult::from_matrix(grad, Method::Fast, started);
    result.fast = Some(FastDiagnostics {
        degree: cfg.degree,
        k1: f.rank(),
        k2: q.rank(),
        k3: f.rank() * q.rank(),
        k4: f.rank(),
        eps_prime: cfg.eps_prime,
        exponent_bound: cfg.bound * cfg.bound,
    });
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::{compute_p, compute_q, gradient_exact};
    use crate::forward::{evaluate, softmax_cache};
    use crate::sample::random_instance;

    fn fixture(n: usize, d: usize, bound: f64, seed: u64) -> AttentionInstance {
        random_instance(n, d, bound, seed, 0.1).unwrap()
    }

    fn factors(inst: &AttentionInstance, eps: f64) -> (LowRankFactors, LowRankFactors) {
        let (f, _) = lowrank_softmax_factors(inst, eps).unwrap();
        let h = compute_h(inst.a3(), inst.y()).unwrap();
        let q = lowrank_q_factors(&f, &h, inst.e()).unwrap();
        (f, q)
    }

    #[test]
    fn zero_bound_is_exact_with_rank_one() {
        let inst = fixture(40, 3, 0.0, 5);
        let fast = gradient_fast(&inst, 1e-4).unwrap();
        let exact = gradient_exact(&inst).unwrap();
        let diag = fast.fast.unwrap();
        assert_eq!((diag.degree, diag.k1), (0, 1));
        assert!(fast.grad.max_abs_diff(&exact.grad).unwrap() <= 1e-12);
    }

    #[test]
    fn softmax_factors_track_the_softmax() {
        let inst = fixture(30, 3, 1.0, 2);
        let (f, cfg) = lowrank_softmax_factors(&inst, 1e-6).unwrap();
        assert_eq!(f.rank(), cfg.m_feat);
        let exact = softmax_cache(&inst).unwrap().f;
        let approx = f.product().unwrap();
        let max_rel = exact
            .as_slice()
            .iter()
            .zip(approx.as_slice())
            .map(|(a, b)| (a - b).abs() / a)
            .fold(0.0, f64::max);
        assert!(max_rel <= 1e-6, "{max_rel}");
        for j in 0..30 {
            assert!((approx.row(j).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn error_shrinks_with_degree() {
        let inst = fixture(25, 2, 1.2, 8);
        let exact = softmax_cache(&inst).unwrap().f;
        let queries = inst.query().unwrap();
        let errs: Vec<f64> = (1..7)
            .map(|g| {
                let cfg = PolyConfig { bound: 1.2, eps_prime: 1.0, degree: g, d: 2, m_feat: poly::binomial(2 + g, g).unwrap() };
                let (f, _) = softmax_factors_for(&queries, inst.a2(), cfg).unwrap();
                f.product().unwrap().max_abs_diff(&exact).unwrap()
            })
            .collect();
        assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
    }

    #[test]
    fn q_factors_match_dense_oracle() {
        let inst = fixture(20, 3, 0.9, 4);
        let (f, q) = factors(&inst, 1e-6);
        assert_eq!(q.rank(), 3);
        let h = compute_h(inst.a3(), inst.y()).unwrap();
        let c = matmul(&f.product().unwrap(), &h).unwrap().sub(inst.e()).unwrap();
        let dense = compute_q(&c, &h).unwrap();
        assert!(q.product().unwrap().max_abs_diff(&dense).unwrap() < 1e-12);
    }

    #[test]
    fn p1_factors_are_the_hadamard_product() {
        let inst = fixture(12, 2, 0.7, 6);
        let (f, q) = factors(&inst, 1e-3);
        let p1 = lowrank_p1_factors(&f, &q, &Limits::default()).unwrap();
        assert_eq!(p1.rank(), f.rank() * q.rank());
        let want = f.product().unwrap().hadamard(&q.product().unwrap()).unwrap();
        assert!(p1.product().unwrap().max_abs_diff(&want).unwrap() < 1e-12);

        let tight = Limits { rank_cap: f.rank(), ..Limits::default() };
        assert!(matches!(lowrank_p1_factors(&f, &q, &tight), Err(Error::RankBlowup { .. })));
        assert!(lowrank_p1_factors(&q, &f, &Limits::default()).is_err());
    }

    #[test]
    fn p2_weights_are_row_inner_products() {
        let inst = fixture(15, 3, 0.8, 9);
        let (f, q) = factors(&inst, 1e-5);
        let fd = f.product().unwrap();
        let qd = q.product().unwrap();
        let r = p2_row_weights(&f, &q).unwrap();
        for j in 0..15 {
            let want: f64 = fd.row(j).iter().zip(qd.row(j)).map(|(a, b)| a * b).sum();
            assert!((r[j] - want).abs() < 1e-12 * (1.0 + want.abs()));
        }
        let p2 = lowrank_p2_factors(&f, &q).unwrap();
        let p = fd.hadamard(&qd).unwrap().sub(&p2.product().unwrap()).unwrap();
        assert!(p.max_abs_diff(&compute_p(&fd, &qd).unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn fast_gradient_matches_exact() {
        let inst = fixture(64, 4, 0.8, 3);
        let fast = gradient_fast(&inst, 1e-4).unwrap();
        let exact = gradient_exact(&inst).unwrap();
        assert!(fast.grad.max_abs_diff(&exact.grad).unwrap() <= 1e-6);
        let diag = fast.fast.unwrap();
        assert_eq!(diag.k2, 4);
        assert_eq!(diag.k3, diag.k1 * 4);
    }

    #[test]
    fn fast_gradient_vanishes_at_exact_fit() {
        let inst = fixture(20, 2, 0.5, 1);
        let (f, _) = lowrank_softmax_factors(&inst, 1e-4).unwrap();
        let h = compute_h(inst.a3(), inst.y()).unwrap();
        let fit = inst.with_e(matmul(&f.product().unwrap(), &h).unwrap()).unwrap();
        assert!(gradient_fast(&fit, 1e-4).unwrap().g.max_abs() < 1e-13);
        assert!(evaluate(&fit, &Limits::default()).unwrap().loss < 1e-8);
    }

    #[test]
    fn invalid_eps_is_rejected() {
        let inst = fixture(4, 2, 0.5, 1);
        assert!(gradient_fast(&inst, 0.0).is_err());
        assert!(gradient_fast(&inst, f64::NAN).is_err());
    }

    #[test]
    fn rank_cap_from_limits() {
        let inst = fixture(8, 8, 2.0, 1);
        let tight = Limits { rank_cap: 50, ..Limits::default() };
        let err = gradient_fast_with(&inst, 1e-4, &tight).unwrap_err();
        assert!(err.to_string().contains("rank blowup"));
    }
}
