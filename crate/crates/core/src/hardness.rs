//! Structured instances from the quadratic-time lower-bound argument and the
//! arithmetic that links gradients back to the forward pass.
//!
//! For an `n × n` matrix `A` with entries in `[0, B]` and a binary `n × d`
//! matrix `V`, `f(λ) = ‖diag(M𝟏)⁻¹ M V‖²_F` with `M = exp(λA)`. Writing
//! `S_ℓ` for the 1-positions of column `ℓ` of `V`, row `i` contributes
//! `a(λ,i) / b(λ,i)` with `a = Σ_ℓ (Σ_{j∈S_ℓ} e^{λA_ij})²` and
//! `b = (Σ_k e^{λA_ik})²`. Each row is rescaled by `e^{-λ max_j A_ij}`
//! before the sums; the quotient is unchanged.
//!
//! When every row has at least half its entries equal to `B` (and
//! `d ≤ 16`), `|f′(λ)| ≤ 8Bn` for `λ ≥ 0`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{dim_mismatch, Error, Result};
use crate::exact::gradient_exact;
use crate::forward::AttentionInstance;
use crate::tensor::{matmul_nt, pairwise_sum, Matrix};

/// Grid size used to estimate `max |f″|` on `[0, 1]`.
pub const CURVATURE_GRID: usize = 1001;
/// Grid size of the derivative-bound check.
pub const DERIVATIVE_GRID: usize = 101;

#[derive(Clone, Debug)]
pub struct HardInstance {
    a: Matrix,
    v_bin: Matrix,
    bound: f64,
    half_at_bound: bool,
}

fn check_common(a: &Matrix, v_bin: &Matrix, bound: f64) -> Result<()> {
    if a.rows() != a.cols() {
        return Err(dim_mismatch("HardInstance", format!("A must be square, got {:?}", a.shape())));
    }
    if v_bin.rows() != a.rows() {
        return Err(dim_mismatch("HardInstance", format!("V has {} rows, A has {}", v_bin.rows(), a.rows())));
    }
    if !(bound >= 0.0 && bound.is_finite()) {
        return Err(Error::InvalidInstance(format!("B = {bound} must be finite and nonnegative")));
    }
    if let Some(v) = a.as_slice().iter().find(|v| !(0.0..=bound).contains(*v)) {
        return Err(Error::InvalidInstance(format!("entry {v} of A outside [0, {bound}]")));
    }
    if let Some(v) = v_bin.as_slice().iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(Error::InvalidInstance(format!("entry {v} of V is not 0 or 1")));
    }
    Ok(())
}

impl HardInstance {
    /// Requires entries of `A` in `[0, B]`, at least half of each row equal
    /// to `B`, and `V ∈ {0,1}^{n×d}`.
    pub fn new(a: Matrix, v_bin: Matrix, bound: f64) -> Result<Self> {
        check_common(&a, &v_bin, bound)?;
        let n = a.rows();
        for i in 0..n {
            let at_bound = a.row(i).iter().filter(|v| **v == bound).count();
            if 2 * at_bound < n {
                return Err(Error::InvalidInstance(format!(
                    "row {i} has {at_bound} of {n} entries equal to B"
                )));
            }
        }
        Ok(Self { a, v_bin, bound, half_at_bound: true })
    }

    /// Only the range and binary constraints; used for `A = Q Kᵀ`.
    pub fn relaxed(a: Matrix, v_bin: Matrix, bound: f64) -> Result<Self> {
        check_common(&a, &v_bin, bound)?;
        let n = a.rows();
        let half_at_bound =
            (0..n).all(|i| 2 * a.row(i).iter().filter(|v| **v == bound).count() >= n);
        Ok(Self { a, v_bin, bound, half_at_bound })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn v_bin(&self) -> &Matrix {
        &self.v_bin
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn n(&self) -> usize {
        self.a.rows()
    }

    pub fn d(&self) -> usize {
        self.v_bin.cols()
    }

    /// Whether every row has at least half its entries equal to `B`.
    pub fn half_at_bound(&self) -> bool {
        self.half_at_bound
    }
}

/// Per row, `⌈frac_b · n⌉` uniformly chosen positions are set to `B` and the
/// rest drawn from `U[0, B]`; `V` is i.i.d. Bernoulli(1/2).
pub fn gen_hard_instance(n: usize, d: usize, bound: f64, frac_b: f64, seed: u64) -> Result<HardInstance> {
    if n == 0 || d == 0 {
        return Err(Error::InvalidArgument("n and d must be positive".into()));
    }
    if !(0.5..=1.0).contains(&frac_b) {
        return Err(Error::InvalidArgument(format!("frac_B = {frac_b} must lie in [0.5, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let at_bound = ((frac_b * n as f64).ceil() as usize).min(n);
    let mut a = vec![0.0; n * n];
    for row in a.chunks_mut(n) {
        for v in row.iter_mut() {
            *v = rng.random_range(0.0..=bound);
        }
        for j in sample(&mut rng, n, at_bound) {
            row[j] = bound;
        }
    }
    let v: Vec<f64> = (0..n * d).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    HardInstance::new(Matrix::new(n, n, a)?, Matrix::new(n, d, v)?, bound)
}

/// `Q, K` with `A = Q Kᵀ`, plus the binary values.
#[derive(Clone, Debug)]
pub struct FactorizedInstance {
    pub q: Matrix,
    pub k: Matrix,
    pub hard: HardInstance,
}

/// `Q, K` entries uniform in `[0, √(B/d)]`, so `Q Kᵀ` lies in `[0, B]`.
/// The half-at-`B` structure is not imposed.
pub fn gen_factorized_instance(n: usize, d: usize, bound: f64, seed: u64) -> Result<FactorizedInstance> {
    if n == 0 || d == 0 {
        return Err(Error::InvalidArgument("n and d must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hi = (bound / d as f64).sqrt();
    let q = Matrix::from_fn(n, d, |_, _| rng.random_range(0.0..=hi));
    let k = Matrix::from_fn(n, d, |_, _| rng.random_range(0.0..=hi));
    let v = Matrix::from_fn(n, d, |_, _| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
    let a = matmul_nt(&q, &k)?;
    // rounding can push a product a hair past B
    let a = Matrix::from_fn(n, n, |i, j| a.get(i, j).clamp(0.0, bound));
    Ok(FactorizedInstance { q, k, hard: HardInstance::relaxed(a, v, bound)? })
}

/// Rescaled row sums at one `λ`: `Σ w`, `Σ A w`, `Σ A² w` over all columns
/// and over each `S_ℓ`, with `w_j = e^{λ A_ij − shift}`.
struct RowSums {
    shift: f64,
    z: [f64; 3],
    s: Vec<[f64; 3]>,
}

fn row_sums(hi: &HardInstance, i: usize, lambda: f64) -> RowSums {
    let row = hi.a.row(i);
    let shift = row.iter().map(|v| lambda * v).fold(f64::NEG_INFINITY, f64::max);
    let d = hi.d();
    let w: Vec<f64> = row.iter().map(|v| (lambda * v - shift).exp()).collect();
    let aw: Vec<f64> = w.iter().zip(row).map(|(w, a)| w * a).collect();
    let aaw: Vec<f64> = aw.iter().zip(row).map(|(w, a)| w * a).collect();
    let z = [pairwise_sum(&w), pairwise_sum(&aw), pairwise_sum(&aaw)];
    let mut s = vec![[0.0; 3]; d];
    let mut col = Vec::with_capacity(row.len());
    for (l, sl) in s.iter_mut().enumerate() {
        for (k, src) in [&w, &aw, &aaw].into_iter().enumerate() {
            col.clear();
            col.extend((0..row.len()).filter(|&j| hi.v_bin.get(j, l) == 1.0).map(|j| src[j]));
            sl[k] = pairwise_sum(&col);
        }
    }
    RowSums { shift, z, s }
}

/// `(F, F′, F″)` for one row, `F = a/b`.
fn row_terms(rs: &RowSums) -> (f64, f64, f64) {
    let [z, z1, z2] = rs.z;
    let (mut a, mut a1, mut a2) = (0.0, 0.0, 0.0);
    for &[s, s1, s2] in &rs.s {
        a += s * s;
        a1 += 2.0 * s * s1;
        a2 += 2.0 * (s1 * s1 + s * s2);
    }
    let b = z * z;
    let b1 = 2.0 * z * z1;
    let b2 = 2.0 * (z1 * z1 + z * z2);
    let f = a / b;
    let f1 = (a1 * b - a * b1) / (b * b);
    let f2 = (a2 - b2 * f - 2.0 * b1 * f1) / b;
    (f, f1, f2)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda must be finite, got {lambda}")));
    }
    Ok(())
}

/// `f(λ) = Σ_i a(λ,i) / b(λ,i)`.
pub fn f_lambda(hi: &HardInstance, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    let terms: Vec<f64> = (0..hi.n()).map(|i| row_terms(&row_sums(hi, i, lambda)).0).collect();
    Ok(pairwise_sum(&terms))
}

/// `(f′(λ), f″(λ))` from the quotient rule on each row.
pub fn f_lambda_derivative(hi: &HardInstance, lambda: f64) -> Result<(f64, f64)> {
    check_lambda(lambda)?;
    let (d1, d2): (Vec<f64>, Vec<f64>) = (0..hi.n())
        .map(|i| {
            let (_, f1, f2) = row_terms(&row_sums(hi, i, lambda));
            (f1, f2)
        })
        .unzip();
    Ok((pairwise_sum(&d1), pairwise_sum(&d2)))
}

/// `ln Σ_k e^{λ A_ik}` per row, so `ln b(λ,i)` is twice this.
pub fn log_row_partition(hi: &HardInstance, lambda: f64) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    Ok((0..hi.n())
        .map(|i| {
            let rs = row_sums(hi, i, lambda);
            rs.shift + rs.z[0].ln()
        })
        .collect())
}

/// A scalar function on `[0, 1]` with its first two derivatives.
pub trait ScalarCurve {
    fn value(&self, lambda: f64) -> Result<f64>;
    fn derivatives(&self, lambda: f64) -> Result<(f64, f64)>;
}

impl ScalarCurve for HardInstance {
    fn value(&self, lambda: f64) -> Result<f64> {
        f_lambda(self, lambda)
    }

    fn derivatives(&self, lambda: f64) -> Result<(f64, f64)> {
        f_lambda_derivative(self, lambda)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ReductionReport {
    /// Riemann sample points `i/m`.
    pub lambda_grid: Vec<f64>,
    pub f_values: Vec<f64>,
    pub fprime_values: Vec<f64>,
    pub t_m: f64,
    pub f1_minus_f0: f64,
    pub bound_b: f64,
    pub m: usize,
    pub max_abs_fprime: f64,
    pub max_abs_fsecond: f64,
    pub passed: bool,
}

fn unit_grid(points: usize) -> Vec<f64> {
    (0..points).map(|i| i as f64 / (points - 1) as f64).collect()
}

/// Left Riemann sum `t_m = Σ_{i<m} f′(i/m) / m` against `f(1) − f(0)`, with
/// `b` the largest `|f″|` seen on a `grid_points`-point grid over `[0, 1]`
/// together with the sample points.
pub fn riemann_check<C: ScalarCurve + ?Sized>(curve: &C, m: usize, grid_points: usize) -> Result<ReductionReport> {
    if m == 0 {
        return Err(Error::InvalidArgument("m must be positive".into()));
    }
    if grid_points < 2 {
        return Err(Error::InvalidArgument("grid needs at least two points".into()));
    }
    let lambda_grid: Vec<f64> = (0..m).map(|i| i as f64 / m as f64).collect();
    let mut f_values = Vec::with_capacity(m);
    let mut fprime_values = Vec::with_capacity(m);
    let mut max_abs_fprime: f64 = 0.0;
    let mut max_abs_fsecond: f64 = 0.0;
    for &lambda in &lambda_grid {
        f_values.push(curve.value(lambda)?);
        let (d1, d2) = curve.derivatives(lambda)?;
        fprime_values.push(d1);
        max_abs_fprime = max_abs_fprime.max(d1.abs());
        max_abs_fsecond = max_abs_fsecond.max(d2.abs());
    }
    for lambda in unit_grid(grid_points) {
        let (d1, d2) = curve.derivatives(lambda)?;
        max_abs_fprime = max_abs_fprime.max(d1.abs());
        max_abs_fsecond = max_abs_fsecond.max(d2.abs());
    }
    let t_m = pairwise_sum(&fprime_values) / m as f64;
    let f1_minus_f0 = curve.value(1.0)? - curve.value(0.0)?;
    let bound_b = max_abs_fsecond;
    let slack = 1e-12 * (1.0 + f1_minus_f0.abs());
    let passed = (t_m - f1_minus_f0).abs() <= bound_b / m as f64 + slack;
    Ok(ReductionReport {
        lambda_grid,
        f_values,
        fprime_values,
        t_m,
        f1_minus_f0,
        bound_b,
        m,
        max_abs_fprime,
        max_abs_fsecond,
        passed,
    })
}

pub fn riemann_reduction(hi: &HardInstance, m: usize) -> Result<ReductionReport> {
    riemann_check(hi, m, CURVATURE_GRID)
}

#[derive(Clone, Debug, Serialize)]
pub struct DerivativeBoundReport {
    pub grid_points: usize,
    pub min_fprime: f64,
    pub max_fprime: f64,
    pub max_abs_fprime: f64,
    /// `8 B n`.
    pub bound: f64,
    pub passed: bool,
}

/// Checks `-8Bn ≤ f′(λ) ≤ 8Bn` on an evenly spaced grid over `[0, 1]`.
pub fn derivative_bound_check(hi: &HardInstance, grid_points: usize) -> Result<DerivativeBoundReport> {
    if grid_points < 2 {
        return Err(Error::InvalidArgument("grid needs at least two points".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi_v = f64::NEG_INFINITY;
    for lambda in unit_grid(grid_points) {
        let (d1, _) = f_lambda_derivative(hi, lambda)?;
        lo = lo.min(d1);
        hi_v = hi_v.max(d1);
    }
    let bound = 8.0 * hi.bound() * hi.n() as f64;
    let max_abs = lo.abs().max(hi_v.abs());
    Ok(DerivativeBoundReport {
        grid_points,
        min_fprime: lo,
        max_fprime: hi_v,
        max_abs_fprime: max_abs,
        bound,
        passed: max_abs <= bound,
    })
}

/// `f′(λ)` recovered from the attention gradient: with `X = λ d I`, `Y = I`
/// and `E = 0`, `A1 X A2ᵀ / d = λ Q Kᵀ` and `f(λ) = 2 L(X)`, so
/// `f′(λ) = 2 d · trace(dL/dX)`.
pub fn gradient_to_forward(q: &Matrix, k: &Matrix, v: &Matrix, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    let (n, d) = q.shape();
    if k.shape() != (n, d) || v.shape() != (n, d) {
        return Err(dim_mismatch(
            "gradient_to_forward",
            format!("Q {:?}, K {:?}, V {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let x = Matrix::identity(d).scaled(lambda * d as f64);
    let bound = (lambda.abs() * d as f64 * q.max_abs()).max(k.max_abs());
    let inst = AttentionInstance::new(q.clone(), k.clone(), v.clone(), Matrix::zeros(n, d), x, Matrix::identity(d), bound)?;
    let grad = gradient_exact(&inst)?;
    Ok(2.0 * d as f64 * grad.grad.trace()?)
}

#[derive(Clone, Debug, Serialize)]
pub struct ConsistencyPoint {
    pub lambda: f64,
    pub from_gradient: f64,
    pub analytic: f64,
    pub rel_err: f64,
}

/// Compares [`gradient_to_forward`] with [`f_lambda_derivative`] at each `λ`.
pub fn reduction_consistency(fi: &FactorizedInstance, lambdas: &[f64]) -> Result<Vec<ConsistencyPoint>> {
    lambdas
        .iter()
        .map(|&lambda| {
            let from_gradient = gradient_to_forward(&fi.q, &fi.k, fi.hard.v_bin(), lambda)?;
            let (analytic, _) = f_lambda_derivative(&fi.hard, lambda)?;
            let rel_err = (from_gradient - analytic).abs() / analytic.abs().max(1.0);
            Ok(ConsistencyPoint { lambda, from_gradient, analytic, rel_err })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_edge_cases() {
        let zero = gen_hard_instance(6, 2, 0.0, 0.5, 1).unwrap();
        assert_eq!(zero.a().max_abs(), 0.0);
        let full = gen_hard_instance(6, 2, 1.5, 1.0, 1).unwrap();
        assert_eq!(full.a(), &Matrix::filled(6, 6, 1.5));
        assert!(gen_hard_instance(6, 2, 1.0, 0.4, 1).is_err());
    }

    #[test]
    fn strict_constructor_rejects_unstructured_rows() {
        let a = Matrix::from_rows(&[[1.0, 0.5, 0.2], [1.0, 1.0, 0.0], [1.0, 1.0, 1.0]]).unwrap();
        let v = Matrix::filled(3, 1, 1.0);
        assert!(HardInstance::new(a.clone(), v.clone(), 1.0).is_err());
        assert!(!HardInstance::relaxed(a, v.clone(), 1.0).unwrap().half_at_bound());
        let bad_v = Matrix::filled(3, 1, 0.5);
        assert!(HardInstance::relaxed(Matrix::zeros(3, 3), bad_v, 1.0).is_err());
    }

    #[test]
    fn all_ones_values_give_nd() {
        let hi = gen_hard_instance(10, 3, 2.0, 0.5, 4).unwrap();
        let ones = HardInstance::new(hi.a().clone(), Matrix::filled(10, 3, 1.0), 2.0).unwrap();
        for lambda in [0.0, 0.3, 1.0] {
            assert!((f_lambda(&ones, lambda).unwrap() - 30.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_bound_is_flat() {
        let hi = gen_hard_instance(8, 2, 0.0, 0.5, 2).unwrap();
        let (d1, d2) = f_lambda_derivative(&hi, 0.4).unwrap();
        assert_eq!((d1, d2), (0.0, 0.0));
        let r = riemann_reduction(&hi, 10).unwrap();
        assert_eq!(r.t_m, 0.0);
        assert_eq!(r.f1_minus_f0, 0.0);
        assert!(r.passed);
    }

    #[test]
    fn uniform_weights_at_zero() {
        let hi = gen_hard_instance(12, 3, 1.0, 0.5, 9).unwrap();
        let n = 12.0;
        let mut want = 0.0;
        for l in 0..3 {
            let size: f64 = hi.v_bin().column(l).iter().sum();
            want += n * (size / n).powi(2);
        }
        assert!((f_lambda(&hi, 0.0).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn gradient_to_forward_trivial_cases() {
        let fi = gen_factorized_instance(5, 2, 1.0, 3).unwrap();
        // identical key rows make the softmax uniform for every λ
        let k = Matrix::filled(5, 2, 0.3);
        let g = gradient_to_forward(&fi.q, &k, fi.hard.v_bin(), 0.7).unwrap();
        assert!(g.abs() < 1e-12);
        let zq = Matrix::zeros(5, 2);
        assert_eq!(gradient_to_forward(&zq, &fi.k, fi.hard.v_bin(), 0.5).unwrap(), 0.0);
        assert!(gradient_to_forward(&fi.q, &Matrix::zeros(4, 2), fi.hard.v_bin(), 0.5).is_err());
    }

    struct Square;

    impl ScalarCurve for Square {
        fn value(&self, lambda: f64) -> Result<f64> {
            Ok(lambda * lambda)
        }

        fn derivatives(&self, lambda: f64) -> Result<(f64, f64)> {
            Ok((2.0 * lambda, 2.0))
        }
    }

    #[test]
    fn riemann_sum_of_square() {
        let r = riemann_check(&Square, 10, 11).unwrap();
        assert!((r.t_m - 0.9).abs() < 1e-15);
        assert_eq!(r.f1_minus_f0, 1.0);
        assert_eq!(r.bound_b / r.m as f64, 0.2);
        assert!(r.passed);
        assert!(riemann_check(&Square, 0, 11).is_err());
    }

    #[test]
    fn analytic_derivatives_match_differences() {
        let hi = gen_hard_instance(24, 3, 2.0, 0.5, 5).unwrap();
        let h = 1e-5;
        for lambda in [0.1, 0.5, 0.9] {
            let (d1, d2) = f_lambda_derivative(&hi, lambda).unwrap();
            let fd1 = (f_lambda(&hi, lambda + h).unwrap() - f_lambda(&hi, lambda - h).unwrap()) / (2.0 * h);
            let fd2 = (f_lambda_derivative(&hi, lambda + h).unwrap().0 - f_lambda_derivative(&hi, lambda - h).unwrap().0)
                / (2.0 * h);
            assert!((d1 - fd1).abs() <= 1e-6 * d1.abs().max(1.0), "{d1} vs {fd1}");
            assert!((d2 - fd2).abs() <= 1e-6 * d2.abs().max(1.0), "{d2} vs {fd2}");
        }
    }

    #[test]
    fn row_partition_sandwich() {
        let (n, bound) = (32, 3.0);
        let hi = gen_hard_instance(n, 2, bound, 0.5, 7).unwrap();
        for lambda in [0.0, 0.4, 1.0] {
            for log_z in log_row_partition(&hi, lambda).unwrap() {
                let lo = (n as f64 / 2.0).ln() + lambda * bound;
                let hi_ = (n as f64).ln() + lambda * bound;
                assert!(lo - 1e-12 <= log_z && log_z <= hi_ + 1e-12);
            }
        }
    }

    #[test]
    fn derivative_bound_holds_on_hard_instances() {
        for (n, bound) in [(16, 1.0), (16, 5.0), (40, 5.0)] {
            let hi = gen_hard_instance(n, 4, bound, 0.5, 3).unwrap();
            let r = derivative_bound_check(&hi, DERIVATIVE_GRID).unwrap();
            assert!(r.passed, "{r:?}");
            assert_eq!(r.bound, 8.0 * bound * n as f64);
        }
    }

    #[test]
    fn gradient_recovers_forward_derivative() {
        let fi = gen_factorized_instance(10, 3, 1.5, 11).unwrap();
        for p in reduction_consistency(&fi, &[0.0, 0.35, 1.0]).unwrap() {
            assert!(p.rel_err < 1e-9, "{p:?}");
        }
    }

    #[test]
    fn riemann_check_passes_on_hard_instance() {
        let hi = gen_hard_instance(20, 2, 2.0, 0.5, 1).unwrap();
        for m in [1, 7, 50] {
            let r = riemann_reduction(&hi, m).unwrap();
            assert!(r.passed, "m = {m}: {r:?}");
            assert_eq!(r.fprime_values.len(), m);
        }
    }
}
