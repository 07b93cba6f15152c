//! End-to-end acceptance checks. Each test prints a single PASS/FAIL line to
//! stderr; they run one at a time so the timing checks see an idle machine.

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use attngrad::bench::{run_bench, BenchConfig};
use attngrad::exact::compute_p;
use attngrad::forward::compute_softmax;
use attngrad::hardness::{
    derivative_bound_check, f_lambda, f_lambda_derivative, gen_factorized_instance, gen_hard_instance,
    reduction_consistency, riemann_check, riemann_reduction, ScalarCurve, DERIVATIVE_GRID,
};
use attngrad::lowrank::poly::binomial;
use attngrad::lowrank::{feature_map, taylor_exp, PolyConfig};
use attngrad::sample::random_instance;
use attngrad::tensor::{exp_entrywise, kron, matmul, matmul_nt, matvec, row_kronecker, vec, Matrix, Vector};
use attngrad::verify::{brute_kron_gradient, compare, finite_diff_gradient, DEFAULT_FD_STEP};
use attngrad::{gradient_exact, gradient_fast, Limits, Method, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn report(id: u32, name: &str, passed: bool, detail: String, elapsed: Duration, budget: Duration) -> bool {
    let within = elapsed <= budget;
    let status = if passed && within { "PASS" } else { "FAIL" };
    let line = format!(
        "criterion {id} ({name}): {status} {detail} [{:.1}s of {:.0}s budget]\n",
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
    // written to the raw handle so the line shows without --nocapture
    std::io::stderr().write_all(line.as_bytes()).unwrap();
    passed && within
}

fn run(id: u32, name: &str, budget_secs: u64, body: impl FnOnce() -> Result<(bool, String)>) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let started = Instant::now();
    let (passed, detail) = body().unwrap_or_else(|e| (false, format!("error: {e}")));
    let ok = report(id, name, passed, detail, started.elapsed(), Duration::from_secs(budget_secs));
    assert!(ok, "criterion {id} failed");
}

#[test]
fn criterion_1_oracle_triple_agreement() {
    run(1, "oracle triple agreement", 60, || {
        let (mut brute_max, mut fd_max) = (0.0f64, 0.0f64);
        let mut count = 0;
        for seed in 0..50u64 {
            let n = [8, 16, 32][(seed % 3) as usize];
            let d = [2, 3, 4][((seed / 3) % 3) as usize];
            let inst = random_instance(n, d, 1.0, 1000 + seed, 0.1)?;
            let exact = gradient_exact(&inst)?;
            brute_max = brute_max.max(compare(&exact, &brute_kron_gradient(&inst)?)?.max_abs);
            fd_max = fd_max.max(compare(&exact, &finite_diff_gradient(&inst, DEFAULT_FD_STEP)?)?.max_abs);
            count += 1;
        }
        Ok((
            brute_max <= 1e-10 && fd_max <= 1e-5,
            format!("{count} instances, max|exact-brute| = {brute_max:.2e}, max|exact-fd| = {fd_max:.2e}"),
        ))
    });
}

#[test]
fn criterion_2_fast_vs_exact_accuracy() {
    run(2, "fast vs exact accuracy", 300, || {
        let mut worst = 0.0f64;
        let mut k1 = Vec::new();
        for n in [256, 512, 1024] {
            for seed in 0..10u64 {
                let inst = random_instance(n, 8, 0.8, seed, 0.1)?;
                let fast = gradient_fast(&inst, 1e-4)?;
                worst = worst.max(compare(&fast, &gradient_exact(&inst)?)?.max_abs);
                k1.push(fast.fast.map(|f| f.k1).unwrap_or(0));
            }
        }
        k1.dedup();
        Ok((worst <= 1e-4, format!("30 runs, max|g_fast - g_exact| = {worst:.2e}, k1 = {k1:?}")))
    });
}

#[test]
fn criterion_3_degenerate_exactness() {
    run(3, "degenerate exactness at B = 0", 120, || {
        let mut worst = 0.0f64;
        let mut ranks = Vec::new();
        for (n, d) in [(1, 3), (17, 2), (512, 8), (4096, 4)] {
            let inst = random_instance(n, d, 0.0, 5, 0.1)?;
            let fast = gradient_fast(&inst, 1e-4)?;
            worst = worst.max(compare(&fast, &gradient_exact(&inst)?)?.max_abs);
            ranks.push(fast.fast.map(|f| f.k1).unwrap_or(0));
        }
        Ok((
            worst <= 1e-12 && ranks.iter().all(|&k| k == 1),
            format!("max diff = {worst:.2e}, k1 = {ranks:?}"),
        ))
    });
}

#[test]
fn criterion_4_scaling_separation() {
    run(4, "scaling separation", 1800, || {
        let cfg = BenchConfig {
            sizes: vec![1024, 2048, 4096, 8192],
            d: 8,
            bound: 0.8,
            eps: 1e-4,
            repeats: 3,
            seed: 0,
            check_error: false,
        };
        let limits = Limits::default();
        let fast = run_bench(Method::Fast, &cfg, &limits)?;
        let exact = run_bench(Method::Exact, &cfg, &limits)?;
        let complete = fast.failures.is_empty() && exact.failures.is_empty();
        Ok((
            complete && fast.fitted_loglog_slope <= 1.3 && exact.fitted_loglog_slope >= 1.8,
            format!(
                "fast slope = {:.3} {:?}s, exact slope = {:.3} {:?}s",
                fast.fitted_loglog_slope,
                fast.seconds.iter().map(|s| (s * 1e3).round() / 1e3).collect::<Vec<_>>(),
                exact.fitted_loglog_slope,
                exact.seconds.iter().map(|s| (s * 1e3).round() / 1e3).collect::<Vec<_>>(),
            ),
        ))
    });
}

fn hard_instances() -> Result<Vec<attngrad::hardness::HardInstance>> {
    let mut out = Vec::new();
    for n in [64, 256] {
        for bound in [1.0, 5.0] {
            out.push(gen_hard_instance(n, 4, bound, 0.5, 1)?);
        }
    }
    Ok(out)
}

#[test]
fn criterion_5_derivative_bounds() {
    run(5, "derivative bounds", 120, || {
        let mut passed = true;
        let mut worst_ratio = 0.0f64;
        let mut worst_rel = 0.0f64;
        let h = 1e-5;
        for hi in hard_instances()? {
            let r = derivative_bound_check(&hi, DERIVATIVE_GRID)?;
            passed &= r.passed;
            worst_ratio = worst_ratio.max(r.max_abs_fprime / r.bound);
            for i in 0..DERIVATIVE_GRID {
                let lambda = i as f64 / (DERIVATIVE_GRID - 1) as f64;
                let (analytic, _) = f_lambda_derivative(&hi, lambda)?;
                let fd = (f_lambda(&hi, lambda + h)? - f_lambda(&hi, lambda - h)?) / (2.0 * h);
                worst_rel = worst_rel.max((analytic - fd).abs() / analytic.abs());
            }
        }
        Ok((
            passed && worst_rel <= 1e-4,
            format!("max|f'|/(8Bn) = {worst_ratio:.3}, max rel |f'_analytic - f'_fd| = {worst_rel:.2e}"),
        ))
    });
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
fn criterion_6_riemann_sum() {
    run(6, "Riemann-sum bound", 300, || {
        let mut passed = true;
        let mut worst = 0.0f64;
        for hi in hard_instances()? {
            for m in [10, 100, 1000] {
                let r = riemann_reduction(&hi, m)?;
                passed &= r.passed;
                let slack = r.bound_b / m as f64;
                if slack > 0.0 {
                    worst = worst.max((r.t_m - r.f1_minus_f0).abs() / slack);
                }
            }
        }
        let sq = riemann_check(&Square, 10, 11)?;
        let square_ok = sq.t_m == 0.9 && sq.f1_minus_f0 == 1.0 && sq.bound_b / 10.0 == 0.2 && sq.passed;
        Ok((
            passed && square_ok,
            format!(
                "12 cases, max |t_m - (f(1)-f(0))| / (b/m) = {worst:.3}; λ² gives t_10 = {}, bound {}",
                sq.t_m,
                sq.bound_b / 10.0
            ),
        ))
    });
}

#[test]
fn criterion_7_reduction_consistency() {
    run(7, "reduction consistency", 60, || {
        let lambdas: Vec<f64> = (0..11).map(|i| i as f64 / 10.0).collect();
        let mut worst = 0.0f64;
        for seed in 0..3 {
            let fi = gen_factorized_instance(16, 4, 2.0, seed)?;
            for p in reduction_consistency(&fi, &lambdas)? {
                worst = worst.max(p.rel_err);
            }
        }
        Ok((worst <= 1e-4, format!("3 instances x 11 λ, max rel err = {worst:.2e}")))
    });
}

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

#[test]
fn criterion_8_algebraic_identities() {
    run(8, "algebraic identities", 30, || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (mut oslash, mut tensor, mut stochastic, mut row_null, mut feature) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for _ in 0..200 {
            let n = rng.random_range(1..9);
            let (k1, k2) = (rng.random_range(1..5), rng.random_range(1..5));
            let (u1, v1) = (rand_matrix(&mut rng, n, k1), rand_matrix(&mut rng, n, k1));
            let (u2, v2) = (rand_matrix(&mut rng, n, k2), rand_matrix(&mut rng, n, k2));
            let lhs = matmul_nt(&u1, &v1)?.hadamard(&matmul_nt(&u2, &v2)?)?;
            let rhs = matmul_nt(&row_kronecker(&u1, &u2)?, &row_kronecker(&v1, &v2)?)?;
            oslash = oslash.max(lhs.max_abs_diff(&rhs)?);

            let d = rng.random_range(1..5);
            let (a1, x, a2) = (rand_matrix(&mut rng, n, d), rand_matrix(&mut rng, d, d), rand_matrix(&mut rng, n, d));
            let direct = vec(&matmul_nt(&matmul(&a1, &x)?, &a2)?);
            let lifted = matvec(&kron(&a1, &a2)?, &vec(&x))?;
            tensor = tensor.max(direct.as_slice().iter().zip(lifted.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));

            let scores = rand_matrix(&mut rng, n, n).scaled(3.0);
            let (f, _) = compute_softmax(exp_entrywise(&scores)?)?;
            let q = rand_matrix(&mut rng, n, n);
            let p = compute_p(&f, &q)?;
            for j in 0..n {
                stochastic = stochastic.max((f.row(j).iter().sum::<f64>() - 1.0).abs());
                row_null = row_null.max(p.row(j).iter().sum::<f64>().abs());
            }

            let g = rng.random_range(0..6);
            let cfg = PolyConfig { bound: 1.0, eps_prime: 1.0, degree: g, d, m_feat: binomial(d + g, g).unwrap() };
            let qv = Vector::new((0..d).map(|_| rng.random_range(-1.0..1.0)).collect())?;
            let kv = Vector::new((0..d).map(|_| rng.random_range(-1.0..1.0)).collect())?;
            let got = feature_map(&qv, &cfg)?.dot(&feature_map(&kv, &cfg)?)?;
            feature = feature.max((got - taylor_exp(qv.dot(&kv)? / d as f64, g)).abs());
        }
        let passed = oslash <= 1e-12 && tensor <= 1e-12 && stochastic <= 1e-12 && row_null <= 1e-12 && feature <= 1e-12;
        Ok((
            passed,
            format!(
                "200 cases: ⊘ {oslash:.1e}, tensor trick {tensor:.1e}, row sums {stochastic:.1e}, p·1 {row_null:.1e}, φ·φ {feature:.1e}"
            ),
        ))
    });
}
