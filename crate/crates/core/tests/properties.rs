use attngrad::exact::{compute_p, grad_entry_cached};
use attngrad::forward::{compute_softmax, evaluate};
use attngrad::lowrank::{feature_map, taylor_exp, MonomialBasis, PolyConfig};
use attngrad::lowrank::poly::binomial;
use attngrad::sample::random_instance;
use attngrad::tensor::{exp_entrywise, kron, matmul, matmul_nt, matvec, row_kronecker, unvec, vec, Matrix, Vector};
use attngrad::verify::{brute_kron_gradient, finite_diff_gradient};
use attngrad::{gradient_exact, Limits};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Matrix> {
    proptest::collection::vec(lo..hi, rows * cols).prop_map(move |v| Matrix::new(rows, cols, v).unwrap())
}

fn sized_matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| matrix(r, c, -2.0, 2.0))
}

fn close(a: &Matrix, b: &Matrix, tol: f64) -> bool {
    a.max_abs_diff(b).unwrap() <= tol * (1.0 + a.max_abs().max(b.max_abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn row_kronecker_turns_hadamard_into_a_product(
        (u1, v1, u2, v2) in (1usize..6, 1usize..4, 1usize..4).prop_flat_map(|(n, k1, k2)| {
            (matrix(n, k1, -1.0, 1.0), matrix(n, k1, -1.0, 1.0), matrix(n, k2, -1.0, 1.0), matrix(n, k2, -1.0, 1.0))
        })
    ) {
        let lhs = matmul_nt(&u1, &v1).unwrap().hadamard(&matmul_nt(&u2, &v2).unwrap()).unwrap();
        let rhs = matmul_nt(&row_kronecker(&u1, &u2).unwrap(), &row_kronecker(&v1, &v2).unwrap()).unwrap();
        prop_assert!(close(&lhs, &rhs, 1e-12));
    }

    #[test]
    fn tensor_trick(
        (a1, x, a2) in (1usize..5, 1usize..4, 1usize..5, 1usize..4).prop_flat_map(|(n1, d1, n2, d2)| {
            (matrix(n1, d1, -1.0, 1.0), matrix(d1, d2, -1.0, 1.0), matrix(n2, d2, -1.0, 1.0))
        })
    ) {
        let lhs = vec(&matmul_nt(&matmul(&a1, &x).unwrap(), &a2).unwrap());
        let rhs = matvec(&kron(&a1, &a2).unwrap(), &vec(&x)).unwrap();
        let diff = lhs.as_slice().iter().zip(rhs.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(diff <= 1e-12);
    }

    #[test]
    fn vec_round_trip(m in sized_matrix(5, 5)) {
        prop_assert_eq!(unvec(&vec(&m), m.rows(), m.cols()).unwrap(), m);
    }

    #[test]
    fn hadamard_and_inner_product_rules(
        (a, b, c) in (1usize..12).prop_flat_map(|n| {
            let v = || proptest::collection::vec(-3.0..3.0f64, n);
            (v(), v(), v())
        })
    ) {
        let (a, b, c) = (Vector::new(a).unwrap(), Vector::new(b).unwrap(), Vector::new(c).unwrap());
        let ab = a.hadamard(&b).unwrap();
        prop_assert_eq!(&ab, &b.hadamard(&a).unwrap());
        // ⟨a ∘ b, c⟩ = ⟨a, b ∘ c⟩
        let lhs = ab.dot(&c).unwrap();
        let rhs = a.dot(&b.hadamard(&c).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn softmax_rows_are_stochastic_and_shift_invariant(
        (m, shift) in (sized_matrix(6, 6), -5.0..5.0f64)
    ) {
        let (f, _) = compute_softmax(exp_entrywise(&m).unwrap()).unwrap();
        for j in 0..f.rows() {
            let s: f64 = f.row(j).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(f.row(j).iter().all(|v| *v > 0.0));
        }
        let shifted = Matrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) + shift);
        let (g, _) = compute_softmax(exp_entrywise(&shifted).unwrap()).unwrap();
        prop_assert!(close(&g, &f, 1e-12));
    }

    #[test]
    fn p_rows_are_orthogonal_to_ones(
        (f, q) in (1usize..7, 1usize..7).prop_flat_map(|(n, _)| (matrix(n, n, -2.0, 2.0), matrix(n, n, -2.0, 2.0)))
    ) {
        let (f, _) = compute_softmax(exp_entrywise(&f).unwrap()).unwrap();
        let p = compute_p(&f, &q).unwrap();
        for j in 0..p.rows() {
            let s: f64 = p.row(j).iter().sum();
            let scale: f64 = q.row(j).iter().map(|v| v.abs()).sum::<f64>() + 1.0;
            prop_assert!(s.abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn feature_map_inner_product_is_truncated_exp(
        (q, k, g) in (1usize..5, 0usize..6).prop_flat_map(|(d, g)| {
            (proptest::collection::vec(-1.0..1.0f64, d), proptest::collection::vec(-1.0..1.0f64, d), Just(g))
        })
    ) {
        let d = q.len();
        let cfg = PolyConfig { bound: 1.0, eps_prime: 1.0, degree: g, d, m_feat: binomial(d + g, g).unwrap() };
        let (q, k) = (Vector::new(q).unwrap(), Vector::new(k).unwrap());
        let pq = feature_map(&q, &cfg).unwrap();
        let pk = feature_map(&k, &cfg).unwrap();
        prop_assert_eq!(pq.len(), MonomialBasis::new(d, g).len());
        let want = taylor_exp(q.dot(&k).unwrap() / d as f64, g);
        prop_assert!((pq.dot(&pk).unwrap() - want).abs() <= 1e-12 * want.abs().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn exact_gradient_agrees_with_oracles(n in 2usize..12, d in 1usize..4, seed in 0u64..1000) {
        let inst = random_instance(n, d, 1.0, seed, 0.1).unwrap();
        let exact = gradient_exact(&inst).unwrap();
        let brute = brute_kron_gradient(&inst).unwrap();
        prop_assert!(exact.grad.max_abs_diff(&brute.grad).unwrap() <= 1e-10);
        let fd = finite_diff_gradient(&inst, 1e-4).unwrap();
        prop_assert!(exact.grad.max_abs_diff(&fd.grad).unwrap() <= 1e-5);
    }

    #[test]
    fn gradient_is_the_sum_of_entry_derivatives(n in 1usize..7, d in 1usize..4, seed in 0u64..1000) {
        let inst = random_instance(n, d, 1.0, seed, 0.1).unwrap();
        let eval = evaluate(&inst, &Limits::default()).unwrap();
        let exact = gradient_exact(&inst).unwrap();
        for i in 0..d * d {
            let mut total = 0.0;
            for j0 in 0..n {
                for i0 in 0..d {
                    total += grad_entry_cached(&inst, &eval, j0, i0, i).unwrap();
                }
            }
            prop_assert!((total - exact.g[i]).abs() <= 1e-10);
        }
    }

    #[test]
    fn finite_differences_are_step_robust(seed in 0u64..1000) {
        let inst = random_instance(6, 2, 1.0, seed, 0.1).unwrap();
        let exact = gradient_exact(&inst).unwrap();
        for step in [1e-3, 1e-4, 1e-5] {
            let fd = finite_diff_gradient(&inst, step).unwrap();
            prop_assert!(exact.grad.max_abs_diff(&fd.grad).unwrap() <= 1e-5, "step {}", step);
        }
    }
}
