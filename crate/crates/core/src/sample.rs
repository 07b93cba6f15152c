//! Seeded random instances for tests, benchmarks and the `gen` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::forward::{forward, AttentionInstance};
use crate::tensor::Matrix;

pub const DEFAULT_NOISE_SIGMA: f64 = 0.1;

pub(crate) fn uniform_matrix(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(lo..=hi))
}

fn rescale_to(m: &Matrix, target: f64, current: f64) -> Matrix {
    if target == 0.0 || current == 0.0 {
        Matrix::zeros(m.rows(), m.cols())
    } else {
        m.scaled(target / current)
    }
}

/// Draws `A1, A2, A3, X, Y` uniformly from `[-1, 1]`, rescales `A2` so that
/// `‖A2‖∞ = B` and `X` so that `‖A1 X‖∞ = B`, then sets
/// `E = forward + N(0, noise_sigma²)`.
pub fn random_instance(n: usize, d: usize, bound: f64, seed: u64, noise_sigma: f64) -> Result<AttentionInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a1 = uniform_matrix(&mut rng, n, d, -1.0, 1.0);
    let a2 = uniform_matrix(&mut rng, n, d, -1.0, 1.0);
    let a3 = uniform_matrix(&mut rng, n, d, -1.0, 1.0);
    let x = uniform_matrix(&mut rng, d, d, -1.0, 1.0);
    let y = uniform_matrix(&mut rng, d, d, -1.0, 1.0);

    let a2 = rescale_to(&a2, bound, a2.max_abs());
    let qx = crate::tensor::matmul(&a1, &x)?.max_abs();
    let x = rescale_to(&x, bound, qx);

    let inst = AttentionInstance::new(a1, a2, a3, Matrix::zeros(n, d), x, y, bound)?;
    let mut e = forward(&inst)?;
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).expect("sigma is positive and finite");
        e = Matrix::from_fn(n, d, |i, j| e.get(i, j) + normal.sample(&mut rng));
    }
    inst.with_e(e)
}
