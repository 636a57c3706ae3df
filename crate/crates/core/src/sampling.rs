//! Small seeded-sampling helpers shared by the buffer, the selectors, and
//! the generators. Hand-rolled so their output never shifts under `rand`
//! upgrades.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::matrix::Matrix;

/// `k` distinct indices from `0..n` drawn uniformly without replacement
/// (partial Fisher-Yates). `k` is clamped to `n`.
pub(crate) fn sample_without_replacement(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let take = k.min(n);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..take {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(take);
    pool
}

/// Box-Muller standard normals filled row-major.
pub(crate) fn standard_normals(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    let data = m.data_mut();
    let mut i = 0;
    while i < data.len() {
        let u1: f64 = rng.random::<f64>().max(1e-300);
        let u2: f64 = rng.random();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        data[i] = r * theta.cos();
        if i + 1 < data.len() {
            data[i + 1] = r * theta.sin();
        }
        i += 2;
    }
    m
}
