//! Deterministic inputs shared by the benchmarks.

use pglr::gmm::GmmModel;
use pglr::noise::add_noise;
use pglr::{Image, Matrix};

/// Smooth test card with some texture, values in `[0, 255]`.
pub fn test_card(width: usize, height: usize) -> Image {
    Image::from_fn(width, height, |r, c| {
        let (x, y) = (c as f64, r as f64);
        let wave = 60.0 * ((x / 9.0).sin() * (y / 13.0).cos());
        let stripes = if (r / 16 + c / 16) % 2 == 0 { 30.0 } else { -30.0 };
        (128.0 + wave + stripes).clamp(0.0, 255.0)
    })
}

pub fn noisy_card(width: usize, height: usize, sigma: f64) -> Image {
    add_noise(&test_card(width, height), sigma, 1).expect("valid sigma")
}

/// Pseudo-random `rows × cols` matrix with entries in `[-1, 1)`.
pub fn matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut state = seed;
    Matrix::from_fn(rows, cols, |_, _| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 52) as f64 - 1.0
    })
}

/// `k` components over `d` dimensions with graded means and diagonal covariances.
pub fn mixture(k: usize, d: usize) -> GmmModel {
    let means = Matrix::from_fn(k, d, |r, c| 255.0 * (r as f64 + 0.5) / k as f64 + (c % 3) as f64);
    let covs = (0..k)
        .map(|j| Matrix::identity(d).scale(50.0 + j as f64))
        .collect();
    GmmModel::new(vec![1.0 / k as f64; k], means, covs).expect("valid mixture")
}
