//! Reproducible additive white Gaussian noise.
//!
//! The generator is SplitMix64 (Steele, Lea and Flood) with its published
//! constants: the state advances by `0x9E3779B97F4A7C15` and each output is
//! mixed with multipliers `0xBF58476D1CE4E5B9` and `0x94D049BB133111EB`.
//! Uniforms take the top 53 bits. Pixel `2k` receives the cosine branch and
//! pixel `2k + 1` the sine branch of the Box–Muller pair built from the
//! `2k`-th and `(2k + 1)`-th uniforms, with `u1 = (bits + 1) / 2^53 ∈ (0, 1]`
//! and `u2 = bits / 2^53 ∈ [0, 1)`.

use std::f64::consts::TAU;

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    fn next_bits53(&mut self) -> u64 {
        self.next_u64() >> 11
    }
}

/// Standard normal samples, consumed in Box–Muller pairs.
#[derive(Clone, Debug)]
pub struct GaussianStream {
    rng: SplitMix64,
    pending: Option<f64>,
}

impl GaussianStream {
    pub fn new(seed: u64) -> Self {
        GaussianStream {
            rng: SplitMix64::new(seed),
            pending: None,
        }
    }

    pub fn next_standard(&mut self) -> f64 {
        if let Some(z) = self.pending.take() {
            return z;
        }
        let scale = 1.0 / (1u64 << 53) as f64;
        let u1 = (self.rng.next_bits53() + 1) as f64 * scale;
        let u2 = self.rng.next_bits53() as f64 * scale;
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = TAU * u2;
        self.pending = Some(radius * angle.sin());
        radius * angle.cos()
    }
}

/// Adds i.i.d. `N(0, σ²)` noise to every pixel, in raster order. The result is not clamped.
pub fn add_noise(image: &Image, sigma: f64, seed: u64) -> Result<Image> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("noise sigma must be finite and >= 0, got {sigma}")));
    }
    let mut stream = GaussianStream::new(seed);
    let pixels = image
        .pixels()
        .iter()
        .map(|&p| p + sigma * stream.next_standard())
        .collect();
    Image::new(image.width(), image.height(), pixels)
}
