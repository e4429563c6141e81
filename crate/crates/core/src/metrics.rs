//! Image fidelity metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
const PEAK: f64 = 255.0;

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
pub const SSIM_C1: f64 = (SSIM_K1 * PEAK) * (SSIM_K1 * PEAK);
pub const SSIM_C2: f64 = (SSIM_K2 * PEAK) * (SSIM_K2 * PEAK);
pub const SSIM_WINDOW: usize = 11;
const SSIM_WINDOW_SIGMA: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

impl QualityReport {
    pub fn compare(a: &Image, b: &Image) -> Result<Self> {
        let mse = mse(a, b)?;
        Ok(QualityReport {
            mse,
            psnr: psnr_from_mse(mse),
            ssim: ssim(a, b)?,
        })
    }
}

/// Mean squared per-pixel difference.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_dims(b)?;
    let sum: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.pixels().len() as f64)
}

/// `10 log10(255² / mse)`, capped at [`PSNR_CAP`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (PEAK * PEAK / mse).log10()).min(PSNR_CAP)
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SSIM_WINDOW_SIGMA * SSIM_WINDOW_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian filter, keeping only fully-inside window positions.
fn filter_valid(pixels: &[f64], width: usize, height: usize, w: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let n = SSIM_WINDOW;
    let ow = width - n + 1;
    let oh = height - n + 1;
    let mut horiz = vec![0.0; height * ow];
    for r in 0..height {
        let row = &pixels[r * width..(r + 1) * width];
        for c in 0..ow {
            horiz[r * ow + c] = (0..n).map(|k| w[k] * row[c + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|k| w[k] * horiz[(r + k) * ow + c]).sum();
        }
    }
    out
}

/// Mean structural similarity with an 11×11 Gaussian window (σ = 1.5),
/// `K1 = 0.01`, `K2 = 0.03`, `L = 255`, averaged over valid window positions.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_dims(b)?;
    let (width, height) = a.dims();
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {width}x{height}"
        )));
    }
    let w = gaussian_window();
    let pa = a.pixels();
    let pb = b.pixels();
    let sq_a: Vec<f64> = pa.iter().map(|x| x * x).collect();
    let sq_b: Vec<f64> = pb.iter().map(|x| x * x).collect();
    let cross: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| x * y).collect();

    let mu_a = filter_valid(pa, width, height, &w);
    let mu_b = filter_valid(pb, width, height, &w);
    let e_aa = filter_valid(&sq_a, width, height, &w);
    let e_bb = filter_valid(&sq_b, width, height, &w);
    let e_ab = filter_valid(&cross, width, height, &w);

    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = e_aa[i] - ma * ma;
        let var_b = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * (ma * mb) + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (ma * ma + mb * mb + SSIM_C1) * (var_a + var_b + SSIM_C2);
        total += num / den;
    }
    Ok(total / mu_a.len() as f64)
}
