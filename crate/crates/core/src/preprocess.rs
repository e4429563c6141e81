//! Built-in guide image: local block matching followed by GNNM shrinkage.
//!
//! For every reference corner on a `ref_stride` lattice the `q` most similar
//! patches inside a square search window are stacked, shrunk with
//! `μ = max(q, d) σ²` and written back with rank-dependent weights. An externally
//! computed guide (for example from a stronger denoiser) can be loaded
//! instead with [`load_preprocessed`].

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{read_image, Image};
use crate::linalg::{squared_distance, Matrix};
use crate::lowrank::gnnm_shrink;
use crate::patches::{corner_positions, patch_weight, read_patch, Aggregator};

/// Matched corners, their shrunk stack and its aggregation weight.
type Shrunk = (Vec<(usize, usize)>, Matrix, f64);

/// References handled per parallel batch.
const BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PreprocessConfig {
    pub patch_size: usize,
    pub search_radius: usize,
    pub match_count: usize,
    pub ref_stride: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            patch_size: 8,
            search_radius: 19,
            match_count: 32,
            ref_stride: 4,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.match_count == 0 || self.ref_stride == 0 {
            return Err(Error::invalid("patch size, match count and reference stride must be positive"));
        }
        let window = (2 * self.search_radius + 1).pow(2);
        if window < self.match_count {
            return Err(Error::invalid(format!(
                "a radius-{} window holds {window} corners, fewer than {} matches",
                self.search_radius, self.match_count
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockMatch {
    /// Reference corner first, then the closest candidates.
    pub corners: Vec<(usize, usize)>,
    /// The window held fewer than `match_count` candidates.
    pub truncated: bool,
}

/// Finds the patches most similar to the one at `reference` within the search window.
pub fn block_match(image: &Image, reference: (usize, usize), cfg: &PreprocessConfig) -> Result<BlockMatch> {
    cfg.validate()?;
    let s = cfg.patch_size;
    let (width, height) = image.dims();
    if s > width.min(height) {
        return Err(Error::invalid(format!("patch size {s} exceeds the {width}x{height} image")));
    }
    let (r0, c0) = reference;
    if r0 + s > height || c0 + s > width {
        return Err(Error::invalid(format!("reference corner {reference:?} lies outside the image")));
    }
    let mut scratch = vec![0.0; s * s];
    let mut ref_patch = vec![0.0; s * s];
    read_patch(image, r0, c0, s, &mut ref_patch);
    Ok(match_with(image, reference, &ref_patch, &mut scratch, cfg))
}

fn match_with(
    image: &Image,
    (r0, c0): (usize, usize),
    ref_patch: &[f64],
    scratch: &mut [f64],
    cfg: &PreprocessConfig,
) -> BlockMatch {
    let s = cfg.patch_size;
    let (width, height) = image.dims();
    let rad = cfg.search_radius;
    let rows = r0.saturating_sub(rad)..=(r0 + rad).min(height - s);
    let cols = c0.saturating_sub(rad)..=(c0 + rad).min(width - s);
    let mut candidates = Vec::with_capacity(rows.clone().count() * cols.clone().count());
    for r in rows {
        for c in cols.clone() {
            if (r, c) == (r0, c0) {
                continue;
            }
            read_patch(image, r, c, s, scratch);
            candidates.push((squared_distance(ref_patch, scratch), r, c));
        }
    }
    // Raster order is already the insertion order, so a stable sort keeps it for ties.
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0));
    let take = cfg.match_count - 1;
    let truncated = candidates.len() < take;
    let mut corners = Vec::with_capacity(cfg.match_count);
    corners.push((r0, c0));
    corners.extend(candidates.iter().take(take).map(|&(_, r, c)| (r, c)));
    BlockMatch { corners, truncated }
}

/// Denoises `noisy` (noise level `sigma`) by shrinking locally matched patch stacks.
pub fn local_denoise(noisy: &Image, sigma: f64, cfg: &PreprocessConfig) -> Result<Image> {
    cfg.validate()?;
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    let s = cfg.patch_size;
    let (width, height) = noisy.dims();
    if s > width.min(height) {
        return Err(Error::invalid(format!("patch size {s} exceeds the {width}x{height} image")));
    }
    let refs: Vec<(usize, usize)> = corner_positions(height, s, cfg.ref_stride)
        .into_iter()
        .flat_map(|r| corner_positions(width, s, cfg.ref_stride).into_iter().map(move |c| (r, c)))
        .collect();

    let d = s * s;
    let mut agg = Aggregator::new(width, height, s);
    for batch in refs.chunks(BATCH) {
        let results: Vec<Shrunk> = batch
            .par_iter()
            .map(|&corner| {
                let mut scratch = vec![0.0; d];
                let mut ref_patch = vec![0.0; d];
                read_patch(noisy, corner.0, corner.1, s, &mut ref_patch);
                let m = match_with(noisy, corner, &ref_patch, &mut scratch, cfg);
                let q = m.corners.len();
                let mut stack = Matrix::zeros(q, d);
                for (i, &(r, c)) in m.corners.iter().enumerate() {
                    read_patch(noisy, r, c, s, stack.row_mut(i));
                }
                let (denoised, rank) = gnnm_shrink(&stack, noise_shift(q, d, sigma))?;
                Ok((m.corners, denoised, patch_weight(rank, q)?))
            })
            .collect::<Result<_>>()?;
        for (corners, denoised, weight) in &results {
            for (i, &corner) in corners.iter().enumerate() {
                agg.add(corner, denoised.row(i), *weight);
            }
        }
    }
    agg.finish()
}

/// Expected squared noise singular value of a `q × d` stack of noisy patches.
///
/// Both Gram matrices of the noise share their non-zero eigenvalues, which sit
/// near `max(q, d) σ²`. Stacks here are usually shorter than they are wide, so
/// `q σ²` alone would leave most of the noise in place.
pub fn noise_shift(q: usize, d: usize, sigma: f64) -> f64 {
    q.max(d) as f64 * sigma * sigma
}

/// Loads an externally produced guide image and checks it matches `expected` `(width, height)`.
pub fn load_preprocessed(path: impl AsRef<Path>, expected: (usize, usize)) -> Result<Image> {
    let image = read_image(path)?;
    if image.dims() != expected {
        return Err(Error::invalid(format!(
            "preprocessed image is {}x{} but the noisy image is {}x{}",
            image.width(),
            image.height(),
            expected.0,
            expected.1
        )));
    }
    Ok(image)
}
