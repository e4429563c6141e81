//! The iterative denoising loop.
//!
//! Each iteration blends the noisy image back into the current estimate,
//! clusters patches of the guide image under the mixture prior (covariances
//! inflated by the current noise level), balances the classes, shrinks the
//! matching noisy stacks and aggregates. The noise level is then re-estimated
//! from how far the blended estimate has moved from the noisy input.

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::GmmModel;
use crate::image::Image;
use crate::lowrank::gnnm_shrink;
use crate::metrics::{psnr, ssim, SSIM_WINDOW};
use crate::patches::{
    aggregate, assign_classes, balance_classes, build_stacks, extract_patches, PatchStack,
};
use crate::preprocess::{local_denoise, PreprocessConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub alpha: f64,
    pub beta: f64,
    pub max_iter: usize,
    /// Expected number of mixture components; checked against the model when non-zero.
    pub k_components: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub q_min: usize,
    pub q_max: usize,
    pub seed: u64,
    /// Also blend the noisy image into the guide every iteration.
    pub update_guide: bool,
    pub preprocess: PreprocessConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            alpha: 0.10,
            beta: 0.62,
            max_iter: 5,
            k_components: 250,
            patch_size: 8,
            stride: 2,
            q_min: 64,
            q_max: 360,
            seed: 0,
            update_guide: true,
            preprocess: PreprocessConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::invalid(format!("beta must lie in (0, 1], got {}", self.beta)));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be at least 1"));
        }
        if self.patch_size == 0 || self.stride == 0 {
            return Err(Error::invalid("patch size and stride must be positive"));
        }
        if self.q_min == 0 || self.q_max < 2 * self.q_min {
            return Err(Error::invalid(format!(
                "need q_min >= 1 and q_max >= 2 q_min, got {} and {}",
                self.q_min, self.q_max
            )));
        }
        self.preprocess.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Noise level used for this iteration.
    pub sigma: f64,
    pub class_sizes: Vec<usize>,
    pub ranks: Vec<usize>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iterations: Vec<IterationRecord>,
}

impl IterationTrace {
    pub fn len(&self) -> usize {
        self.iterations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterations.is_empty()
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.iterations.iter().map(|r| r.sigma).collect()
    }
}

/// `x_prev + α (y − x_prev)`, pixel by pixel.
pub fn regularize_estimate(y: &Image, x_prev: &Image, alpha: f64) -> Result<Image> {
    y.check_same_dims(x_prev)
        .map_err(|e| Error::invalid(e.to_string()))?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let pixels = y
        .pixels()
        .iter()
        .zip(x_prev.pixels())
        .map(|(&yv, &xv)| xv + alpha * (yv - xv))
        .collect();
    Image::new(y.width(), y.height(), pixels)
}

/// `β √(max(σ₀² − ‖y − y_t‖² / (m n), 0))`.
pub fn update_sigma(sigma0: f64, y: &Image, y_t: &Image, beta: f64) -> Result<f64> {
    y.check_same_dims(y_t)
        .map_err(|e| Error::invalid(e.to_string()))?;
    if !(sigma0 >= 0.0) {
        return Err(Error::invalid(format!("sigma must be >= 0, got {sigma0}")));
    }
    let residual: f64 = y
        .pixels()
        .iter()
        .zip(y_t.pixels())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / y.pixels().len() as f64;
    Ok(beta * (sigma0 * sigma0 - residual).max(0.0).sqrt())
}

/// One cluster / shrink / aggregate pass at noise level `sigma_t`.
pub fn denoise_iteration(
    y_t: &Image,
    guide: &Image,
    sigma_t: f64,
    model: &GmmModel,
    cfg: &PipelineConfig,
) -> Result<(Image, IterationRecord)> {
    y_t.check_same_dims(guide)?;
    if !(sigma_t >= 0.0) {
        return Err(Error::invalid(format!("sigma must be >= 0, got {sigma_t}")));
    }
    let guide_patches = extract_patches(guide, cfg.patch_size, cfg.stride)?;
    let noisy_patches = extract_patches(y_t, cfg.patch_size, cfg.stride)?;
    let labels = assign_classes(model, &guide_patches, sigma_t)?;
    let (assignment, _) = balance_classes(
        &labels,
        &guide_patches.rows(),
        cfg.q_min,
        cfg.q_max,
        cfg.seed,
    )?;
    let stacks = build_stacks(&noisy_patches, &assignment)?;
    let var = sigma_t * sigma_t;
    let shrunk: Vec<(PatchStack, usize)> = stacks
        .into_par_iter()
        .with_max_len(1)
        .map(|stack| {
            let mu = stack.len() as f64 * var;
            let (matrix, rank) = gnnm_shrink(&stack.matrix, mu)?;
            Ok((PatchStack { matrix, ..stack }, rank))
        })
        .collect::<Result<_>>()?;
    let (stacks, ranks): (Vec<PatchStack>, Vec<usize>) = shrunk.into_iter().unzip();
    let (width, height) = y_t.dims();
    let estimate = aggregate(&stacks, &ranks, width, height)?;
    let record = IterationRecord {
        sigma: sigma_t,
        class_sizes: assignment.class_sizes(),
        ranks,
        psnr: None,
        ssim: None,
    };
    Ok((estimate, record))
}

/// Runs `cfg.max_iter` iterations and returns the final estimate with its trace.
///
/// Without `preprocessed`, the guide comes from [`local_denoise`]. With
/// `reference`, every trace record carries PSNR and SSIM against it.
pub fn run(
    noisy: &Image,
    sigma: f64,
    model: &GmmModel,
    cfg: &PipelineConfig,
    preprocessed: Option<&Image>,
    reference: Option<&Image>,
) -> Result<(Image, IterationTrace)> {
    cfg.validate()?;
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    let d = cfg.patch_size * cfg.patch_size;
    if model.d() != d {
        return Err(Error::DimensionMismatch(format!(
            "model dimension {} does not match {}x{} patches",
            model.d(),
            cfg.patch_size,
            cfg.patch_size
        )));
    }
    if cfg.k_components != 0 && cfg.k_components != model.k() {
        return Err(Error::DimensionMismatch(format!(
            "model has {} components, configuration expects {}",
            model.k(),
            cfg.k_components
        )));
    }
    if let Some(r) = reference {
        noisy.check_same_dims(r)?;
        if sigma == 0.0 && r != noisy {
            warn!("sigma is 0 but the noisy image differs from the reference; output will be near the input");
        }
    }
    let mut guide = match preprocessed {
        Some(p) => {
            noisy.check_same_dims(p).map_err(|_| {
                Error::invalid(format!(
                    "preprocessed image is {}x{} but the noisy image is {}x{}",
                    p.width(),
                    p.height(),
                    noisy.width(),
                    noisy.height()
                ))
            })?;
            p.clone()
        }
        None => local_denoise(noisy, sigma, &cfg.preprocess)?,
    };

    let mut estimate = noisy.clone();
    let mut sigma_t = sigma;
    let mut trace = IterationTrace::default();
    for t in 1..=cfg.max_iter {
        let y_t = regularize_estimate(noisy, &estimate, cfg.alpha)?;
        if cfg.update_guide {
            guide = regularize_estimate(noisy, &guide, cfg.alpha)?;
        }
        let (next, mut record) = denoise_iteration(&y_t, &guide, sigma_t, model, cfg)?;
        estimate = next;
        if let Some(r) = reference {
            record.psnr = Some(psnr(r, &estimate)?);
            let (w, h) = r.dims();
            if w >= SSIM_WINDOW && h >= SSIM_WINDOW {
                record.ssim = Some(ssim(r, &estimate)?);
            }
        }
        info!(
            "iteration {t}: sigma {:.3}, {} classes{}",
            sigma_t,
            record.class_sizes.len(),
            record.psnr.map(|p| format!(", PSNR {p:.2} dB")).unwrap_or_default()
        );
        trace.iterations.push(record);
        sigma_t = update_sigma(sigma, noisy, &y_t, cfg.beta)?;
    }
    Ok((estimate, trace))
}
