//! Grayscale image denoising by preprocessed-image-guided Gaussian mixture
//! patch clustering and Gaussian nuclear norm minimization.
//!
//! The crate is organised bottom-up:
//!
//! - [`linalg`]: dense row-major matrices, Cholesky, symmetric Jacobi eigensolver.
//! - [`lowrank`]: one-sided Jacobi SVD and the NNP / WNNP / GNNM singular value shrinkage operators.
//! - [`gmm`]: Gaussian mixture patch prior (EM training, densities, posteriors, model files).
//! - [`patches`]: patch extraction, class assignment and balancing, stacking, weighted aggregation.
//! - [`preprocess`]: the built-in local block-matching guide denoiser.
//! - [`pipeline`]: the alternating regularize / cluster / shrink / aggregate loop.
//! - [`metrics`]: MSE, PSNR and SSIM.
//! - [`image`] and [`noise`]: image containers, PGM/PFMG I/O and reproducible Gaussian noise.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod gmm;
pub mod image;
pub mod linalg;
pub mod lowrank;
pub mod metrics;
pub mod noise;
pub mod patches;
pub mod pipeline;
pub mod preprocess;

pub use crate::error::{Error, Result};
pub use crate::gmm::{GmmModel, TrainOptions, TrainReport};
pub use crate::image::Image;
pub use crate::linalg::Matrix;
pub use crate::lowrank::{ShrinkageSpec, SvdFactorization};
pub use crate::metrics::QualityReport;
pub use crate::patches::{ClusterAssignment, PatchGrid, PatchStack};
pub use crate::pipeline::{IterationRecord, IterationTrace, PipelineConfig};
pub use crate::preprocess::PreprocessConfig;
