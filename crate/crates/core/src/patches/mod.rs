//! Patch extraction, class assignment, stacking and weighted aggregation.

pub mod balance;
pub mod kmeans;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gmm::GmmModel;
use crate::image::Image;
use crate::linalg::Matrix;

pub use balance::{balance_classes, BalanceStatus};
pub use kmeans::{kmeans, KMeansResult};

/// Overlapping `s × s` patches of one image, vectorized row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    patch_size: usize,
    stride: usize,
    width: usize,
    height: usize,
    coords: Vec<(usize, usize)>,
    /// One patch per row.
    vectors: Matrix,
}

impl PatchGrid {
    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// `(width, height)` of the source image.
    pub fn image_dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// `(row, col)` top-left corners in raster order.
    pub fn coords(&self) -> &[(usize, usize)] {
        &self.coords
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn rows(&self) -> Vec<&[f64]> {
        (0..self.len()).map(|i| self.vector(i)).collect()
    }
}

/// Corner offsets `0, stride, 2·stride, …` plus `len − s` so the far edge is covered.
pub fn corner_positions(len: usize, s: usize, stride: usize) -> Vec<usize> {
    let last = len - s;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if *out.last().unwrap() != last {
        out.push(last);
    }
    out
}

pub fn read_patch(image: &Image, row: usize, col: usize, s: usize, out: &mut [f64]) {
    for r in 0..s {
        out[r * s..(r + 1) * s].copy_from_slice(&image.row(row + r)[col..col + s]);
    }
}

pub fn extract_patches(image: &Image, s: usize, stride: usize) -> Result<PatchGrid> {
    let (width, height) = image.dims();
    if s == 0 || stride == 0 {
        return Err(Error::invalid("patch size and stride must be positive"));
    }
    if s > width.min(height) {
        return Err(Error::invalid(format!(
            "patch size {s} exceeds the {width}x{height} image"
        )));
    }
    let rows = corner_positions(height, s, stride);
    let cols = corner_positions(width, s, stride);
    let coords: Vec<(usize, usize)> = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect();
    let d = s * s;
    let mut data = vec![0.0; coords.len() * d];
    for (chunk, &(r, c)) in data.chunks_exact_mut(d).zip(&coords) {
        read_patch(image, r, c, s, chunk);
    }
    Ok(PatchGrid {
        patch_size: s,
        stride,
        width,
        height,
        vectors: Matrix::from_vec(coords.len(), d, data)?,
        coords,
    })
}

/// Most probable mixture component for every patch under covariances inflated by `σ_t²`.
pub fn assign_classes(model: &GmmModel, grid: &PatchGrid, sigma_t: f64) -> Result<Vec<usize>> {
    let d = grid.patch_size * grid.patch_size;
    if model.d() != d {
        return Err(Error::invalid(format!(
            "model dimension {} does not match {}x{} patches",
            model.d(),
            grid.patch_size,
            grid.patch_size
        )));
    }
    let inflated = model.inflate_covariances(sigma_t)?;
    let scorer = inflated.scorer()?;
    Ok((0..grid.len())
        .into_par_iter()
        .with_min_len(64)
        .map(|i| scorer.best_component(grid.vector(i)))
        .collect())
}

/// A partition of patch indices into classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterAssignment {
    labels: Vec<usize>,
    groups: Vec<Vec<usize>>,
}

impl ClusterAssignment {
    /// Builds an assignment from non-empty groups covering `0..n` exactly once.
    pub fn from_groups(groups: Vec<Vec<usize>>, n: usize) -> Self {
        let mut labels = vec![usize::MAX; n];
        for (k, g) in groups.iter().enumerate() {
            for &i in g {
                labels[i] = k;
            }
        }
        debug_assert!(labels.iter().all(|&l| l != usize::MAX));
        ClusterAssignment { labels, groups }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn num_classes(&self) -> usize {
        self.groups.len()
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }
}

/// Noisy patches of one class, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchStack {
    pub class_id: usize,
    pub matrix: Matrix,
    pub coords: Vec<(usize, usize)>,
}

impl PatchStack {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Gathers the noisy patches at each class's locations.
pub fn build_stacks(noisy: &PatchGrid, assignment: &ClusterAssignment) -> Result<Vec<PatchStack>> {
    let d = noisy.vectors.cols();
    assignment
        .groups
        .iter()
        .enumerate()
        .map(|(k, group)| {
            let mut data = Vec::with_capacity(group.len() * d);
            let mut coords = Vec::with_capacity(group.len());
            for &i in group {
                if i >= noisy.len() {
                    return Err(Error::Internal(format!(
                        "class {k} references patch {i} of {}",
                        noisy.len()
                    )));
                }
                data.extend_from_slice(noisy.vector(i));
                coords.push(noisy.coords[i]);
            }
            Ok(PatchStack {
                class_id: k,
                matrix: Matrix::from_vec(group.len(), d, data)?,
                coords,
            })
        })
        .collect()
}

/// Aggregation weight of a patch from a stack of `q` rows shrunk to rank `rank`.
pub fn patch_weight(rank: usize, q: usize) -> Result<f64> {
    if q == 0 {
        return Err(Error::invalid("stack must have at least one row"));
    }
    if rank > q {
        return Err(Error::invalid(format!("rank {rank} exceeds stack height {q}")));
    }
    Ok(if rank < q {
        1.0 - rank as f64 / q as f64
    } else {
        1.0 / q as f64
    })
}

/// Weighted overlap-add of patches into an image.
///
/// Keeps a running weighted mean per pixel rather than separate numerator and
/// denominator sums, so pixels on which all patches agree reproduce that value exactly.
#[derive(Clone, Debug)]
pub struct Aggregator {
    width: usize,
    height: usize,
    patch_size: usize,
    mean: Vec<f64>,
    weight: Vec<f64>,
}

impl Aggregator {
    pub fn new(width: usize, height: usize, patch_size: usize) -> Self {
        Aggregator {
            width,
            height,
            patch_size,
            mean: vec![0.0; width * height],
            weight: vec![0.0; width * height],
        }
    }

    pub fn add(&mut self, (row, col): (usize, usize), values: &[f64], weight: f64) {
        let s = self.patch_size;
        debug_assert!(row + s <= self.height && col + s <= self.width);
        if !(weight > 0.0) {
            return;
        }
        for r in 0..s {
            let base = (row + r) * self.width + col;
            let src = &values[r * s..(r + 1) * s];
            for (c, &v) in src.iter().enumerate() {
                let total = self.weight[base + c] + weight;
                let m = &mut self.mean[base + c];
                *m += (weight / total) * (v - *m);
                self.weight[base + c] = total;
            }
        }
    }

    pub fn add_stack(&mut self, stack: &PatchStack, weight: f64) {
        for (i, &corner) in stack.coords.iter().enumerate() {
            self.add(corner, stack.matrix.row(i), weight);
        }
    }

    pub fn finish(self) -> Result<Image> {
        if let Some(i) = self.weight.iter().position(|&w| !(w > 0.0)) {
            return Err(Error::Internal(format!(
                "pixel ({}, {}) is not covered by any patch",
                i / self.width,
                i % self.width
            )));
        }
        Image::new(self.width, self.height, self.mean)
    }
}

/// Reassembles an image from denoised stacks, weighting each patch by [`patch_weight`].
///
/// Stacks are accumulated in slice order, so callers should pass them sorted by class id.
pub fn aggregate(stacks: &[PatchStack], ranks: &[usize], width: usize, height: usize) -> Result<Image> {
    if stacks.len() != ranks.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} stacks but {} ranks",
            stacks.len(),
            ranks.len()
        )));
    }
    let Some(first) = stacks.first() else {
        return Err(Error::Internal("no stacks to aggregate".into()));
    };
    let s = (first.matrix.cols() as f64).sqrt().round() as usize;
    let mut agg = Aggregator::new(width, height, s);
    for (stack, &rank) in stacks.iter().zip(ranks) {
        agg.add_stack(stack, patch_weight(rank, stack.len())?);
    }
    agg.finish()
}
