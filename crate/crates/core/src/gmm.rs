//! Gaussian mixture prior over vectorized patches.
//!
//! Components keep full covariances and explicit means. Training is plain EM
//! with a diagonal floor added to every covariance after each M-step, started
//! from k-means++ seeds on a random subsample.
//!
//! # Model file
//!
//! ```text
//! "PGLRGMM1"                      8 bytes
//! k, d                            u32 little-endian each
//! weights[k]                      f64 LE
//! means[k][d]                     f64 LE
//! covariances[k][d][d]            f64 LE, row-major
//! ```
//!
//! No padding, no trailing bytes.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use log::debug;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::linalg::{axpy, cholesky, dot, lower_triangular_inverse, squared_distance, Matrix};
use crate::patches::kmeans::kmeans;
use crate::patches::read_patch;

pub const MODEL_MAGIC: &[u8; 8] = b"PGLRGMM1";

/// Default covariance floor, in intensity² units.
pub const DEFAULT_REG: f64 = 1e-3;

/// Responsibilities below this are dropped from the M-step sums.
const RESPONSIBILITY_FLOOR: f64 = 1e-12;

/// A component whose total responsibility falls below this is considered empty.
const EMPTY_MASS: f64 = 1e-3;

const CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct GmmModel {
    weights: Vec<f64>,
    /// `k × d`, one mean per row.
    means: Matrix,
    covariances: Vec<Matrix>,
}

impl GmmModel {
    /// Validates and assembles a model.
    pub fn new(weights: Vec<f64>, means: Matrix, covariances: Vec<Matrix>) -> Result<Self> {
        let k = weights.len();
        let d = means.cols();
        if k == 0 || d == 0 {
            return Err(Error::invalid("model needs at least one component and dimension"));
        }
        if means.rows() != k || covariances.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "{k} weights but {} means and {} covariances",
                means.rows(),
                covariances.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("mixture weights must be non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("mixture weights sum to {total}, not 1")));
        }
        if !means.is_finite() {
            return Err(Error::invalid("means contain non-finite values"));
        }
        for (c, cov) in covariances.iter().enumerate() {
            if cov.shape() != (d, d) {
                return Err(Error::DimensionMismatch(format!(
                    "covariance {c} is {:?}, expected {d}x{d}",
                    cov.shape()
                )));
            }
            if cov.max_abs_diff(&cov.transpose()) > 1e-9 {
                return Err(Error::invalid(format!("covariance {c} is not symmetric")));
            }
            cholesky(cov).map_err(|_| Error::invalid(format!("covariance {c} is not positive definite")))?;
        }
        Ok(GmmModel {
            weights,
            means,
            covariances,
        })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn d(&self) -> usize {
        self.means.cols()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, component: usize) -> &[f64] {
        self.means.row(component)
    }

    pub fn means(&self) -> &Matrix {
        &self.means
    }

    pub fn covariance(&self, component: usize) -> &Matrix {
        &self.covariances[component]
    }

    /// Copy with every covariance replaced by `Σ + σ² I`.
    pub fn inflate_covariances(&self, sigma: f64) -> Result<GmmModel> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::invalid(format!("sigma must be finite and >= 0, got {sigma}")));
        }
        let var = sigma * sigma;
        let covariances = self
            .covariances
            .iter()
            .map(|c| {
                let mut c = c.clone();
                for i in 0..c.rows() {
                    c[(i, i)] += var;
                }
                c
            })
            .collect();
        Ok(GmmModel {
            weights: self.weights.clone(),
            means: self.means.clone(),
            covariances,
        })
    }

    /// Precomputes whitening factors for repeated density evaluation.
    pub fn scorer(&self) -> Result<Scorer<'_>> {
        Scorer::new(self)
    }

    /// Full normalized `log N(x; μ_k, Σ_k)`.
    pub fn log_density(&self, component: usize, x: &[f64]) -> Result<f64> {
        if component >= self.k() {
            return Err(Error::invalid(format!(
                "component {component} out of range for a {}-component model",
                self.k()
            )));
        }
        self.check_vector(x)?;
        let whitened = Whitened::new(&self.covariances[component])?;
        Ok(whitened.log_density(self.means.row(component), x))
    }

    /// Posterior class probabilities `p(k | x)`, computed in log space.
    pub fn posterior(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_vector(x)?;
        Ok(self.scorer()?.posterior(x))
    }

    fn check_vector(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d() {
            return Err(Error::DimensionMismatch(format!(
                "vector has {} entries, model dimension is {}",
                x.len(),
                self.d()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("vector has non-finite entries"));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (k, d) = (self.k(), self.d());
        let mut out = Vec::with_capacity(16 + 8 * (k + k * d + k * d * d));
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&(k as u32).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for v in self.means.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for c in &self.covariances {
            for v in c.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<GmmModel> {
        if bytes.len() < 16 {
            return Err(Error::format(
                "header",
                format!("expected 16 bytes, found {}", bytes.len()),
            ));
        }
        if &bytes[..8] != MODEL_MAGIC {
            return Err(Error::format(
                "magic",
                format!("expected \"PGLRGMM1\", found {:?}", String::from_utf8_lossy(&bytes[..8])),
            ));
        }
        let k = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        if k == 0 || d == 0 {
            return Err(Error::format("k/d", format!("k = {k}, d = {d} must both be positive")));
        }
        let overflow = || Error::format("k*d", format!("k = {k}, d = {d} overflows the block sizes"));
        let mean_len = k.checked_mul(d).ok_or_else(overflow)?;
        let cov_len = mean_len.checked_mul(d).ok_or_else(overflow)?;

        let mut cursor = Cursor {
            bytes,
            pos: 16,
        };
        let weights = cursor.f64s("weights", k)?;
        let means = cursor.f64s("means", mean_len)?;
        let covs = cursor.f64s("covariances", cov_len)?;
        if cursor.pos != bytes.len() {
            return Err(Error::format(
                "trailer",
                format!("{} unexpected bytes after the covariance block", bytes.len() - cursor.pos),
            ));
        }
        let means = Matrix::from_vec(k, d, means)?;
        let covariances = covs
            .chunks_exact(d * d)
            .map(|c| Matrix::from_vec(d, d, c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        GmmModel::new(weights, means, covariances)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<GmmModel> {
        GmmModel::from_bytes(&fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn f64s(&mut self, field: &str, count: usize) -> Result<Vec<f64>> {
        let need = count
            .checked_mul(8)
            .ok_or_else(|| Error::format(field, "block size overflows"))?;
        let avail = self.bytes.len() - self.pos;
        if avail < need {
            return Err(Error::format(
                field,
                format!("truncated: expected {need} bytes, found {avail}"),
            ));
        }
        let out = self.bytes[self.pos..self.pos + need]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        self.pos += need;
        Ok(out)
    }
}

/// Whitening transform `L⁻¹` and normalization constant of one Gaussian.
struct Whitened {
    inv_chol: Matrix,
    /// `−½ (d log 2π + log det Σ)`
    log_norm: f64,
}

impl Whitened {
    fn new(cov: &Matrix) -> Result<Self> {
        let l = cholesky(cov)?;
        let d = cov.rows();
        let log_det: f64 = (0..d).map(|i| 2.0 * l[(i, i)].ln()).sum();
        Ok(Whitened {
            inv_chol: lower_triangular_inverse(&l),
            log_norm: -0.5 * (d as f64 * (2.0 * PI).ln() + log_det),
        })
    }

    /// Squared Mahalanobis distance, reusing `diff` as scratch space.
    fn mahalanobis_sq(&self, mean: &[f64], x: &[f64], diff: &mut [f64]) -> f64 {
        for ((o, a), b) in diff.iter_mut().zip(x).zip(mean) {
            *o = a - b;
        }
        let mut total = 0.0;
        for i in 0..diff.len() {
            let z = dot(&self.inv_chol.row(i)[..=i], &diff[..=i]);
            total += z * z;
        }
        total
    }

    fn log_density(&self, mean: &[f64], x: &[f64]) -> f64 {
        let mut diff = vec![0.0; x.len()];
        self.log_norm - 0.5 * self.mahalanobis_sq(mean, x, &mut diff)
    }
}

/// Batched density evaluation against every component of a model.
pub struct Scorer<'a> {
    model: &'a GmmModel,
    comps: Vec<Whitened>,
    log_weights: Vec<f64>,
}

impl<'a> Scorer<'a> {
    fn new(model: &'a GmmModel) -> Result<Self> {
        let comps = model
            .covariances
            .iter()
            .map(Whitened::new)
            .collect::<Result<Vec<_>>>()?;
        Ok(Scorer {
            model,
            comps,
            log_weights: model.weights.iter().map(|w| w.ln()).collect(),
        })
    }

    /// `log ω_k + log N(x; μ_k, Σ_k)` for every component.
    pub fn log_joint(&self, x: &[f64], out: &mut [f64]) {
        let mut diff = vec![0.0; x.len()];
        for (k, comp) in self.comps.iter().enumerate() {
            let m = comp.mahalanobis_sq(self.model.mean(k), x, &mut diff);
            out[k] = self.log_weights[k] + comp.log_norm - 0.5 * m;
        }
    }

    pub fn posterior(&self, x: &[f64]) -> Vec<f64> {
        let mut lj = vec![0.0; self.model.k()];
        self.log_joint(x, &mut lj);
        let max = lj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = lj.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= total);
        p
    }

    /// Most probable component; ties go to the smallest index.
    pub fn best_component(&self, x: &[f64]) -> usize {
        let mut lj = vec![0.0; self.model.k()];
        self.log_joint(x, &mut lj);
        argmax(&lj)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub k: usize,
    pub max_iters: usize,
    pub reg: f64,
    pub seed: u64,
    /// Stop when the relative log-likelihood improvement drops below this.
    pub tol: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            k: 250,
            max_iters: 30,
            reg: DEFAULT_REG,
            seed: 0,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean per-patch log-likelihood of the initial model and after every EM iteration.
    pub log_likelihood: Vec<f64>,
    /// Iterations (indices into `log_likelihood`) at which an empty component was reseeded.
    pub reseeded_at: Vec<usize>,
    pub converged: bool,
}

impl TrainReport {
    pub fn final_log_likelihood(&self) -> f64 {
        *self.log_likelihood.last().unwrap()
    }

    /// Largest decrease between consecutive iterations, skipping reseed steps.
    pub fn worst_decrease(&self) -> f64 {
        self.log_likelihood
            .windows(2)
            .enumerate()
            .filter(|(i, _)| !self.reseeded_at.contains(&(i + 1)))
            .map(|(_, w)| w[0] - w[1])
            .fold(0.0, f64::max)
    }
}

/// Draws up to `max_patches` distinct `s × s` patches, uniformly over every
/// stride-1 position of every image, as rows of a matrix.
pub fn sample_training_patches(images: &[Image], s: usize, max_patches: usize, seed: u64) -> Result<Matrix> {
    if images.is_empty() {
        return Err(Error::invalid("no training images"));
    }
    if s == 0 || max_patches == 0 {
        return Err(Error::invalid("patch size and patch budget must be positive"));
    }
    // Cumulative patch counts per image.
    let mut offsets = Vec::with_capacity(images.len() + 1);
    offsets.push(0usize);
    for img in images {
        let (w, h) = img.dims();
        if w < s || h < s {
            return Err(Error::invalid(format!("training image {w}x{h} is smaller than {s}x{s} patches")));
        }
        offsets.push(offsets.last().unwrap() + (w - s + 1) * (h - s + 1));
    }
    let total = *offsets.last().unwrap();
    let take = max_patches.min(total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = index::sample(&mut rng, total, take).into_vec();
    picks.sort_unstable();
    let d = s * s;
    let mut out = Matrix::zeros(take, d);
    for (row, &p) in picks.iter().enumerate() {
        let img_idx = offsets.partition_point(|&o| o <= p) - 1;
        let img = &images[img_idx];
        let local = p - offsets[img_idx];
        let cols = img.width() - s + 1;
        read_patch(img, local / cols, local % cols, s, out.row_mut(row));
    }
    Ok(out)
}

/// Sparse responsibilities of one patch.
type Resp = Vec<(u32, f64)>;

/// Fits a `k`-component mixture to the rows of `patches` by EM.
pub fn train_em(patches: &Matrix, opts: &TrainOptions) -> Result<(GmmModel, TrainReport)> {
    let (n, d) = patches.shape();
    let k = opts.k;
    if k == 0 {
        return Err(Error::invalid("need at least one component"));
    }
    if n < k {
        return Err(Error::invalid(format!("{n} patches cannot train {k} components")));
    }
    if !(opts.reg > 0.0) {
        return Err(Error::invalid(format!("covariance floor must be > 0, got {}", opts.reg)));
    }
    if !patches.is_finite() {
        return Err(Error::invalid("training patches contain non-finite values"));
    }

    let mut model = initialize(patches, opts)?;
    let (mut resp, ll) = e_step(&model, patches)?;
    let mut report = TrainReport {
        log_likelihood: vec![ll],
        reseeded_at: Vec::new(),
        converged: false,
    };
    debug!("em init: mean log-likelihood {ll:.6}");

    for iter in 1..=opts.max_iters {
        let (next, reseeded) = m_step(&model, patches, &resp, opts.reg)?;
        model = next;
        let (r, ll) = e_step(&model, patches)?;
        resp = r;
        let prev = *report.log_likelihood.last().unwrap();
        report.log_likelihood.push(ll);
        if reseeded {
            report.reseeded_at.push(iter);
        }
        debug!("em iteration {iter}: mean log-likelihood {ll:.6}");
        if !reseeded && ll - prev < opts.tol * prev.abs() {
            report.converged = true;
            break;
        }
    }
    let _ = d;
    Ok((model, report))
}

fn initialize(patches: &Matrix, opts: &TrainOptions) -> Result<GmmModel> {
    let (n, d) = patches.shape();
    let k = opts.k;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let sub_len = (10 * k).min(n);
    let mut picks = index::sample(&mut rng, n, sub_len).into_vec();
    picks.sort_unstable();
    let sub: Vec<&[f64]> = picks.iter().map(|&i| patches.row(i)).collect();
    let km = kmeans(&sub, k, opts.seed, 5)?;

    let global = weighted_stats(patches, (0..n).map(|i| (i, 1.0)), n as f64, opts.reg);
    let labels: Vec<usize> = (0..n)
        .map(|i| nearest(&km.centroids, patches.row(i)))
        .collect();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let mut weights = Vec::with_capacity(k);
    let mut means = Matrix::zeros(k, d);
    let mut covs = Vec::with_capacity(k);
    for (c, m) in members.iter().enumerate() {
        if m.is_empty() {
            weights.push(1.0 / n as f64);
            means.row_mut(c).copy_from_slice(&km.centroids[c]);
            covs.push(global.1.clone());
        } else {
            let (mean, cov) = weighted_stats(patches, m.iter().map(|&i| (i, 1.0)), m.len() as f64, opts.reg);
            weights.push(m.len() as f64);
            means.row_mut(c).copy_from_slice(&mean);
            covs.push(cov);
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    GmmModel::new(weights, means, covs)
}

fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, cen) in centroids.iter().enumerate() {
        let dist = squared_distance(cen, x);
        if dist < best_d {
            best_d = dist;
            best = c;
        }
    }
    best
}

/// Weighted mean and covariance (`+ reg I`) of selected rows.
fn weighted_stats(
    patches: &Matrix,
    rows: impl Iterator<Item = (usize, f64)> + Clone,
    mass: f64,
    reg: f64,
) -> (Vec<f64>, Matrix) {
    let d = patches.cols();
    let mut mean = vec![0.0; d];
    for (i, r) in rows.clone() {
        axpy(r, patches.row(i), &mut mean);
    }
    mean.iter_mut().for_each(|m| *m /= mass);
    let mut acc = vec![0.0; d * d];
    let mut diff = vec![0.0; d];
    for (i, r) in rows {
        for ((o, a), b) in diff.iter_mut().zip(patches.row(i)).zip(&mean) {
            *o = a - b;
        }
        for a in 0..d {
            let s = r * diff[a];
            if s != 0.0 {
                axpy(s, &diff[a..], &mut acc[a * d + a..(a + 1) * d]);
            }
        }
    }
    let mut cov = Matrix::zeros(d, d);
    for a in 0..d {
        for b in a..d {
            let v = acc[a * d + b] / mass;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
        cov[(a, a)] += reg;
    }
    (mean, cov)
}

/// Responsibilities and mean log-likelihood under `model`.
fn e_step(model: &GmmModel, patches: &Matrix) -> Result<(Vec<Resp>, f64)> {
    let scorer = model.scorer()?;
    let (n, d) = patches.shape();
    let k = model.k();
    let rows: Vec<usize> = (0..n).collect();
    let per_chunk: Vec<Vec<(Resp, f64)>> = rows
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut lj = vec![0.0; k];
            chunk
                .iter()
                .map(|&i| {
                    let x = &patches.as_slice()[i * d..(i + 1) * d];
                    scorer.log_joint(x, &mut lj);
                    let lse = log_sum_exp(&lj);
                    let resp = lj
                        .iter()
                        .enumerate()
                        .filter_map(|(c, v)| {
                            let r = (v - lse).exp();
                            (r >= RESPONSIBILITY_FLOOR).then_some((c as u32, r))
                        })
                        .collect();
                    (resp, lse)
                })
                .collect()
        })
        .collect();
    let mut resp = Vec::with_capacity(n);
    let mut total = 0.0;
    for (r, ll) in per_chunk.into_iter().flatten() {
        total += ll;
        resp.push(r);
    }
    Ok((resp, total / n as f64))
}

/// One M-step; reports whether any empty component had to be reseeded.
fn m_step(model: &GmmModel, patches: &Matrix, resp: &[Resp], reg: f64) -> Result<(GmmModel, bool)> {
    let (n, d) = patches.shape();
    let k = model.k();
    let mut lists: Vec<Vec<(usize, f64)>> = vec![Vec::new(); k];
    for (i, r) in resp.iter().enumerate() {
        for &(c, v) in r {
            lists[c as usize].push((i, v));
        }
    }
    let mass: Vec<f64> = lists.iter().map(|l| l.iter().map(|(_, v)| v).sum()).collect();
    let stats: Vec<Option<(Vec<f64>, Matrix)>> = lists
        .par_iter()
        .zip(&mass)
        .map(|(l, &m)| (m >= EMPTY_MASS).then(|| weighted_stats(patches, l.iter().copied(), m, reg)))
        .collect();

    let mut weights: Vec<f64> = mass.iter().map(|m| m / n as f64).collect();
    let mut means = Matrix::zeros(k, d);
    let mut covs = Vec::with_capacity(k);
    let mut empty = Vec::new();
    for (c, s) in stats.into_iter().enumerate() {
        match s {
            Some((mean, cov)) => {
                means.row_mut(c).copy_from_slice(&mean);
                covs.push(cov);
            }
            None => {
                empty.push(c);
                covs.push(Matrix::identity(d));
            }
        }
    }
    if !empty.is_empty() {
        let live: Vec<usize> = (0..k).filter(|c| !empty.contains(c)).collect();
        let global = weighted_stats(patches, (0..n).map(|i| (i, 1.0)), n as f64, reg).1;
        // Distance of every patch to its nearest live mean; reseeds join the pool.
        let mut nearest_sq: Vec<f64> = (0..n)
            .map(|i| {
                live.iter()
                    .map(|&c| squared_distance(means.row(c), patches.row(i)))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        for &c in &empty {
            let far = argmax(&nearest_sq);
            debug!("reseeding empty component {c} from patch {far}");
            means.row_mut(c).copy_from_slice(patches.row(far));
            covs[c] = global.clone();
            weights[c] = 1.0 / n as f64;
            for (i, near) in nearest_sq.iter_mut().enumerate() {
                *near = near.min(squared_distance(means.row(c), patches.row(i)));
            }
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok((GmmModel::new(weights, means, covs)?, !empty.is_empty()))
}
