//! Singular value decomposition and singular-value shrinkage operators.
//!
//! Three proximal operators share the same structure: decompose
//! `Y = U diag(λ) Vᵀ`, map each singular value through a scalar shrinkage, and
//! rebuild with the original singular vectors.
//!
//! | operator | objective | shrunken value |
//! |----------|-----------|----------------|
//! | [`nnp_shrink`]  | `½‖Y−X‖²_F + μ‖X‖_*`       | `(λ − μ)₊` |
//! | [`wnnp_shrink`] | `½‖Y−X‖²_F + μ Σ wᵢ λᵢ(X)` | `(λᵢ − μ wᵢ)₊` |
//! | [`gnnm_shrink`] | `½‖YYᵀ−XXᵀ‖²_F + μ‖XXᵀ‖_*` | `√((λ² − μ)₊)` |
//!
//! For a `q × d` stack of noisy patches with i.i.d. noise of standard
//! deviation `σ` and `q ≥ d`, the squared noise singular values average `qσ²`,
//! which is why the pipeline uses `μ = q σ²` for GNNM.

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, Matrix};

/// Singular values below this fraction of the largest one are set to zero.
pub const RANK_CUTOFF: f64 = 1e-10;

const MAX_SWEEPS: usize = 80;

/// Thin SVD `M = U diag(σ) Vᵀ` restricted to the numerical rank.
///
/// `singular_values` has `min(rows, cols)` entries in descending order; entries
/// past [`SvdFactorization::rank`] are exactly zero. `u` and `v` only hold the
/// `rank` columns that belong to non-zero singular values.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdFactorization {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub v: Matrix,
}

impl SvdFactorization {
    pub fn rank(&self) -> usize {
        self.u.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.u.rows(), self.v.rows())
    }

    /// `U diag(values) Vᵀ` using this factorization's singular vectors.
    ///
    /// `values` must have at least `rank` entries; extra entries are ignored
    /// because they multiply null directions.
    pub fn reconstruct_with(&self, values: &[f64]) -> Matrix {
        let (q, d) = self.shape();
        let r = self.rank();
        debug_assert!(values.len() >= r);
        let vt = self.v.transpose();
        let mut out = Matrix::zeros(q, d);
        for i in 0..q {
            let urow = self.u.row(i);
            let orow = out.row_mut(i);
            for j in 0..r {
                let coef = urow[j] * values[j];
                if coef != 0.0 {
                    axpy(coef, vt.row(j), orow);
                }
            }
        }
        out
    }

    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_with(&self.singular_values)
    }
}

/// Computes the SVD by one-sided (Hestenes) Jacobi rotations.
///
/// The rotations are exactly the cyclic Jacobi rotations that diagonalize the
/// Gram matrix of the shorter side, applied implicitly so the Gram matrix is
/// never formed. Output is deterministic: the first non-zero entry of every
/// column of `v` is positive.
pub fn svd(matrix: &Matrix) -> Result<SvdFactorization> {
    let (q, d) = matrix.shape();
    if q == 0 || d == 0 {
        return Err(Error::invalid(format!("cannot decompose an empty {q}x{d} matrix")));
    }
    if !matrix.is_finite() {
        return Err(Error::invalid("matrix has non-finite entries"));
    }
    // Orthogonalize the columns of whichever orientation has fewer columns.
    let transposed = d > q;
    let work = if transposed {
        matrix.clone()
    } else {
        matrix.transpose()
    };
    let (n, len) = work.shape();
    let mut w = work.into_vec();
    let mut j = Matrix::identity(n).into_vec();

    let tol = f64::EPSILON * (len as f64).sqrt();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for r in p + 1..n {
                let (wp, wr) = pair_mut(&mut w, len, p, r);
                let alpha = dot(wp, wp);
                let beta = dot(wr, wr);
                let gamma = dot(wp, wr);
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(wp, wr, c, s);
                let (jp, jr) = pair_mut(&mut j, n, p, r);
                rotate(jp, jr, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = (0..n).map(|k| dot(&w[k * len..(k + 1) * len], &w[k * len..(k + 1) * len]).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let largest = norms[order[0]];
    let kept: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&k| largest > 0.0 && norms[k] > RANK_CUTOFF * largest)
        .collect();
    let rank = kept.len();

    let mut singular_values = vec![0.0; n];
    // `left` columns are the normalized rotated vectors (length `len`),
    // `right` columns are the accumulated rotations (length `n`).
    let mut left = Matrix::zeros(len, rank);
    let mut right = Matrix::zeros(n, rank);
    for (col, &k) in kept.iter().enumerate() {
        let sigma = norms[k];
        singular_values[col] = sigma;
        let wk = &w[k * len..(k + 1) * len];
        let jk = &j[k * n..(k + 1) * n];
        for i in 0..len {
            left[(i, col)] = wk[i] / sigma;
        }
        for i in 0..n {
            right[(i, col)] = jk[i];
        }
    }

    let (mut u, mut v) = if transposed {
        (right, left)
    } else {
        (left, right)
    };
    for col in 0..rank {
        let first = (0..v.rows()).map(|i| v[(i, col)]).find(|x| x.abs() > 1e-12);
        if first.is_some_and(|x| x < 0.0) {
            for i in 0..v.rows() {
                v[(i, col)] = -v[(i, col)];
            }
            for i in 0..u.rows() {
                u[(i, col)] = -u[(i, col)];
            }
        }
    }
    Ok(SvdFactorization {
        u,
        singular_values,
        v,
    })
}

fn pair_mut(buf: &mut [f64], len: usize, p: usize, r: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(p < r);
    let (head, tail) = buf.split_at_mut(r * len);
    (&mut head[p * len..(p + 1) * len], &mut tail[..len])
}

#[inline]
fn rotate(a: &mut [f64], b: &mut [f64], c: f64, s: f64) {
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let xa = *x;
        let yb = *y;
        *x = c * xa - s * yb;
        *y = s * xa + c * yb;
    }
}

/// Shrinkage amount and optional per-index weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ShrinkageSpec {
    mu: f64,
    weights: Option<Vec<f64>>,
}

impl ShrinkageSpec {
    pub fn new(mu: f64) -> Result<Self> {
        check_mu(mu)?;
        Ok(ShrinkageSpec { mu, weights: None })
    }

    /// Weighted spec; the weights must be non-negative and non-descending.
    pub fn weighted(mu: f64, weights: Vec<f64>) -> Result<Self> {
        check_mu(mu)?;
        if weights.is_empty() {
            return Err(Error::invalid("weight vector is empty"));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid(format!("weight {w} is not a finite non-negative value")));
        }
        if let Some(i) = weights.windows(2).position(|p| p[0] > p[1]) {
            return Err(Error::invalid(format!(
                "weights must be non-descending, but w[{i}] = {} > w[{}] = {}",
                weights[i],
                i + 1,
                weights[i + 1]
            )));
        }
        Ok(ShrinkageSpec {
            mu,
            weights: Some(weights),
        })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    /// Per-index thresholds `μ wᵢ` for `n` singular values, padding with the last weight.
    fn thresholds(&self, n: usize) -> Vec<f64> {
        match &self.weights {
            None => vec![self.mu; n],
            Some(w) => (0..n)
                .map(|i| self.mu * w[i.min(w.len() - 1)])
                .collect(),
        }
    }
}

fn check_mu(mu: f64) -> Result<()> {
    if !(mu >= 0.0) || !mu.is_finite() {
        return Err(Error::invalid(format!("shrinkage amount must be finite and >= 0, got {mu}")));
    }
    Ok(())
}

/// Soft threshold `(λ − μ)₊` of each singular value.
pub fn soft_threshold(values: &[f64], mu: f64) -> Vec<f64> {
    values.iter().map(|&l| (l - mu).max(0.0)).collect()
}

/// Gaussian shrinkage `√((λ² − μ)₊)` of each singular value.
pub fn gaussian_threshold(values: &[f64], mu: f64) -> Vec<f64> {
    values.iter().map(|&l| (l * l - mu).max(0.0).sqrt()).collect()
}

fn count_positive(values: &[f64]) -> usize {
    values.iter().filter(|&&v| v > 0.0).count()
}

/// Nuclear norm proximal operator (singular value soft thresholding).
pub fn nnp_shrink(y: &Matrix, mu: f64) -> Result<Matrix> {
    check_mu(mu)?;
    let f = svd(y)?;
    Ok(f.reconstruct_with(&soft_threshold(&f.singular_values, mu)))
}

/// Weighted nuclear norm proximal operator for non-descending weights.
pub fn wnnp_shrink(y: &Matrix, spec: &ShrinkageSpec) -> Result<Matrix> {
    if spec.weights.is_none() {
        return Err(Error::invalid("weighted shrinkage needs a weight vector"));
    }
    let f = svd(y)?;
    let thresholds = spec.thresholds(f.singular_values.len());
    let values: Vec<f64> = f
        .singular_values
        .iter()
        .zip(&thresholds)
        .map(|(&l, &w)| (l - w).max(0.0))
        .collect();
    Ok(f.reconstruct_with(&values))
}

/// Gaussian nuclear norm minimization: the global minimizer of
/// `½‖YYᵀ − XXᵀ‖²_F + μ‖XXᵀ‖_*`, together with its rank.
pub fn gnnm_shrink(y: &Matrix, mu: f64) -> Result<(Matrix, usize)> {
    check_mu(mu)?;
    let f = svd(y)?;
    Ok(gnnm_from_svd(&f, mu))
}

/// GNNM on an existing factorization.
pub fn gnnm_from_svd(f: &SvdFactorization, mu: f64) -> (Matrix, usize) {
    let values = gaussian_threshold(&f.singular_values, mu);
    let rank = count_positive(&values);
    (f.reconstruct_with(&values), rank)
}

/// `½‖YYᵀ − XXᵀ‖²_F + μ‖XXᵀ‖_*`, with `‖XXᵀ‖_* = Σλ²_X = ‖X‖²_F`.
pub fn gnnm_objective(y: &Matrix, x: &Matrix, mu: f64) -> Result<f64> {
    if y.shape() != x.shape() {
        return Err(Error::DimensionMismatch(format!(
            "objective needs equal shapes, got {:?} and {:?}",
            y.shape(),
            x.shape()
        )));
    }
    check_mu(mu)?;
    let diff = y.outer_gram().sub(&x.outer_gram());
    Ok(0.5 * diff.frobenius_norm_sq() + mu * x.frobenius_norm_sq())
}
