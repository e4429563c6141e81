//! Lloyd's k-means with greedy k-means++ seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{axpy, squared_distance};

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances to the assigned centroids.
    pub inertia: f64,
}

/// Clusters `vectors` into `k` groups with at most `iters` Lloyd iterations.
pub fn kmeans<V: AsRef<[f64]>>(vectors: &[V], k: usize, seed: u64, iters: usize) -> Result<KMeansResult> {
    let n = vectors.len();
    if k == 0 {
        return Err(Error::invalid("k-means needs k >= 1"));
    }
    if k > n {
        return Err(Error::invalid(format!("k-means asked for {k} clusters from {n} vectors")));
    }
    let d = vectors[0].as_ref().len();
    if vectors.iter().any(|v| v.as_ref().len() != d) {
        return Err(Error::DimensionMismatch("k-means vectors differ in length".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(vectors, k, &mut rng);
    let mut labels = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];

    for _ in 0..iters.max(1) {
        let changed = assign(vectors, &centroids, &mut labels, &mut dists);
        update(vectors, &mut centroids, &mut labels, &mut dists);
        if !changed {
            break;
        }
    }
    let inertia = vectors
        .iter()
        .zip(&labels)
        .map(|(v, &l)| squared_distance(v.as_ref(), &centroids[l]))
        .sum();
    Ok(KMeansResult {
        labels,
        centroids,
        inertia,
    })
}

fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = squared_distance(cen, x);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign<V: AsRef<[f64]>>(vectors: &[V], centroids: &[Vec<f64>], labels: &mut [usize], dists: &mut [f64]) -> bool {
    let mut changed = false;
    for (i, v) in vectors.iter().enumerate() {
        let (c, d) = nearest(centroids, v.as_ref());
        changed |= labels[i] != c;
        labels[i] = c;
        dists[i] = d;
    }
    changed
}

/// Recomputes centroids; an empty cluster takes over the point farthest from its centroid.
fn update<V: AsRef<[f64]>>(vectors: &[V], centroids: &mut [Vec<f64>], labels: &mut [usize], dists: &mut [f64]) {
    let k = centroids.len();
    let d = centroids[0].len();
    loop {
        let mut counts = vec![0usize; k];
        for &l in labels.iter() {
            counts[l] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            break;
        };
        // Only take from clusters that keep at least one member.
        let far = (0..labels.len())
            .filter(|&i| counts[labels[i]] > 1)
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if dists[b] >= dists[i] => Some(b),
                _ => Some(i),
            })
            .expect("n >= k leaves a donor cluster");
        labels[far] = empty;
        dists[far] = 0.0;
        centroids[empty].copy_from_slice(vectors[far].as_ref());
    }
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (v, &l) in vectors.iter().zip(labels.iter()) {
        axpy(1.0, v.as_ref(), &mut sums[l]);
        counts[l] += 1;
    }
    for ((cen, sum), count) in centroids.iter_mut().zip(sums).zip(counts) {
        for (c, s) in cen.iter_mut().zip(sum) {
            *c = s / count as f64;
        }
    }
}

/// Greedy k-means++: each new centre is the best of `2 + ln k` D²-sampled candidates.
fn seed_plus_plus<V: AsRef<[f64]>>(vectors: &[V], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = vectors.len();
    let trials = 2 + (k as f64).ln() as usize;
    let first = rng.random_range(0..n);
    let mut centroids = vec![vectors[first].as_ref().to_vec()];
    let mut chosen = vec![false; n];
    chosen[first] = true;
    let mut closest: Vec<f64> = vectors
        .iter()
        .map(|v| squared_distance(v.as_ref(), &centroids[0]))
        .collect();

    while centroids.len() < k {
        let total: f64 = closest.iter().sum();
        let candidates: Vec<usize> = if total > 0.0 {
            (0..trials).map(|_| sample_weighted(&closest, total, rng)).collect()
        } else {
            // Remaining points all coincide with centres.
            vec![chosen.iter().position(|c| !c).expect("fewer centres than points")]
        };
        let mut best: Option<(usize, f64, Vec<f64>)> = None;
        for c in candidates {
            let cand = vectors[c].as_ref();
            let updated: Vec<f64> = vectors
                .iter()
                .zip(&closest)
                .map(|(v, &old)| old.min(squared_distance(v.as_ref(), cand)))
                .collect();
            let potential: f64 = updated.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.1) {
                best = Some((c, potential, updated));
            }
        }
        let (c, _, updated) = best.unwrap();
        chosen[c] = true;
        closest = updated;
        centroids.push(vectors[c].as_ref().to_vec());
    }
    centroids
}

fn sample_weighted(weights: &[f64], total: f64, rng: &mut ChaCha8Rng) -> usize {
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = i;
            if acc > target {
                return i;
            }
        }
    }
    last
}
