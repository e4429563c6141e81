//! Class size balancing: merge undersized classes, then split oversized ones.

use std::collections::BTreeMap;

use log::warn;

use super::kmeans::kmeans;
use super::ClusterAssignment;
use crate::error::{Error, Result};
use crate::linalg::{axpy, squared_distance};

const SPLIT_ITERS: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BalanceStatus {
    Balanced,
    /// Fewer than `q_min` patches in total; everything went into one class.
    Undersized,
}

/// Rebalances `labels` so every class size lies in `[q_min, q_max]`.
///
/// Output classes are numbered `0..K'` in order of their original label, with
/// split sub-classes kept adjacent.
pub fn balance_classes<V: AsRef<[f64]>>(
    labels: &[usize],
    vectors: &[V],
    q_min: usize,
    q_max: usize,
    seed: u64,
) -> Result<(ClusterAssignment, BalanceStatus)> {
    if q_min == 0 || q_max < 2 * q_min {
        return Err(Error::invalid(format!(
            "need q_min >= 1 and q_max >= 2 q_min, got q_min = {q_min}, q_max = {q_max}"
        )));
    }
    if labels.len() != vectors.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} vectors",
            labels.len(),
            vectors.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::invalid("no patches to balance"));
    }

    let mut classes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        classes.entry(l).or_default().push(i);
    }
    merge_small(&mut classes, vectors, q_min);

    let mut groups = Vec::new();
    for (label, members) in classes {
        if members.len() > q_max {
            let seed = seed ^ (label as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            groups.extend(split_large(&members, vectors, q_min, q_max, seed)?);
        } else {
            groups.push(members);
        }
    }

    let status = if labels.len() < q_min {
        warn!("only {} patches, below the minimum class size {q_min}", labels.len());
        BalanceStatus::Undersized
    } else {
        BalanceStatus::Balanced
    };
    Ok((ClusterAssignment::from_groups(groups, labels.len()), status))
}

fn centroid<V: AsRef<[f64]>>(members: &[usize], vectors: &[V]) -> Vec<f64> {
    let mut c = vec![0.0; vectors[members[0]].as_ref().len()];
    for &i in members {
        axpy(1.0, vectors[i].as_ref(), &mut c);
    }
    c.iter_mut().for_each(|v| *v /= members.len() as f64);
    c
}

/// Repeatedly folds the smallest undersized class into its nearest neighbour.
fn merge_small<V: AsRef<[f64]>>(classes: &mut BTreeMap<usize, Vec<usize>>, vectors: &[V], q_min: usize) {
    let mut centroids: BTreeMap<usize, Vec<f64>> =
        classes.iter().map(|(&l, m)| (l, centroid(m, vectors))).collect();
    while classes.len() > 1 {
        let Some((&small, _)) = classes
            .iter()
            .filter(|(_, m)| m.len() < q_min)
            .min_by_key(|(&l, m)| (m.len(), l))
        else {
            break;
        };
        let here = &centroids[&small];
        let mut target = None;
        let mut best = f64::INFINITY;
        for (&l, c) in &centroids {
            if l == small {
                continue;
            }
            let d = squared_distance(here, c);
            if d < best {
                best = d;
                target = Some(l);
            }
        }
        let target = target.unwrap();
        let moved = classes.remove(&small).unwrap();
        centroids.remove(&small);
        let dest = classes.get_mut(&target).unwrap();
        dest.extend(moved);
        dest.sort_unstable();
        centroids.insert(target, centroid(dest, vectors));
    }
}

/// k-means split into `⌈q / q_max⌉` parts, then point moves until all sizes fit.
fn split_large<V: AsRef<[f64]>>(
    members: &[usize],
    vectors: &[V],
    q_min: usize,
    q_max: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let parts = members.len().div_ceil(q_max);
    let sub: Vec<&[f64]> = members.iter().map(|&i| vectors[i].as_ref()).collect();
    let km = kmeans(&sub, parts, seed, SPLIT_ITERS)?;
    let dist: Vec<Vec<f64>> = sub
        .iter()
        .map(|x| km.centroids.iter().map(|c| squared_distance(x, c)).collect())
        .collect();
    let mut label = km.labels;
    let mut sizes = vec![0usize; parts];
    for &l in &label {
        sizes[l] += 1;
    }

    // Cheapest single move out of `from` into any class accepted by `open`.
    let cheapest_move = |label: &[usize], from: usize, open: &dyn Fn(usize) -> bool| {
        let mut best: Option<(usize, usize, f64)> = None;
        for (i, &l) in label.iter().enumerate() {
            if l != from {
                continue;
            }
            for t in 0..parts {
                if t == from || !open(t) {
                    continue;
                }
                let cost = dist[i][t] - dist[i][from];
                if best.is_none_or(|b| cost < b.2) {
                    best = Some((i, t, cost));
                }
            }
        }
        best
    };

    while let Some(over) = sizes.iter().position(|&s| s > q_max) {
        let snapshot = sizes.clone();
        let (i, t, _) = cheapest_move(&label, over, &|t| snapshot[t] < q_max)
            .ok_or_else(|| Error::Internal("no room to shrink an oversized class".into()))?;
        label[i] = t;
        sizes[over] -= 1;
        sizes[t] += 1;
    }
    while let Some(under) = sizes.iter().position(|&s| s < q_min) {
        // Pull the donor point that is cheapest to move into `under`.
        let mut best: Option<(usize, f64)> = None;
        for (i, &l) in label.iter().enumerate() {
            if l == under || sizes[l] <= q_min {
                continue;
            }
            let cost = dist[i][under] - dist[i][l];
            if best.is_none_or(|b| cost < b.1) {
                best = Some((i, cost));
            }
        }
        let (i, _) = best.ok_or_else(|| Error::Internal("no donor for an undersized class".into()))?;
        sizes[label[i]] -= 1;
        label[i] = under;
        sizes[under] += 1;
    }

    let mut groups = vec![Vec::new(); parts];
    for (pos, &l) in label.iter().enumerate() {
        groups[l].push(members[pos]);
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sizes(a: &ClusterAssignment) -> Vec<usize> {
        a.groups().iter().map(Vec::len).collect()
    }

    #[test]
    fn in_range_classes_are_untouched() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let vectors: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64]).collect();
        let (a, status) = balance_classes(&labels, &vectors, 5, 12, 0).unwrap();
        assert_eq!(status, BalanceStatus::Balanced);
        assert_eq!(a.labels(), &labels[..]);
    }

    #[test]
    fn singleton_merges_into_nearer_class() {
        let mut labels = vec![0; 10];
        labels.extend(vec![1; 10]);
        labels.push(2);
        let mut vectors: Vec<Vec<f64>> = (0..10).map(|_| vec![0.0, 0.0]).collect();
        vectors.extend((0..10).map(|_| vec![10.0, 0.0]));
        vectors.push(vec![7.0, 0.0]);
        let (a, _) = balance_classes(&labels, &vectors, 5, 20, 0).unwrap();
        assert_eq!(a.num_classes(), 2);
        assert_eq!(a.labels()[20], a.labels()[10]);
        assert_ne!(a.labels()[20], a.labels()[0]);
    }

    #[test]
    fn separated_blobs_split_cleanly() {
        let (q_min, q_max) = (10, 40);
        let n = 2 * q_max + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // 41 points near 0 and 40 points near 50: blobs are far more than 10 std apart.
        let vectors: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let c = if i < 41 { 0.0 } else { 50.0 };
                (0..3).map(|_| c + rng.random_range(-1.0..1.0)).collect()
            })
            .collect();
        let (a, _) = balance_classes(&vec![0; n], &vectors, q_min, q_max, 3).unwrap();
        assert_eq!(a.num_classes(), 3);
        for g in a.groups() {
            assert!((q_min..=q_max).contains(&g.len()));
            let left = g.iter().filter(|&&i| i < 41).count();
            assert!(left == 0 || left == g.len(), "mixed group {g:?}");
        }
    }

    #[test]
    fn tiny_input_gives_single_undersized_class() {
        let labels = vec![0, 1, 2];
        let vectors = vec![vec![0.0], vec![1.0], vec![2.0]];
        let (a, status) = balance_classes(&labels, &vectors, 5, 10, 0).unwrap();
        assert_eq!(status, BalanceStatus::Undersized);
        assert_eq!(a.num_classes(), 1);
    }

    #[test]
    fn rejects_bad_bounds() {
        let v = vec![vec![0.0]; 4];
        assert!(balance_classes(&[0; 4], &v, 3, 5, 0).is_err());
        assert!(balance_classes(&[0; 4], &v, 0, 5, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn sizes_land_in_bounds(
            n in 1usize..400,
            classes in 1usize..30,
            q_min in 1usize..20,
            extra in 0usize..40,
            seed in any::<u64>(),
        ) {
            let q_max = 2 * q_min + extra;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            let vectors: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
            let (a, status) = balance_classes(&labels, &vectors, q_min, q_max, seed).unwrap();
            let s = sizes(&a);
            prop_assert_eq!(s.iter().sum::<usize>(), n);
            for (i, &l) in a.labels().iter().enumerate() {
                prop_assert!(a.groups()[l].contains(&i));
            }
            if n < q_min {
                prop_assert_eq!(status, BalanceStatus::Undersized);
                prop_assert_eq!(s.len(), 1);
            } else {
                for &size in &s {
                    prop_assert!(size >= q_min && size <= q_max, "sizes {:?}", s);
                }
            }
        }
    }
}
