use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Descriptor, GroupAssignment};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once no centroid moves farther than this (Euclidean).
    pub tol: f64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

/// Result of [`kmeans`]: the assignment plus the within-cluster sum of squares
/// after every Lloyd iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub assignment: GroupAssignment,
    pub objective: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn plus_plus_init(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            if d2[pick] <= 0.0 {
                // rounding fell off the end: take the last point with positive weight
                pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            // only duplicates left: uniform among points not yet used as seeds
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        centroids.push(points[pick].to_vec());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

/// Moves, for every empty cluster, the point farthest from its own centroid
/// (taken from a cluster with more than one member) into the empty cluster and
/// re-centres the empty cluster on it.
fn repair_empty(points: &[&[f64]], labels: &mut [usize], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    loop {
        let mut sizes = vec![0usize; k];
        for &l in labels.iter() {
            sizes[l] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let mut far = None;
        let mut far_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            if sizes[labels[i]] < 2 {
                continue;
            }
            let d = sq_dist(p, &centroids[labels[i]]);
            if d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        let i = far.expect("k <= n guarantees a cluster with two members");
        labels[i] = empty;
        centroids[empty] = points[i].to_vec();
    }
}

fn objective(points: &[&[f64]], labels: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| sq_dist(p, &centroids[l]))
        .sum()
}

/// Lloyd's algorithm with k-means++ seeding on Euclidean distance.
pub fn kmeans(descriptors: &[Descriptor], config: &KMeansConfig) -> Result<Clustering> {
    let n = descriptors.len();
    let k = config.k;
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    if k > n {
        return Err(Error::invalid(format!("K={k} exceeds the number of images ({n})")));
    }
    let dim = descriptors[0].vector.len();
    if descriptors.iter().any(|d| d.vector.len() != dim) {
        return Err(Error::shape("descriptors differ in dimension"));
    }
    let points: Vec<&[f64]> = descriptors.iter().map(|d| d.vector.as_slice()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut centroids = plus_plus_init(&points, k, &mut rng);
    let mut labels = vec![0usize; n];
    let mut history = Vec::new();

    for _ in 0..config.max_iters.max(1) {
        for (i, p) in points.iter().enumerate() {
            labels[i] = nearest(p, &centroids).0;
        }
        repair_empty(&points, &mut labels, &mut centroids);

        let mut sums = vec![vec![0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        let updated: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &c)| s.into_iter().map(|v| v / c as f64).collect())
            .collect();
        let shift = centroids
            .iter()
            .zip(&updated)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        history.push(objective(&points, &labels, &centroids));
        log::debug!("kmeans iter {}: wcss={:.6} shift={shift:.3e}", history.len(), history[history.len() - 1]);
        if shift < config.tol {
            break;
        }
    }
    for (i, p) in points.iter().enumerate() {
        labels[i] = nearest(p, &centroids).0;
    }
    repair_empty(&points, &mut labels, &mut centroids);

    let assignment = GroupAssignment {
        k,
        seed: config.seed,
        mapping: descriptors
            .iter()
            .zip(&labels)
            .map(|(d, &l)| (d.id.clone(), l))
            .collect(),
        centroids,
    };
    Ok(Clustering {
        assignment,
        objective: history,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn desc(points: &[Vec<f64>]) -> Vec<Descriptor> {
        points
            .iter()
            .enumerate()
            .map(|(i, v)| Descriptor {
                id: format!("d{i:03}"),
                vector: v.clone(),
            })
            .collect()
    }

    /// Smallest within-cluster sum of squares over every 2-partition.
    fn brute_force_two_partition(points: &[Vec<f64>]) -> (f64, Vec<usize>) {
        let n = points.len();
        let mut best = (f64::INFINITY, vec![]);
        for mask in 1u32..(1 << n) - 1 {
            let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            let mut wcss = 0.0;
            for g in 0..2 {
                let members: Vec<&Vec<f64>> = (0..n).filter(|&i| labels[i] == g).map(|i| &points[i]).collect();
                let dim = points[0].len();
                let mean: Vec<f64> = (0..dim)
                    .map(|d| members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64)
                    .collect();
                wcss += members.iter().map(|m| sq_dist(m, &mean)).sum::<f64>();
            }
            if wcss < best.0 {
                best = (wcss, labels);
            }
        }
        best
    }

    #[test]
    fn separated_pairs_match_brute_force() {
        let pts = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![5.0, 5.0], vec![5.0, 5.2]];
        let (best, labels) = brute_force_two_partition(&pts);
        for seed in 0..10 {
            let c = kmeans(&desc(&pts), &KMeansConfig::new(2, seed)).unwrap();
            let got: Vec<usize> = c.assignment.mapping.values().copied().collect();
            let same = |i: usize, j: usize| (got[i] == got[j]) == (labels[i] == labels[j]);
            assert!(same(0, 1) && same(2, 3) && same(0, 2));
            assert!((c.objective.last().unwrap() - best).abs() < 1e-12);
        }
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let pts = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 0.0]];
        let c = kmeans(&desc(&pts), &KMeansConfig::new(1, 0)).unwrap();
        assert!(c.assignment.mapping.values().all(|&g| g == 0));
        assert_eq!(c.assignment.centroids[0], vec![3.0, 2.0]);
    }

    #[test]
    fn k_equals_n_gives_zero_objective() {
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let c = kmeans(&desc(&pts), &KMeansConfig::new(6, 3)).unwrap();
        assert_eq!(*c.objective.last().unwrap(), 0.0);
        c.assignment.validate().unwrap();
        let mut groups: Vec<usize> = c.assignment.mapping.values().copied().collect();
        groups.sort();
        assert_eq!(groups, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn duplicates_still_fill_every_cluster() {
        let pts = vec![vec![1.0]; 5];
        let c = kmeans(&desc(&pts), &KMeansConfig::new(3, 1)).unwrap();
        c.assignment.validate().unwrap();
    }

    #[test]
    fn too_many_clusters_is_an_error() {
        let pts = vec![vec![0.0], vec![1.0]];
        assert!(kmeans(&desc(&pts), &KMeansConfig::new(3, 0)).is_err());
        assert!(kmeans(&desc(&pts), &KMeansConfig::new(0, 0)).is_err());
    }

    proptest! {
        #[test]
        fn objective_never_increases_and_partition_is_exact(
            raw in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 4..40),
            k in 1usize..6,
            seed in 0u64..1000,
        ) {
            let k = k.min(raw.len());
            let d = desc(&raw);
            let c = kmeans(&d, &KMeansConfig::new(k, seed)).unwrap();
            for w in c.objective.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0));
            }
            c.assignment.validate().unwrap();
            prop_assert_eq!(c.assignment.mapping.len(), raw.len());
            let again = kmeans(&d, &KMeansConfig::new(k, seed)).unwrap();
            prop_assert_eq!(again, c);
        }
    }
}
