//! Spectral clustering of a similarity graph with automatic choice of the
//! cluster count (largest eigengap of the normalized Laplacian).

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_CLUSTERS: usize = 16;
const KMEANS_RESTARTS: u64 = 20;
const KMEANS_MAX_ITER: usize = 200;
const SYMMETRY_TOL: f64 = 1e-9;

/// Symmetric non-negative `n x n` similarity matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::validation(format!(
                "similarity matrix needs {} values, got {}",
                n * n,
                values.len()
            )));
        }
        for i in 0..n {
            for j in 0..n {
                let v = values[i * n + j];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::validation(format!(
                        "similarity ({i}, {j}) = {v} is not a finite non-negative value"
                    )));
                }
                let w = values[j * n + i];
                if (v - w).abs() > SYMMETRY_TOL * v.abs().max(w.abs()).max(1.0) {
                    return Err(Error::validation(format!(
                        "similarity matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(SimilarityMatrix { n, values })
    }

    /// Builds the matrix from a function evaluated on the upper triangle
    /// (diagonal included) and mirrored.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = f(i, j);
                values[i * n + j] = v;
                values[j * n + i] = v;
            }
        }
        SimilarityMatrix::new(n, values)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        SimilarityMatrix::new(self.n, self.values.iter().map(|v| v * c).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub labels: Vec<usize>,
    pub k: usize,
    /// Lowest Laplacian eigenvalues, ascending (isolated items count as 0).
    pub eigenvalues: Vec<f64>,
}

/// Clusters the items of `sim`. Items without any off-diagonal similarity
/// become singleton clusters. With `k_override` the connected items are
/// split into `k - singletons` clusters (at least one).
pub fn cluster(
    sim: &SimilarityMatrix,
    k_override: Option<usize>,
    seed: u64,
) -> Result<ClusterResult> {
    let n = sim.n();
    if n == 0 {
        return Err(Error::validation("cannot cluster zero items"));
    }
    if let Some(k) = k_override {
        if k == 0 || k > n {
            return Err(Error::validation(format!(
                "k_override {k} outside [1, {n}]"
            )));
        }
    }
    let degree_off: Vec<f64> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i).map(|j| sim.get(i, j)).sum())
        .collect();
    let connected: Vec<usize> = (0..n).filter(|&i| degree_off[i] > 0.0).collect();
    let singletons = n - connected.len();
    let m = connected.len();

    let mut labels = vec![usize::MAX; n];
    let mut eigenvalues = vec![0.0; singletons];
    if m > 0 {
        let deg: Vec<f64> = connected
            .iter()
            .map(|&i| connected.iter().map(|&j| sim.get(i, j)).sum::<f64>())
            .collect();
        let inv_sqrt: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
        let lap = DMatrix::from_fn(m, m, |a, b| {
            let s = sim.get(connected[a], connected[b]) * inv_sqrt[a] * inv_sqrt[b];
            if a == b {
                1.0 - s
            } else {
                -s
            }
        });
        let eig = SymmetricEigen::new(lap);
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[a]
                .total_cmp(&eig.eigenvalues[b])
                .then(a.cmp(&b))
        });
        let spectrum: Vec<f64> = order.iter().map(|&c| eig.eigenvalues[c].max(0.0)).collect();
        let kc = match k_override {
            Some(k) => k.saturating_sub(singletons).clamp(1, m),
            None => eigengap_k(&spectrum[..m.min(MAX_CLUSTERS)]),
        };
        let embed: Vec<Vec<f64>> = (0..m)
            .map(|r| {
                let row: Vec<f64> = order[..kc]
                    .iter()
                    .map(|&c| eig.eigenvectors[(r, c)])
                    .collect();
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    row.iter().map(|v| v / norm).collect()
                } else {
                    row
                }
            })
            .collect();
        let sub = kmeans(&embed, kc, seed);
        for (a, &i) in connected.iter().enumerate() {
            labels[i] = sub[a];
        }
        eigenvalues.extend(spectrum);
    }
    let mut next_single = usize::MAX / 2;
    for l in labels.iter_mut() {
        if *l == usize::MAX {
            *l = next_single;
            next_single += 1;
        }
    }
    let (labels, k) = canonical_labels(&labels);
    eigenvalues.sort_by(f64::total_cmp);
    eigenvalues.truncate(n.min(MAX_CLUSTERS));
    Ok(ClusterResult {
        labels,
        k,
        eigenvalues,
    })
}

/// Number of eigenvalues below the largest gap of an ascending spectrum.
fn eigengap_k(spectrum: &[f64]) -> usize {
    if spectrum.len() < 2 {
        return 1;
    }
    let mut best = (0.0, 1);
    for k in 1..spectrum.len() {
        let gap = spectrum[k] - spectrum[k - 1];
        if gap > best.0 {
            best = (gap, k);
        }
    }
    best.1
}

/// Relabels to `0..K` in order of first appearance.
pub fn canonical_labels(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = std::collections::HashMap::new();
    let out = labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect();
    (out, map.len())
}

/// Seeded k-means (k-means++ starts, best inertia over the restarts).
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<usize> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    let k = k.clamp(1, n);
    let runs: Vec<(f64, Vec<usize>)> = (0..KMEANS_RESTARTS)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r);
            kmeans_once(points, k, &mut rng)
        })
        .collect();
    // first restart wins ties
    let mut best = &runs[0];
    for run in &runs[1..] {
        if run.0 < best.0 {
            best = run;
        }
    }
    best.1.clone()
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_once(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> (f64, Vec<usize>) {
    let n = points.len();
    let mut centers: Vec<Vec<f64>> = vec![points[rng.gen_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist_sq(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.gen::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if t < d {
                    idx = i;
                    break;
                }
                t -= d;
            }
            idx
        } else {
            rng.gen_range(0..n)
        };
        centers.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(dist_sq(p, centers.last().unwrap()));
        }
    }

    let dim = points[0].len();
    let mut assign = vec![0usize; n];
    for iter in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = (f64::INFINITY, 0);
            for (c, ctr) in centers.iter().enumerate() {
                let d = dist_sq(p, ctr);
                if d < best.0 {
                    best = (d, c);
                }
            }
            if assign[i] != best.1 || iter == 0 {
                changed |= assign[i] != best.1;
                assign[i] = best.1;
            }
        }
        if !changed && iter > 0 {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[assign[i]] += 1;
            for (s, v) in sums[assign[i]].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // re-seed an empty cluster at the point farthest from its center
                let far = (0..n)
                    .max_by(|&a, &b| {
                        dist_sq(&points[a], &centers[assign[a]])
                            .total_cmp(&dist_sq(&points[b], &centers[assign[b]]))
                            .then(b.cmp(&a))
                    })
                    .unwrap();
                centers[c] = points[far].clone();
                assign[far] = c;
            } else {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let inertia = points
        .iter()
        .enumerate()
        .map(|(i, p)| dist_sq(p, &centers[assign[i]]))
        .sum();
    (inertia, assign)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blocks(sizes: &[usize]) -> (SimilarityMatrix, Vec<usize>) {
        let truth: Vec<usize> = sizes
            .iter()
            .enumerate()
            .flat_map(|(b, &s)| std::iter::repeat(b).take(s))
            .collect();
        let n = truth.len();
        let sim = SimilarityMatrix::from_fn(n, |i, j| if truth[i] == truth[j] { 1.0 } else { 0.0 })
            .unwrap();
        (sim, truth)
    }

    fn same_partition(a: &[usize], b: &[usize]) -> bool {
        (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
    }

    #[test]
    fn three_blocks_found() {
        let (sim, truth) = blocks(&[4, 4, 4]);
        let r = cluster(&sim, None, 1).unwrap();
        assert_eq!(r.k, 3);
        assert!(same_partition(&r.labels, &truth));
        assert_eq!(r.eigenvalues.len(), 12);
    }

    #[test]
    fn single_item() {
        let sim = SimilarityMatrix::new(1, vec![0.0]).unwrap();
        let r = cluster(&sim, None, 0).unwrap();
        assert_eq!((r.k, r.labels), (1, vec![0]));
    }

    #[test]
    fn all_zero_gives_singletons() {
        let sim = SimilarityMatrix::new(5, vec![0.0; 25]).unwrap();
        let r = cluster(&sim, None, 0).unwrap();
        assert_eq!(r.k, 5);
        assert_eq!(r.labels, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(SimilarityMatrix::new(2, vec![0.0, 1.0, 2.0, 0.0]).is_err());
        assert!(SimilarityMatrix::new(2, vec![0.0, -1.0, -1.0, 0.0]).is_err());
        assert!(SimilarityMatrix::new(2, vec![0.0; 3]).is_err());
        let (sim, _) = blocks(&[2, 2]);
        assert!(cluster(&sim, Some(5), 0).is_err());
    }

    #[test]
    fn override_and_isolated() {
        let mut v = vec![0.0; 25];
        for (i, j) in [(0, 1), (1, 2), (0, 2), (3, 3)] {
            v[i * 5 + j] = 1.0;
            v[j * 5 + i] = 1.0;
        }
        let sim = SimilarityMatrix::new(5, v).unwrap();
        let r = cluster(&sim, None, 3).unwrap();
        assert_eq!(r.k, 3);
        assert_eq!(r.labels, vec![0, 0, 0, 1, 2]);
        let r = cluster(&sim, Some(4), 3).unwrap();
        assert_eq!(r.k, 4);
        assert_ne!(r.labels[3], r.labels[4]);
        assert_ne!(r.labels[0], r.labels[3]);
    }

    #[test]
    fn deterministic_and_scale_free() {
        let (sim, _) = blocks(&[3, 5, 2, 6]);
        let a = cluster(&sim, None, 9).unwrap();
        let b = cluster(&sim, None, 9).unwrap();
        assert_eq!(a, b);
        let c = cluster(&sim.scaled(1000.0).unwrap(), None, 9).unwrap();
        assert_eq!(a.labels, c.labels);
    }

    #[test]
    fn canonical_order() {
        assert_eq!(canonical_labels(&[7, 7, 2, 9, 2]), (vec![0, 0, 1, 2, 1], 3));
    }
}
