//! Semantic regions: coherent-motion similarity through indicative
//! particles, clustering of coherent motions across TEFs, and clustering of
//! per-particle label vectors into a stable scene partition.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{GridDims, Vec2};
use crate::segmentation::CoherentMotion;
use crate::spectral::{self, ClusterResult, SimilarityMatrix};

/// Label of pixels outside every semantic region.
pub const BACKGROUND: u32 = u32::MAX;

/// Half-width of the window used to estimate boundary normals.
const NORMAL_RADIUS: i64 = 2;

/// Most particles handed to the step-2 clustering.
const MAX_STEP2_PARTICLES: usize = 1200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimilarityConfig {
    pub theta_bp: f64,
    pub k_p_sim: f64,
    pub theta_c: f64,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        SimilarityConfig {
            theta_bp: 0.7,
            k_p_sim: 5e-4,
            theta_c: 0.7,
        }
    }
}

impl SimilarityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_bp > 0.0 && self.theta_bp <= 1.0) {
            return Err(Error::validation("theta_bp must be in (0, 1]"));
        }
        if !(self.k_p_sim > 0.0 && self.k_p_sim.is_finite()) {
            return Err(Error::validation("k_p_sim must be > 0"));
        }
        if !(self.theta_c >= -1.0 && self.theta_c <= 1.0) {
            return Err(Error::validation("theta_c must be in [-1, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndicativeParticle {
    pub pixel: usize,
    pub p: Vec2,
    /// Outward unit normal of the region boundary.
    pub normal: Vec2,
    pub energy: Vec2,
}

pub type IndicativeParticleSet = Vec<IndicativeParticle>;

/// Outward unit normal at a boundary pixel: the normalized sum of offsets
/// to the pixels outside the mask (or off the grid) within a small window.
pub fn outward_normal(dims: GridDims, mask: &[bool], idx: usize) -> Vec2 {
    let (x, y) = dims.coords(idx);
    let mut acc = Vec2::ZERO;
    for dy in -NORMAL_RADIUS..=NORMAL_RADIUS {
        for dx in -NORMAL_RADIUS..=NORMAL_RADIUS {
            if dx * dx + dy * dy > NORMAL_RADIUS * NORMAL_RADIUS {
                continue;
            }
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            let outside = !dims.contains(nx, ny) || !mask[dims.index(nx as usize, ny as usize)];
            if outside {
                acc += Vec2::new(dx as f64, dy as f64);
            }
        }
    }
    acc.normalized_or_zero(1e-12)
}

/// Boundary particles of `c` whose energy points outward: `cos(E, V) > theta_c`.
pub fn indicative_particles(c: &CoherentMotion, cfg: &SimilarityConfig) -> IndicativeParticleSet {
    let mask = c.mask();
    c.boundary
        .iter()
        .filter_map(|&i| {
            let normal = outward_normal(c.dims, &mask, i);
            let energy = c.energy_at(i);
            let cos = energy.cosine(normal)?;
            if cos > cfg.theta_c {
                let (x, y) = c.dims.coords(i);
                Some(IndicativeParticle {
                    pixel: i,
                    p: Vec2::new(x as f64, y as f64),
                    normal,
                    energy,
                })
            } else {
                None
            }
        })
        .collect()
}

/// Number of indicative pairs `(P, Q)` with
/// `cos(E_P, E_Q) * exp(-k_p_sim * |P - Q|^2) > theta_bp`.
pub fn set_similarity(
    a: &[IndicativeParticle],
    b: &[IndicativeParticle],
    cfg: &SimilarityConfig,
) -> usize {
    // beyond this distance no pair can pass, whatever the cosine
    let reach_sq = (1.0 / cfg.theta_bp).ln() / cfg.k_p_sim;
    let mut count = 0;
    for p in a {
        for q in b {
            let d2 = (p.p - q.p).norm_sq();
            if d2 > reach_sq {
                continue;
            }
            let Some(cos) = p.energy.cosine(q.energy) else {
                continue;
            };
            if cos * (-cfg.k_p_sim * d2).exp() > cfg.theta_bp {
                count += 1;
            }
        }
    }
    count
}

pub fn coherent_similarity(
    cm: &CoherentMotion,
    ck: &CoherentMotion,
    cfg: &SimilarityConfig,
) -> usize {
    set_similarity(
        &indicative_particles(cm, cfg),
        &indicative_particles(ck, cfg),
        cfg,
    )
}

/// Pairwise similarity of coherent motions from any TEFs (zero diagonal).
pub fn similarity_matrix(
    motions: &[CoherentMotion],
    cfg: &SimilarityConfig,
) -> Result<SimilarityMatrix> {
    cfg.validate()?;
    let sets: Vec<IndicativeParticleSet> = motions
        .par_iter()
        .map(|m| indicative_particles(m, cfg))
        .collect();
    let n = motions.len();
    let upper: Vec<(usize, usize, f64)> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let sets = &sets;
            (i + 1..n).map(move |j| (i, j, set_similarity(&sets[i], &sets[j], cfg) as f64))
        })
        .collect();
    let mut values = vec![0.0; n * n];
    for (i, j, v) in upper {
        values[i * n + j] = v;
        values[j * n + i] = v;
    }
    SimilarityMatrix::new(n, values)
}

/// Step 1: clusters all coherent motions, regardless of their TEF.
pub fn cluster_coherent_motions(
    motions: &[CoherentMotion],
    cfg: &SimilarityConfig,
    seed: u64,
) -> Result<ClusterResult> {
    if motions.is_empty() {
        return Err(Error::validation("no coherent motions to cluster"));
    }
    let sim = similarity_matrix(motions, cfg)?;
    spectral::cluster(&sim, None, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticRegionMap {
    pub dims: GridDims,
    /// Region id per pixel, [`BACKGROUND`] outside all regions.
    pub labels: Vec<u32>,
    pub count: usize,
}

impl SemanticRegionMap {
    pub fn region_pixels(&self, k: u32) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.labels[i] == k)
            .collect()
    }

    pub fn areas(&self) -> Vec<usize> {
        let mut a = vec![0; self.count];
        for &l in &self.labels {
            if l != BACKGROUND {
                a[l as usize] += 1;
            }
        }
        a
    }

    /// Labels with background 0 and region `k` as `k + 1`.
    pub fn shifted_labels(&self) -> Vec<u32> {
        self.labels
            .iter()
            .map(|&l| if l == BACKGROUND { 0 } else { l + 1 })
            .collect()
    }
}

/// Per-pixel label vectors: entry `n` is the step-1 cluster of the motion
/// covering the pixel in TEF `n`, or -1.
pub fn label_vectors(
    motions_by_tef: &[Vec<CoherentMotion>],
    step1: &ClusterResult,
    dims: GridDims,
) -> Result<Vec<Vec<i32>>> {
    let total: usize = motions_by_tef.iter().map(Vec::len).sum();
    if step1.labels.len() != total {
        return Err(Error::validation(format!(
            "step-1 result has {} labels for {total} coherent motions",
            step1.labels.len()
        )));
    }
    let mut vecs = vec![vec![-1i32; motions_by_tef.len()]; dims.len()];
    let mut flat = 0;
    for (n, motions) in motions_by_tef.iter().enumerate() {
        for m in motions {
            if m.dims != dims {
                return Err(Error::validation(
                    "coherent motion dims differ from the map",
                ));
            }
            let l = step1.labels[flat] as i32;
            for &i in &m.pixels {
                vecs[i][n] = l;
            }
            flat += 1;
        }
    }
    Ok(vecs)
}

/// Pixels covered by fewer than half as many TEFs as the typical (median)
/// pixel of their region fall back to background. Diffusion fringes vary
/// from TEF to TEF; the union of all fringes would otherwise swell every
/// region.
fn drop_unstable(vecs: &[Vec<i32>], labels: &mut [u32]) {
    let coverage: Vec<usize> = vecs
        .iter()
        .map(|v| v.iter().filter(|&&l| l >= 0).count())
        .collect();
    let mut per_region: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        if l != BACKGROUND {
            per_region.entry(l).or_default().push(coverage[i]);
        }
    }
    let median: std::collections::BTreeMap<u32, usize> = per_region
        .into_iter()
        .map(|(l, mut c)| {
            c.sort_unstable();
            (l, c[c.len() / 2])
        })
        .collect();
    for (i, l) in labels.iter_mut().enumerate() {
        if *l != BACKGROUND && 2 * coverage[i] < median[l] {
            *l = BACKGROUND;
        }
    }
}

fn agreement(a: &[i32], b: &[i32]) -> f64 {
    a.iter().zip(b).filter(|(x, y)| **x >= 0 && x == y).count() as f64
}

/// Step 2: clusters particles on their label vectors and paints the map.
/// Clustering runs on a stride-4 grid subsample (coarser on large frames);
/// every other covered pixel takes the majority label of its 4 nearest
/// subsampled particles.
pub fn build_semantic_regions(
    motions_by_tef: &[Vec<CoherentMotion>],
    step1: &ClusterResult,
    dims: GridDims,
    seed: u64,
) -> Result<SemanticRegionMap> {
    let vecs = label_vectors(motions_by_tef, step1, dims)?;
    let covered: Vec<bool> = vecs.iter().map(|v| v.iter().any(|&l| l >= 0)).collect();
    let n_covered = covered.iter().filter(|&&c| c).count();
    let mut labels = vec![BACKGROUND; dims.len()];
    if n_covered == 0 {
        return Ok(SemanticRegionMap {
            dims,
            labels,
            count: 0,
        });
    }

    let mut stride = 4usize;
    let sample = |stride: usize| -> Vec<usize> {
        (0..dims.len())
            .filter(|&i| {
                let (x, y) = dims.coords(i);
                covered[i] && x % stride == 0 && y % stride == 0
            })
            .collect()
    };
    let mut particles = sample(stride);
    while particles.len() > MAX_STEP2_PARTICLES {
        stride += 1;
        particles = sample(stride);
    }
    if particles.is_empty() {
        // thin coverage that misses the grid: use the covered pixels
        particles = (0..dims.len()).filter(|&i| covered[i]).collect();
        particles.truncate(MAX_STEP2_PARTICLES);
    }

    let sim = SimilarityMatrix::from_fn(particles.len(), |a, b| {
        if a == b {
            0.0
        } else {
            agreement(&vecs[particles[a]], &vecs[particles[b]])
        }
    })?;
    let result = spectral::cluster(&sim, None, seed)?;

    let pts: Vec<(f64, f64)> = particles
        .iter()
        .map(|&i| {
            let (x, y) = dims.coords(i);
            (x as f64, y as f64)
        })
        .collect();
    let painted: Vec<(usize, u32)> = (0..dims.len())
        .into_par_iter()
        .filter(|&i| covered[i])
        .map(|i| {
            if let Ok(k) = particles.binary_search(&i) {
                return (i, result.labels[k] as u32);
            }
            let (x, y) = dims.coords(i);
            let (x, y) = (x as f64, y as f64);
            let mut near: Vec<(f64, usize)> = pts
                .iter()
                .enumerate()
                .map(|(k, &(px, py))| ((px - x).powi(2) + (py - y).powi(2), k))
                .collect();
            let take = near.len().min(4);
            near.select_nth_unstable_by(take - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            near[..take].sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            // majority; ties go to the nearer particle
            let mut best = (0usize, usize::MAX);
            for (rank, &(_, k)) in near[..take].iter().enumerate() {
                let l = result.labels[k];
                let votes = near[..take]
                    .iter()
                    .filter(|&&(_, j)| result.labels[j] == l)
                    .count();
                if votes > best.0 || (votes == best.0 && rank < best.1) {
                    best = (votes, rank);
                }
            }
            (i, result.labels[near[best.1].1] as u32)
        })
        .collect();
    for (i, l) in painted {
        labels[i] = l;
    }
    drop_unstable(&vecs, &mut labels);
    // ids contiguous from 0 in order of first appearance
    let mut remap = std::collections::HashMap::new();
    for l in labels.iter_mut() {
        if *l != BACKGROUND {
            let next = remap.len() as u32;
            *l = *remap.entry(*l).or_insert(next);
        }
    }
    Ok(SemanticRegionMap {
        dims,
        labels,
        count: remap.len(),
    })
}
