//! Recurrent activity mining: frame-level clustering over matched coherent
//! motions, per-cluster motion pattern merging and flow-curve extraction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::max_weight_assignment;
use crate::error::{Error, Result};
use crate::field::{GridDims, MotionField, Vec2};
use crate::raster;
use crate::segmentation::CoherentMotion;
use crate::semantic::{similarity_matrix, SemanticRegionMap, SimilarityConfig, BACKGROUND};
use crate::spectral::{self, ClusterResult, SimilarityMatrix};

/// Deepest branch nesting followed by [`extract_flow_curve`].
const MAX_BRANCH_DEPTH: usize = 4;
/// Cut runs shorter than this (in samples) are ignored when looking for
/// branches.
const MIN_BRANCH_RUN: usize = 3;
/// Support components below this share of the largest one are dropped
/// before tracing.
const MIN_COMPONENT_SHARE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    pub theta_mf: f64,
    pub num_groups: Option<usize>,
    pub num_mov: usize,
    /// Matched pairs weaker than this fraction of the frame pair's
    /// strongest pair are dropped.
    pub match_min_sim: f64,
    pub smoothing_window: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            theta_mf: 0.4,
            num_groups: None,
            num_mov: 5,
            match_min_sim: 0.1,
            smoothing_window: 3,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_mf > 0.0 && self.theta_mf < 1.0) {
            return Err(Error::validation("theta_mf must be in (0, 1)"));
        }
        if self.num_mov == 0 {
            return Err(Error::validation("num_mov must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.match_min_sim) {
            return Err(Error::validation("match_min_sim must be in [0, 1]"));
        }
        if self.smoothing_window == 0 || self.smoothing_window % 2 == 0 {
            return Err(Error::validation("smoothing_window must be odd"));
        }
        if self.num_groups == Some(0) {
            return Err(Error::validation("num_groups must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    /// Index into the frame `t` regions.
    pub i: usize,
    /// Index into the frame `t - tau` regions.
    pub j: usize,
    pub similarity: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub matched: Vec<MatchedPair>,
    pub unmatched_t: Vec<usize>,
    pub unmatched_prev: Vec<usize>,
}

/// Hungarian matching on an `n_t x n_prev` similarity table. Pairs with
/// zero similarity or below `min_fraction` of the best matched pair go back
/// to the unmatched sets.
pub fn match_similarities(sim: &[Vec<f64>], n_prev: usize, min_fraction: f64) -> MatchResult {
    let n_t = sim.len();
    let assign = if n_t == 0 || n_prev == 0 {
        vec![None; n_t]
    } else {
        max_weight_assignment(sim)
    };
    let max = assign
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| sim[i][j]))
        .fold(0.0f64, f64::max);
    let mut out = MatchResult::default();
    let mut used = vec![false; n_prev];
    for (i, j) in assign.iter().enumerate() {
        match *j {
            Some(j) if sim[i][j] > 0.0 && sim[i][j] >= min_fraction * max => {
                used[j] = true;
                out.matched.push(MatchedPair {
                    i,
                    j,
                    similarity: sim[i][j],
                    lambda: sim[i][j] / max,
                });
            }
            _ => out.unmatched_t.push(i),
        }
    }
    out.unmatched_prev = (0..n_prev).filter(|&j| !used[j]).collect();
    out
}

/// Matches the coherent motions of two frames by indicative-particle
/// similarity.
pub fn match_frames(
    regions_t: &[CoherentMotion],
    regions_prev: &[CoherentMotion],
    sim_cfg: &SimilarityConfig,
    cfg: &MiningConfig,
) -> Result<MatchResult> {
    cfg.validate()?;
    let all: Vec<CoherentMotion> = regions_t.iter().chain(regions_prev).cloned().collect();
    let n_t = regions_t.len();
    let s = similarity_matrix(&all, sim_cfg)?;
    let table: Vec<Vec<f64>> = (0..n_t)
        .map(|i| (0..regions_prev.len()).map(|j| s.get(i, n_t + j)).collect())
        .collect();
    Ok(match_similarities(
        &table,
        regions_prev.len(),
        cfg.match_min_sim,
    ))
}

/// Sum of `lambda * S_C` over matched pairs divided by the larger region
/// count.
pub fn matched_similarity(m: &MatchResult, n_t: usize, n_prev: usize) -> f64 {
    let denom = n_t.max(n_prev);
    if denom == 0 {
        return 0.0;
    }
    m.matched
        .iter()
        .map(|p| p.lambda * p.similarity)
        .sum::<f64>()
        / denom as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceCosts {
    /// `rho` per semantic region.
    pub rho: Vec<f64>,
    /// `counts[k][g]`: coherent motions of group `g` overlapping region `k`.
    pub counts: Vec<Vec<usize>>,
    pub k_s: f64,
    pub z: usize,
}

fn population_variance(v: &[usize]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<usize>() as f64 / n;
    v.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n
}

impl ImportanceCosts {
    /// Costs from per-region, per-group counts over `num_frames` frames.
    pub fn from_counts(counts: Vec<Vec<usize>>, z: usize, num_frames: usize) -> Self {
        let k_s = 1.0 / (num_frames.max(1) as f64).powi(2);
        let rho = counts
            .iter()
            .map(|c| (k_s * population_variance(c)).exp())
            .collect();
        ImportanceCosts {
            rho,
            counts,
            k_s,
            z,
        }
    }
}

/// Semantic regions a coherent motion touches (at least one pixel).
pub fn region_overlaps(m: &CoherentMotion, regions: &SemanticRegionMap) -> Vec<usize> {
    let mut ids: Vec<usize> = m
        .pixels
        .iter()
        .map(|&i| regions.labels[i])
        .filter(|&l| l != BACKGROUND)
        .map(|l| l as usize)
        .collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// `rho` of every semantic region from the pre-clustering of frames.
pub fn importance_costs(
    preclusters: &ClusterResult,
    motions_per_frame: &[Vec<CoherentMotion>],
    regions: &SemanticRegionMap,
) -> Result<ImportanceCosts> {
    if preclusters.labels.len() != motions_per_frame.len() {
        return Err(Error::validation(
            "pre-cluster labels do not match frame count",
        ));
    }
    let z = preclusters.k.max(1);
    let mut counts = vec![vec![0usize; z]; regions.count];
    for (frame, motions) in motions_per_frame.iter().enumerate() {
        let g = preclusters.labels[frame];
        for m in motions {
            for k in region_overlaps(m, regions) {
                counts[k][g] += 1;
            }
        }
    }
    Ok(ImportanceCosts::from_counts(
        counts,
        z,
        motions_per_frame.len(),
    ))
}

/// Mean of `1 / rho` over the overlapped regions; 1 with no overlap.
pub fn unmatching_cost(overlaps: &[usize], costs: &ImportanceCosts) -> f64 {
    if overlaps.is_empty() {
        return 1.0;
    }
    overlaps.iter().map(|&k| 1.0 / costs.rho[k]).sum::<f64>() / overlaps.len() as f64
}

/// Product of the unmatching costs of every unmatched region of both
/// frames.
pub fn unmatched_similarity(
    m: &MatchResult,
    overlaps_t: &[Vec<usize>],
    overlaps_prev: &[Vec<usize>],
    costs: &ImportanceCosts,
) -> f64 {
    let a = m
        .unmatched_t
        .iter()
        .map(|&i| unmatching_cost(&overlaps_t[i], costs));
    let b = m
        .unmatched_prev
        .iter()
        .map(|&j| unmatching_cost(&overlaps_prev[j], costs));
    a.chain(b).product()
}

pub fn frame_similarity(s_fu: f64, s_fm: f64) -> f64 {
    s_fu * s_fm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameClustering {
    /// Group of every frame.
    pub labels: Vec<usize>,
    pub k: usize,
    pub preclusters: ClusterResult,
    pub costs: ImportanceCosts,
}

/// Frame-level clustering: all-pairs region similarity, Hungarian matching
/// per frame pair, pre-clustering on the matched similarity, importance
/// costs, and the final clustering on the combined frame similarity.
pub fn cluster_frames(
    motions_per_frame: &[Vec<CoherentMotion>],
    regions: &SemanticRegionMap,
    sim_cfg: &SimilarityConfig,
    cfg: &MiningConfig,
    seed: u64,
) -> Result<FrameClustering> {
    cfg.validate()?;
    let n = motions_per_frame.len();
    if n < 2 {
        let costs = ImportanceCosts::from_counts(vec![vec![0]; regions.count], 1, n);
        let pre = ClusterResult {
            labels: vec![0; n],
            k: 1,
            eigenvalues: vec![0.0; n],
        };
        return Ok(FrameClustering {
            labels: vec![0; n],
            k: 1,
            preclusters: pre,
            costs,
        });
    }

    let flat: Vec<CoherentMotion> = motions_per_frame.iter().flatten().cloned().collect();
    let offsets: Vec<usize> = motions_per_frame
        .iter()
        .scan(0, |acc, m| {
            let o = *acc;
            *acc += m.len();
            Some(o)
        })
        .collect();
    let s_c = similarity_matrix(&flat, sim_cfg)?;
    let overlaps: Vec<Vec<Vec<usize>>> = motions_per_frame
        .iter()
        .map(|ms| ms.iter().map(|m| region_overlaps(m, regions)).collect())
        .collect();

    // each unordered pair is matched once, with the later frame as t
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|t| (0..t).map(move |p| (t, p))).collect();
    let matches: Vec<MatchResult> = pairs
        .par_iter()
        .map(|&(t, p)| {
            let table: Vec<Vec<f64>> = (0..motions_per_frame[t].len())
                .map(|i| {
                    (0..motions_per_frame[p].len())
                        .map(|j| s_c.get(offsets[t] + i, offsets[p] + j))
                        .collect()
                })
                .collect();
            match_similarities(&table, motions_per_frame[p].len(), cfg.match_min_sim)
        })
        .collect();

    let mut s_fm = vec![0.0; n * n];
    for (&(t, p), m) in pairs.iter().zip(&matches) {
        let v = matched_similarity(m, motions_per_frame[t].len(), motions_per_frame[p].len());
        s_fm[t * n + p] = v;
        s_fm[p * n + t] = v;
    }
    let pre = spectral::cluster(&SimilarityMatrix::new(n, s_fm.clone())?, None, seed)?;
    let costs = importance_costs(&pre, motions_per_frame, regions)?;

    let mut s_f = vec![0.0; n * n];
    for (&(t, p), m) in pairs.iter().zip(&matches) {
        let s_fu = unmatched_similarity(m, &overlaps[t], &overlaps[p], &costs);
        let v = frame_similarity(s_fu, s_fm[t * n + p]);
        s_f[t * n + p] = v;
        s_f[p * n + t] = v;
    }
    let fin = spectral::cluster(&SimilarityMatrix::new(n, s_f)?, cfg.num_groups, seed)?;
    Ok(FrameClustering {
        labels: fin.labels,
        k: fin.k,
        preclusters: pre,
        costs,
    })
}

/// Merged motion pattern of a coherent motion cluster: pixels carried by
/// more than `theta_mf` of the members get the member sum over `|psi|`.
pub fn merge_cluster(
    psi: &[&CoherentMotion],
    dims: GridDims,
    theta_mf: f64,
) -> Result<MotionField> {
    if psi.is_empty() {
        return Err(Error::validation("cannot merge an empty cluster"));
    }
    if psi.iter().any(|m| m.dims != dims) {
        return Err(Error::validation("cluster member dims differ"));
    }
    let mut sum = vec![Vec2::ZERO; dims.len()];
    let mut freq = vec![0usize; dims.len()];
    for m in psi {
        for (&i, &e) in m.pixels.iter().zip(&m.energy) {
            if !e.is_zero() {
                sum[i] += e;
                freq[i] += 1;
            }
        }
    }
    let n = psi.len() as f64;
    let vectors = sum
        .into_iter()
        .zip(freq)
        .map(|(s, f)| {
            if f as f64 / n > theta_mf {
                s / n
            } else {
                Vec2::ZERO
            }
        })
        .collect();
    MotionField::from_vec(dims, vectors)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowCurve {
    /// Pattern (coherent motion cluster) the curve summarizes.
    pub source: usize,
    pub points: Vec<[f64; 2]>,
    pub children: Vec<FlowCurve>,
}

impl FlowCurve {
    /// Points of this curve and all its descendants, depth first.
    pub fn all_points(&self) -> Vec<[f64; 2]> {
        let mut out = self.points.clone();
        for c in &self.children {
            out.extend(c.all_points());
        }
        out
    }
}

struct Tracer<'a> {
    dims: GridDims,
    field: &'a MotionField,
    support: Vec<bool>,
    visited: Vec<bool>,
    cfg: &'a MiningConfig,
    max_steps: usize,
}

struct Cut {
    a: f64,
    b: f64,
}

impl Cut {
    fn mid(&self) -> f64 {
        0.5 * (self.a + self.b)
    }

    fn half(&self) -> f64 {
        0.5 * (self.b - self.a) + 0.5
    }
}

impl<'a> Tracer<'a> {
    fn pixel(&self, p: Vec2) -> Option<usize> {
        let (x, y) = (p.x.round() as i64, p.y.round() as i64);
        self.dims
            .contains(x, y)
            .then(|| self.dims.index(x as usize, y as usize))
    }

    fn in_support(&self, p: Vec2) -> bool {
        self.pixel(p).is_some_and(|i| self.support[i])
    }

    /// Mean pattern direction over the 5x5 neighbourhood.
    fn direction(&self, p: Vec2) -> Option<Vec2> {
        let (cx, cy) = (p.x.round() as i64, p.y.round() as i64);
        let mut acc = Vec2::ZERO;
        for dy in -2..=2 {
            for dx in -2..=2 {
                let (x, y) = (cx + dx, cy + dy);
                if self.dims.contains(x, y) && self.support[self.dims.index(x as usize, y as usize)]
                {
                    acc += self.field.get(x as usize, y as usize);
                }
            }
        }
        let d = acc.normalized_or_zero(1e-300);
        (!d.is_zero()).then_some(d)
    }

    /// Runs of support along the line `q + t n`.
    fn cut(&self, q: Vec2, n: Vec2) -> Vec<Cut> {
        let reach = (self.dims.width + self.dims.height) as i64;
        let mut runs: Vec<Cut> = Vec::new();
        let mut open: Option<i64> = None;
        for t in -reach..=reach + 1 {
            let on = t <= reach && self.in_support(q + n * t as f64);
            match (on, open) {
                (true, None) => open = Some(t),
                (false, Some(a)) => {
                    let b = (t - 1) as f64;
                    match runs.last_mut() {
                        // single-pixel holes do not split a run
                        Some(last) if a as f64 - last.b <= 2.0 => last.b = b,
                        _ => runs.push(Cut { a: a as f64, b }),
                    }
                    open = None;
                }
                _ => {}
            }
        }
        runs
    }

    /// Support pixels in the strip swept from `s0` to `s1` with the given
    /// lateral half width.
    fn strip(&self, s0: Vec2, s1: Vec2, half: f64) -> Vec<usize> {
        let seg = s1 - s0;
        let len = seg.norm();
        if len == 0.0 {
            return Vec::new();
        }
        let e = seg / len;
        let n = e.perp();
        let r = (len + half).ceil() as i64 + 1;
        let (cx, cy) = (s0.x.round() as i64, s0.y.round() as i64);
        let mut out = Vec::new();
        for y in cy - r..=cy + r {
            for x in cx - r..=cx + r {
                if !self.dims.contains(x, y) {
                    continue;
                }
                let i = self.dims.index(x as usize, y as usize);
                if !self.support[i] {
                    continue;
                }
                let rel = Vec2::new(x as f64, y as f64) - s0;
                let t = rel.dot(e);
                if t >= 0.0 && t < len && rel.dot(n).abs() <= half {
                    out.push(i);
                }
            }
        }
        out
    }

    fn advect(&self, mut p: Vec2, mut d: Vec2) -> (Vec2, Vec2) {
        for _ in 0..self.cfg.num_mov {
            if let Some(nd) = self.direction(p) {
                d = nd;
            }
            p += d;
        }
        (p, self.direction(p).unwrap_or(d))
    }

    fn trace(&mut self, start: Vec2, lead: Option<Vec2>, source: usize, depth: usize) -> FlowCurve {
        let mut curve = FlowCurve {
            source,
            points: Vec::new(),
            children: Vec::new(),
        };
        let Some(d0) = self.direction(start) else {
            curve
                .points
                .extend(lead.iter().chain([&start]).map(|p| [p.x, p.y]));
            return curve;
        };
        let runs = self.cut(start, d0.perp());
        let (s0, half0) = match runs
            .iter()
            .min_by(|a, b| a.mid().abs().total_cmp(&b.mid().abs()))
        {
            Some(r) => (start + d0.perp() * r.mid(), r.half()),
            None => (start, 0.5),
        };
        let mut seg = vec![(s0, d0, half0)];
        let mut branches = Vec::new();

        for _ in 0..self.max_steps {
            let &(s, d, half) = seg.last().expect("nonempty");
            let (q, dq) = self.advect(s, d);
            let n = dq.perp();
            let window = half + self.cfg.num_mov as f64;
            let near: Vec<Cut> = self
                .cut(q, n)
                .into_iter()
                .filter(|r| r.a <= window && r.b >= -window)
                .collect();
            let wide: Vec<&Cut> = near
                .iter()
                .filter(|r| (r.b - r.a) as usize + 1 >= MIN_BRANCH_RUN)
                .collect();
            if wide.len() >= 2 && depth < MAX_BRANCH_DEPTH {
                branches = wide.iter().map(|r| q + n * r.mid()).collect();
                break;
            }
            let Some(run) = near
                .iter()
                .min_by(|a, b| a.mid().abs().total_cmp(&b.mid().abs()))
            else {
                break;
            };
            let next = q + n * run.mid();
            if self.pixel(next).is_none_or(|i| self.visited[i]) || (next - s).norm() < 1e-9 {
                break;
            }
            let w = half.max(run.half());
            for i in self.strip(s, next, w) {
                self.visited[i] = true;
            }
            seg.push((next, dq, run.half()));
        }

        // control points: ends of the march and the centroid of every strip
        let mut pts: Vec<Vec2> = Vec::with_capacity(seg.len() + 2);
        pts.extend(lead);
        pts.push(seg[0].0);
        for k in 1..seg.len() {
            let (a, _, ha) = seg[k - 1];
            let (b, _, hb) = seg[k];
            let pix = self.strip(a, b, ha.max(hb));
            if pix.is_empty() {
                continue;
            }
            let c = pix.iter().fold(Vec2::ZERO, |acc, &i| {
                let (x, y) = self.dims.coords(i);
                acc + Vec2::new(x as f64, y as f64)
            }) / pix.len() as f64;
            let c = if self.in_support(c) {
                c
            } else {
                nearest(&pix, c, self.dims)
            };
            pts.push(c);
        }
        if seg.len() > 1 {
            pts.push(seg[seg.len() - 1].0);
        }
        let pts = self.smooth(&pts, lead.is_some());
        curve.points = dedup_points(&pts);

        let tail = pts.last().copied().unwrap_or(s0);
        for b in branches {
            let child = self.trace(b, Some(tail), source, depth + 1);
            if child.points.len() >= 2 {
                curve.children.push(child);
            }
        }
        curve
    }

    /// Moving average with fixed end points; points that would leave the
    /// support keep their raw position.
    fn smooth(&self, pts: &[Vec2], _lead: bool) -> Vec<Vec2> {
        let h = self.cfg.smoothing_window / 2;
        if h == 0 || pts.len() < 3 {
            return pts.to_vec();
        }
        (0..pts.len())
            .map(|i| {
                if i == 0 || i + 1 == pts.len() {
                    return pts[i];
                }
                let lo = i.saturating_sub(h);
                let hi = (i + h).min(pts.len() - 1);
                let m = pts[lo..=hi].iter().fold(Vec2::ZERO, |a, &p| a + p) / (hi - lo + 1) as f64;
                if self.in_support(m) {
                    m
                } else {
                    pts[i]
                }
            })
            .collect()
    }
}

fn nearest(pix: &[usize], c: Vec2, dims: GridDims) -> Vec2 {
    pix.iter()
        .map(|&i| {
            let (x, y) = dims.coords(i);
            Vec2::new(x as f64, y as f64)
        })
        .min_by(|a, b| (*a - c).norm_sq().total_cmp(&(*b - c).norm_sq()))
        .unwrap_or(c)
}

fn dedup_points(pts: &[Vec2]) -> Vec<[f64; 2]> {
    let mut out: Vec<[f64; 2]> = Vec::with_capacity(pts.len());
    for p in pts {
        if out
            .last()
            .is_none_or(|l| (l[0] - p.x).abs() > 1e-9 || (l[1] - p.y).abs() > 1e-9)
        {
            out.push([p.x, p.y]);
        }
    }
    out
}

/// Opening with a 3x3 element, then removal of components smaller than
/// [`MIN_COMPONENT_SHARE`] of the largest. Merged patterns carry speckle
/// from diffusion fringes that would otherwise grow skeleton spurs and
/// split perpendicular cuts.
fn clean_support(dims: GridDims, raw: &[bool]) -> Vec<bool> {
    let opened = raster::dilate(dims, &raster::erode(dims, raw));
    let opened: Vec<bool> = opened.iter().zip(raw).map(|(a, b)| *a && *b).collect();
    let (labels, n) = raster::connected_components(dims, &opened);
    let mut sizes = vec![0usize; n + 1];
    for &l in &labels {
        sizes[l as usize] += 1;
    }
    let largest = sizes[1..].iter().copied().max().unwrap_or(0);
    labels
        .iter()
        .map(|&l| l != 0 && sizes[l as usize] as f64 >= MIN_COMPONENT_SHARE * largest as f64)
        .collect()
}

/// Flow curve of a motion pattern: starts at the skeleton end point lying
/// furthest against the mean flow, marches `num_mov` advection steps at a
/// time, cuts the support perpendicular to the flow at every stop, links
/// the centroids of the pieces between consecutive cuts and smooths them.
/// A cut that meets two separate pieces of the support starts one child
/// curve per piece.
pub fn extract_flow_curve(
    pattern: &MotionField,
    cfg: &MiningConfig,
    source: usize,
) -> Result<FlowCurve> {
    cfg.validate()?;
    let dims = pattern.dims();
    let raw: Vec<bool> = pattern.vectors().iter().map(|v| !v.is_zero()).collect();
    if !raw.iter().any(|&s| s) {
        return Err(Error::validation("motion pattern has empty support"));
    }
    let support = clean_support(dims, &raw);
    let count = support.iter().filter(|&&s| s).count();
    if count == 0 {
        return Err(Error::validation(
            "motion pattern too thin for a flow curve",
        ));
    }
    let mean_flow = (0..dims.len())
        .filter(|&i| support[i])
        .fold(Vec2::ZERO, |a, i| a + pattern.vectors()[i]);
    let centroid = (0..dims.len())
        .filter(|&i| support[i])
        .fold(Vec2::ZERO, |a, i| {
            let (x, y) = dims.coords(i);
            a + Vec2::new(x as f64, y as f64)
        })
        / count as f64;

    let skel = raster::skeletonize(dims, &support);
    let ends: Vec<usize> = (0..dims.len())
        .filter(|&i| skel[i] && dims.neighbors8(i).filter(|&n| skel[n]).count() == 1)
        .collect();
    let has_ends = !ends.is_empty();
    let candidates: Vec<usize> = if has_ends {
        ends
    } else if skel.iter().any(|&s| s) {
        (0..dims.len()).filter(|&i| skel[i]).collect()
    } else {
        (0..dims.len()).filter(|&i| support[i]).collect()
    };
    let dir = mean_flow.normalized_or_zero(1e-300);
    let pos = |i: usize| {
        let (x, y) = dims.coords(i);
        Vec2::new(x as f64, y as f64)
    };
    let start = candidates
        .iter()
        .copied()
        .min_by(|&a, &b| {
            (pos(a) - centroid)
                .dot(dir)
                .total_cmp(&(pos(b) - centroid).dot(dir))
        })
        .expect("nonempty candidates");

    let mut tracer = Tracer {
        dims,
        field: pattern,
        support,
        visited: vec![false; dims.len()],
        cfg,
        max_steps: 4 * (dims.width + dims.height) / cfg.num_mov + 4,
    };
    // skeleton ends sit about half a width inside the support; back up
    // against the flow to the support edge
    let mut p = pos(start);
    if has_ends {
        for _ in 0..dims.width.max(dims.height) / 4 {
            let Some(d) = tracer.direction(p) else { break };
            if !tracer.in_support(p - d) {
                break;
            }
            p = p - d;
        }
    }
    let curve = tracer.trace(p, None, source, 0);
    if curve.points.len() < 2 {
        return Err(Error::validation(
            "motion pattern too small for a flow curve",
        ));
    }
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivityGroup {
    pub frames: Vec<usize>,
    /// Members of every coherent motion cluster as (frame, motion index).
    pub clusters: Vec<Vec<(usize, usize)>>,
    pub patterns: Vec<MotionField>,
    pub curves: Vec<Option<FlowCurve>>,
}

/// Splits the frames of every group into coherent motion clusters, merges
/// each cluster into a motion pattern and extracts its flow curve.
pub fn build_groups(
    motions_per_frame: &[Vec<CoherentMotion>],
    clustering: &FrameClustering,
    dims: GridDims,
    sim_cfg: &SimilarityConfig,
    cfg: &MiningConfig,
    seed: u64,
) -> Result<Vec<ActivityGroup>> {
    let mut groups = Vec::with_capacity(clustering.k);
    for g in 0..clustering.k {
        let frames: Vec<usize> = (0..clustering.labels.len())
            .filter(|&f| clustering.labels[f] == g)
            .collect();
        let members: Vec<(usize, usize)> = frames
            .iter()
            .flat_map(|&f| (0..motions_per_frame[f].len()).map(move |i| (f, i)))
            .collect();
        let mut clusters: Vec<Vec<(usize, usize)>> = Vec::new();
        if !members.is_empty() {
            let ms: Vec<CoherentMotion> = members
                .iter()
                .map(|&(f, i)| motions_per_frame[f][i].clone())
                .collect();
            let r = spectral::cluster(&similarity_matrix(&ms, sim_cfg)?, None, seed)?;
            clusters = vec![Vec::new(); r.k];
            for (m, &l) in members.iter().zip(&r.labels) {
                clusters[l].push(*m);
            }
        }
        let mut patterns = Vec::with_capacity(clusters.len());
        let mut curves = Vec::with_capacity(clusters.len());
        for (j, c) in clusters.iter().enumerate() {
            let psi: Vec<&CoherentMotion> =
                c.iter().map(|&(f, i)| &motions_per_frame[f][i]).collect();
            let pattern = merge_cluster(&psi, dims, cfg.theta_mf)?;
            curves.push(extract_flow_curve(&pattern, cfg, j).ok());
            patterns.push(pattern);
        }
        groups.push(ActivityGroup {
            frames,
            clusters,
            patterns,
            curves,
        });
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, scenes};

    fn motion(dims: GridDims, pixels: &[usize], e: Vec2) -> CoherentMotion {
        let tef = MotionField::constant(dims, e);
        CoherentMotion::from_mask(0, 0, dims, pixels.to_vec(), &tef)
    }

    #[test]
    fn identical_frames_match_perfectly() {
        let s = vec![vec![5.0, 1.0], vec![0.0, 3.0]];
        let m = match_similarities(&s, 2, 0.1);
        assert_eq!(m.matched.len(), 2);
        assert!(m.unmatched_t.is_empty() && m.unmatched_prev.is_empty());
        assert_eq!(m.matched[0].lambda, 1.0);
        assert_eq!(m.matched[1].lambda, 0.6);
    }

    #[test]
    fn empty_frame_leaves_all_unmatched() {
        let m = match_similarities(&[vec![], vec![]], 0, 0.1);
        assert_eq!(m.unmatched_t, vec![0, 1]);
        let m = match_similarities(&[], 3, 0.1);
        assert_eq!(m.unmatched_prev, vec![0, 1, 2]);
        assert_eq!(matched_similarity(&m, 0, 3), 0.0);
        assert_eq!(matched_similarity(&m, 0, 0), 0.0);
    }

    #[test]
    fn weak_pairs_dropped() {
        let s = vec![vec![10.0, 0.0], vec![0.0, 0.5]];
        let m = match_similarities(&s, 2, 0.1);
        assert_eq!(m.matched.len(), 1);
        assert_eq!(m.unmatched_t, vec![1]);
        assert_eq!(m.unmatched_prev, vec![1]);
    }

    #[test]
    fn matched_similarity_by_hand() {
        let m = MatchResult {
            matched: vec![
                MatchedPair {
                    i: 0,
                    j: 0,
                    similarity: 10.0,
                    lambda: 1.0,
                },
                MatchedPair {
                    i: 1,
                    j: 2,
                    similarity: 4.0,
                    lambda: 0.4,
                },
            ],
            unmatched_t: vec![],
            unmatched_prev: vec![1],
        };
        assert!((matched_similarity(&m, 2, 3) - (10.0 + 1.6) / 3.0).abs() < 1e-12);
        let single = MatchResult {
            matched: vec![MatchedPair {
                i: 0,
                j: 0,
                similarity: 10.0,
                lambda: 1.0,
            }],
            ..Default::default()
        };
        assert_eq!(matched_similarity(&single, 1, 1), 10.0);
    }

    #[test]
    fn rho_values() {
        let c = ImportanceCosts::from_counts(vec![vec![3, 3], vec![4, 0], vec![8, 0]], 2, 10);
        assert_eq!(c.rho[0], 1.0);
        assert!((c.rho[1] - (0.04f64).exp()).abs() < 1e-12);
        assert!((c.rho[1] - 1.0408).abs() < 1e-4);
        assert!(c.rho[2] > c.rho[1]);
    }

    #[test]
    fn unmatched_costs() {
        let costs = ImportanceCosts {
            rho: vec![1.0, 4.0, 2.0],
            counts: vec![],
            k_s: 0.01,
            z: 2,
        };
        let none = MatchResult::default();
        assert_eq!(unmatched_similarity(&none, &[], &[], &costs), 1.0);
        let one = MatchResult {
            unmatched_t: vec![0],
            ..Default::default()
        };
        assert_eq!(unmatched_similarity(&one, &[vec![2]], &[], &costs), 0.5);
        assert_eq!(
            unmatched_similarity(&one, &[vec![0, 1]], &[], &costs),
            0.625
        );
        assert_eq!(unmatched_similarity(&one, &[vec![]], &[], &costs), 1.0);
        assert_eq!(frame_similarity(0.625, 10.0), 6.25);
        assert_eq!(frame_similarity(1.0, 7.0), 7.0);
        assert_eq!(frame_similarity(0.3, 0.0), 0.0);
    }

    #[test]
    fn merge_single_member_is_masked_tef() {
        let dims = GridDims::new(4, 4).unwrap();
        let m = motion(dims, &[1, 2, 5], Vec2::new(1.0, 2.0));
        let out = merge_cluster(&[&m], dims, 0.4).unwrap();
        assert_eq!(out, m.masked_tef());
    }

    #[test]
    fn merge_by_hand() {
        let dims = GridDims::new(3, 1).unwrap();
        let a = motion(dims, &[0, 1], Vec2::new(1.0, 0.0));
        let b = motion(dims, &[1], Vec2::new(0.0, 1.0));
        let out = merge_cluster(&[&a, &b], dims, 0.4).unwrap();
        assert_eq!(out.vectors()[1], Vec2::new(0.5, 0.5));
        assert_eq!(out.vectors()[0], Vec2::new(0.5, 0.0));
        assert_eq!(out.vectors()[2], Vec2::ZERO);

        let ms: Vec<CoherentMotion> = (0..5)
            .map(|k| motion(dims, if k < 2 { &[0] } else { &[2] }, Vec2::new(1.0, 0.0)))
            .collect();
        let refs: Vec<&CoherentMotion> = ms.iter().collect();
        let out = merge_cluster(&refs, dims, 0.4).unwrap();
        assert_eq!(out.vectors()[0], Vec2::ZERO);
        assert_eq!(out.vectors()[2], Vec2::new(0.6, 0.0));
    }

    #[test]
    fn straight_lane_curve_follows_centerline() {
        let dims = GridDims::new(64, 16).unwrap();
        let f = MotionField::constant(dims, Vec2::new(1.0, 0.0));
        let c = extract_flow_curve(&f, &MiningConfig::default(), 0).unwrap();
        assert!(c.children.is_empty());
        assert!(c.points.len() > 5);
        for p in &c.points {
            assert!((p[1] - 7.5).abs() <= 2.0, "{p:?}");
        }
        assert!(c.points.windows(2).all(|w| w[1][0] > w[0][0]));
        assert!(
            c.points[0][0] < 4.0 && c.points.last().unwrap()[0] > 56.0,
            "{:?}",
            c.points
        );
    }

    #[test]
    fn annulus_curve_stays_on_mid_radius() {
        let (seq, _) = generate(&scenes::annulus(0.0, 0, 1)).unwrap();
        let c = extract_flow_curve(&seq.frames()[0], &MiningConfig::default(), 0).unwrap();
        let pts = c.all_points();
        assert!(pts.len() > 15);
        for p in &pts {
            let r = ((p[0] - 31.5).powi(2) + (p[1] - 31.5).powi(2)).sqrt();
            assert!((r - 21.0).abs() <= 3.0, "{p:?} r={r}");
        }
    }

    #[test]
    fn y_branch_has_two_children() {
        let (seq, _) = generate(&scenes::y_branch(0.0, 0, 1)).unwrap();
        let f = &seq.frames()[0];
        let c = extract_flow_curve(f, &MiningConfig::default(), 0).unwrap();
        assert_eq!(c.children.len(), 2, "{c:?}");
        for p in c.all_points() {
            let i = f.dims().index(p[0].round() as usize, p[1].round() as usize);
            assert!(!f.vectors()[i].is_zero(), "{p:?} off support");
        }
    }

    #[test]
    fn empty_pattern_rejected() {
        let f = MotionField::zeros(GridDims::new(8, 8).unwrap());
        assert!(extract_flow_curve(&f, &MiningConfig::default(), 0).is_err());
    }
}
