//! Coherent motion extraction from a thermal energy field.
//!
//! Randomly sampled particles are linked by a Delaunay triangulation. A link
//! whose energy difference per unit length is large crosses the border
//! between two coherent motions. Crossing links are drawn into a boundary
//! image, and a marker watershed over its distance transform fills the
//! regions between boundaries. Small or weak regions are dropped as
//! background.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{ThermalEnergyField, NORMALIZE_EPS};
use crate::error::{Error, Result};
use crate::field::{GridDims, MotionField, Particle, Vec2};
use crate::raster;

const MAX_TRIANGULATION_RETRIES: usize = 8;

/// Default link-weight cutoff (radians of direction change per pixel,
/// roughly).
pub const DEFAULT_WEIGHT_THRESHOLD: f64 = 0.1;

/// Share of the 95th-percentile energy magnitude below which a pixel is
/// background.
pub const DEFAULT_FLOOR_FRACTION: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationConfig {
    /// Triangulation samples; `None` means `max(256, w*h/64)`.
    pub sample_count: Option<usize>,
    /// Boundary link-weight cutoff; `None` picks Otsu's threshold over the
    /// frame's foreground link weights.
    pub weight_threshold: Option<f64>,
    pub min_region_area: usize,
    /// Minimum energy magnitude of a region pixel and of a region's mean;
    /// `None` means 30% of the frame's 95th-percentile magnitude.
    pub magnitude_floor: Option<f64>,
    pub rng_seed: u64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            sample_count: None,
            weight_threshold: Some(DEFAULT_WEIGHT_THRESHOLD),
            min_region_area: 64,
            magnitude_floor: None,
            rng_seed: 0,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if matches!(self.sample_count, Some(n) if n < 3) {
            return Err(Error::validation("sample_count must be >= 3"));
        }
        if matches!(self.weight_threshold, Some(t) if !(t > 0.0)) {
            return Err(Error::validation("weight_threshold must be > 0"));
        }
        if self.min_region_area < 1 {
            return Err(Error::validation("min_region_area must be >= 1"));
        }
        if matches!(self.magnitude_floor, Some(m) if !(m >= 0.0)) {
            return Err(Error::validation("magnitude_floor must be >= 0"));
        }
        Ok(())
    }

    pub fn effective_sample_count(&self, dims: GridDims) -> usize {
        self.sample_count
            .unwrap_or_else(|| (dims.len() / 64).max(256))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangulationGraph {
    pub samples: Vec<Particle>,
    pub edges: Vec<(usize, usize)>,
}

/// One coherent motion: a 4-connected region of a single TEF.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherentMotion {
    pub id: usize,
    pub frame: usize,
    pub dims: GridDims,
    /// Sorted pixel indices of the region.
    pub pixels: Vec<usize>,
    /// Energy of each pixel, parallel to `pixels`.
    pub energy: Vec<Vec2>,
    /// Sorted pixel indices on the region border.
    pub boundary: Vec<usize>,
    /// Indicative boundary particles; filled by the semantic-region stage.
    #[serde(default)]
    pub indicative: Vec<usize>,
}

impl CoherentMotion {
    pub fn from_mask(
        id: usize,
        frame: usize,
        dims: GridDims,
        pixels: Vec<usize>,
        tef: &MotionField,
    ) -> Self {
        let mut pixels = pixels;
        pixels.sort_unstable();
        pixels.dedup();
        let energy = pixels.iter().map(|&i| tef.vectors()[i]).collect();
        let mask = raster::mask_from_pixels(dims, &pixels);
        let boundary = raster::mask_boundary(dims, &mask);
        CoherentMotion {
            id,
            frame,
            dims,
            pixels,
            energy,
            boundary,
            indicative: Vec::new(),
        }
    }

    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn contains(&self, idx: usize) -> bool {
        self.pixels.binary_search(&idx).is_ok()
    }

    /// Energy at a pixel, zero outside the region.
    pub fn energy_at(&self, idx: usize) -> Vec2 {
        match self.pixels.binary_search(&idx) {
            Ok(k) => self.energy[k],
            Err(_) => Vec2::ZERO,
        }
    }

    pub fn mask(&self) -> Vec<bool> {
        raster::mask_from_pixels(self.dims, &self.pixels)
    }

    /// The region's TEF with zeros outside the mask.
    pub fn masked_tef(&self) -> MotionField {
        let mut f = MotionField::zeros(self.dims);
        for (&i, &e) in self.pixels.iter().zip(&self.energy) {
            f.vectors_mut()[i] = e;
        }
        f
    }

    pub fn mean_energy(&self) -> Vec2 {
        if self.energy.is_empty() {
            return Vec2::ZERO;
        }
        self.energy.iter().fold(Vec2::ZERO, |a, &e| a + e) / self.energy.len() as f64
    }

    pub fn mean_magnitude(&self) -> f64 {
        if self.energy.is_empty() {
            return 0.0;
        }
        self.energy.iter().map(|e| e.norm()).sum::<f64>() / self.energy.len() as f64
    }

    /// `(min_x, min_y, max_x, max_y)`, inclusive.
    pub fn bounding_box(&self) -> (usize, usize, usize, usize) {
        let mut bb = (usize::MAX, usize::MAX, 0, 0);
        for &i in &self.pixels {
            let (x, y) = self.dims.coords(i);
            bb.0 = bb.0.min(x);
            bb.1 = bb.1.min(y);
            bb.2 = bb.2.max(x);
            bb.3 = bb.3.max(y);
        }
        bb
    }
}

/// Delaunay triangulation of an explicit point set. Returns `None` when
/// the points are degenerate (all collinear or fewer than three).
pub fn triangulate_points(samples: Vec<Particle>) -> Option<TriangulationGraph> {
    let pts: Vec<delaunator::Point> = samples
        .iter()
        .map(|s| delaunator::Point { x: s.p.x, y: s.p.y })
        .collect();
    let tri = delaunator::triangulate(&pts);
    if tri.triangles.is_empty() {
        return None;
    }
    let mut set = HashSet::new();
    for t in tri.triangles.chunks_exact(3) {
        for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            set.insert((a.min(b), a.max(b)));
        }
    }
    let mut edges: Vec<(usize, usize)> = set.into_iter().collect();
    edges.sort_unstable();
    Some(TriangulationGraph { samples, edges })
}

/// Pixels spaced about `spacing` apart along the grid border, corners
/// included.
fn border_pixels(dims: GridDims, spacing: usize) -> Vec<usize> {
    let (w, h) = (dims.width, dims.height);
    let steps = |len: usize| {
        let mut v: Vec<usize> = (0..len).step_by(spacing.max(1)).collect();
        if *v.last().unwrap() != len - 1 {
            v.push(len - 1);
        }
        v
    };
    let mut out = Vec::new();
    for x in steps(w) {
        out.push(dims.index(x, 0));
        out.push(dims.index(x, h - 1));
    }
    for y in steps(h) {
        out.push(dims.index(0, y));
        out.push(dims.index(w - 1, y));
    }
    out
}

/// Samples distinct pixels with the seeded generator, adds evenly spaced
/// pixels along the grid border so that boundaries reach the image edge,
/// and triangulates them.
pub fn triangulate(dims: GridDims, cfg: &SegmentationConfig) -> Result<TriangulationGraph> {
    let n = cfg.effective_sample_count(dims);
    if n < 3 {
        return Err(Error::validation("sample_count must be >= 3"));
    }
    if n > dims.len() {
        return Err(Error::validation(format!(
            "sample_count {n} exceeds pixel count {}",
            dims.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    for _ in 0..MAX_TRIANGULATION_RETRIES {
        let mut idx = rand::seq::index::sample(&mut rng, dims.len(), n).into_vec();
        let spacing = ((dims.len() as f64 / n as f64).sqrt().round() as usize).max(1);
        idx.extend(border_pixels(dims, spacing));
        idx.sort_unstable();
        idx.dedup();
        let samples = idx
            .into_iter()
            .map(|i| {
                let (x, y) = dims.coords(i);
                Particle::at_pixel(x, y)
            })
            .collect();
        if let Some(g) = triangulate_points(samples) {
            return Ok(g);
        }
    }
    Err(Error::validation(
        "could not obtain a non-degenerate triangulation sample",
    ))
}

/// Difference of the energy directions per unit distance between two
/// linked particles. Both energies are scaled to unit length first, so the
/// weight ranges over `[0, 2 / |p - q|]` whatever the field's magnitude.
pub fn link_weight(p: Particle, q: Particle, tef: &ThermalEnergyField) -> f64 {
    let ep = energy_at(tef, p).normalized_or_zero(NORMALIZE_EPS);
    let eq = energy_at(tef, q).normalized_or_zero(NORMALIZE_EPS);
    (ep - eq).norm() / (p.p - q.p).norm()
}

fn energy_at(tef: &ThermalEnergyField, p: Particle) -> Vec2 {
    let dims = tef.dims();
    let x = (p.p.x.round() as i64).clamp(0, dims.width as i64 - 1) as usize;
    let y = (p.p.y.round() as i64).clamp(0, dims.height as i64 - 1) as usize;
    tef.get(x, y)
}

/// Otsu's threshold over a sample of non-negative values (256-bin
/// histogram over `[0, max]`). Returns `None` when all values coincide.
pub fn otsu_threshold(values: &[f64]) -> Option<f64> {
    const BINS: usize = 256;
    let max = values.iter().copied().fold(0.0, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if values.is_empty() || !(max > min) {
        return None;
    }
    let width = (max - min) / BINS as f64;
    let mut hist = [0usize; BINS];
    for &v in values {
        let b = (((v - min) / width) as usize).min(BINS - 1);
        hist[b] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (i, &c) in hist.iter().enumerate().take(BINS - 1) {
        w0 += c as f64;
        sum0 += i as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best.0 {
            best = (between, i);
        }
    }
    Some(min + (best.1 + 1) as f64 * width)
}

/// Link weights of every triangulation edge, in edge order.
pub fn edge_weights(graph: &TriangulationGraph, tef: &ThermalEnergyField) -> Vec<f64> {
    graph
        .edges
        .iter()
        .map(|&(a, b)| link_weight(graph.samples[a], graph.samples[b], tef))
        .collect()
}

/// Threshold actually applied to a frame's links.
pub fn resolve_threshold(weights: &[f64], cfg: &SegmentationConfig) -> f64 {
    match cfg.weight_threshold {
        Some(t) => t,
        None => otsu_threshold(weights).unwrap_or(f64::INFINITY),
    }
}

/// Links with both ends at or above `floor`, with their weights.
fn foreground_links(
    graph: &TriangulationGraph,
    tef: &ThermalEnergyField,
    floor: f64,
) -> (Vec<(usize, usize)>, Vec<f64>) {
    let fg: Vec<(usize, usize)> = graph
        .edges
        .iter()
        .copied()
        .filter(|&(a, b)| {
            energy_at(tef, graph.samples[a]).norm() >= floor
                && energy_at(tef, graph.samples[b]).norm() >= floor
        })
        .collect();
    let weights = fg
        .iter()
        .map(|&(a, b)| link_weight(graph.samples[a], graph.samples[b], tef))
        .collect();
    (fg, weights)
}

/// Edges whose link weight exceeds the boundary threshold. Only links with
/// both ends at or above `floor` take part; links into background are left
/// to the magnitude mask.
pub fn detect_boundaries(
    graph: &TriangulationGraph,
    tef: &ThermalEnergyField,
    cfg: &SegmentationConfig,
    floor: f64,
) -> Vec<(usize, usize)> {
    let (fg, weights) = foreground_links(graph, tef, floor);
    let threshold = resolve_threshold(&weights, cfg);
    crossing_links(fg, &weights, threshold)
}

fn crossing_links(fg: Vec<(usize, usize)>, weights: &[f64], threshold: f64) -> Vec<(usize, usize)> {
    fg.into_iter()
        .zip(weights)
        .filter(|(_, &w)| w > threshold)
        .map(|(e, _)| e)
        .collect()
}

/// Joins flooded regions whose shared border is weak: the mean
/// unit-direction difference over 4-adjacent pixel pairs straddling the
/// border is at most `threshold`. Catches markers split off by a few
/// spurious crossing links. Only regions of at least `min_area` pixels
/// take part, so small fragments cannot bridge two regions, and the border
/// must span `sqrt(min_area)` pixel pairs.
pub fn merge_weak_borders(
    tef: &ThermalEnergyField,
    labels: &mut [u32],
    threshold: f64,
    min_area: usize,
) {
    let dims = tef.dims();
    let n = labels.iter().copied().max().unwrap_or(0) as usize;
    if n < 2 {
        return;
    }
    let mut area = vec![0usize; n + 1];
    for &l in labels.iter() {
        area[l as usize] += 1;
    }
    let unit: Vec<Vec2> = tef
        .vectors()
        .iter()
        .map(|v| v.normalized_or_zero(NORMALIZE_EPS))
        .collect();
    let mut border: BTreeMap<(u32, u32), (f64, usize)> = BTreeMap::new();
    for i in 0..dims.len() {
        let (x, y) = dims.coords(i);
        for j in [
            (x + 1 < dims.width).then(|| i + 1),
            (y + 1 < dims.height).then(|| i + dims.width),
        ]
        .into_iter()
        .flatten()
        {
            let (a, b) = (labels[i], labels[j]);
            if a != 0
                && b != 0
                && a != b
                && area[a as usize] >= min_area
                && area[b as usize] >= min_area
            {
                let e = border.entry((a.min(b), a.max(b))).or_insert((0.0, 0));
                e.0 += (unit[i] - unit[j]).norm();
                e.1 += 1;
            }
        }
    }
    let mut parent: Vec<u32> = (0..=n as u32).collect();
    fn find(parent: &mut [u32], mut i: u32) -> u32 {
        while parent[i as usize] != i {
            parent[i as usize] = parent[parent[i as usize] as usize];
            i = parent[i as usize];
        }
        i
    }
    let min_border = (min_area as f64).sqrt().ceil() as usize;
    for (&(a, b), &(sum, count)) in &border {
        if count >= min_border && sum / count as f64 <= threshold {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra.max(rb) as usize] = ra.min(rb);
            }
        }
    }
    for l in labels.iter_mut().filter(|l| **l != 0) {
        *l = find(&mut parent, *l);
    }
}

/// Background floor on pixel and mean region energy.
pub fn resolve_magnitude_floor(tef: &ThermalEnergyField, cfg: &SegmentationConfig) -> f64 {
    if let Some(m) = cfg.magnitude_floor {
        return m;
    }
    let mut mags: Vec<f64> = tef.vectors().iter().map(|v| v.norm()).collect();
    mags.sort_by(f64::total_cmp);
    let rank = ((mags.len() - 1) as f64 * 0.95).round() as usize;
    DEFAULT_FLOOR_FRACTION * mags[rank]
}

#[derive(PartialEq, Eq)]
struct FloodItem {
    depth: u64,
    order: u64,
    idx: usize,
}

impl Ord for FloodItem {
    fn cmp(&self, o: &Self) -> Ordering {
        // deepest first, then first-in first-out
        self.depth
            .cmp(&o.depth)
            .then_with(|| o.order.cmp(&self.order))
    }
}

impl PartialOrd for FloodItem {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

/// Grows labelled markers over `domain`, visiting pixels far from any
/// boundary first. Each pixel joins its deepest labelled 4-neighbour.
pub fn flood(dims: GridDims, dist_sq: &[u64], mut labels: Vec<u32>, domain: &[bool]) -> Vec<u32> {
    let mut heap = BinaryHeap::new();
    let mut order = 0u64;
    let mut queued = vec![false; dims.len()];
    for i in 0..dims.len() {
        if labels[i] != 0 || !domain[i] {
            continue;
        }
        if dims.neighbors4(i).any(|n| labels[n] != 0) {
            queued[i] = true;
            heap.push(FloodItem {
                depth: dist_sq[i],
                order,
                idx: i,
            });
            order += 1;
        }
    }
    while let Some(FloodItem { idx, .. }) = heap.pop() {
        // adopt the label of the deepest labelled neighbour
        let mut best: Option<(u64, u32)> = None;
        for n in dims.neighbors4(idx) {
            if labels[n] != 0 && best.is_none_or(|(d, _)| dist_sq[n] > d) {
                best = Some((dist_sq[n], labels[n]));
            }
        }
        let Some((_, lab)) = best else { continue };
        labels[idx] = lab;
        for n in dims.neighbors4(idx) {
            if labels[n] == 0 && !queued[n] && domain[n] {
                queued[n] = true;
                heap.push(FloodItem {
                    depth: dist_sq[n],
                    order,
                    idx: n,
                });
                order += 1;
            }
        }
    }
    labels
}

/// Boundary image of the crossing links: Bresenham lines dilated by one
/// pixel.
pub fn boundary_image(
    dims: GridDims,
    graph: &TriangulationGraph,
    crossing: &[(usize, usize)],
) -> Vec<bool> {
    let mut img = vec![false; dims.len()];
    for &(a, b) in crossing {
        let pa = graph.samples[a].p;
        let pb = graph.samples[b].p;
        raster::bresenham(
            (pa.x.round() as i64, pa.y.round() as i64),
            (pb.x.round() as i64, pb.y.round() as i64),
            |x, y| {
                if dims.contains(x, y) {
                    img[dims.index(x as usize, y as usize)] = true;
                }
            },
        );
    }
    raster::dilate(dims, &img)
}

/// Watershed markers from the triangulation: samples in `domain` joined by
/// non-crossing links form one marker each. Returns a label per pixel,
/// non-zero only at sample pixels.
pub fn graph_markers(
    dims: GridDims,
    graph: &TriangulationGraph,
    crossing: &[(usize, usize)],
    domain: &[bool],
) -> Vec<u32> {
    let n = graph.samples.len();
    let pix: Vec<usize> = graph
        .samples
        .iter()
        .map(|s| dims.index(s.p.x.round() as usize, s.p.y.round() as usize))
        .collect();
    let cut: HashSet<(usize, usize)> = crossing.iter().copied().collect();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for &(a, b) in &graph.edges {
        if domain[pix[a]] && domain[pix[b]] && !cut.contains(&(a, b)) {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
    }
    let mut ids = vec![0u32; n];
    let mut next = 0u32;
    let mut labels = vec![0u32; dims.len()];
    for i in 0..n {
        if !domain[pix[i]] {
            continue;
        }
        let r = find(&mut parent, i);
        if ids[r] == 0 {
            next += 1;
            ids[r] = next;
        }
        labels[pix[i]] = ids[r];
    }
    labels
}

/// Full segmentation of one TEF into coherent motions.
pub fn segment(tef: &ThermalEnergyField, cfg: &SegmentationConfig) -> Result<Vec<CoherentMotion>> {
    segment_frame(tef, cfg, 0)
}

/// [`segment`] with the source frame index recorded on each region.
pub fn segment_frame(
    tef: &ThermalEnergyField,
    cfg: &SegmentationConfig,
    frame: usize,
) -> Result<Vec<CoherentMotion>> {
    cfg.validate()?;
    let dims = tef.dims();
    let floor = resolve_magnitude_floor(tef, cfg);
    if tef.vectors().iter().all(|v| v.norm() <= floor) && floor == 0.0 {
        return Ok(Vec::new());
    }
    let graph = triangulate(dims, cfg)?;
    let (fg, weights) = foreground_links(&graph, tef, floor);
    let threshold = resolve_threshold(&weights, cfg);
    let crossing = crossing_links(fg, &weights, threshold);
    let boundary = boundary_image(dims, &graph, &crossing);
    let dist_sq = raster::distance_transform_sq(dims, &boundary);
    let domain: Vec<bool> = tef
        .vectors()
        .iter()
        .map(|v| v.norm() >= floor && !v.is_zero())
        .collect();
    let markers = graph_markers(dims, &graph, &crossing, &domain);
    let mut labels = flood(dims, &dist_sq, markers, &domain);
    merge_weak_borders(tef, &mut labels, threshold, cfg.min_region_area);

    let n_labels = labels.iter().copied().max().unwrap_or(0) as usize;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_labels + 1];
    for (i, &l) in labels.iter().enumerate() {
        if l != 0 {
            members[l as usize].push(i);
        }
    }
    let mut out = Vec::new();
    for pixels in members.into_iter().skip(1) {
        if pixels.len() < cfg.min_region_area {
            continue;
        }
        let mean_mag =
            pixels.iter().map(|&i| tef.vectors()[i].norm()).sum::<f64>() / pixels.len() as f64;
        if !(mean_mag >= floor) || mean_mag == 0.0 {
            continue;
        }
        out.push(CoherentMotion::from_mask(
            out.len(),
            frame,
            dims,
            pixels,
            tef,
        ));
    }
    Ok(out)
}

/// Label map of a set of regions (0 = background, region `k` -> `k + 1`).
pub fn label_map(dims: GridDims, regions: &[CoherentMotion]) -> Vec<u32> {
    let mut labels = vec![0u32; dims.len()];
    for (k, r) in regions.iter().enumerate() {
        for &i in &r.pixels {
            labels[i] = k as u32 + 1;
        }
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(w: usize, h: usize) -> GridDims {
        GridDims::new(w, h).unwrap()
    }

    #[test]
    fn corner_square_has_two_triangles() {
        let pts = vec![
            Particle::new(0.0, 0.0),
            Particle::new(7.0, 0.0),
            Particle::new(0.0, 7.0),
            Particle::new(7.0, 7.0),
        ];
        let g = triangulate_points(pts).unwrap();
        assert_eq!(g.edges.len(), 5);
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let pts = (0..5).map(|i| Particle::new(i as f64, 2.0)).collect();
        assert!(triangulate_points(pts).is_none());
    }

    #[test]
    fn triangulation_is_deterministic_and_planar() {
        let cfg = SegmentationConfig {
            sample_count: Some(100),
            rng_seed: 11,
            ..Default::default()
        };
        let a = triangulate(dims(64, 64), &cfg).unwrap();
        let b = triangulate(dims(64, 64), &cfg).unwrap();
        assert_eq!(a, b);
        let n = a.samples.len();
        assert!(n >= 100);
        assert!(a.edges.len() <= 3 * n - 6);
        for corner in [(0.0, 0.0), (63.0, 0.0), (0.0, 63.0), (63.0, 63.0)] {
            assert!(a.samples.iter().any(|s| (s.p.x, s.p.y) == corner));
        }
    }

    #[test]
    fn too_many_samples_rejected() {
        let cfg = SegmentationConfig {
            sample_count: Some(17),
            ..Default::default()
        };
        assert!(triangulate(dims(4, 4), &cfg).is_err());
    }

    #[test]
    fn link_weight_cases() {
        let d = dims(4, 1);
        let tef = MotionField::from_vec(
            d,
            vec![
                Vec2::new(1.0, 0.0),
                Vec2::new(3.0, 0.0),
                Vec2::ZERO,
                Vec2::new(0.0, -2.0),
            ],
        )
        .unwrap();
        let p = |x: usize| Particle::at_pixel(x, 0);
        assert_eq!(link_weight(p(0), p(1), &tef), 0.0);
        assert_eq!(link_weight(p(0), p(2), &tef), 0.5);
        assert_eq!(link_weight(p(1), p(2), &tef), 1.0);
        assert!((link_weight(p(0), p(3), &tef) - 2f64.sqrt() / 3.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_tef_has_no_boundaries() {
        let tef = MotionField::constant(dims(32, 32), Vec2::new(0.3, 0.1));
        let cfg = SegmentationConfig::default();
        let g = triangulate(tef.dims(), &cfg).unwrap();
        assert!(detect_boundaries(&g, &tef, &cfg, 0.0).is_empty());
        let fixed = SegmentationConfig {
            weight_threshold: Some(1e-9),
            ..Default::default()
        };
        assert!(detect_boundaries(&g, &tef, &fixed, 0.0).is_empty());
    }

    #[test]
    fn infinite_threshold_has_no_boundaries() {
        let tef = MotionField::from_fn(dims(16, 16), |x, _| Vec2::new(x as f64, 0.0));
        let cfg = SegmentationConfig {
            weight_threshold: Some(f64::INFINITY),
            ..Default::default()
        };
        let g = triangulate(tef.dims(), &cfg).unwrap();
        assert!(detect_boundaries(&g, &tef, &cfg, 0.0).is_empty());
    }

    #[test]
    fn zero_tef_has_no_regions() {
        let tef = MotionField::zeros(dims(32, 32));
        assert!(segment(&tef, &SegmentationConfig::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn otsu_splits_bimodal_values() {
        let mut v = vec![0.1; 50];
        v.extend(vec![0.9; 50]);
        let t = otsu_threshold(&v).unwrap();
        assert!(t > 0.1 && t <= 0.9);
        assert!(otsu_threshold(&[0.5; 4]).is_none());
    }

    #[test]
    fn flood_stops_at_boundary_ridge() {
        // two 8x8 blocks separated by a boundary column
        let d = dims(17, 8);
        let mut img = vec![false; d.len()];
        for y in 0..8 {
            img[d.index(8, y)] = true;
        }
        let dist = raster::distance_transform_sq(d, &img);
        let mut markers = vec![0u32; d.len()];
        markers[d.index(2, 4)] = 1;
        markers[d.index(14, 4)] = 2;
        let labels = flood(d, &dist, markers, &vec![true; d.len()]);
        assert!(labels.iter().all(|&l| l != 0));
        for y in 0..8 {
            assert!((0..8).all(|x| labels[d.index(x, y)] == 1));
            assert!((9..17).all(|x| labels[d.index(x, y)] == 2));
        }
    }

    #[test]
    fn linked_samples_share_a_marker() {
        let pts = vec![
            Particle::new(0.0, 0.0),
            Particle::new(4.0, 0.0),
            Particle::new(0.0, 4.0),
            Particle::new(4.0, 4.0),
        ];
        let g = triangulate_points(pts).unwrap();
        let d = dims(5, 5);
        let all = vec![true; d.len()];
        let m = graph_markers(d, &g, &[], &all);
        assert_eq!(m[0], 1);
        assert_eq!(m[d.index(4, 4)], 1);
        // cut every link touching sample 3
        let cut: Vec<_> = g
            .edges
            .iter()
            .copied()
            .filter(|&(a, b)| a == 3 || b == 3)
            .collect();
        let m = graph_markers(d, &g, &cut, &all);
        assert_ne!(m[d.index(4, 4)], m[0]);
        let mut off = all.clone();
        off[0] = false;
        assert_eq!(graph_markers(d, &g, &[], &off)[0], 0);
    }

    #[test]
    fn weak_border_merges_strong_border_stays() {
        let d = dims(6, 2);
        let tef = MotionField::from_fn(d, |x, _| {
            if x < 4 {
                Vec2::new(1.0, 0.0)
            } else {
                Vec2::new(-1.0, 0.0)
            }
        });
        // 1|2 split inside the rightward band, 2|3 at the direction flip
        let mut labels = vec![1, 1, 2, 2, 3, 3, 1, 1, 2, 2, 3, 3];
        merge_weak_borders(&tef, &mut labels, 0.1, 1);
        assert_eq!(labels, vec![1, 1, 1, 1, 3, 3, 1, 1, 1, 1, 3, 3]);
    }

    #[test]
    fn two_opposing_bands_give_two_regions() {
        let d = dims(48, 32);
        let tef = MotionField::from_fn(d, |_, y| match y {
            4..=13 => Vec2::new(1.0, 0.0),
            14..=23 => Vec2::new(-1.0, 0.0),
            _ => Vec2::ZERO,
        });
        let regions = segment(&tef, &SegmentationConfig::default()).unwrap();
        assert_eq!(regions.len(), 2);
        for r in &regions {
            assert!(r.area() >= 150, "area {}", r.area());
            let e = r.mean_energy();
            assert!(e.x.abs() > 0.9 * r.mean_magnitude());
        }
    }
}
