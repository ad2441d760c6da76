//! Parametric synthetic crowd-flow scenes with analytic ground truth.
//!
//! A scene is a set of motion primitives (straight lanes and rotating
//! annuli) switched on and off by a phase schedule. Each frame's flow is
//! the velocity of the active primitives plus i.i.d. Gaussian noise on
//! every component; the generator also reports which primitive owns each
//! pixel, the phase of every frame, the semantic partition induced by the
//! schedule, and primitive centerlines.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{FlowSequence, GridDims, MotionField, Vec2};

/// Overlapping primitives whose velocities have a cosine below this are
/// considered to conflict.
const CONFLICT_COSINE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    /// Straight band from `from` to `to` with the given full `width`; flow
    /// runs from `from` towards `to` at `speed` pixels per frame.
    Lane {
        from: [f64; 2],
        to: [f64; 2],
        width: f64,
        speed: f64,
    },
    /// Ring of rigid rotation; positive `angular_speed` turns from +x
    /// towards +y (clockwise on screen).
    Annulus {
        center: [f64; 2],
        r_inner: f64,
        r_outer: f64,
        angular_speed: f64,
    },
}

impl Primitive {
    /// Velocity at a pixel centre, or `None` when outside the primitive.
    pub fn velocity_at(&self, p: Vec2) -> Option<Vec2> {
        match *self {
            Primitive::Lane {
                from,
                to,
                width,
                speed,
            } => {
                let a = Vec2::new(from[0], from[1]);
                let axis = Vec2::new(to[0], to[1]) - a;
                let len = axis.norm();
                let dir = axis / len;
                let rel = p - a;
                let t = rel.dot(dir);
                let s = rel.dot(dir.perp());
                let half = width / 2.0;
                (t >= 0.0 && t < len && s >= -half && s < half).then(|| dir * speed)
            }
            Primitive::Annulus {
                center,
                r_inner,
                r_outer,
                angular_speed,
            } => {
                let rel = p - Vec2::new(center[0], center[1]);
                let r = rel.norm();
                (r >= r_inner && r < r_outer).then(|| rel.perp() * angular_speed)
            }
        }
    }

    fn validate(&self, dims: GridDims) -> Result<()> {
        let (w, h) = (dims.width as f64, dims.height as f64);
        let inside = |x: f64, y: f64| x >= 0.0 && y >= 0.0 && x <= w && y <= h;
        match *self {
            Primitive::Lane {
                from,
                to,
                width,
                speed,
            } => {
                if !(width > 0.0 && speed.is_finite()) {
                    return Err(Error::validation("lane width must be > 0"));
                }
                if Vec2::new(to[0] - from[0], to[1] - from[1]).norm() == 0.0 {
                    return Err(Error::validation("lane endpoints coincide"));
                }
                if !inside(from[0], from[1]) || !inside(to[0], to[1]) {
                    return Err(Error::validation("lane endpoints outside the grid"));
                }
            }
            Primitive::Annulus {
                center,
                r_inner,
                r_outer,
                angular_speed,
            } => {
                if !(r_inner >= 0.0 && r_outer > r_inner && angular_speed.is_finite()) {
                    return Err(Error::validation(
                        "annulus radii must satisfy 0 <= r_inner < r_outer",
                    ));
                }
                if !inside(center[0] - r_outer, center[1] - r_outer)
                    || !inside(center[0] + r_outer, center[1] + r_outer)
                {
                    return Err(Error::validation("annulus extends outside the grid"));
                }
            }
        }
        Ok(())
    }

    /// Analytic centerline as a polyline.
    pub fn centerline(&self) -> Vec<[f64; 2]> {
        match *self {
            Primitive::Lane { from, to, .. } => vec![from, to],
            Primitive::Annulus {
                center,
                r_inner,
                r_outer,
                ..
            } => {
                let r = 0.5 * (r_inner + r_outer);
                (0..=64)
                    .map(|i| {
                        let a = i as f64 / 64.0 * std::f64::consts::TAU;
                        [center[0] + r * a.cos(), center[1] + r * a.sin()]
                    })
                    .collect()
            }
        }
    }
}

/// Frames `[start, end)` share a phase label and a set of active primitives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseEntry {
    pub start: usize,
    pub end: usize,
    pub phase: usize,
    pub active: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub num_frames: usize,
    #[serde(default = "default_frame_rate")]
    pub frame_rate: f64,
    pub primitives: Vec<Primitive>,
    /// Empty schedule: every primitive active in every frame, phase 0.
    #[serde(default)]
    pub schedule: Vec<PhaseEntry>,
    pub noise_sigma: f64,
    pub rng_seed: u64,
}

fn default_frame_rate() -> f64 {
    25.0
}

/// Analytic truth for a generated scene. Region label maps use 0 for
/// background and `primitive index + 1` otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub width: usize,
    pub height: usize,
    pub frame_regions: Vec<Vec<u32>>,
    pub frame_region_ids: Vec<Vec<u32>>,
    pub phases: Vec<usize>,
    /// Pixels sharing the same owning primitive in every phase form one
    /// semantic region; 0 marks pixels never covered.
    pub semantic: Vec<u32>,
    pub semantic_count: usize,
    pub centerlines: Vec<Vec<[f64; 2]>>,
}

impl GroundTruth {
    pub fn dims(&self) -> GridDims {
        GridDims {
            width: self.width,
            height: self.height,
        }
    }
}

impl SceneSpec {
    pub fn dims(&self) -> Result<GridDims> {
        GridDims::new(self.width, self.height)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.dims()?;
        if self.num_frames == 0 {
            return Err(Error::validation("scene needs at least one frame"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::validation("noise_sigma must be >= 0"));
        }
        for p in &self.primitives {
            p.validate(dims)?;
        }
        if !self.schedule.is_empty() {
            let mut expected = 0;
            for e in &self.schedule {
                if e.start != expected || e.end <= e.start {
                    return Err(Error::validation(
                        "schedule entries must be contiguous, non-empty and start at frame 0",
                    ));
                }
                if let Some(&bad) = e.active.iter().find(|&&i| i >= self.primitives.len()) {
                    return Err(Error::validation(format!(
                        "schedule references unknown primitive {bad}"
                    )));
                }
                expected = e.end;
            }
            if expected != self.num_frames {
                return Err(Error::validation("schedule must cover every frame"));
            }
        }
        Ok(())
    }

    fn active_sets(&self) -> Vec<(usize, Vec<usize>)> {
        if self.schedule.is_empty() {
            let all: Vec<usize> = (0..self.primitives.len()).collect();
            return vec![(0, all); self.num_frames];
        }
        let mut out = Vec::with_capacity(self.num_frames);
        for e in &self.schedule {
            for _ in e.start..e.end {
                out.push((e.phase, e.active.clone()));
            }
        }
        out
    }

    /// Noise-free velocity and owning primitive for every pixel under one
    /// active set.
    fn rasterize(&self, active: &[usize]) -> Result<(Vec<Vec2>, Vec<u32>)> {
        let dims = self.dims()?;
        let mut vel = vec![Vec2::ZERO; dims.len()];
        let mut owner = vec![0u32; dims.len()];
        for idx in 0..dims.len() {
            let (x, y) = dims.coords(idx);
            let p = Vec2::new(x as f64, y as f64);
            let hits: Vec<(usize, Vec2)> = active
                .iter()
                .filter_map(|&i| self.primitives[i].velocity_at(p).map(|v| (i, v)))
                .collect();
            let Some(&(first, _)) = hits.iter().min_by_key(|(i, _)| *i) else {
                continue;
            };
            for a in 0..hits.len() {
                for b in a + 1..hits.len() {
                    let c = hits[a].1.cosine(hits[b].1).unwrap_or(1.0);
                    if c < CONFLICT_COSINE {
                        return Err(Error::validation(format!(
                            "primitives {} and {} overlap with conflicting directions at ({x}, {y})",
                            hits[a].0, hits[b].0
                        )));
                    }
                }
            }
            let sum = hits.iter().fold(Vec2::ZERO, |acc, (_, v)| acc + *v);
            vel[idx] = sum / hits.len() as f64;
            owner[idx] = first as u32 + 1;
        }
        Ok((vel, owner))
    }
}

/// Generates the flow sequence and its ground truth. Deterministic for a
/// fixed `rng_seed`.
pub fn generate(spec: &SceneSpec) -> Result<(FlowSequence, GroundTruth)> {
    spec.validate()?;
    let dims = spec.dims()?;
    let sets = spec.active_sets();

    let mut cache: BTreeMap<Vec<usize>, (Vec<Vec2>, Vec<u32>)> = BTreeMap::new();
    for (_, active) in &sets {
        if !cache.contains_key(active) {
            let mut key = active.clone();
            key.sort_unstable();
            let r = spec.rasterize(&key)?;
            cache.insert(active.clone(), r);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let noise = (spec.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, spec.noise_sigma).expect("sigma validated"));

    let mut frames = Vec::with_capacity(spec.num_frames);
    let mut frame_regions = Vec::with_capacity(spec.num_frames);
    let mut frame_region_ids = Vec::with_capacity(spec.num_frames);
    let mut phases = Vec::with_capacity(spec.num_frames);
    for (phase, active) in &sets {
        let (vel, owner) = &cache[active];
        let vectors = vel
            .iter()
            .map(|&v| match &noise {
                Some(n) => v + Vec2::new(n.sample(&mut rng), n.sample(&mut rng)),
                None => v,
            })
            .collect();
        frames.push(MotionField::from_vec(dims, vectors)?);
        let mut ids: Vec<u32> = owner.iter().copied().filter(|&o| o != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        frame_regions.push(owner.clone());
        frame_region_ids.push(ids);
        phases.push(*phase);
    }

    // semantic partition: signature = owning primitive per distinct phase
    let mut phase_owner: BTreeMap<usize, &Vec<u32>> = BTreeMap::new();
    for ((phase, _), owner) in sets.iter().zip(&frame_regions) {
        phase_owner.entry(*phase).or_insert(owner);
    }
    let mut signatures: BTreeMap<Vec<u32>, u32> = BTreeMap::new();
    let mut semantic = vec![0u32; dims.len()];
    for (idx, slot) in semantic.iter_mut().enumerate() {
        let sig: Vec<u32> = phase_owner.values().map(|o| o[idx]).collect();
        if sig.iter().all(|&o| o == 0) {
            continue;
        }
        let next = signatures.len() as u32 + 1;
        *slot = *signatures.entry(sig).or_insert(next);
    }

    let truth = GroundTruth {
        width: dims.width,
        height: dims.height,
        frame_regions,
        frame_region_ids,
        phases,
        semantic,
        semantic_count: signatures.len(),
        centerlines: spec.primitives.iter().map(Primitive::centerline).collect(),
    };
    Ok((FlowSequence::new(frames, spec.frame_rate)?, truth))
}

/// Ready-made scenes used by the benchmark harness, the CLI and the tests.
pub mod scenes {
    use super::*;

    /// Two adjacent opposing horizontal lanes on a 64x64 grid.
    pub fn two_lane(noise_sigma: f64, rng_seed: u64, num_frames: usize) -> SceneSpec {
        SceneSpec {
            width: 64,
            height: 64,
            num_frames,
            frame_rate: 25.0,
            primitives: vec![
                Primitive::Lane {
                    from: [0.0, 21.5],
                    to: [64.0, 21.5],
                    width: 16.0,
                    speed: 1.0,
                },
                Primitive::Lane {
                    from: [64.0, 37.5],
                    to: [0.0, 37.5],
                    width: 16.0,
                    speed: 1.0,
                },
            ],
            schedule: vec![],
            noise_sigma,
            rng_seed,
        }
    }

    /// One rotating ring centred on a 64x64 grid.
    pub fn annulus(noise_sigma: f64, rng_seed: u64, num_frames: usize) -> SceneSpec {
        SceneSpec {
            width: 64,
            height: 64,
            num_frames,
            frame_rate: 25.0,
            primitives: vec![Primitive::Annulus {
                center: [31.5, 31.5],
                r_inner: 14.0,
                r_outer: 28.0,
                angular_speed: 0.05,
            }],
            schedule: vec![],
            noise_sigma,
            rng_seed,
        }
    }

    /// A lane split lengthwise into two same-direction fragments by a
    /// `gap`-pixel strip without motion, plus an opposing lane below.
    pub fn occluded_lane(
        noise_sigma: f64,
        rng_seed: u64,
        num_frames: usize,
        gap: f64,
    ) -> SceneSpec {
        let frag = 12.0;
        let top = 6.0;
        SceneSpec {
            width: 64,
            height: 64,
            num_frames,
            frame_rate: 25.0,
            primitives: vec![
                Primitive::Lane {
                    from: [4.0, top + frag / 2.0],
                    to: [58.0, top + frag / 2.0],
                    width: frag,
                    speed: 1.0,
                },
                Primitive::Lane {
                    from: [4.0, top + frag + gap + frag / 2.0],
                    to: [58.0, top + frag + gap + frag / 2.0],
                    width: frag,
                    speed: 1.0,
                },
                Primitive::Lane {
                    from: [58.0, 54.0],
                    to: [4.0, 54.0],
                    width: 12.0,
                    speed: 1.0,
                },
            ],
            schedule: vec![],
            noise_sigma,
            rng_seed,
        }
    }

    /// One rightward trunk lane splitting into two diverging arms.
    pub fn y_branch(noise_sigma: f64, rng_seed: u64, num_frames: usize) -> SceneSpec {
        let lane = |from: [f64; 2], to: [f64; 2], width: f64| Primitive::Lane {
            from,
            to,
            width,
            speed: 1.0,
        };
        SceneSpec {
            width: 64,
            height: 64,
            num_frames,
            frame_rate: 25.0,
            primitives: vec![
                lane([0.0, 31.5], [28.0, 31.5], 16.0),
                lane([24.0, 27.5], [64.0, 4.0], 8.0),
                lane([24.0, 35.5], [64.0, 59.0], 8.0),
            ],
            schedule: vec![],
            noise_sigma,
            rng_seed,
        }
    }

    /// Four separated horizontal lanes with alternating directions.
    pub fn four_lanes() -> Vec<Primitive> {
        [(8.0, 1.0), (24.0, -1.0), (40.0, 1.0), (56.0, -1.0)]
            .into_iter()
            .map(|(y, dir)| {
                let (from, to) = if dir > 0.0 {
                    ([2.0, y], [62.0, y])
                } else {
                    ([62.0, y], [2.0, y])
                };
                Primitive::Lane {
                    from,
                    to,
                    width: 10.0,
                    speed: 1.0,
                }
            })
            .collect()
    }

    /// Traffic-light style scene: `phases` lists the active lanes of each
    /// phase; the schedule cycles through them in blocks of `block` frames.
    pub fn phased_lanes(
        phases: &[Vec<usize>],
        block: usize,
        num_frames: usize,
        noise_sigma: f64,
        rng_seed: u64,
    ) -> SceneSpec {
        let mut schedule = Vec::new();
        let mut start = 0;
        let mut k = 0;
        while start < num_frames {
            let end = (start + block).min(num_frames);
            let phase = k % phases.len();
            schedule.push(PhaseEntry {
                start,
                end,
                phase,
                active: phases[phase].clone(),
            });
            start = end;
            k += 1;
        }
        SceneSpec {
            width: 64,
            height: 64,
            num_frames,
            frame_rate: 25.0,
            primitives: four_lanes(),
            schedule,
            noise_sigma,
            rng_seed,
        }
    }

    /// Two-phase alternation: lanes {0, 1} then lanes {2, 3}.
    pub fn two_phase_traffic(
        block: usize,
        num_frames: usize,
        noise_sigma: f64,
        rng_seed: u64,
    ) -> SceneSpec {
        phased_lanes(
            &[vec![0, 1], vec![2, 3]],
            block,
            num_frames,
            noise_sigma,
            rng_seed,
        )
    }

    /// Active lanes of each class of [`activity_clip`].
    pub const ACTIVITY_PHASES: [[usize; 2]; 4] = [[0, 1], [2, 3], [0, 2], [1, 3]];

    /// One clip of a pre-defined activity: the lanes of `class` run for the
    /// whole clip at a speed drawn from [0.6, 1.4] by the seed.
    pub fn activity_clip(
        class: usize,
        num_frames: usize,
        noise_sigma: f64,
        rng_seed: u64,
    ) -> SceneSpec {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let speed = rng.gen_range(0.6..1.4);
        let primitives = four_lanes()
            .into_iter()
            .map(|mut p| {
                if let Primitive::Lane { speed: s, .. } = &mut p {
                    *s = speed;
                }
                p
            })
            .collect();
        SceneSpec {
            width: 64,
            height: 64,
            num_frames,
            frame_rate: 25.0,
            primitives,
            schedule: vec![PhaseEntry {
                start: 0,
                end: num_frames,
                phase: class,
                active: ACTIVITY_PHASES[class % 4].to_vec(),
            }],
            noise_sigma,
            rng_seed,
        }
    }

    /// Four phases, each lane active in exactly two of them.
    pub fn four_phase_traffic(
        block: usize,
        num_frames: usize,
        noise_sigma: f64,
        rng_seed: u64,
    ) -> SceneSpec {
        phased_lanes(
            &[vec![0, 1], vec![2, 3], vec![0, 2], vec![1, 3]],
            block,
            num_frames,
            noise_sigma,
            rng_seed,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_lane_without_noise() {
        let mut spec = scenes::two_lane(0.0, 1, 2);
        spec.primitives.truncate(1);
        let (seq, truth) = generate(&spec).unwrap();
        let f = &seq.frames()[0];
        for y in 0..64 {
            for x in 0..64 {
                let inside = (14..30).contains(&y);
                let expect = if inside {
                    Vec2::new(1.0, 0.0)
                } else {
                    Vec2::ZERO
                };
                assert_eq!(f.get(x, y), expect, "({x},{y})");
                assert_eq!(truth.frame_regions[0][y * 64 + x], inside as u32);
            }
        }
    }

    #[test]
    fn phase_labels_follow_schedule() {
        let spec = scenes::two_phase_traffic(3, 10, 0.0, 0);
        let (_, truth) = generate(&spec).unwrap();
        assert_eq!(truth.phases, vec![0, 0, 0, 1, 1, 1, 0, 0, 0, 1]);
        assert_eq!(truth.frame_region_ids[0], vec![1, 2]);
        assert_eq!(truth.frame_region_ids[3], vec![3, 4]);
        assert_eq!(truth.semantic_count, 4);
    }

    #[test]
    fn conflicting_overlap_rejected() {
        let mut spec = scenes::two_lane(0.0, 0, 1);
        if let Primitive::Lane { from, to, .. } = &mut spec.primitives[1] {
            *from = [64.0, 21.5];
            *to = [0.0, 21.5];
        }
        assert!(matches!(generate(&spec), Err(Error::Validation(_))));
    }

    #[test]
    fn schedule_gaps_rejected() {
        let mut spec = scenes::two_phase_traffic(3, 9, 0.0, 0);
        spec.schedule[1].start = 4;
        assert!(spec.validate().is_err());
        let mut spec = scenes::two_phase_traffic(3, 9, 0.0, 0);
        spec.num_frames = 12;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let spec = scenes::two_lane(0.3, 42, 3);
        let (a, ta) = generate(&spec).unwrap();
        let (b, tb) = generate(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
    }

    #[test]
    fn annulus_is_rigid_rotation() {
        let spec = scenes::annulus(0.0, 0, 1);
        let (seq, _) = generate(&spec).unwrap();
        let v = seq.frames()[0].get(31 + 20, 31);
        // rel = (19.5, -0.5) -> perp * 0.05 = (0.025, 0.975)
        assert!((v - Vec2::new(0.025, 0.975)).norm() < 1e-12);
    }
}
