//! Grid types shared by every stage: dimensions, 2-D vectors, dense motion
//! fields and frame sequences, plus particle advection.
//!
//! Coordinates follow raster order: `x` grows to the right, `y` grows
//! downward, and pixel `(x, y)` lives at index `y * width + x`.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridDims {
    pub width: usize,
    pub height: usize,
}

impl GridDims {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::validation(format!(
                "grid dimensions must be positive, got {width}x{height}"
            )));
        }
        Ok(GridDims { width, height })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.width, idx / self.width)
    }

    #[inline]
    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }

    /// Clamps a sub-pixel position into `[0, w-1] x [0, h-1]`.
    #[inline]
    pub fn clamp(&self, p: Vec2) -> Vec2 {
        Vec2::new(
            p.x.clamp(0.0, (self.width - 1) as f64),
            p.y.clamp(0.0, (self.height - 1) as f64),
        )
    }

    /// 4-connected neighbours of a pixel index.
    pub fn neighbors4(&self, idx: usize) -> impl Iterator<Item = usize> {
        let (x, y) = self.coords(idx);
        let (w, h) = (self.width, self.height);
        let mut out = [usize::MAX; 4];
        if x > 0 {
            out[0] = idx - 1;
        }
        if x + 1 < w {
            out[1] = idx + 1;
        }
        if y > 0 {
            out[2] = idx - w;
        }
        if y + 1 < h {
            out[3] = idx + w;
        }
        out.into_iter().filter(|&i| i != usize::MAX)
    }

    /// 8-connected neighbours of a pixel index.
    pub fn neighbors8(&self, idx: usize) -> impl Iterator<Item = usize> + '_ {
        let (x, y) = self.coords(idx);
        let (x, y) = (x as i64, y as i64);
        (-1i64..=1)
            .flat_map(move |dy| (-1i64..=1).map(move |dx| (dx, dy)))
            .filter(|&(dx, dy)| dx != 0 || dy != 0)
            .filter_map(move |(dx, dy)| {
                let (nx, ny) = (x + dx, y + dy);
                self.contains(nx, ny)
                    .then(|| self.index(nx as usize, ny as usize))
            })
    }
}

/// A 2-D vector in pixel units. Used for positions, motion vectors and
/// thermal energies alike.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    #[inline]
    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    #[inline]
    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    #[inline]
    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    #[inline]
    pub fn is_zero(self) -> bool {
        self.x == 0.0 && self.y == 0.0
    }

    #[inline]
    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Unit vector, or zero when the magnitude is below `eps`.
    #[inline]
    pub fn normalized_or_zero(self, eps: f64) -> Vec2 {
        let n = self.norm();
        if n < eps {
            Vec2::ZERO
        } else {
            self / n
        }
    }

    /// Rotates by +90 degrees in raster coordinates.
    #[inline]
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    /// Cosine similarity; `None` when either vector is zero.
    #[inline]
    pub fn cosine(self, o: Vec2) -> Option<f64> {
        let denom = self.norm() * o.norm();
        (denom > 0.0).then(|| self.dot(o) / denom)
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    #[inline]
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Vec2 {
    #[inline]
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    #[inline]
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    #[inline]
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    #[inline]
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Div<f64> for Vec2 {
    type Output = Vec2;
    #[inline]
    fn div(self, s: f64) -> Vec2 {
        Vec2::new(self.x / s, self.y / s)
    }
}

/// A particle position on the grid. Integer pixel positions are the common
/// case; advection and curve extraction use sub-pixel positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub p: Vec2,
}

impl Particle {
    pub fn new(x: f64, y: f64) -> Self {
        Particle { p: Vec2::new(x, y) }
    }

    pub fn at_pixel(x: usize, y: usize) -> Self {
        Particle::new(x as f64, y as f64)
    }

    pub fn in_grid(&self, dims: GridDims) -> bool {
        self.p.x >= 0.0
            && self.p.y >= 0.0
            && self.p.x < dims.width as f64
            && self.p.y < dims.height as f64
    }
}

/// Dense grid of 2-D vectors in row-major order.
///
/// The same type carries input motion, advected T-frame displacement,
/// thermal energy fields and merged motion patterns.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionField {
    dims: GridDims,
    vectors: Vec<Vec2>,
}

impl MotionField {
    pub fn zeros(dims: GridDims) -> Self {
        MotionField {
            dims,
            vectors: vec![Vec2::ZERO; dims.len()],
        }
    }

    pub fn from_vec(dims: GridDims, vectors: Vec<Vec2>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::validation("motion field must have positive size"));
        }
        if vectors.len() != dims.len() {
            return Err(Error::validation(format!(
                "expected {} vectors for {}x{}, got {}",
                dims.len(),
                dims.width,
                dims.height,
                vectors.len()
            )));
        }
        if let Some(i) = vectors.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!("non-finite vector at index {i}")));
        }
        Ok(MotionField { dims, vectors })
    }

    pub fn from_fn(dims: GridDims, mut f: impl FnMut(usize, usize) -> Vec2) -> Self {
        let mut vectors = Vec::with_capacity(dims.len());
        for y in 0..dims.height {
            for x in 0..dims.width {
                vectors.push(f(x, y));
            }
        }
        MotionField { dims, vectors }
    }

    /// Uniform field.
    pub fn constant(dims: GridDims, v: Vec2) -> Self {
        MotionField {
            dims,
            vectors: vec![v; dims.len()],
        }
    }

    #[inline]
    pub fn dims(&self) -> GridDims {
        self.dims
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.dims.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.dims.height
    }

    #[inline]
    pub fn vectors(&self) -> &[Vec2] {
        &self.vectors
    }

    #[inline]
    pub fn vectors_mut(&mut self) -> &mut [Vec2] {
        &mut self.vectors
    }

    pub fn into_vectors(self) -> Vec<Vec2> {
        self.vectors
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Vec2 {
        self.vectors[self.dims.index(x, y)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: Vec2) {
        let i = self.dims.index(x, y);
        self.vectors[i] = v;
    }

    /// Bilinear lookup at a sub-pixel position; the position is clamped
    /// into the grid first.
    pub fn sample(&self, p: Vec2) -> Vec2 {
        let p = self.dims.clamp(p);
        let x0 = p.x.floor() as usize;
        let y0 = p.y.floor() as usize;
        let x1 = (x0 + 1).min(self.dims.width - 1);
        let y1 = (y0 + 1).min(self.dims.height - 1);
        let fx = p.x - x0 as f64;
        let fy = p.y - y0 as f64;
        let a = self.get(x0, y0);
        let b = self.get(x1, y0);
        let c = self.get(x0, y1);
        let d = self.get(x1, y1);
        let top = a * (1.0 - fx) + b * fx;
        let bottom = c * (1.0 - fx) + d * fx;
        top * (1.0 - fy) + bottom * fy
    }

    pub fn max_norm(&self) -> f64 {
        self.vectors.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn scaled(&self, s: f64) -> MotionField {
        MotionField {
            dims: self.dims,
            vectors: self.vectors.iter().map(|&v| v * s).collect(),
        }
    }

    pub fn ensure_same_dims(&self, other: &MotionField) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::validation(format!(
                "dimension mismatch: {}x{} vs {}x{}",
                self.dims.width, self.dims.height, other.dims.width, other.dims.height
            )));
        }
        Ok(())
    }
}

/// Ordered per-frame motion fields of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSequence {
    dims: GridDims,
    frames: Vec<MotionField>,
    pub frame_rate: f64,
}

impl FlowSequence {
    pub fn new(frames: Vec<MotionField>, frame_rate: f64) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::validation("flow sequence needs at least one frame"))?;
        let dims = first.dims();
        if let Some(i) = frames.iter().position(|f| f.dims() != dims) {
            return Err(Error::validation(format!(
                "frame {i} has dimensions different from frame 0"
            )));
        }
        Ok(FlowSequence {
            dims,
            frames,
            frame_rate,
        })
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn frames(&self) -> &[MotionField] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Net displacement of every pixel-centred particle after `steps` advection
/// steps through `seq`, starting at `start_frame`.
///
/// Each step moves the tracked point by the bilinearly interpolated flow of
/// the current frame; points that would leave the grid are clamped onto the
/// border and keep moving from there.
pub fn advect(seq: &FlowSequence, start_frame: usize, steps: usize) -> Result<MotionField> {
    if steps == 0 {
        return Err(Error::range("advection needs at least one step"));
    }
    if start_frame + steps > seq.len() {
        return Err(Error::range(format!(
            "advection over frames {}..{} exceeds sequence length {}",
            start_frame,
            start_frame + steps,
            seq.len()
        )));
    }
    let dims = seq.dims();
    let frames = &seq.frames[start_frame..start_frame + steps];
    let vectors = (0..dims.len())
        .map(|i| {
            let (x, y) = dims.coords(i);
            let origin = Vec2::new(x as f64, y as f64);
            // Displacement is accumulated directly so unclamped steps are
            // exact sums of the sampled flow.
            let mut disp = Vec2::ZERO;
            for frame in frames {
                let pos = origin + disp;
                let step = frame.sample(pos);
                let next = pos + step;
                let clamped = dims.clamp(next);
                if clamped == next {
                    disp += step;
                } else {
                    disp = clamped - origin;
                }
            }
            disp
        })
        .collect();
    Ok(MotionField { dims, vectors })
}
