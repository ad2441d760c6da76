//! Thermal diffusion of motion fields.
//!
//! Every particle `Q` acts as a heat source that pushes its current motion
//! pattern `U_Q` onto every other particle `P`, attenuated by a Gaussian in
//! the distance `|P - Q|` and by an exponential in the projection of
//! `P - Q` onto the source's own motion `F_Q`. Only pairs whose input
//! motions agree in direction (`cos(F_P, F_Q) >= theta_c`) exchange energy.
//! Summing all contributions and dividing by the particle count gives the
//! thermal energy field (TEF).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{advect, FlowSequence, MotionField, Particle, Vec2};

/// Per-particle energy vectors; same layout as a motion field.
pub type ThermalEnergyField = MotionField;

/// Magnitude quantile that maps to unit length when an energy field is fed
/// back as the next iteration's source strengths.
pub const NORMALIZE_QUANTILE: f64 = 0.8;

/// Vectors shorter than this are treated as zero when normalizing.
pub const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    /// Spatial propagation coefficient.
    pub k_p: f64,
    /// Force propagation factor.
    pub k_f: f64,
    /// Cosine gate on input motion directions.
    pub theta_c: f64,
    /// Diffusion time; fixed at 1.
    pub l: f64,
    /// Frame interval of the first (coarsest) iteration.
    #[serde(rename = "T_max")]
    pub t_max: usize,
    /// Interval decrement per iteration.
    #[serde(rename = "T_step")]
    pub t_step: usize,
    pub num_itr: usize,
    /// Spatial kernel values below this are dropped.
    pub kernel_epsilon: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            k_p: 0.2,
            k_f: 0.8,
            theta_c: 0.7,
            l: 1.0,
            t_max: 5,
            t_step: 1,
            num_itr: 3,
            kernel_epsilon: 1e-6,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::validation(format!("diffusion config: {m}")));
        if !(self.k_p > 0.0 && self.k_p.is_finite()) {
            return bad("k_p must be > 0");
        }
        if !(self.k_f >= 0.0 && self.k_f.is_finite()) {
            return bad("k_f must be >= 0");
        }
        if !(-1.0..=1.0).contains(&self.theta_c) {
            return bad("theta_c must lie in [-1, 1]");
        }
        if self.l != 1.0 {
            return bad("l is fixed at 1");
        }
        if self.t_max < 1 {
            return bad("T_max must be >= 1");
        }
        if self.num_itr < 1 {
            return bad("num_itr must be >= 1");
        }
        if !(self.kernel_epsilon > 0.0 && self.kernel_epsilon < 1.0) {
            return bad("kernel_epsilon must lie in (0, 1)");
        }
        Ok(())
    }

    /// Distance beyond which `exp(-k_p d^2)` drops below `kernel_epsilon`.
    pub fn truncation_radius(&self) -> f64 {
        ((1.0 / self.kernel_epsilon).ln() * self.l / self.k_p).sqrt()
    }
}

#[inline]
fn gate_passes(f_p: Vec2, f_q: Vec2, theta_c: f64) -> bool {
    match f_p.cosine(f_q) {
        Some(c) => c >= theta_c,
        None => false,
    }
}

/// Energy diffused from heat source `q` to particle `p`.
///
/// Zero when the input motions `f_p`, `f_q` fail the cosine gate, including
/// when either of them is the zero vector.
pub fn individual_energy(
    q: Particle,
    p: Particle,
    u_q: Vec2,
    f_q: Vec2,
    f_p: Vec2,
    cfg: &DiffusionConfig,
) -> Vec2 {
    if !gate_passes(f_p, f_q, cfg.theta_c) {
        return Vec2::ZERO;
    }
    let d = p.p - q.p;
    let spatial = (-cfg.k_p / cfg.l * d.norm_sq()).exp();
    let force = (-cfg.k_f * f_q.dot(d).abs()).exp();
    u_q * (spatial * force)
}

struct KernelOffset {
    dx: i64,
    dy: i64,
    spatial: f64,
}

fn kernel_offsets(cfg: &DiffusionConfig) -> Vec<KernelOffset> {
    let r = cfg.truncation_radius();
    let r_sq = r * r;
    let ri = r.floor() as i64;
    let mut out = Vec::new();
    for dy in -ri..=ri {
        for dx in -ri..=ri {
            let d_sq = (dx * dx + dy * dy) as f64;
            if (dx, dy) == (0, 0) || d_sq > r_sq {
                continue;
            }
            out.push(KernelOffset {
                dx,
                dy,
                spatial: (-cfg.k_p / cfg.l * d_sq).exp(),
            });
        }
    }
    out
}

/// Thermal energy field of `f` (input motion, drives the gate and the force
/// term) carrying the motion pattern `u`.
///
/// Sources farther than [`DiffusionConfig::truncation_radius`] are skipped;
/// each skipped term is below `kernel_epsilon * |u_Q|`, so the result is
/// within `kernel_epsilon * max|u|` of the exact all-pairs sum. Each target
/// sums its sources in a fixed order, so the output does not depend on the
/// thread schedule.
pub fn diffuse_field(
    f: &MotionField,
    u: &MotionField,
    cfg: &DiffusionConfig,
) -> Result<ThermalEnergyField> {
    f.ensure_same_dims(u)?;
    cfg.validate()?;
    let dims = f.dims();
    let (w, h) = (dims.width as i64, dims.height as i64);
    let norm = 1.0 / dims.len() as f64;
    let offsets = kernel_offsets(cfg);
    let fv = f.vectors();
    let uv = u.vectors();
    let f_norm: Vec<f64> = fv.iter().map(|v| v.norm()).collect();

    let mut out = vec![Vec2::ZERO; dims.len()];
    out.par_chunks_mut(dims.width)
        .enumerate()
        .for_each(|(y, row)| {
            let y = y as i64;
            for (x, slot) in row.iter_mut().enumerate() {
                let x = x as i64;
                let pi = (y * w + x) as usize;
                let f_p = fv[pi];
                let n_p = f_norm[pi];
                if n_p == 0.0 {
                    continue;
                }
                let gate = cfg.theta_c * n_p;
                let mut acc = Vec2::ZERO;
                for k in &offsets {
                    // source Q = P - d, so P - Q = d
                    let qx = x - k.dx;
                    let qy = y - k.dy;
                    if qx < 0 || qy < 0 || qx >= w || qy >= h {
                        continue;
                    }
                    let qi = (qy * w + qx) as usize;
                    let f_q = fv[qi];
                    let n_q = f_norm[qi];
                    if n_q == 0.0 || f_p.dot(f_q) < gate * n_q {
                        continue;
                    }
                    let proj = (f_q.x * k.dx as f64 + f_q.y * k.dy as f64).abs();
                    acc += uv[qi] * (k.spatial * (-cfg.k_f * proj).exp());
                }
                *slot = acc * norm;
            }
        });
    Ok(MotionField::from_fn(dims, |x, y| out[dims.index(x, y)]))
}

/// Scales every vector to unit length; vectors shorter than
/// [`NORMALIZE_EPS`] become zero.
pub fn normalize_vectors(field: &MotionField) -> MotionField {
    MotionField::from_fn(field.dims(), |x, y| {
        field.get(x, y).normalized_or_zero(NORMALIZE_EPS)
    })
}

/// Divides every vector by the field's `quantile` magnitude and clips the
/// result to unit length.
pub fn normalize_clipped(field: &MotionField, quantile: f64) -> MotionField {
    let mut mags: Vec<f64> = field.vectors().iter().map(|v| v.norm()).collect();
    mags.sort_by(f64::total_cmp);
    let rank = ((mags.len() - 1) as f64 * quantile).round() as usize;
    let scale = mags[rank];
    if !(scale > NORMALIZE_EPS) {
        return normalize_vectors(field);
    }
    MotionField::from_fn(field.dims(), |x, y| {
        let v = field.get(x, y) / scale;
        let n = v.norm();
        if n > 1.0 {
            v / n
        } else {
            v
        }
    })
}

/// Coarse-to-fine thermal diffusion starting at `start_frame`.
///
/// The first iteration diffuses the `T_max`-frame displacement field; each
/// later iteration shrinks the interval by `T_step` and diffuses the
/// previous energies, normalized by [`normalize_clipped`], through the
/// shorter-interval field. Returns the raw (unnormalized) energy field of
/// the last iteration.
///
/// Scaling every vector to unit length would lift static-background noise
/// to the strength of real motion; dividing by the global maximum instead
/// lets a few hot spots take over after a couple of iterations. The clipped
/// quantile keeps weak vectors weak and caps the strong ones.
pub fn coarse_to_fine(
    seq: &FlowSequence,
    start_frame: usize,
    cfg: &DiffusionConfig,
) -> Result<ThermalEnergyField> {
    cfg.validate()?;
    let mut t = cfg.t_max as i64;
    let mut f_t = advect(seq, start_frame, cfg.t_max)?;
    let mut u = f_t.clone();
    let mut energy = MotionField::zeros(seq.dims());
    for _ in 0..cfg.num_itr {
        energy = diffuse_field(&f_t, &u, cfg)?;
        u = normalize_clipped(&energy, NORMALIZE_QUANTILE);
        t -= cfg.t_step as i64;
        if t > 0 {
            f_t = advect(seq, start_frame, t as usize)?;
        }
    }
    Ok(energy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::GridDims;

    #[test]
    fn default_config_is_valid() {
        let cfg = DiffusionConfig::default();
        cfg.validate().unwrap();
        assert!((cfg.truncation_radius() - 8.3105).abs() < 1e-3);
    }

    #[test]
    fn config_json_uses_exact_field_names() {
        let v = serde_json::to_value(DiffusionConfig::default()).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "T_max",
                "T_step",
                "k_f",
                "k_p",
                "kernel_epsilon",
                "l",
                "num_itr",
                "theta_c"
            ]
        );
    }

    #[test]
    fn config_rejects_bad_values() {
        for m in [
            |c: &mut DiffusionConfig| c.k_p = 0.0,
            |c: &mut DiffusionConfig| c.k_f = -1.0,
            |c: &mut DiffusionConfig| c.theta_c = 1.5,
            |c: &mut DiffusionConfig| c.l = 2.0,
            |c: &mut DiffusionConfig| c.t_max = 0,
            |c: &mut DiffusionConfig| c.num_itr = 0,
            |c: &mut DiffusionConfig| c.kernel_epsilon = 1.0,
        ] {
            let mut c = DiffusionConfig::default();
            m(&mut c);
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn aligned_unit_step_energy() {
        let cfg = DiffusionConfig::default();
        let x = Vec2::new(1.0, 0.0);
        let e = individual_energy(
            Particle::new(0.0, 0.0),
            Particle::new(1.0, 0.0),
            x,
            x,
            x,
            &cfg,
        );
        assert!((e.x - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(e.y, 0.0);
    }

    #[test]
    fn orthogonal_motion_fails_gate() {
        let cfg = DiffusionConfig::default();
        let e = individual_energy(
            Particle::new(0.0, 0.0),
            Particle::new(1.0, 0.0),
            Vec2::new(1.0, 0.0),
            Vec2::new(0.0, 1.0),
            Vec2::new(1.0, 0.0),
            &cfg,
        );
        assert_eq!(e, Vec2::ZERO);
    }

    #[test]
    fn zero_motion_fails_gate() {
        let cfg = DiffusionConfig::default();
        let q = Particle::new(0.0, 0.0);
        let p = Particle::new(0.0, 1.0);
        let one = Vec2::new(1.0, 0.0);
        assert_eq!(
            individual_energy(q, p, one, Vec2::ZERO, one, &cfg),
            Vec2::ZERO
        );
        assert_eq!(
            individual_energy(q, p, one, one, Vec2::ZERO, &cfg),
            Vec2::ZERO
        );
    }

    #[test]
    fn perpendicular_offset_has_unit_force_term() {
        let cfg = DiffusionConfig::default();
        let f = Vec2::new(2.0, 0.0);
        let u = Vec2::new(0.3, -0.4);
        let d = 3.0;
        let e = individual_energy(
            Particle::new(4.0, 1.0),
            Particle::new(4.0, 1.0 + d),
            u,
            f,
            f,
            &cfg,
        );
        let expected = u * (-cfg.k_p * d * d).exp();
        assert!((e - expected).norm() < 1e-15);
    }

    #[test]
    fn zero_field_gives_zero_energy() {
        let d = GridDims::new(9, 7).unwrap();
        let z = MotionField::zeros(d);
        let e = diffuse_field(&z, &z, &DiffusionConfig::default()).unwrap();
        assert!(e.vectors().iter().all(|v| v.is_zero()));
    }

    #[test]
    fn two_particle_grid() {
        let d = GridDims::new(2, 1).unwrap();
        let f = MotionField::constant(d, Vec2::new(1.0, 0.0));
        let e = diffuse_field(&f, &f, &DiffusionConfig::default()).unwrap();
        let expected = 0.5 * (-0.2f64).exp() * (-0.8f64).exp();
        for v in e.vectors() {
            assert!((v.x - expected).abs() < 1e-15);
            assert_eq!(v.y, 0.0);
        }
        assert!((expected - 0.18394).abs() < 1e-4);
    }

    #[test]
    fn dims_mismatch_rejected() {
        let a = MotionField::zeros(GridDims::new(2, 2).unwrap());
        let b = MotionField::zeros(GridDims::new(2, 3).unwrap());
        assert!(diffuse_field(&a, &b, &DiffusionConfig::default()).is_err());
    }

    #[test]
    fn normalize_keeps_zero_vectors_zero() {
        let d = GridDims::new(2, 1).unwrap();
        let f = MotionField::from_vec(d, vec![Vec2::new(3.0, 4.0), Vec2::ZERO]).unwrap();
        let n = normalize_vectors(&f);
        assert!((n.get(0, 0) - Vec2::new(0.6, 0.8)).norm() < 1e-15);
        assert_eq!(n.get(1, 0), Vec2::ZERO);
    }
}
