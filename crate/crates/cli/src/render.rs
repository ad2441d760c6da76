//! PNG views of label maps, flow fields and flow curves.

use std::path::Path;

use coherentflow::mining::FlowCurve;
use coherentflow::{GridDims, MotionField};
use image::{Rgb, RgbImage};
use serde::Serialize;

use crate::commands::{Dirs, MiningReport};
use crate::config::{PipelineConfig, SCHEMA_VERSION};
use crate::error::{CliError, CliResult};
use crate::stage::{
    ensure_dir, read_input_flo, read_input_json, read_input_pgm, write_json, SEMANTIC_PGM,
};

pub const BACKGROUND: Rgb<u8> = Rgb([0, 0, 0]);
pub const ARROW: Rgb<u8> = Rgb([255, 255, 0]);
pub const CURVE: Rgb<u8> = Rgb([255, 0, 255]);
pub const CONTROL_POINT: Rgb<u8> = Rgb([255, 255, 255]);

/// Label colour; channels stay in 48..=207 so they never collide with the
/// overlay colours.
pub fn label_color(label: u32) -> Rgb<u8> {
    if label == 0 {
        return BACKGROUND;
    }
    let mut h = (label as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    h ^= h >> 29;
    let c = |s: u32| 48 + ((h >> s) & 0xff) as u8 % 160;
    Rgb([c(0), c(8), c(16)])
}

/// Image pixel of grid coordinate `(x, y)` at the given scale.
pub fn to_image(x: f64, y: f64, scale: usize) -> (i64, i64) {
    let s = scale as f64;
    let half = (scale / 2) as i64;
    ((x * s).round() as i64 + half, (y * s).round() as i64 + half)
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, c);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

pub fn render_labels(dims: GridDims, labels: &[u32], scale: usize) -> RgbImage {
    let s = scale as u32;
    RgbImage::from_fn(dims.width as u32 * s, dims.height as u32 * s, |x, y| {
        label_color(labels[dims.index((x / s) as usize, (y / s) as usize)])
    })
}

/// Arrow per `step` grid pixels, lengths normalized by the largest vector.
pub fn render_quiver(field: &MotionField, scale: usize, step: usize) -> RgbImage {
    let dims = field.dims();
    let mut img = RgbImage::from_pixel(
        dims.width as u32 * scale as u32,
        dims.height as u32 * scale as u32,
        BACKGROUND,
    );
    let max = field.vectors().iter().map(|v| v.norm()).fold(0.0, f64::max);
    if max <= 0.0 || !max.is_finite() {
        return img;
    }
    let len = 0.9 * (step * scale) as f64;
    for y in (0..dims.height).step_by(step) {
        for x in (0..dims.width).step_by(step) {
            let v = field.get(x, y);
            if v.is_zero() {
                continue;
            }
            let a = to_image(x as f64, y as f64, scale);
            let (ex, ey) = (a.0 as f64 + v.x / max * len, a.1 as f64 + v.y / max * len);
            let b = (ex.round() as i64, ey.round() as i64);
            line(&mut img, a, b, ARROW);
            // short head barbs
            let n = (v.x * v.x + v.y * v.y).sqrt();
            let (ux, uy) = (v.x / n, v.y / n);
            for side in [-1.0, 1.0] {
                let hx = ex - 3.0 * ux + side * 2.0 * -uy;
                let hy = ey - 3.0 * uy + side * 2.0 * ux;
                line(&mut img, b, (hx.round() as i64, hy.round() as i64), ARROW);
            }
        }
    }
    img
}

pub fn draw_curve(img: &mut RgbImage, curve: &FlowCurve, scale: usize) {
    let pts: Vec<(i64, i64)> = curve
        .points
        .iter()
        .map(|p| to_image(p[0], p[1], scale))
        .collect();
    for w in pts.windows(2) {
        line(img, w[0], w[1], CURVE);
    }
    for child in &curve.children {
        if let (Some(&a), Some(b)) = (pts.last(), child.points.first()) {
            line(img, a, to_image(b[0], b[1], scale), CURVE);
        }
        draw_curve(img, child, scale);
    }
    for &(x, y) in &pts {
        put(img, x, y, CONTROL_POINT);
    }
}

#[derive(Serialize)]
struct RenderReport {
    schema_version: u32,
    command: &'static str,
    scale: usize,
    images: Vec<String>,
}

pub fn render(cfg: &PipelineConfig, dirs: &Dirs) -> CliResult<()> {
    let input = dirs
        .input
        .as_deref()
        .ok_or_else(|| CliError::Validation("an input directory is required (--in)".into()))?;
    let out = dirs.output.clone().unwrap_or_else(|| input.join("render"));
    let scale = cfg.render.scale;
    let mut names: Vec<String> = std::fs::read_dir(input)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", input.display())))?
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter(|n| n.ends_with(".pgm") || n.ends_with(".flo"))
        .collect();
    names.sort();
    let mining = input.join("mining.json");
    if names.is_empty() && !mining.exists() {
        return Err(CliError::Validation(format!(
            "nothing to render in {}",
            input.display()
        )));
    }
    ensure_dir(&out)?;
    let mut images = Vec::new();
    for name in &names {
        let path = input.join(name);
        let img = if name.ends_with(".pgm") {
            let (dims, labels) = read_input_pgm(&path)?;
            render_labels(dims, &labels, scale)
        } else {
            render_quiver(&read_input_flo(&path)?, scale, cfg.render.quiver_step)
        };
        let png = format!(
            "{}.png",
            Path::new(name).file_stem().unwrap().to_string_lossy()
        );
        img.save(out.join(&png))?;
        images.push(png);
    }
    if mining.exists() {
        let report: MiningReport = read_input_json(&mining)?;
        let (dims, labels) = read_input_pgm(&input.join(SEMANTIC_PGM))?;
        let mut img = render_labels(dims, &labels, scale);
        for c in report.groups.iter().flat_map(|g| &g.clusters) {
            if let Some(curve) = &c.curve {
                draw_curve(&mut img, curve, scale);
            }
        }
        img.save(out.join("curves.png"))?;
        images.push("curves.png".into());
    }
    write_json(
        &out.join("render.json"),
        &RenderReport {
            schema_version: SCHEMA_VERSION,
            command: "render",
            scale,
            images,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use coherentflow::Vec2;

    #[test]
    fn palette_avoids_overlay_colours() {
        for l in 1..2000 {
            let c = label_color(l);
            assert!(c != BACKGROUND && c != ARROW && c != CURVE && c != CONTROL_POINT);
        }
    }

    #[test]
    fn control_points_land_on_scaled_pixel() {
        let dims = GridDims::new(10, 10).unwrap();
        let mut img = render_labels(dims, &vec![0; 100], 4);
        let curve = FlowCurve {
            source: 0,
            points: vec![[1.0, 2.0], [5.0, 2.0]],
            children: vec![],
        };
        draw_curve(&mut img, &curve, 4);
        assert_eq!(*img.get_pixel(6, 10), CONTROL_POINT);
        assert_eq!(*img.get_pixel(22, 10), CONTROL_POINT);
        assert_eq!(*img.get_pixel(14, 10), CURVE);
    }

    #[test]
    fn zero_field_renders_blank() {
        let dims = GridDims::new(8, 8).unwrap();
        let img = render_quiver(&MotionField::zeros(dims), 2, 2);
        assert!(img.pixels().all(|p| *p == BACKGROUND));
        let img = render_quiver(&MotionField::constant(dims, Vec2::new(1.0, 0.0)), 2, 2);
        assert!(img.pixels().any(|p| *p == ARROW));
    }
}
