//! Small raster utilities over boolean masks on a [`GridDims`] grid.

use crate::field::GridDims;

pub fn mask_from_pixels(dims: GridDims, pixels: &[usize]) -> Vec<bool> {
    let mut m = vec![false; dims.len()];
    for &i in pixels {
        m[i] = true;
    }
    m
}

/// Mask pixels with a 4-neighbour outside the mask or on the grid border.
pub fn mask_boundary(dims: GridDims, mask: &[bool]) -> Vec<usize> {
    (0..dims.len())
        .filter(|&i| {
            if !mask[i] {
                return false;
            }
            let (x, y) = dims.coords(i);
            x == 0
                || y == 0
                || x + 1 == dims.width
                || y + 1 == dims.height
                || dims.neighbors4(i).any(|n| !mask[n])
        })
        .collect()
}

/// Visits every integer point of the segment `a`-`b`.
pub fn bresenham(a: (i64, i64), b: (i64, i64), mut plot: impl FnMut(i64, i64)) {
    let (mut x, mut y) = a;
    let dx = (b.0 - a.0).abs();
    let dy = -(b.1 - a.1).abs();
    let sx = if a.0 < b.0 { 1 } else { -1 };
    let sy = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        plot(x, y);
        if (x, y) == b {
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

/// 3x3 binary dilation.
pub fn dilate(dims: GridDims, mask: &[bool]) -> Vec<bool> {
    let mut out = mask.to_vec();
    for i in 0..dims.len() {
        if mask[i] {
            for n in dims.neighbors8(i) {
                out[n] = true;
            }
        }
    }
    out
}

/// 3x3 binary erosion; pixels off the grid count as set.
pub fn erode(dims: GridDims, mask: &[bool]) -> Vec<bool> {
    (0..dims.len())
        .map(|i| mask[i] && dims.neighbors8(i).all(|n| mask[n]))
        .collect()
}

/// Exact squared Euclidean distance from every pixel to the nearest `true`
/// pixel (Felzenszwalb-Huttenlocher lower envelope). Without any `true`
/// pixel every distance is `u64::MAX / 4`.
pub fn distance_transform_sq(dims: GridDims, features: &[bool]) -> Vec<u64> {
    const INF: i64 = i64::MAX / 8;
    let (w, h) = (dims.width, dims.height);
    // columns first
    let mut g = vec![INF; dims.len()];
    let mut col = vec![0i64; h];
    let mut out_col = vec![0i64; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = if features[dims.index(x, y)] { 0 } else { INF };
        }
        envelope_1d(&col, &mut out_col);
        for y in 0..h {
            g[dims.index(x, y)] = out_col[y];
        }
    }
    let mut row = vec![0i64; w];
    let mut out_row = vec![0i64; w];
    let mut out = vec![0u64; dims.len()];
    for y in 0..h {
        row.copy_from_slice(&g[y * w..(y + 1) * w]);
        envelope_1d(&row, &mut out_row);
        for x in 0..w {
            out[y * w + x] = if out_row[x] >= INF {
                u64::MAX / 4
            } else {
                out_row[x] as u64
            };
        }
    }
    out
}

fn envelope_1d(f: &[i64], d: &mut [i64]) {
    const INF: i64 = i64::MAX / 8;
    let n = f.len();
    let finite: Vec<usize> = (0..n).filter(|&q| f[q] < INF).collect();
    if finite.is_empty() {
        d.fill(INF);
        return;
    }
    // parabola vertices and the boundaries between them, in f64
    let mut v: Vec<usize> = Vec::with_capacity(finite.len());
    let mut z: Vec<f64> = Vec::with_capacity(finite.len() + 1);
    let inter = |q: usize, p: usize| -> f64 {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] as f64 + qf * qf) - (f[p] as f64 + pf * pf)) / (2.0 * (qf - pf))
    };
    for &q in &finite {
        loop {
            if v.is_empty() {
                v.push(q);
                z.clear();
                z.push(f64::NEG_INFINITY);
                break;
            }
            let s = inter(q, *v.last().unwrap());
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
                continue;
            }
            v.push(q);
            z.push(s);
            break;
        }
    }
    z.push(f64::INFINITY);
    let mut k = 0;
    for (q, slot) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as i64 - v[k] as i64;
        *slot = dq * dq + f[v[k]];
    }
}

/// 4-connected components of `mask`; returns labels (0 = off, 1..) and the
/// component count.
pub fn connected_components(dims: GridDims, mask: &[bool]) -> (Vec<u32>, usize) {
    let mut labels = vec![0u32; dims.len()];
    let mut count = 0u32;
    for s in 0..dims.len() {
        if !mask[s] || labels[s] != 0 {
            continue;
        }
        count += 1;
        labels[s] = count;
        let mut stack = vec![s];
        while let Some(i) = stack.pop() {
            for n in dims.neighbors4(i) {
                if mask[n] && labels[n] == 0 {
                    labels[n] = count;
                    stack.push(n);
                }
            }
        }
    }
    (labels, count as usize)
}

/// Zhang-Suen thinning to a one-pixel-wide 8-connected skeleton. Pixels
/// off the grid count as background.
pub fn skeletonize(dims: GridDims, mask: &[bool]) -> Vec<bool> {
    let (w, h) = (dims.width as i64, dims.height as i64);
    let mut m = mask.to_vec();
    let at = |m: &[bool], x: i64, y: i64| -> bool {
        x >= 0 && y >= 0 && x < w && y < h && m[(y * w + x) as usize]
    };
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    if !at(&m, x, y) {
                        continue;
                    }
                    // P2..P9 clockwise from north
                    let n = [
                        at(&m, x, y - 1),
                        at(&m, x + 1, y - 1),
                        at(&m, x + 1, y),
                        at(&m, x + 1, y + 1),
                        at(&m, x, y + 1),
                        at(&m, x - 1, y + 1),
                        at(&m, x - 1, y),
                        at(&m, x - 1, y - 1),
                    ];
                    let b = n.iter().filter(|&&v| v).count();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8).filter(|&i| !n[i] && n[(i + 1) % 8]).count();
                    if a != 1 {
                        continue;
                    }
                    let (p2, p4, p6, p8) = (n[0], n[2], n[4], n[6]);
                    let ok = if pass == 0 {
                        !(p2 && p4 && p6) && !(p4 && p6 && p8)
                    } else {
                        !(p2 && p4 && p8) && !(p2 && p6 && p8)
                    };
                    if ok {
                        remove.push((y * w + x) as usize);
                    }
                }
            }
            changed |= !remove.is_empty();
            for i in remove {
                m[i] = false;
            }
        }
        if !changed {
            return m;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distance_transform_matches_brute_force() {
        let dims = GridDims::new(13, 9).unwrap();
        let feats: Vec<bool> = (0..dims.len()).map(|i| i % 17 == 3 || i == 50).collect();
        let dt = distance_transform_sq(dims, &feats);
        for i in 0..dims.len() {
            let (x, y) = dims.coords(i);
            let brute = (0..dims.len())
                .filter(|&j| feats[j])
                .map(|j| {
                    let (fx, fy) = dims.coords(j);
                    let dx = x as i64 - fx as i64;
                    let dy = y as i64 - fy as i64;
                    (dx * dx + dy * dy) as u64
                })
                .min()
                .unwrap();
            assert_eq!(dt[i], brute, "pixel {i}");
        }
    }

    #[test]
    fn bresenham_endpoints_and_connectivity() {
        let mut pts = vec![];
        bresenham((0, 0), (5, 2), |x, y| pts.push((x, y)));
        assert_eq!(pts.first(), Some(&(0, 0)));
        assert_eq!(pts.last(), Some(&(5, 2)));
        for w in pts.windows(2) {
            assert!((w[0].0 - w[1].0).abs() <= 1 && (w[0].1 - w[1].1).abs() <= 1);
        }
    }

    #[test]
    fn boundary_of_square() {
        let dims = GridDims::new(6, 6).unwrap();
        let pix: Vec<usize> = (0..36)
            .filter(|&i| {
                let (x, y) = dims.coords(i);
                (1..5).contains(&x) && (1..5).contains(&y)
            })
            .collect();
        let m = mask_from_pixels(dims, &pix);
        assert_eq!(mask_boundary(dims, &m).len(), 12);
        let (_, n) = connected_components(dims, &m);
        assert_eq!(n, 1);
    }

    #[test]
    fn skeleton_of_bar_is_thin_centerline() {
        let dims = GridDims::new(30, 9).unwrap();
        let m: Vec<bool> = (0..dims.len())
            .map(|i| {
                let (x, y) = dims.coords(i);
                (2..28).contains(&x) && (2..7).contains(&y)
            })
            .collect();
        let sk = skeletonize(dims, &m);
        assert!(sk.iter().zip(&m).all(|(s, m)| !s || *m));
        for x in 6..24 {
            let ys: Vec<usize> = (0..9).filter(|&y| sk[y * 30 + x]).collect();
            assert_eq!(ys, vec![4], "column {x}");
        }
        let (_, n) = connected_components(dims, &dilate(dims, &sk));
        assert_eq!(n, 1);
    }
}
