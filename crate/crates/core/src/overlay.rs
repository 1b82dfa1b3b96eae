//! Artifact overlays: the predicted heatmap is thresholded, split into
//! 8-connected components, and each component's minimal enclosing circle is
//! drawn in red over the fused image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const OVERLAY_THRESHOLD: f64 = 0.5;

const RED: [f64; 3] = [1.0, 0.0, 0.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl Circle {
    fn contains(&self, p: (f64, f64)) -> bool {
        ((p.0 - self.cx).powi(2) + (p.1 - self.cy).powi(2)).sqrt() <= self.r * (1.0 + 1e-12) + 1e-12
    }

    fn from_two(a: (f64, f64), b: (f64, f64)) -> Self {
        let (cx, cy) = ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0);
        Self { cx, cy, r: ((a.0 - cx).powi(2) + (a.1 - cy).powi(2)).sqrt() }
    }

    fn from_three(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> Self {
        let d = 2.0 * (a.0 * (b.1 - c.1) + b.0 * (c.1 - a.1) + c.0 * (a.1 - b.1));
        if d.abs() < 1e-12 {
            // Collinear: the widest pair spans the others.
            let cands = [Self::from_two(a, b), Self::from_two(a, c), Self::from_two(b, c)];
            return cands.into_iter().max_by(|x, y| x.r.total_cmp(&y.r)).expect("three candidates");
        }
        let sq = |p: (f64, f64)| p.0 * p.0 + p.1 * p.1;
        let cx = (sq(a) * (b.1 - c.1) + sq(b) * (c.1 - a.1) + sq(c) * (a.1 - b.1)) / d;
        let cy = (sq(a) * (c.0 - b.0) + sq(b) * (a.0 - c.0) + sq(c) * (b.0 - a.0)) / d;
        Self { cx, cy, r: ((a.0 - cx).powi(2) + (a.1 - cy).powi(2)).sqrt() }
    }
}

/// Smallest circle containing every point (incremental Welzl).
pub fn min_enclosing_circle(points: &[(f64, f64)]) -> Option<Circle> {
    let (&first, rest) = points.split_first()?;
    let mut c = Circle { cx: first.0, cy: first.1, r: 0.0 };
    for (i, &p) in rest.iter().enumerate() {
        if c.contains(p) {
            continue;
        }
        c = Circle { cx: p.0, cy: p.1, r: 0.0 };
        for j in 0..=i {
            let q = points[j];
            if c.contains(q) {
                continue;
            }
            c = Circle::from_two(p, q);
            for &s in &points[..j] {
                if !c.contains(s) {
                    c = Circle::from_three(p, q, s);
                }
            }
        }
    }
    Some(c)
}

/// 8-connected components of pixels at or above `threshold` in a
/// single-channel image, in raster order of their first pixel.
pub fn components(heatmap: &Image, threshold: f64) -> Vec<Vec<(usize, usize)>> {
    let (w, h) = (heatmap.width(), heatmap.height());
    let on = |x: usize, y: usize| heatmap.get(x, y, 0) >= threshold;
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    for y0 in 0..h {
        for x0 in 0..w {
            if seen[y0 * w + x0] || !on(x0, y0) {
                continue;
            }
            seen[y0 * w + x0] = true;
            let mut stack = vec![(x0, y0)];
            let mut comp = Vec::new();
            while let Some((x, y)) = stack.pop() {
                comp.push((x, y));
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (nx, ny) = (x as isize + dx, y as isize + dy);
                        if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                            continue;
                        }
                        let (nx, ny) = (nx as usize, ny as usize);
                        if !seen[ny * w + nx] && on(nx, ny) {
                            seen[ny * w + nx] = true;
                            stack.push((nx, ny));
                        }
                    }
                }
            }
            comp.sort_by_key(|&(x, y)| (y, x));
            out.push(comp);
        }
    }
    out
}

/// Circles around the artifact components of `heatmap`. The circle encloses
/// the centers of the component's pixels, padded by half a pixel.
pub fn artifact_circles(heatmap: &Image) -> Vec<Circle> {
    components(heatmap, OVERLAY_THRESHOLD)
        .iter()
        .filter_map(|comp| {
            let pts: Vec<(f64, f64)> = comp.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
            min_enclosing_circle(&pts).map(|c| Circle { r: c.r + 0.5, ..c })
        })
        .collect()
}

/// Draws a one-pixel red ring for each circle.
pub fn draw_circles(image: &Image, circles: &[Circle]) -> Image {
    let mut out = image.to_rgb();
    for c in circles {
        let x0 = (c.cx - c.r - 1.0).floor().max(0.0) as usize;
        let y0 = (c.cy - c.r - 1.0).floor().max(0.0) as usize;
        let x1 = ((c.cx + c.r + 1.0).ceil().max(0.0) as usize).min(out.width().saturating_sub(1));
        let y1 = ((c.cy + c.r + 1.0).ceil().max(0.0) as usize).min(out.height().saturating_sub(1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = ((x as f64 - c.cx).powi(2) + (y as f64 - c.cy).powi(2)).sqrt();
                if (d - c.r).abs() <= 0.5 {
                    for (ch, v) in RED.iter().enumerate() {
                        out.set(x, y, ch, *v);
                    }
                }
            }
        }
    }
    out
}

/// The fused image with red circles around every predicted artifact.
pub fn render_overlay(fused: &Image, heatmap: &Image) -> Result<(Image, Vec<Circle>)> {
    if fused.dims() != heatmap.dims() {
        return Err(Error::DimensionMismatch(format!(
            "fused image is {:?}, heatmap is {:?}",
            fused.dims(),
            heatmap.dims()
        )));
    }
    let circles = artifact_circles(heatmap);
    Ok((draw_circles(fused, &circles), circles))
}
