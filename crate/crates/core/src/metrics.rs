//! Reference-based fusion metrics: CC, PSNR, SSIM and Q^{AB/F}.
//!
//! Every metric compares the fused image against both sources on grayscale
//! planes. CC, PSNR and SSIM average the two fused-vs-source values; Qabf
//! combines both sources through its gradient weighting.

use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data_pipeline::ImageTriplet;
use crate::error::{Error, Result};
use crate::image::Image;

pub const PSNR_CAP: f64 = 100.0;
pub const PEAK_8BIT: f64 = 255.0;

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

/// Q^{AB/F} sigmoid constants.
pub mod qabf_constants {
    pub const GAMMA_G: f64 = 0.9994;
    pub const KAPPA_G: f64 = -15.0;
    pub const SIGMA_G: f64 = 0.5;
    pub const GAMMA_A: f64 = 0.9879;
    pub const KAPPA_A: f64 = -22.0;
    pub const SIGMA_A: f64 = 0.8;
}

/// A single-channel plane on an arbitrary intensity scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height} plane",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    /// Grayscale of `image`, multiplied by `scale` (255 for 8-bit metrics).
    pub fn from_image(image: &Image, scale: f64) -> Self {
        let gray = image.to_gray();
        Self {
            width: gray.width(),
            height: gray.height(),
            data: gray.data().iter().map(|v| v * scale).collect(),
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Sample with coordinates clamped into the plane.
    #[inline]
    fn clamped(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.at(x, y)
    }

    pub fn transposed(&self) -> Plane {
        let mut data = Vec::with_capacity(self.data.len());
        for x in 0..self.width {
            for y in 0..self.height {
                data.push(self.at(x, y));
            }
        }
        Plane {
            width: self.height,
            height: self.width,
            data,
        }
    }

    fn check_same(&self, other: &Plane) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

/// Pearson correlation; 0 when either input is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    // Shifting by the first sample keeps constant inputs exactly constant.
    let (sa, sb) = (a[0], b[0]);
    let ma = a.iter().map(|x| x - sa).sum::<f64>() / a.len() as f64;
    let mb = b.iter().map(|y| y - sb).sum::<f64>() / b.len() as f64;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - sa - ma, y - sb - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    (cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0)
}

pub fn cc(fused: &Plane, visible: &Plane, infrared: &Plane) -> Result<f64> {
    fused.check_same(visible)?;
    fused.check_same(infrared)?;
    Ok(0.5 * (pearson(&fused.data, &visible.data) + pearson(&fused.data, &infrared.data)))
}

fn mse(a: &Plane, b: &Plane) -> f64 {
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / a.data.len() as f64
}

/// `10 log10(peak^2 / mse)` with the fused-vs-source MSEs averaged; `cap`
/// when that average is zero.
pub fn psnr(fused: &Plane, visible: &Plane, infrared: &Plane, peak: f64, cap: f64) -> Result<f64> {
    fused.check_same(visible)?;
    fused.check_same(infrared)?;
    let m = 0.5 * (mse(fused, visible) + mse(fused, infrared));
    if m == 0.0 {
        return Ok(cap);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(cap))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let (dx, dy) = (x as f64 - r, y as f64 - r);
            w.push((-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

/// Mean SSIM between two planes over every full 11x11 window position.
pub fn ssim_pair(a: &Plane, b: &Plane, peak: f64) -> Result<f64> {
    a.check_same(b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            a.width, a.height
        )));
    }
    let window = gaussian_window();
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let (ow, oh) = (a.width - SSIM_WINDOW + 1, a.height - SSIM_WINDOW + 1);
    let mut acc = 0.0;
    for oy in 0..oh {
        for ox in 0..ow {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for wy in 0..SSIM_WINDOW {
                for wx in 0..SSIM_WINDOW {
                    let w = window[wy * SSIM_WINDOW + wx];
                    let x = a.at(ox + wx, oy + wy);
                    let y = b.at(ox + wx, oy + wy);
                    mx += w * x;
                    my += w * y;
                    sxx += w * x * x;
                    syy += w * y * y;
                    sxy += w * x * y;
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cxy = sxy - mx * my;
            acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(acc / (ow * oh) as f64)
}

pub fn ssim(fused: &Plane, visible: &Plane, infrared: &Plane, peak: f64) -> Result<f64> {
    fused.check_same(infrared)?;
    Ok(0.5 * (ssim_pair(fused, visible, peak)? + ssim_pair(fused, infrared, peak)?))
}

/// Sobel response `(gx, gy)` at every pixel with replicated borders.
fn sobel(p: &Plane) -> (Vec<f64>, Vec<f64>) {
    let mut gx = Vec::with_capacity(p.data.len());
    let mut gy = Vec::with_capacity(p.data.len());
    for y in 0..p.height as isize {
        for x in 0..p.width as isize {
            let s = |dx: isize, dy: isize| p.clamped(x + dx, y + dy);
            gx.push((s(1, -1) + 2.0 * s(1, 0) + s(1, 1)) - (s(-1, -1) + 2.0 * s(-1, 0) + s(-1, 1)));
            gy.push((s(-1, 1) + 2.0 * s(0, 1) + s(1, 1)) - (s(-1, -1) + 2.0 * s(0, -1) + s(1, -1)));
        }
    }
    (gx, gy)
}

/// Edge orientation in `(-pi/2, pi/2]`; `pi/2` for a vertical gradient.
fn orientation(gx: f64, gy: f64) -> f64 {
    if gx == 0.0 {
        FRAC_PI_2
    } else {
        (gy / gx).atan()
    }
}

/// Per-pixel edge preservation `Q^{SF}` of source `s` in fused `f`.
fn edge_preservation(gs: f64, as_: f64, gf: f64, af: f64) -> f64 {
    use qabf_constants::*;
    let strength = if gs == gf {
        1.0
    } else if gs > gf {
        gf / gs
    } else {
        gs / gf
    };
    // Orientations are undirected, so their difference is taken modulo pi;
    // an edge that vanishes in either image keeps no orientation.
    let agreement = if gs == 0.0 && gf == 0.0 {
        1.0
    } else if gs == 0.0 || gf == 0.0 {
        0.0
    } else {
        let d = (as_ - af).abs();
        1.0 - d.min(std::f64::consts::PI - d) / FRAC_PI_2
    };
    let qg = GAMMA_G / (1.0 + (KAPPA_G * (strength - SIGMA_G)).exp());
    let qa = GAMMA_A / (1.0 + (KAPPA_A * (agreement - SIGMA_A)).exp());
    qg * qa
}

/// Gradient-based fusion quality in `[0, 1]`; 0 when neither source has any
/// gradient.
pub fn qabf(fused: &Plane, visible: &Plane, infrared: &Plane) -> Result<f64> {
    fused.check_same(visible)?;
    fused.check_same(infrared)?;
    let grads = |p: &Plane| {
        let (gx, gy) = sobel(p);
        let g: Vec<f64> = gx.iter().zip(&gy).map(|(x, y)| (x * x + y * y).sqrt()).collect();
        let a: Vec<f64> = gx.iter().zip(&gy).map(|(&x, &y)| orientation(x, y)).collect();
        (g, a)
    };
    let (gf, af) = grads(fused);
    let (ga, aa) = grads(visible);
    let (gb, ab) = grads(infrared);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..gf.len() {
        num += edge_preservation(ga[i], aa[i], gf[i], af[i]) * ga[i]
            + edge_preservation(gb[i], ab[i], gf[i], af[i]) * gb[i];
        den += ga[i] + gb[i];
    }
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok((num / den).clamp(0.0, 1.0))
}

/// Score of a perfectly preserved edge: strength and orientation ratios 1.
pub fn qabf_ceiling() -> f64 {
    edge_preservation(1.0, 0.3, 1.0, 0.3)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub triplet_id: String,
    pub cc: f64,
    pub psnr: f64,
    pub qabf: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn means(&self) -> Option<MetricRow> {
        if self.rows.is_empty() {
            return None;
        }
        let n = self.rows.len() as f64;
        let avg = |f: fn(&MetricRow) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        Some(MetricRow {
            triplet_id: "mean".into(),
            cc: avg(|r| r.cc),
            psnr: avg(|r| r.psnr),
            qabf: avg(|r| r.qabf),
            ssim: avg(|r| r.ssim),
        })
    }

    /// Per-triplet rows then a `mean` row; columns CC, PSNR, Qabf, SSIM.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("triplet_id,CC,PSNR,Qabf,SSIM\n");
        for r in self.rows.iter().chain(self.means().as_ref()) {
            let _ = writeln!(out, "{},{:.6},{:.6},{:.6},{:.6}", r.triplet_id, r.cc, r.psnr, r.qabf, r.ssim);
        }
        out
    }
}

/// All four metrics on the 8-bit intensity scale.
pub fn evaluate_triplet(triplet: &ImageTriplet) -> Result<MetricRow> {
    let f = Plane::from_image(&triplet.fused, PEAK_8BIT);
    let v = Plane::from_image(&triplet.visible, PEAK_8BIT);
    let i = Plane::from_image(&triplet.infrared, PEAK_8BIT);
    Ok(MetricRow {
        triplet_id: triplet.triplet_id.clone(),
        cc: cc(&f, &v, &i)?,
        psnr: psnr(&f, &v, &i, PEAK_8BIT, PSNR_CAP)?,
        qabf: qabf(&f, &v, &i)?,
        ssim: ssim(&f, &v, &i, PEAK_8BIT)?,
    })
}
