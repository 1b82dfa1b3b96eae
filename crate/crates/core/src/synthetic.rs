//! Seeded synthetic infrared-visible scenes, fused outputs and annotations for
//! smoke runs and tests.
//!
//! Visible frames carry a lit area, smooth shading and texture; infrared frames carry
//! a few warm blobs on a cool background. Three fusion methods are
//! provided: `mean`, `max`, and `spotty` (the mean plus bright-spot
//! artifacts, which its annotation circles).

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::annotation::{AnnotationRecord, CircleAnnotation, ScoreVector};
use crate::data_pipeline::ImagePair;
use crate::error::{Error, Result};
use crate::image::Image;

pub const METHODS: [&str; 3] = ["mean", "max", "spotty"];

fn rng_for(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// One scene of `size x size` pixels.
pub fn synthetic_pair(pair_id: &str, size: usize, seed: u64) -> ImagePair {
    let mut rng = rng_for(seed, 1);
    let (fx, fy) = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
    let phase: f64 = rng.random_range(0.0..TAU);
    // A bright lit area at a random place keeps scenes apart under the
    // thumbnail embedder.
    let (lx, ly): (f64, f64) = (rng.random_range(0.1..0.9), rng.random_range(0.1..0.9));
    let s = size as f64;
    let visible = Image::from_fn(size, size, 3, |x, y, c| {
        let (u, v) = (x as f64 / s, y as f64 / s);
        let lit = (-((u - lx).powi(2) + (v - ly).powi(2)) / (2.0 * 0.18 * 0.18)).exp();
        let shade = 0.05 + 0.1 * (1.0 - v) + 0.7 * lit;
        let texture = 0.08 * ((fx * TAU * u * 3.0 + phase).sin() * (fy * TAU * v * 3.0).cos());
        let tint = [0.02, 0.0, -0.02][c];
        (shade + texture + tint).clamp(0.0, 1.0)
    });
    let blobs: Vec<(f64, f64, f64)> = (0..rng.random_range(1..=3))
        .map(|_| {
            (
                rng.random_range(0.15..0.85) * s,
                rng.random_range(0.15..0.85) * s,
                rng.random_range(0.08..0.2) * s,
            )
        })
        .collect();
    let infrared = Image::from_fn(size, size, 1, |x, y, _| {
        let mut v: f64 = 0.12 + 0.05 * (y as f64 / s);
        for &(cx, cy, r) in &blobs {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            v += 0.75 * (-d2 / (2.0 * r * r)).exp();
        }
        v.clamp(0.0, 1.0)
    });
    ImagePair::new(pair_id, visible, infrared, "synthetic", (size * size) as u64).expect("same dims")
}

/// The fused output of `method` and the annotation a careful rater would give
/// it.
pub fn synthetic_fusion(pair: &ImagePair, method: &str, seed: u64) -> Result<(Image, AnnotationRecord)> {
    let vis = &pair.visible;
    let ir = pair.infrared.to_rgb();
    let (w, h) = (vis.width(), vis.height());
    let blend = |f: fn(f64, f64) -> f64| Image::from_fn(w, h, 3, |x, y, c| f(vis.get(x, y, c), ir.get(x, y, c)));
    let triplet_id = format!("{}__{method}", pair.pair_id);
    let (fused, scores, shapes) = match method {
        "mean" => (blend(|a, b| 0.5 * (a + b)), [4.0, 4.0, 5.0, 3.0, 4.0], vec![]),
        "max" => (blend(f64::max), [5.0, 3.0, 4.0, 4.0, 4.0], vec![]),
        "spotty" => {
            let mut rng = rng_for(seed, 2);
            let mut img = blend(|a, b| 0.5 * (a + b));
            let mut shapes = Vec::new();
            for _ in 0..rng.random_range(1..=2) {
                let r = (w.min(h) as f64 * rng.random_range(0.08..0.14)).max(1.5);
                let cx = rng.random_range(r..(w as f64 - r));
                let cy = rng.random_range(r..(h as f64 - r));
                let circle = CircleAnnotation::new((cx, cy), (cx + r, cy));
                for y in 0..h {
                    for x in 0..w {
                        if circle.contains(x as f64, y as f64) {
                            for c in 0..3 {
                                img.set(x, y, c, 1.0);
                            }
                        }
                    }
                }
                shapes.push(circle);
            }
            (img, [3.0, 3.0, 1.0, 3.0, 2.0], shapes)
        }
        other => {
            return Err(Error::InvalidArgument(format!("unknown synthetic fusion method `{other}`")));
        }
    };
    let record = AnnotationRecord {
        triplet_id,
        scores: ScoreVector::from_array(scores)?,
        shapes,
        annotator: "synthetic".into(),
        reviewed: true,
    };
    Ok((fused, record))
}

/// Paths produced by [`write_dataset`].
#[derive(Debug, Clone)]
pub struct SyntheticLayout {
    /// Contains `visible/` and `infrared/`.
    pub pairs_dir: PathBuf,
    /// `method -> directory of <pair_id>.png`.
    pub fused_dirs: BTreeMap<String, PathBuf>,
    /// One `<triplet_id>.json` per triplet.
    pub annotations_dir: PathBuf,
}

/// Writes `n_pairs` scenes, their fused outputs for `methods`, and the
/// matching annotations under `root`.
pub fn write_dataset(
    root: impl AsRef<Path>,
    n_pairs: usize,
    size: usize,
    methods: &[&str],
    seed: u64,
) -> Result<SyntheticLayout> {
    let root = root.as_ref();
    let pairs_dir = root.join("pairs");
    let annotations_dir = root.join("annotations");
    let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(&pairs_dir.join("visible"))?;
    mkdir(&pairs_dir.join("infrared"))?;
    mkdir(&annotations_dir)?;
    let mut fused_dirs = BTreeMap::new();
    for m in methods {
        let d = root.join("fused").join(m);
        mkdir(&d)?;
        fused_dirs.insert(m.to_string(), d);
    }
    for k in 0..n_pairs {
        let id = format!("scene{k:03}");
        let pair = synthetic_pair(&id, size, seed.wrapping_add(k as u64));
        pair.visible.save_png(pairs_dir.join("visible").join(format!("{id}.png")))?;
        pair.infrared.save_png(pairs_dir.join("infrared").join(format!("{id}.png")))?;
        for m in methods {
            let (fused, record) = synthetic_fusion(&pair, m, seed.wrapping_add(k as u64))?;
            fused.save_png(fused_dirs[*m].join(format!("{id}.png")))?;
            let path = annotations_dir.join(format!("{}.json", record.triplet_id));
            std::fs::write(&path, record.to_json_string()).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(SyntheticLayout {
        pairs_dir,
        fused_dirs,
        annotations_dir,
    })
}
