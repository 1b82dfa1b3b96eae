use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// `K` binary masks over an `H x W` frame, each row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSet {
    pub width: usize,
    pub height: usize,
    pub masks: Vec<Vec<bool>>,
}

impl RegionSet {
    pub fn new(width: usize, height: usize, masks: Vec<Vec<bool>>) -> Result<Self> {
        if masks.is_empty() {
            return Err(Error::InvalidArgument("a region set needs at least one mask".into()));
        }
        for (k, m) in masks.iter().enumerate() {
            if m.len() != width * height {
                return Err(Error::DimensionMismatch(format!(
                    "mask {k} has {} pixels, frame has {}",
                    m.len(),
                    width * height
                )));
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::InvalidArgument(format!("mask {k} is empty")));
            }
        }
        Ok(Self { width, height, masks })
    }

    /// The single all-ones mask.
    pub fn whole(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            masks: vec![vec![true; width * height]],
        }
    }

    pub fn k(&self) -> usize {
        self.masks.len()
    }

    pub fn area(&self, k: usize) -> usize {
        self.masks[k].iter().filter(|&&b| b).count()
    }

    /// Fraction of pixels covered by at least one mask.
    pub fn coverage(&self) -> f64 {
        let n = self.width * self.height;
        let covered = (0..n).filter(|&p| self.masks.iter().any(|m| m[p])).count();
        covered as f64 / n as f64
    }

    /// Every pixel in exactly one mask.
    pub fn is_partition(&self) -> bool {
        (0..self.width * self.height).all(|p| self.masks.iter().filter(|m| m[p]).count() == 1)
    }

    pub fn weights(&self, scheme: RegionWeights) -> Vec<f64> {
        match scheme {
            RegionWeights::Uniform => vec![1.0 / self.k() as f64; self.k()],
            RegionWeights::Area => {
                let areas: Vec<f64> = (0..self.k()).map(|k| self.area(k) as f64).collect();
                let total: f64 = areas.iter().sum();
                areas.iter().map(|a| a / total).collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionWeights {
    Uniform,
    /// `|M_k| / sum_j |M_j|`.
    #[default]
    Area,
}

pub trait Segmenter: Sync {
    fn name(&self) -> &'static str;
    fn segment(&self, image: &Image, k_target: usize) -> Result<RegionSet>;
}

fn check_k(image: &Image, k: usize) -> Result<()> {
    let n = image.width() * image.height();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "region count {k} must lie in 1..={n} for a {}x{} image",
            image.width(),
            image.height()
        )));
    }
    Ok(())
}

/// Near-equal rectangles: `K = rows x cols` with the factorization whose
/// cell aspect is closest to square. When no factorization fits the frame,
/// `K` contiguous raster-order runs.
#[derive(Debug, Clone, Copy, Default)]
pub struct GridSegmenter;

fn bounds(len: usize, parts: usize, i: usize) -> usize {
    (i * len + parts / 2) / parts
}

impl Segmenter for GridSegmenter {
    fn name(&self) -> &'static str {
        "grid"
    }

    fn segment(&self, image: &Image, k: usize) -> Result<RegionSet> {
        check_k(image, k)?;
        let (w, h) = (image.width(), image.height());
        let best = (1..=k)
            .filter(|r| k.is_multiple_of(*r) && *r <= h && k / r <= w)
            .min_by(|&a, &b| {
                let skew = |r: usize| {
                    let cell_h = h as f64 / r as f64;
                    let cell_w = w as f64 / (k / r) as f64;
                    (cell_h / cell_w).ln().abs()
                };
                skew(a).total_cmp(&skew(b)).then(a.cmp(&b))
            });
        let masks = match best {
            Some(rows) => {
                let cols = k / rows;
                let mut masks = Vec::with_capacity(k);
                for r in 0..rows {
                    for c in 0..cols {
                        let (y0, y1) = (bounds(h, rows, r), bounds(h, rows, r + 1));
                        let (x0, x1) = (bounds(w, cols, c), bounds(w, cols, c + 1));
                        let mut m = vec![false; w * h];
                        for y in y0..y1 {
                            m[y * w + x0..y * w + x1].fill(true);
                        }
                        masks.push(m);
                    }
                }
                masks
            }
            None => {
                let n = w * h;
                (0..k)
                    .map(|i| {
                        let mut m = vec![false; n];
                        m[bounds(n, k, i)..bounds(n, k, i + 1)].fill(true);
                        m
                    })
                    .collect()
            }
        };
        RegionSet::new(w, h, masks)
    }
}

/// Graph merge on the 4-connected pixel grid: edges weighted by absolute
/// luma difference are joined cheapest first until `K` components remain.
#[derive(Debug, Clone, Copy, Default)]
pub struct SuperpixelSegmenter;

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

impl Segmenter for SuperpixelSegmenter {
    fn name(&self) -> &'static str {
        "superpixel"
    }

    fn segment(&self, image: &Image, k: usize) -> Result<RegionSet> {
        check_k(image, k)?;
        let gray = image.to_gray();
        let (w, h) = (gray.width(), gray.height());
        let n = w * h;
        let px = gray.data();
        let mut edges = Vec::with_capacity(2 * n);
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                if x + 1 < w {
                    edges.push(((px[p] - px[p + 1]).abs(), p, p + 1));
                }
                if y + 1 < h {
                    edges.push(((px[p] - px[p + w]).abs(), p, p + w));
                }
            }
        }
        edges.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut parent: Vec<usize> = (0..n).collect();
        let mut components = n;
        for &(_, a, b) in &edges {
            if components == k {
                break;
            }
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
                components -= 1;
            }
        }
        // Masks ordered by their first pixel in raster order.
        let mut masks: Vec<Vec<bool>> = Vec::new();
        let mut root_label = std::collections::HashMap::new();
        for p in 0..n {
            let r = find(&mut parent, p);
            let l = *root_label.entry(r).or_insert_with(|| {
                masks.push(vec![false; n]);
                masks.len() - 1
            });
            masks[l][p] = true;
        }
        RegionSet::new(w, h, masks)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmenterKind {
    #[default]
    Grid,
    Superpixel,
}

impl SegmenterKind {
    pub fn build(self) -> Box<dyn Segmenter> {
        match self {
            SegmenterKind::Grid => Box::new(GridSegmenter),
            SegmenterKind::Superpixel => Box::new(SuperpixelSegmenter),
        }
    }
}

impl std::str::FromStr for SegmenterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid" => Ok(Self::Grid),
            "superpixel" => Ok(Self::Superpixel),
            other => Err(Error::InvalidArgument(format!(
                "unknown segmenter `{other}` (expected grid or superpixel)"
            ))),
        }
    }
}

/// Segments `fused` with `segmenter`.
pub fn segment_regions(fused: &Image, segmenter: &dyn Segmenter, k_target: usize) -> Result<RegionSet> {
    segmenter.segment(fused, k_target)
}
