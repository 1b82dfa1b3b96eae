use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ImagePair;
use crate::error::{Error, Result};
use crate::image::Image;

/// Maps an image to a fixed-dimension feature vector.
pub trait Embedder: Sync {
    fn dim(&self) -> usize;
    fn embed(&self, image: &Image) -> Result<Vec<f64>>;
}

/// Grayscale `side x side` area-average thumbnail, flattened row-major.
#[derive(Debug, Clone, Copy)]
pub struct DownsampleEmbedder {
    pub side: usize,
}

impl Default for DownsampleEmbedder {
    fn default() -> Self {
        Self { side: 8 }
    }
}

impl Embedder for DownsampleEmbedder {
    fn dim(&self) -> usize {
        self.side * self.side
    }

    fn embed(&self, image: &Image) -> Result<Vec<f64>> {
        let gray = image.to_gray();
        let (h, w) = gray.dims();
        if w < self.side || h < self.side {
            return Ok(gray.resize(self.side, self.side).data().to_vec());
        }
        let mut out = Vec::with_capacity(self.dim());
        for cy in 0..self.side {
            let (y0, y1) = (cy * h / self.side, (cy + 1) * h / self.side);
            for cx in 0..self.side {
                let (x0, x1) = (cx * w / self.side, (cx + 1) * w / self.side);
                let mut acc = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += gray.get(x, y, 0);
                    }
                }
                out.push(acc / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub pair_id: String,
    pub vector: Vec<f64>,
    pub l2_normalized: bool,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Embeds the visible frame of `pair` and L2-normalizes the result.
pub fn embed_visible(pair: &ImagePair, embedder: &dyn Embedder) -> Result<EmbeddingVector> {
    let raw = embedder.embed(&pair.visible)?;
    if raw.len() != embedder.dim() {
        return Err(Error::DimensionMismatch(format!(
            "embedder declared dimension {} but produced {}",
            embedder.dim(),
            raw.len()
        )));
    }
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::DegenerateEmbedding(pair.pair_id.clone()));
    }
    Ok(EmbeddingVector {
        pair_id: pair.pair_id.clone(),
        vector: raw.into_iter().map(|v| v / norm).collect(),
        l2_normalized: true,
    })
}

pub fn embed_all(pairs: &[ImagePair], embedder: &dyn Embedder) -> Result<Vec<EmbeddingVector>> {
    pairs.par_iter().map(|p| embed_visible(p, embedder)).collect()
}
