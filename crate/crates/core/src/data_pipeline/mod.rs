//! Dataset construction: source-pair ingestion, perceptual deduplication,
//! per-cluster representative selection and triplet manifest assembly.

mod cluster;
mod embed;
mod manifest;
mod quality;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub use cluster::{cosine_similarity, dedup_cluster, SceneCluster};
pub use embed::{embed_all, embed_visible, DownsampleEmbedder, Embedder, EmbeddingVector};
pub use manifest::{
    assemble_manifest, ImageTriplet, Manifest, ManifestReport, SkipEntry, SkipReason, Split,
    SplitFractions, TripletEntry,
};
pub use quality::{quality_score, score_cluster, select_representative, QualityScore, RawQuality};

/// A registered visible/infrared pair.
#[derive(Debug, Clone)]
pub struct ImagePair {
    pub pair_id: String,
    pub visible: Image,
    pub infrared: Image,
    pub source_dataset: String,
    /// Encoded size of the visible frame, used as an information-content proxy.
    pub file_size_bytes: u64,
    pub visible_path: Option<PathBuf>,
    pub infrared_path: Option<PathBuf>,
}

impl ImagePair {
    pub fn new(
        pair_id: impl Into<String>,
        visible: Image,
        infrared: Image,
        source_dataset: impl Into<String>,
        file_size_bytes: u64,
    ) -> Result<Self> {
        let pair_id = pair_id.into();
        if !visible.same_dims(&infrared) {
            return Err(Error::DimensionMismatch(format!(
                "pair `{pair_id}`: visible is {:?} but infrared is {:?}",
                visible.dims(),
                infrared.dims()
            )));
        }
        Ok(Self {
            pair_id,
            visible,
            infrared,
            source_dataset: source_dataset.into(),
            file_size_bytes,
            visible_path: None,
            infrared_path: None,
        })
    }

    pub fn width(&self) -> usize {
        self.visible.width()
    }

    pub fn height(&self) -> usize {
        self.visible.height()
    }

    pub fn source(&self) -> Option<SourcePair> {
        Some(SourcePair {
            pair_id: self.pair_id.clone(),
            visible_path: self.visible_path.clone()?,
            infrared_path: self.infrared_path.clone()?,
        })
    }
}

/// File locations of a pair, as recorded in cluster and manifest files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourcePair {
    pub pair_id: String,
    pub visible_path: PathBuf,
    pub infrared_path: PathBuf,
}

/// Loads every pair from `dir/visible/*.png` and `dir/infrared/*.png`,
/// matched by file stem. Pairs are returned sorted by id.
pub fn load_pair_dir(dir: impl AsRef<Path>) -> Result<Vec<ImagePair>> {
    let dir = dir.as_ref();
    let source_dataset = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let vis_dir = dir.join("visible");
    let ir_dir = dir.join("infrared");
    let mut stems = Vec::new();
    let entries = std::fs::read_dir(&vis_dir).map_err(|e| Error::io(&vis_dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&vis_dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();

    let mut pairs = Vec::with_capacity(stems.len());
    for stem in stems {
        let vis_path = vis_dir.join(format!("{stem}.png"));
        let ir_path = ir_dir.join(format!("{stem}.png"));
        let visible = Image::load_png(&vis_path)?;
        let infrared = Image::load_png(&ir_path)?;
        let size = std::fs::metadata(&vis_path)
            .map_err(|e| Error::io(&vis_path, e))?
            .len();
        let mut pair = ImagePair::new(stem, visible, infrared, source_dataset.clone(), size)?;
        pair.visible_path = Some(vis_path);
        pair.infrared_path = Some(ir_path);
        pairs.push(pair);
    }
    Ok(pairs)
}

/// Cluster file written by the dedup stage and read by manifest assembly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterFile {
    pub threshold: f64,
    pub clusters: Vec<SceneCluster>,
    pub pairs: Vec<SourcePair>,
    #[serde(default)]
    pub excluded: Vec<String>,
}

impl ClusterFile {
    /// Source pairs of every cluster representative, minus exclusions.
    pub fn retained(&self) -> Vec<SourcePair> {
        let reps: std::collections::BTreeSet<&str> = self
            .clusters
            .iter()
            .map(|c| c.representative_id.as_str())
            .collect();
        self.pairs
            .iter()
            .filter(|p| reps.contains(p.pair_id.as_str()))
            .filter(|p| !self.excluded.contains(&p.pair_id))
            .cloned()
            .collect()
    }
}

/// Embeds, clusters and picks a representative for each cluster.
pub fn clean_pairs(
    pairs: &[ImagePair],
    embedder: &dyn Embedder,
    threshold: f64,
) -> Result<Vec<SceneCluster>> {
    let embeddings = embed_all(pairs, embedder)?;
    let mut clusters = dedup_cluster(&embeddings, threshold)?;
    let by_id: std::collections::HashMap<&str, &ImagePair> =
        pairs.iter().map(|p| (p.pair_id.as_str(), p)).collect();
    for cluster in &mut clusters {
        let members: Vec<&ImagePair> = cluster
            .member_ids
            .iter()
            .map(|id| by_id[id.as_str()])
            .collect();
        let scores = score_cluster(&members)
            .into_iter()
            .map(|s| (s.pair_id.clone(), s))
            .collect();
        cluster.representative_id = select_representative(cluster, &scores)?;
    }
    Ok(clusters)
}
