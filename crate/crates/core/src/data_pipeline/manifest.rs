use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SourcePair;
use crate::error::{Error, Result};
use crate::image::{probe_dims, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletEntry {
    pub triplet_id: String,
    pub pair_id: String,
    pub visible_path: PathBuf,
    pub infrared_path: PathBuf,
    pub fused_path: PathBuf,
    pub fusion_method: String,
    pub split: Split,
}

/// A manifest entry with its three images decoded.
#[derive(Debug, Clone)]
pub struct ImageTriplet {
    pub triplet_id: String,
    pub pair_id: String,
    pub visible: Image,
    pub infrared: Image,
    pub fused: Image,
    pub fusion_method: String,
    pub split: Split,
}

impl TripletEntry {
    pub fn load(&self) -> Result<ImageTriplet> {
        let visible = Image::load_png(&self.visible_path)?;
        let infrared = Image::load_png(&self.infrared_path)?;
        let fused = Image::load_png(&self.fused_path)?;
        if !visible.same_dims(&infrared) || !visible.same_dims(&fused) {
            return Err(Error::DimensionMismatch(format!(
                "triplet `{}`: visible {:?}, infrared {:?}, fused {:?}",
                self.triplet_id,
                visible.dims(),
                infrared.dims(),
                fused.dims()
            )));
        }
        Ok(ImageTriplet {
            triplet_id: self.triplet_id.clone(),
            pair_id: self.pair_id.clone(),
            visible,
            infrared,
            fused,
            fusion_method: self.fusion_method.clone(),
            split: self.split,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<TripletEntry>,
}

impl Manifest {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<TripletEntry>, _>>()?;
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(&e.triplet_id) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate triplet id `{}` in manifest",
                    e.triplet_id
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest; relative image paths are resolved against the
    /// manifest's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest = Self::from_jsonl(&text)?;
        if let Some(base) = path.parent() {
            for e in &mut manifest.entries {
                for p in [&mut e.visible_path, &mut e.infrared_path, &mut e.fused_path] {
                    if p.is_relative() {
                        *p = base.join(&*p);
                    }
                }
            }
        }
        Ok(manifest)
    }

    pub fn get(&self, triplet_id: &str) -> Option<&TripletEntry> {
        self.entries.iter().find(|e| e.triplet_id == triplet_id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &TripletEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Distinct source pairs, in first-appearance order.
    pub fn source_pairs(&self) -> Vec<SourcePair> {
        let mut seen = BTreeSet::new();
        self.entries
            .iter()
            .filter(|e| seen.insert(e.pair_id.clone()))
            .map(|e| SourcePair {
                pair_id: e.pair_id.clone(),
                visible_path: e.visible_path.clone(),
                infrared_path: e.infrared_path.clone(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let all = [train, val, test];
        if all.iter().any(|f| !(0.0..=1.0).contains(f)) || ((train + val + test) - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "split fractions must be in [0,1] and sum to 1, got {train},{val},{test}"
            )));
        }
        Ok(Self { train, val, test })
    }

    /// 7350 / 1000 / 1000 rounded to three decimals.
    pub fn paper_default() -> Self {
        Self {
            train: 0.786,
            val: 0.107,
            test: 0.107,
        }
    }

    /// `(train, val, test)` counts for `n` items; test takes the remainder.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let train = ((self.train * n as f64).round() as usize).min(n);
        let val = ((self.val * n as f64).round() as usize).min(n - train);
        (train, val, n - train - val)
    }
}

impl std::str::FromStr for SplitFractions {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidArgument(format!("bad split list `{s}`: {e}")))?;
        match parts.as_slice() {
            [a, b, c] => Self::new(*a, *b, *c),
            _ => Err(Error::InvalidArgument(format!(
                "expected three comma-separated fractions, got `{s}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SkipReason {
    MissingFused { expected: PathBuf },
    DimensionMismatch { source_dims: (usize, usize), fused_dims: (usize, usize) },
    Unreadable { message: String },
    Excluded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipEntry {
    pub pair_id: String,
    pub fusion_method: String,
    #[serde(flatten)]
    pub reason: SkipReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestReport {
    pub manifest: Manifest,
    pub skipped: Vec<SkipEntry>,
}

/// Matches every retained pair with the fused output of every method
/// (`<dir>/<pair_id>.png`), validates dimensions, and assigns splits by a
/// seeded shuffle. Nothing is dropped silently: each missing, mismatched or
/// excluded candidate becomes a skip entry.
pub fn assemble_manifest(
    pairs: &[SourcePair],
    fused_dirs: &BTreeMap<String, PathBuf>,
    fractions: SplitFractions,
    seed: u64,
    exclusions: &BTreeSet<String>,
) -> Result<ManifestReport> {
    let mut pairs: Vec<&SourcePair> = pairs.iter().collect();
    pairs.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));

    let mut candidates = Vec::new();
    let mut skipped = Vec::new();
    for pair in pairs {
        let source_dims = if exclusions.contains(&pair.pair_id) {
            None
        } else {
            Some(probe_dims(&pair.visible_path))
        };
        for (method, dir) in fused_dirs {
            let skip = |reason| SkipEntry {
                pair_id: pair.pair_id.clone(),
                fusion_method: method.clone(),
                reason,
            };
            let source_dims = match &source_dims {
                None => {
                    skipped.push(skip(SkipReason::Excluded));
                    continue;
                }
                Some(Err(e)) => {
                    skipped.push(skip(SkipReason::Unreadable { message: e.to_string() }));
                    continue;
                }
                Some(Ok(d)) => *d,
            };
            let fused_path = dir.join(format!("{}.png", pair.pair_id));
            if !fused_path.exists() {
                skipped.push(skip(SkipReason::MissingFused { expected: fused_path }));
                continue;
            }
            match probe_dims(&fused_path) {
                Err(e) => skipped.push(skip(SkipReason::Unreadable { message: e.to_string() })),
                Ok(fused_dims) if fused_dims != source_dims => {
                    skipped.push(skip(SkipReason::DimensionMismatch { source_dims, fused_dims }))
                }
                Ok(_) => candidates.push(TripletEntry {
                    triplet_id: format!("{}__{method}", pair.pair_id),
                    pair_id: pair.pair_id.clone(),
                    visible_path: pair.visible_path.clone(),
                    infrared_path: pair.infrared_path.clone(),
                    fused_path,
                    fusion_method: method.clone(),
                    split: Split::Train,
                }),
            }
        }
    }

    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (n_train, n_val, _) = fractions.counts(candidates.len());
    for (rank, &idx) in order.iter().enumerate() {
        candidates[idx].split = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    Ok(ManifestReport {
        manifest: Manifest {
            entries: candidates,
        },
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_split_counts() {
        assert_eq!(SplitFractions::paper_default().counts(9350), (7349, 1000, 1001));
        assert_eq!(SplitFractions::new(0.5, 0.25, 0.25).unwrap().counts(8), (4, 2, 2));
        assert_eq!("0.786,0.107,0.107".parse::<SplitFractions>().unwrap(), SplitFractions::paper_default());
        assert!("0.5,0.5".parse::<SplitFractions>().is_err());
        assert!("0.5,0.5,0.5".parse::<SplitFractions>().is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let line = r#"{"triplet_id":"t","pair_id":"p","visible_path":"v","infrared_path":"i","fused_path":"f","fusion_method":"m","split":"train"}"#;
        assert!(Manifest::from_jsonl(&format!("{line}\n{line}\n")).is_err());
        assert_eq!(Manifest::from_jsonl(line).unwrap().entries.len(), 1);
    }
}
