use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{ImagePair, SceneCluster};
use crate::error::{Error, Result};
use crate::image::Image;

const W_VISUAL: f64 = 0.5;
const W_RESOLUTION: f64 = 0.3;
const W_INFO: f64 = 0.2;

/// Un-normalized quality components of a pair's visible frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawQuality {
    pub sharpness: f64,
    pub contrast: f64,
    pub resolution: f64,
    pub info: f64,
}

impl RawQuality {
    pub fn of(pair: &ImagePair) -> Self {
        let gray = pair.visible.to_gray();
        Self {
            sharpness: mean_gradient_magnitude(&gray),
            contrast: intensity_std(&gray),
            resolution: (pair.width() * pair.height()) as f64,
            info: pair.file_size_bytes as f64,
        }
    }
}

/// Raw components plus the cluster-normalized weighted total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub pair_id: String,
    pub sharpness: f64,
    pub contrast: f64,
    pub resolution_score: f64,
    pub info_score: f64,
    pub total: f64,
}

/// Mean central-difference gradient magnitude; borders use the clamped
/// neighbour.
fn mean_gradient_magnitude(gray: &Image) -> f64 {
    let (h, w) = gray.dims();
    let mut acc = 0.0;
    for y in 0..h {
        for x in 0..w {
            let gx = (gray.get((x + 1).min(w - 1), y, 0) - gray.get(x.saturating_sub(1), y, 0)) / 2.0;
            let gy = (gray.get(x, (y + 1).min(h - 1), 0) - gray.get(x, y.saturating_sub(1), 0)) / 2.0;
            acc += (gx * gx + gy * gy).sqrt();
        }
    }
    acc / (w * h) as f64
}

/// Population standard deviation, shifted by the first sample so constant
/// images come out exactly zero.
fn intensity_std(gray: &Image) -> f64 {
    let shift = gray.data()[0];
    let n = gray.data().len() as f64;
    let mean = gray.data().iter().map(|v| v - shift).sum::<f64>() / n;
    (gray.data().iter().map(|v| (v - shift - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 1.0 })
        .collect()
}

/// Scores every member of a cluster against the others.
pub fn score_cluster(context: &[&ImagePair]) -> Vec<QualityScore> {
    let raw: Vec<RawQuality> = context.iter().map(|p| RawQuality::of(p)).collect();
    let column = |f: fn(&RawQuality) -> f64| min_max(&raw.iter().map(f).collect::<Vec<_>>());
    let sharp = column(|r| r.sharpness);
    let contrast = column(|r| r.contrast);
    let res = column(|r| r.resolution);
    let info = column(|r| r.info);
    context
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let visual = (sharp[i] + contrast[i]) / 2.0;
            QualityScore {
                pair_id: p.pair_id.clone(),
                sharpness: raw[i].sharpness,
                contrast: raw[i].contrast,
                resolution_score: raw[i].resolution,
                info_score: raw[i].info,
                total: W_VISUAL * visual + W_RESOLUTION * res[i] + W_INFO * info[i],
            }
        })
        .collect()
}

/// Quality of `pair` normalized within `cluster_context`, which must contain it.
pub fn quality_score(pair: &ImagePair, cluster_context: &[&ImagePair]) -> Result<QualityScore> {
    let idx = cluster_context
        .iter()
        .position(|p| p.pair_id == pair.pair_id)
        .ok_or_else(|| {
            Error::InvalidArgument(format!("pair `{}` is not in its cluster context", pair.pair_id))
        })?;
    Ok(score_cluster(cluster_context).swap_remove(idx))
}

/// Highest total wins; ties go to the lexicographically smallest id.
pub fn select_representative(
    cluster: &SceneCluster,
    scores: &HashMap<String, QualityScore>,
) -> Result<String> {
    let mut best: Option<(&str, f64)> = None;
    for id in &cluster.member_ids {
        let total = scores
            .get(id)
            .ok_or_else(|| Error::MissingScore(id.clone()))?
            .total;
        best = match best {
            None => Some((id, total)),
            Some((bid, bt)) if total > bt || (total == bt && id.as_str() < bid) => Some((id, total)),
            keep => keep,
        };
    }
    best.map(|(id, _)| id.to_string())
        .ok_or_else(|| Error::InvalidArgument("cannot select from an empty cluster".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(id: &str, visible: Image, size: u64) -> ImagePair {
        let ir = Image::filled(visible.width(), visible.height(), 1, 0.5);
        ImagePair::new(id, visible, ir, "synthetic", size).unwrap()
    }

    fn cluster(ids: &[&str]) -> SceneCluster {
        SceneCluster {
            cluster_id: 0,
            member_ids: ids.iter().map(|s| s.to_string()).collect(),
            representative_id: ids[0].to_string(),
        }
    }

    fn totals(t: &[(&str, f64)]) -> HashMap<String, QualityScore> {
        t.iter()
            .map(|&(id, total)| {
                (
                    id.to_string(),
                    QualityScore {
                        pair_id: id.into(),
                        sharpness: 0.0,
                        contrast: 0.0,
                        resolution_score: 0.0,
                        info_score: 0.0,
                        total,
                    },
                )
            })
            .collect()
    }

    #[test]
    fn constant_image_has_no_sharpness_or_contrast() {
        let r = RawQuality::of(&pair("a", Image::filled(10, 10, 3, 0.3), 5));
        assert_eq!(r.sharpness, 0.0);
        assert_eq!(r.contrast, 0.0);
        assert_eq!(r.resolution, 100.0);
    }

    #[test]
    fn singleton_cluster_totals_one() {
        let p = pair("a", Image::from_fn(8, 8, 1, |x, _, _| x as f64 / 8.0), 10);
        let s = quality_score(&p, &[&p]).unwrap();
        assert!((s.total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dominant_member_scores_one_other_zero() {
        // A: larger, sharper, higher contrast, bigger file.
        let a = pair("a", Image::from_fn(16, 16, 1, |x, y, _| ((x * 3 + y * 5) % 4) as f64 / 3.0), 900);
        let b = pair("b", Image::from_fn(8, 8, 1, |x, _, _| 0.4 + 0.01 * x as f64), 100);
        let ra = RawQuality::of(&a);
        let rb = RawQuality::of(&b);
        assert!(ra.sharpness > rb.sharpness && ra.contrast > rb.contrast);
        let s = score_cluster(&[&a, &b]);
        assert_eq!(s[0].total, 1.0);
        assert_eq!(s[1].total, 0.0);
    }

    #[test]
    fn pair_outside_context_is_rejected() {
        let a = pair("a", Image::filled(4, 4, 1, 0.1), 1);
        let b = pair("b", Image::filled(4, 4, 1, 0.1), 1);
        assert!(quality_score(&a, &[&b]).is_err());
    }

    #[test]
    fn representative_rules() {
        assert_eq!(
            select_representative(&cluster(&["only"]), &totals(&[("only", 0.2)])).unwrap(),
            "only"
        );
        assert_eq!(
            select_representative(&cluster(&["a", "b"]), &totals(&[("a", 0.9), ("b", 0.4)])).unwrap(),
            "a"
        );
        // Enumerate both member orders: a tie always resolves to "a".
        for order in [["a", "b"], ["b", "a"]] {
            assert_eq!(
                select_representative(&cluster(&order), &totals(&[("a", 0.7), ("b", 0.7)])).unwrap(),
                "a"
            );
        }
        assert!(matches!(
            select_representative(&cluster(&["a", "b"]), &totals(&[("a", 0.7)])),
            Err(Error::MissingScore(id)) if id == "b"
        ));
    }
}
