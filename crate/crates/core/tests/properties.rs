use ivif_rlhf::annotation::{rasterize_heatmap, CircleAnnotation};
use ivif_rlhf::data_pipeline::{cosine_similarity, dedup_cluster, EmbeddingVector};
use ivif_rlhf::grpo::{
    clip, clipped_surrogate, group_advantage, region_ratio, GridSegmenter, Segmenter, SuperpixelSegmenter,
};
use ivif_rlhf::image::Image;
use ivif_rlhf::metrics::{cc, psnr, qabf, Plane};
use ivif_rlhf::nn::cosine_lr;
use proptest::prelude::*;

fn plane(w: usize, h: usize) -> impl Strategy<Value = Plane> {
    prop::collection::vec(0.0f64..255.0, w * h).prop_map(move |d| Plane::new(w, h, d).unwrap())
}

fn triple() -> impl Strategy<Value = (Plane, Plane, Plane)> {
    (3usize..12, 3usize..12).prop_flat_map(|(w, h)| (plane(w, h), plane(w, h), plane(w, h)))
}

proptest! {
    #[test]
    fn advantages_are_centered_and_scaled(scores in prop::collection::vec(-5.0f64..5.0, 1..=16)) {
        let eps = 1e-8;
        let g = group_advantage(&scores, eps).unwrap();
        prop_assert!(g.advantages.iter().sum::<f64>().abs() < 1e-9);
        if g.std > 0.0 {
            let k = scores.len() as f64;
            let std = (g.advantages.iter().map(|a| a * a).sum::<f64>() / k).sqrt();
            prop_assert!((std - g.std / (g.std + eps)).abs() < 1e-6);
        }
    }

    #[test]
    fn surrogate_is_the_smaller_branch(r in 0.0f64..3.0, a in -3.0f64..3.0, eps in 0.01f64..0.9) {
        let s = clipped_surrogate(r, a, eps);
        prop_assert!(s <= r * a && s <= clip(r, eps) * a);
        prop_assert!(s == r * a || s == clip(r, eps) * a);
    }

    #[test]
    fn ratio_is_at_least_one(
        (old, new, mask) in (1usize..40).prop_flat_map(|n| (
            prop::collection::vec(0.0f64..1.0, n * 3),
            prop::collection::vec(0.0f64..1.0, n * 3),
            prop::collection::vec(any::<bool>(), n),
        )),
        alpha in 0.1f64..4.0,
    ) {
        prop_assert!(region_ratio(&new, &old, &mask, 3, alpha).unwrap() >= 1.0);
        prop_assert_eq!(region_ratio(&old, &old, &mask, 3, alpha).unwrap(), 1.0);
    }

    #[test]
    fn qabf_in_unit_interval_and_symmetric((f, v, i) in triple()) {
        let q = qabf(&f, &v, &i).unwrap();
        prop_assert!((0.0..=1.0).contains(&q));
        prop_assert!((q - qabf(&f, &i, &v).unwrap()).abs() < 1e-12);
        let qt = qabf(&f.transposed(), &v.transposed(), &i.transposed()).unwrap();
        prop_assert!((q - qt).abs() < 1e-12);
    }

    #[test]
    fn cc_and_psnr_symmetric_in_sources((f, v, i) in triple()) {
        let c = cc(&f, &v, &i).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
        prop_assert!((c - cc(&f, &i, &v).unwrap()).abs() < 1e-12);
        let p = psnr(&f, &v, &i, 255.0, 100.0).unwrap();
        prop_assert!((p - psnr(&f, &i, &v, 255.0, 100.0).unwrap()).abs() < 1e-12);
        prop_assert!(p <= 100.0);
    }

    #[test]
    fn rasterization_matches_distance_oracle(
        circles in prop::collection::vec((-4.0f64..36.0, -4.0f64..36.0, -10.0f64..10.0, -10.0f64..10.0), 0..6)
    ) {
        let shapes: Vec<CircleAnnotation> = circles
            .iter()
            .map(|&(cx, cy, dx, dy)| CircleAnnotation::new((cx, cy), (cx + dx, cy + dy)))
            .collect();
        let heat = rasterize_heatmap(&shapes, (32, 32));
        for y in 0..32 {
            for x in 0..32 {
                let inside = circles.iter().any(|&(cx, cy, dx, dy)| {
                    (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= dx * dx + dy * dy
                });
                prop_assert_eq!(heat.values[y * 32 + x], if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn dedup_is_a_partition_closed_under_similarity(
        vectors in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..12),
        threshold in 0.5f64..1.0,
    ) {
        let emb: Vec<EmbeddingVector> = vectors
            .iter()
            .enumerate()
            .map(|(k, v)| EmbeddingVector { pair_id: format!("p{k:02}"), vector: v.clone(), l2_normalized: false })
            .collect();
        let clusters = dedup_cluster(&emb, threshold).unwrap();
        let mut seen: Vec<String> = clusters.iter().flat_map(|c| c.member_ids.clone()).collect();
        seen.sort();
        let mut ids: Vec<String> = emb.iter().map(|e| e.pair_id.clone()).collect();
        ids.sort();
        prop_assert_eq!(seen, ids);
        let cluster_of = |id: &str| clusters.iter().position(|c| c.member_ids.iter().any(|m| m == id)).unwrap();
        for a in &emb {
            for b in &emb {
                if cosine_similarity(&a.vector, &b.vector) >= threshold {
                    prop_assert_eq!(cluster_of(&a.pair_id), cluster_of(&b.pair_id));
                }
            }
        }
    }

    #[test]
    fn segmenters_partition_the_frame(w in 1usize..20, h in 1usize..20, k in 1usize..10, seed in any::<u64>()) {
        prop_assume!(k <= w * h);
        let img = Image::from_fn(w, h, 3, |x, y, c| ((seed >> ((x + 2 * y + c) % 60)) & 0xff) as f64 / 255.0);
        let grid = GridSegmenter.segment(&img, k).unwrap();
        prop_assert!(grid.is_partition());
        prop_assert_eq!(grid.k(), k);
        let sp = SuperpixelSegmenter.segment(&img, k).unwrap();
        prop_assert!(sp.is_partition());
        prop_assert_eq!(sp.k(), k);
    }

    #[test]
    fn cosine_schedule_is_bounded_and_decreasing(total in 1usize..500, max in 1e-6f64..1.0, frac in 0.0f64..1.0) {
        let min = max * frac;
        let mut prev = f64::INFINITY;
        for step in 0..total {
            let lr = cosine_lr(step, total, max, min);
            prop_assert!(lr >= min - 1e-15 && lr <= max + 1e-15 && lr <= prev + 1e-15);
            prev = lr;
        }
        let end = if total == 1 { max } else { min };
        prop_assert!((cosine_lr(total - 1, total, max, min) - end).abs() < 1e-12);
    }
}
