use candle_core::{Device, Tensor};
use ivif_rlhf::data_pipeline::ImagePair;
use ivif_rlhf::fusion_policy::{input_tensors, FusionPolicy, PolicyConfig};
use ivif_rlhf::grpo::{
    finetune_grpo, group_advantage, mask_tensor, region_ratio_tensor, region_rewards, surrogate_tensor,
    gaussian_kl, GridSegmenter, GrpoConfig, RegionSet, RewardMode, Segmenter,
};
use ivif_rlhf::reward_model::{RewardModel, RewardModelConfig};
use ivif_rlhf::synthetic::{synthetic_fusion, synthetic_pair};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pairs(n: usize, size: usize) -> Vec<ImagePair> {
    (0..n).map(|k| synthetic_pair(&format!("g{k}"), size, 100 + k as u64)).collect()
}

fn toy_policy(seed: u64) -> FusionPolicy {
    FusionPolicy::new(PolicyConfig { channels: [2, 2, 2] }, seed).unwrap()
}

/// Shifts every parameter by seeded noise of size `scale`.
fn perturbed(policy: &FusionPolicy, scale: f64, seed: u64) -> FusionPolicy {
    let copy = FusionPolicy::from_checkpoint(&policy.to_checkpoint().unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in copy.params().tensors().unwrap() {
        let values: Vec<f64> = (0..t.elem_count()).map(|_| rng.random_range(-scale..scale)).collect();
        let noise = Tensor::from_vec(values, t.dims(), &Device::Cpu).unwrap();
        copy.params().assign(&name, &(t + noise).unwrap()).unwrap();
    }
    copy
}

fn objective(
    policy: &FusionPolicy,
    v: &Tensor,
    i: &Tensor,
    f_old: &Tensor,
    f_ref: &Tensor,
    regions: &RegionSet,
    adv: &[f64],
    beta: f64,
) -> Tensor {
    let f = policy.forward(v, i).unwrap();
    let ratios: Vec<Tensor> = (0..regions.k())
        .map(|k| region_ratio_tensor(&f, f_old, &mask_tensor(regions, k).unwrap(), 1.0).unwrap())
        .collect();
    let w = regions.weights(Default::default());
    let s = surrogate_tensor(&ratios, adv, &w, 0.2).unwrap();
    (s - (gaussian_kl(&f, f_ref, 0.1).unwrap() * beta).unwrap()).unwrap()
}

#[test]
fn objective_gradient_matches_central_differences() {
    let data = pairs(1, 8);
    let (v, i) = input_tensors(&[(&data[0].visible, &data[0].infrared)]).unwrap();
    let policy = toy_policy(3);
    let old = perturbed(&policy, 0.02, 1);
    let reference = perturbed(&policy, 0.05, 2);
    let f_old = old.forward(&v, &i).unwrap().detach();
    let f_ref = reference.forward(&v, &i).unwrap().detach();
    let fused = ivif_rlhf::image::Image::from_tensor(&f_old.get(0).unwrap()).unwrap();
    let regions = GridSegmenter.segment(&fused, 4).unwrap();
    // Small positive and negative advantages keep every region on the
    // unclipped branch.
    let adv = [0.9, -0.4, 0.3, -0.8];
    let j = objective(&policy, &v, &i, &f_old, &f_ref, &regions, &adv, 0.1);
    let grads = j.backward().unwrap();

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for var in policy.trainable_vars() {
        let original = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let analytic = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let set = |values: &[f64]| var.set(&Tensor::from_slice(values, var.dims(), &Device::Cpu).unwrap()).unwrap();
        for k in 0..original.len() {
            let mut p = original.clone();
            p[k] += h;
            set(&p);
            let up = objective(&policy, &v, &i, &f_old, &f_ref, &regions, &adv, 0.1).to_scalar::<f64>().unwrap();
            p[k] = original[k] - h;
            set(&p);
            let down = objective(&policy, &v, &i, &f_old, &f_ref, &regions, &adv, 0.1).to_scalar::<f64>().unwrap();
            let numeric = (up - down) / (2.0 * h);
            // Relative error, with an absolute floor at the rounding noise of
            // a central difference on an O(1) objective.
            let e = (analytic[k] - numeric).abs() / analytic[k].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(e);
            checked += 1;
        }
        set(&original);
    }
    assert!(checked > 50);
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn clipped_region_passes_no_gradient() {
    let x = candle_core::Var::new(1.0f64, &Device::Cpu).unwrap();
    // r = 1 + 0.3 x, so r = 1.3 > 1 + eps at x = 1.
    let r = ((x.as_tensor() * 0.3).unwrap() + 1.0).unwrap();
    let s = surrogate_tensor(&[r.clone()], &[1.0], &[1.0], 0.2).unwrap();
    assert!((s.to_scalar::<f64>().unwrap() - 1.2).abs() < 1e-15);
    let g = s.backward().unwrap();
    assert!(g.get(x.as_tensor()).map_or(0.0, |t| t.to_scalar::<f64>().unwrap()) == 0.0);
    // Negative advantage takes the unclipped branch and keeps the gradient.
    let s = surrogate_tensor(&[r], &[-1.0], &[1.0], 0.2).unwrap();
    let g = s.backward().unwrap();
    assert!((g.get(x.as_tensor()).unwrap().to_scalar::<f64>().unwrap() + 0.3).abs() < 1e-15);
}

#[test]
fn identical_scores_give_no_surrogate_gradient() {
    let data = pairs(1, 8);
    let (v, i) = input_tensors(&[(&data[0].visible, &data[0].infrared)]).unwrap();
    let policy = toy_policy(4);
    let f_old = perturbed(&policy, 0.02, 1).forward(&v, &i).unwrap().detach();
    let fused = ivif_rlhf::image::Image::from_tensor(&f_old.get(0).unwrap()).unwrap();
    let regions = GridSegmenter.segment(&fused, 4).unwrap();
    let adv = group_advantage(&[0.6; 4], 1e-8).unwrap().advantages;
    let j = objective(&policy, &v, &i, &f_old, &f_old, &regions, &adv, 0.0);
    assert_eq!(j.to_scalar::<f64>().unwrap(), 0.0);
    let grads = j.backward().unwrap();
    for var in policy.trainable_vars() {
        if let Some(g) = grads.get(var.as_tensor()) {
            assert_eq!(g.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
        }
    }
}

#[test]
fn region_rewards_follow_the_mode() {
    let reward = RewardModel::new(RewardModelConfig::default(), 2).unwrap();
    let pair = &pairs(1, 16)[0];
    let (fused, _) = synthetic_fusion(pair, "mean", 0).unwrap();
    let regions = GridSegmenter.segment(&fused, 4).unwrap();
    let overall = region_rewards(&reward, &pair.visible, &pair.infrared, &fused, &regions, RewardMode::Overall).unwrap();
    let penalized =
        region_rewards(&reward, &pair.visible, &pair.infrared, &fused, &regions, RewardMode::Penalized).unwrap();
    assert_eq!(overall.len(), 4);
    for (o, p) in overall.iter().zip(&penalized) {
        assert!((0.0..=1.0).contains(o));
        // The heatmap is a sigmoid output, so the penalty lies in (0, 1).
        assert!(p < o && *p > o - 1.0);
    }
    let whole = RegionSet::whole(16, 16);
    let direct = reward.predict(&pair.visible, &pair.infrared, &fused).unwrap().overall();
    let via = region_rewards(&reward, &pair.visible, &pair.infrared, &fused, &whole, RewardMode::Overall).unwrap();
    assert!((via[0] - direct).abs() < 1e-12);
}

#[test]
fn finetune_is_reproducible_and_rejects_bad_config() {
    let reward = RewardModel::new(RewardModelConfig::default(), 2).unwrap();
    let data = pairs(2, 16);
    let cfg = GrpoConfig { epochs: 1, ..GrpoConfig::default() };
    let run = || {
        let p = FusionPolicy::new(PolicyConfig::default(), 5).unwrap();
        let h = finetune_grpo(&p, &reward, &data, &cfg, &GridSegmenter, 3, None).unwrap();
        (h.to_csv(), p.to_checkpoint().unwrap().to_json().unwrap())
    };
    assert_eq!(run(), run());
    let p = FusionPolicy::new(PolicyConfig::default(), 5).unwrap();
    let bad = GrpoConfig { eps_clip: 1.5, ..GrpoConfig::default() };
    assert!(finetune_grpo(&p, &reward, &data, &bad, &GridSegmenter, 3, None).is_err());
    let r = p.clone_reference().unwrap();
    assert!(finetune_grpo(&r, &reward, &data, &cfg, &GridSegmenter, 3, None).is_err());
}
