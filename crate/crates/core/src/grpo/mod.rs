//! Region-level group relative policy optimization of the fusion policy
//! against a trained reward model.
//!
//! Each fused image is split into `K` regions; the reward model scores every
//! masked region, the scores are normalized within the image's group into
//! advantages, and the policy ascends a clipped surrogate in which each
//! region's policy change is measured by `r_k`, with a KL-style anchor to a
//! frozen reference copy.

mod objective;
mod segment;

use std::fmt::Write as _;

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_pipeline::ImagePair;
use crate::error::{Error, Result};
use crate::fusion_policy::{input_tensors, FusionPolicy, Role};
use crate::image::Image;
use crate::nn::{cosine_lr, scalar};
use crate::reward_model::RewardModel;

pub use objective::{
    clip, clipped_surrogate, gaussian_kl, gaussian_kl_value, group_advantage, grpo_objective,
    grpo_objective_value, mask_tensor, region_ratio, region_ratio_tensor, surrogate_tensor,
    GroupAdvantage, ObjectiveTensors, ObjectiveValue, RATIO_GUARD,
};
pub use segment::{
    segment_regions, GridSegmenter, RegionSet, RegionWeights, Segmenter, SegmenterKind,
    SuperpixelSegmenter,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    /// The predicted overall score.
    #[default]
    Overall,
    /// Overall score minus the mean predicted heatmap inside the region.
    Penalized,
}

impl std::str::FromStr for RewardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overall" => Ok(Self::Overall),
            "penalized" => Ok(Self::Penalized),
            other => Err(Error::InvalidArgument(format!(
                "unknown reward mode `{other}` (expected overall or penalized)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub beta: f64,
    pub eps_clip: f64,
    pub eps_adv: f64,
    pub alpha: f64,
    pub region_weights: RegionWeights,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Standard deviation of the Gaussian policy model behind the KL term.
    pub kl_sigma: f64,
    pub reward_mode: RewardMode,
    pub segmenter: SegmenterKind,
    pub regions: usize,
    /// Optimizer steps per batch against the same pre-step outputs.
    pub inner_steps: usize,
    /// Copy the policy into the reference every this many epochs; 0 keeps
    /// the reference fixed for the run.
    pub ref_refresh_epochs: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            eps_clip: 0.2,
            eps_adv: 1e-8,
            alpha: 1.0,
            region_weights: RegionWeights::Area,
            lr: 1e-4,
            lr_min: 1e-6,
            weight_decay: 0.01,
            batch_size: 2,
            epochs: 20,
            kl_sigma: 0.1,
            reward_mode: RewardMode::Overall,
            segmenter: SegmenterKind::Grid,
            regions: 4,
            inner_steps: 1,
            ref_refresh_epochs: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.beta >= 0.0) {
            return bad("beta must be non-negative");
        }
        if !(self.eps_clip > 0.0 && self.eps_clip < 1.0) {
            return bad("eps_clip must lie in (0, 1)");
        }
        if !(self.alpha > 0.0) || !(self.eps_adv >= 0.0) || !(self.kl_sigma > 0.0) {
            return bad("alpha and kl_sigma must be positive, eps_adv non-negative");
        }
        if self.batch_size == 0 || self.regions == 0 || self.inner_steps == 0 {
            return bad("batch_size, regions and inner_steps must be positive");
        }
        if !(self.lr > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return bad("need 0 <= lr_min <= lr and lr > 0");
        }
        Ok(())
    }
}

fn scalarize(out: &crate::reward_model::RewardOutput, mask: &[bool], mode: RewardMode) -> f64 {
    match mode {
        RewardMode::Overall => out.overall(),
        RewardMode::Penalized => {
            let heat = out.heatmap.data();
            let (sum, n) = mask
                .iter()
                .zip(heat)
                .filter(|(&m, _)| m)
                .fold((0.0, 0usize), |(s, n), (_, &h)| (s + h, n + 1));
            out.overall() - sum / n as f64
        }
    }
}

/// Scores of every region: the three images are zero-filled outside the
/// mask at full frame and scored in one batch.
pub fn region_rewards(
    model: &RewardModel,
    visible: &Image,
    infrared: &Image,
    fused: &Image,
    regions: &RegionSet,
    mode: RewardMode,
) -> Result<Vec<f64>> {
    if fused.dims() != (regions.height, regions.width) {
        return Err(Error::DimensionMismatch(format!(
            "regions cover {}x{}, fused image is {:?}",
            regions.width,
            regions.height,
            fused.dims()
        )));
    }
    let masked: Vec<(Image, Image, Image)> = regions
        .masks
        .iter()
        .map(|m| Ok((visible.masked(m)?, infrared.masked(m)?, fused.masked(m)?)))
        .collect::<Result<_>>()?;
    let refs: Vec<(&Image, &Image, &Image)> = masked.iter().map(|(v, i, f)| (v, i, f)).collect();
    let outs = model.predict_batch(&refs)?;
    Ok(outs
        .iter()
        .zip(&regions.masks)
        .map(|(o, m)| scalarize(o, m, mode))
        .collect())
}

/// Reward of one masked region.
pub fn region_reward(
    model: &RewardModel,
    visible: &Image,
    infrared: &Image,
    fused: &Image,
    mask: &[bool],
    mode: RewardMode,
) -> Result<f64> {
    let regions = RegionSet::new(fused.width(), fused.height(), vec![mask.to_vec()])?;
    Ok(region_rewards(model, visible, infrared, fused, &regions, mode)?[0])
}

/// Mean whole-image overall reward of the policy's outputs.
pub fn mean_policy_reward(policy: &FusionPolicy, reward: &RewardModel, pairs: &[ImagePair]) -> Result<f64> {
    let mut acc = 0.0;
    for chunk in pairs.chunks(8) {
        let fused: Vec<Image> = chunk
            .iter()
            .map(|p| policy.fuse(&p.visible, &p.infrared))
            .collect::<Result<_>>()?;
        let refs: Vec<(&Image, &Image, &Image)> = chunk
            .iter()
            .zip(&fused)
            .map(|(p, f)| (&p.visible, &p.infrared, f))
            .collect();
        acc += reward.predict_batch(&refs)?.iter().map(|o| o.overall()).sum::<f64>();
    }
    Ok(acc / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoEpoch {
    /// 0 is the starting policy.
    pub epoch: usize,
    /// Whole-image overall reward over all pairs after the epoch.
    pub mean_reward: f64,
    /// Mean surrogate and KL over the epoch's optimizer steps; absent for
    /// epoch 0.
    pub surrogate: Option<f64>,
    pub kl: Option<f64>,
    pub lr: f64,
    /// L2 distance of the parameters from the starting policy.
    pub drift: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GrpoHistory {
    pub epochs: Vec<GrpoEpoch>,
}

impl GrpoHistory {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("epoch,mean_reward,surrogate,kl,lr\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{},{}", e.epoch, e.mean_reward, opt(e.surrogate), opt(e.kl), e.lr);
        }
        out
    }
}

struct Group {
    advantages: GroupAdvantage,
    weights: Vec<f64>,
    masks: Vec<Tensor>,
}

fn diagnostics(groups: &[Group], ratios: &[Vec<f64>]) -> String {
    let mut s = String::new();
    for (b, (g, r)) in groups.iter().zip(ratios).enumerate() {
        let _ = write!(
            s,
            "[image {b}: scores {:?}, advantages {:?}, ratios {:?}] ",
            g.advantages.scores, g.advantages.advantages, r
        );
    }
    s
}

/// Fine-tunes `policy` in place. The reference policy is a frozen copy taken
/// at the start (refreshed every `ref_refresh_epochs` when non-zero). Within
/// each batch the pre-step forward pass is the "old" policy for the region
/// ratios. `on_epoch` sees the policy after every epoch.
pub fn finetune_grpo(
    policy: &FusionPolicy,
    reward: &RewardModel,
    pairs: &[ImagePair],
    cfg: &GrpoConfig,
    segmenter: &dyn Segmenter,
    seed: u64,
    mut on_epoch: Option<&mut dyn FnMut(usize, &FusionPolicy) -> Result<()>>,
) -> Result<GrpoHistory> {
    cfg.validate()?;
    if policy.role() != Role::Trainable {
        return Err(Error::InvalidArgument("cannot fine-tune a reference policy".into()));
    }
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no training pairs".into()));
    }
    let start = policy.clone_reference()?;
    let reference = policy.clone_reference()?;
    let mut opt = AdamW::new(
        policy.trainable_vars(),
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?;
    let steps_per_epoch = pairs.len().div_ceil(cfg.batch_size) * cfg.inner_steps;
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut history = GrpoHistory {
        epochs: vec![GrpoEpoch {
            epoch: 0,
            mean_reward: mean_policy_reward(policy, reward, pairs)?,
            surrogate: None,
            kl: None,
            lr: cfg.lr,
            drift: 0.0,
        }],
    };

    let mut step = 0;
    let mut lr = cfg.lr;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let (mut surr_sum, mut kl_sum) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&ImagePair> = chunk.iter().map(|&k| &pairs[k]).collect();
            let inputs: Vec<(&Image, &Image)> = batch.iter().map(|p| (&p.visible, &p.infrared)).collect();
            let (v, i) = input_tensors(&inputs)?;
            let f_old = policy.forward(&v, &i)?.detach();
            let f_ref = reference.forward(&v, &i)?.detach();

            let mut groups = Vec::with_capacity(batch.len());
            for (b, pair) in batch.iter().enumerate() {
                let fused = Image::from_tensor(&f_old.get(b)?)?;
                let regions = segmenter.segment(&fused, cfg.regions)?;
                let scores = region_rewards(reward, &pair.visible, &pair.infrared, &fused, &regions, cfg.reward_mode)?;
                groups.push(Group {
                    advantages: group_advantage(&scores, cfg.eps_adv)?,
                    weights: regions.weights(cfg.region_weights),
                    masks: (0..regions.k()).map(|k| mask_tensor(&regions, k)).collect::<Result<_>>()?,
                });
            }

            for _ in 0..cfg.inner_steps {
                lr = cosine_lr(step, total_steps, cfg.lr, cfg.lr_min);
                opt.set_learning_rate(lr);
                let f = policy.forward(&v, &i)?;
                let mut surrogate = Tensor::new(0.0f64, f.device())?;
                let mut ratio_values = Vec::with_capacity(groups.len());
                for (b, g) in groups.iter().enumerate() {
                    let (fb, ob) = (f.narrow(0, b, 1)?, f_old.narrow(0, b, 1)?);
                    let ratios: Vec<Tensor> = g
                        .masks
                        .iter()
                        .map(|m| region_ratio_tensor(&fb, &ob, m, cfg.alpha))
                        .collect::<Result<_>>()?;
                    ratio_values.push(ratios.iter().map(scalar).collect::<Result<Vec<_>>>()?);
                    let s = surrogate_tensor(&ratios, &g.advantages.advantages, &g.weights, cfg.eps_clip)?;
                    surrogate = (surrogate + s)?;
                }
                let surrogate = (surrogate / groups.len() as f64)?;
                let kl = gaussian_kl(&f, &f_ref, cfg.kl_sigma)?;
                let j = (&surrogate - (&kl * cfg.beta)?)?;
                let jv = scalar(&j)?;
                if !jv.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "objective {jv} at epoch {epoch}, step {step}: {}",
                        diagnostics(&groups, &ratio_values)
                    )));
                }
                opt.backward_step(&j.neg()?)?;
                surr_sum += scalar(&surrogate)?;
                kl_sum += scalar(&kl)?;
                step += 1;
            }
        }
        if cfg.ref_refresh_epochs > 0 && epoch % cfg.ref_refresh_epochs == 0 {
            reference.copy_from(policy)?;
        }
        let mean_reward = mean_policy_reward(policy, reward, pairs)?;
        log::info!("grpo epoch {epoch}: mean reward {mean_reward:.6}");
        history.epochs.push(GrpoEpoch {
            epoch,
            mean_reward,
            surrogate: Some(surr_sum / steps_per_epoch as f64),
            kl: Some(kl_sum / steps_per_epoch as f64),
            lr,
            drift: policy.params().l2_distance(start.params())?,
        });
        if let Some(cb) = on_epoch.as_mut() {
            cb(epoch, policy)?;
        }
    }
    Ok(history)
}
