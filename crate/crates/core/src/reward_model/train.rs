use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use candle_core::{Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{RewardModel, RewardModelConfig, RewardTensors};
use crate::annotation::{
    normalize_scores, parse_annotation, rasterize_heatmap_styled, AnnotationRecord, HeatmapStyle,
};
use crate::data_pipeline::ImageTriplet;
use crate::error::{Error, Result};
use crate::image::{stack, Image};
use crate::nn::{cosine_lr, scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardTrainConfig {
    pub lambda_score: f64,
    pub lambda_heatmap: f64,
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub heatmap_style: HeatmapStyle,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        Self {
            lambda_score: 1.0,
            lambda_heatmap: 1.0,
            epochs: 30,
            lr_max: 2e-5,
            lr_min: 1e-5,
            weight_decay: 2e-3,
            batch_size: 4,
            heatmap_style: HeatmapStyle::Binary,
        }
    }
}

impl RewardTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_score > 0.0 && self.lambda_heatmap > 0.0) {
            return Err(Error::InvalidArgument("loss weights must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if !(self.lr_max > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::InvalidArgument(format!(
                "need 0 <= lr_min <= lr_max, 0 < lr_max; got {} / {}",
                self.lr_min, self.lr_max
            )));
        }
        Ok(())
    }
}

/// One training example at the encoder resolution.
#[derive(Debug, Clone)]
pub struct RewardSample {
    pub triplet_id: String,
    pub visible: Image,
    pub infrared: Image,
    pub fused: Image,
    /// Normalized to `[0, 1]`.
    pub scores: [f64; 5],
    /// `S x S`, row-major.
    pub heatmap: Vec<f64>,
}

/// Reads `<dir>/<triplet_id>.json` for every triplet that has one.
pub fn load_annotation_dir(
    dir: impl AsRef<Path>,
    triplets: &[ImageTriplet],
) -> Result<BTreeMap<String, AnnotationRecord>> {
    let dir = dir.as_ref();
    let mut out = BTreeMap::new();
    for t in triplets {
        let path = dir.join(format!("{}.json", t.triplet_id));
        if !path.exists() {
            continue;
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut record = parse_annotation(&text, t.fused.dims())?;
        record.triplet_id = t.triplet_id.clone();
        out.insert(t.triplet_id.clone(), record);
    }
    Ok(out)
}

/// Pairs every triplet with its annotation; heatmap targets are rasterized at
/// the source resolution and resampled to the encoder size.
pub fn build_reward_samples(
    model: &RewardModelConfig,
    triplets: &[ImageTriplet],
    annotations: &BTreeMap<String, AnnotationRecord>,
    style: HeatmapStyle,
) -> Result<Vec<RewardSample>> {
    let missing: Vec<String> = triplets
        .iter()
        .filter(|t| !annotations.contains_key(&t.triplet_id))
        .map(|t| t.triplet_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingAnnotations(missing));
    }
    let s = model.encoder.image_size;
    let prep = |im: &Image| {
        let rgb = im.to_rgb();
        if rgb.dims() == (s, s) {
            rgb
        } else {
            rgb.resize(s, s)
        }
    };
    Ok(triplets
        .iter()
        .map(|t| {
            let record = &annotations[&t.triplet_id];
            let label = rasterize_heatmap_styled(&record.shapes, t.fused.dims(), style);
            let label = if label.height == s && label.width == s {
                label
            } else {
                label.resized(s, s)
            };
            RewardSample {
                triplet_id: t.triplet_id.clone(),
                visible: prep(&t.visible),
                infrared: prep(&t.infrared),
                fused: prep(&t.fused),
                scores: normalize_scores(&record.scores),
                heatmap: label.values,
            }
        })
        .collect())
}

/// Stacked tensors for a set of samples.
#[derive(Debug, Clone)]
pub struct RewardBatch {
    pub visible: Tensor,
    pub infrared: Tensor,
    pub fused: Tensor,
    pub scores: Tensor,
    pub heatmap: Tensor,
}

impl RewardBatch {
    pub fn new(samples: &[&RewardSample]) -> Result<Self> {
        let dev = Device::Cpu;
        let b = samples.len();
        let s = samples
            .first()
            .map(|x| x.visible.width())
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let pick = |f: fn(&RewardSample) -> &Image| stack(&samples.iter().map(|x| f(x)).collect::<Vec<_>>(), &dev);
        let scores: Vec<f64> = samples.iter().flat_map(|x| x.scores).collect();
        let heat: Vec<f64> = samples.iter().flat_map(|x| x.heatmap.iter().copied()).collect();
        Ok(Self {
            visible: pick(|x| &x.visible)?,
            infrared: pick(|x| &x.infrared)?,
            fused: pick(|x| &x.fused)?,
            scores: Tensor::from_vec(scores, (b, 5), &dev)?,
            heatmap: Tensor::from_vec(heat, (b, 1, s, s), &dev)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LossTensors {
    pub total: Tensor,
    pub score: Tensor,
    pub heatmap: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardLoss {
    pub total: f64,
    pub score: f64,
    pub heatmap: f64,
}

impl LossTensors {
    pub fn values(&self) -> Result<RewardLoss> {
        Ok(RewardLoss {
            total: scalar(&self.total)?,
            score: scalar(&self.score)?,
            heatmap: scalar(&self.heatmap)?,
        })
    }
}

/// Score loss: per-dimension batch MSE summed over the five scores. Heatmap
/// loss: MSE over every pixel. Total: their `lambda`-weighted sum.
pub fn reward_loss(
    pred: &RewardTensors,
    target_scores: &Tensor,
    target_heatmap: &Tensor,
    cfg: &RewardTrainConfig,
) -> Result<LossTensors> {
    if pred.scores.dims() != target_scores.dims() || pred.heatmap.dims() != target_heatmap.dims() {
        return Err(Error::DimensionMismatch(format!(
            "prediction {:?}/{:?} vs target {:?}/{:?}",
            pred.scores.dims(),
            pred.heatmap.dims(),
            target_scores.dims(),
            target_heatmap.dims()
        )));
    }
    let score = (&pred.scores - target_scores)?.sqr()?.mean(0)?.sum_all()?;
    let heatmap = (&pred.heatmap - target_heatmap)?.sqr()?.mean_all()?;
    let total = ((&score * cfg.lambda_score)? + (&heatmap * cfg.lambda_heatmap)?)?;
    Ok(LossTensors { total, score, heatmap })
}

/// Loss over a whole sample set, evaluated in chunks but aggregated exactly as
/// one batch.
pub fn evaluate_loss(model: &RewardModel, samples: &[RewardSample], cfg: &RewardTrainConfig) -> Result<RewardLoss> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::InvalidArgument("no samples to evaluate".into()));
    }
    let mut score_sse = 0.0;
    let mut heat_sse = 0.0;
    let mut pixels = 0usize;
    for chunk in samples.chunks(cfg.batch_size.max(1)) {
        let refs: Vec<&RewardSample> = chunk.iter().collect();
        let batch = RewardBatch::new(&refs)?;
        let pred = model.forward(&batch.visible, &batch.infrared, &batch.fused)?;
        score_sse += scalar(&(&pred.scores - &batch.scores)?.sqr()?.sum_all()?)?;
        heat_sse += scalar(&(&pred.heatmap - &batch.heatmap)?.sqr()?.sum_all()?)?;
        pixels += batch.heatmap.elem_count();
    }
    let score = score_sse / n as f64;
    let heatmap = heat_sse / pixels as f64;
    Ok(RewardLoss {
        total: cfg.lambda_score * score + cfg.lambda_heatmap * heatmap,
        score,
        heatmap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardEpoch {
    /// 0 is the untrained model.
    pub epoch: usize,
    /// Training-set loss after the epoch.
    pub total: f64,
    pub score_loss: f64,
    pub heatmap_loss: f64,
    /// Mean minibatch loss seen during the epoch; absent for epoch 0.
    pub train_batch_mean: Option<f64>,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardHistory {
    pub epochs: Vec<RewardEpoch>,
}

impl RewardHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,total,score_loss,heatmap_loss,train_batch_mean,lr\n");
        for e in &self.epochs {
            let batch = e.train_batch_mean.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                e.epoch, e.total, e.score_loss, e.heatmap_loss, batch, e.lr
            );
        }
        out
    }
}

/// Trains projection, fusion encoder and both heads with AdamW under a
/// per-step cosine schedule. A frozen backbone is never handed to the
/// optimizer, so its parameters stay bit-identical.
pub fn train_reward(
    model_cfg: &RewardModelConfig,
    cfg: &RewardTrainConfig,
    samples: &[RewardSample],
    seed: u64,
) -> Result<(RewardModel, RewardHistory)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    let model = RewardModel::new(model_cfg.clone(), seed)?;
    let mut opt = AdamW::new(
        model.trainable_vars(),
        ParamsAdamW {
            lr: cfg.lr_max,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?;
    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));

    let initial = evaluate_loss(&model, samples, cfg)?;
    let mut history = RewardHistory {
        epochs: vec![RewardEpoch {
            epoch: 0,
            total: initial.total,
            score_loss: initial.score,
            heatmap_loss: initial.heatmap,
            train_batch_mean: None,
            lr: cfg.lr_max,
        }],
    };

    let mut step = 0;
    let mut lr = cfg.lr_max;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let mut batch_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            lr = cosine_lr(step, total_steps, cfg.lr_max, cfg.lr_min);
            opt.set_learning_rate(lr);
            let refs: Vec<&RewardSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let batch = RewardBatch::new(&refs)?;
            let pred = model.forward(&batch.visible, &batch.infrared, &batch.fused)?;
            let loss = reward_loss(&pred, &batch.scores, &batch.heatmap, cfg)?;
            let v = loss.values()?;
            if !v.total.is_finite() {
                let ids: Vec<&str> = refs.iter().map(|s| s.triplet_id.as_str()).collect();
                return Err(Error::NonFinite(format!(
                    "epoch {epoch}, step {step}: score loss {}, heatmap loss {}, batch {ids:?}",
                    v.score, v.heatmap
                )));
            }
            opt.backward_step(&loss.total)?;
            batch_sum += v.total;
            step += 1;
        }
        let eval = evaluate_loss(&model, samples, cfg)?;
        log::info!("reward epoch {epoch}: loss {:.6}", eval.total);
        history.epochs.push(RewardEpoch {
            epoch,
            total: eval.total,
            score_loss: eval.score,
            heatmap_loss: eval.heatmap,
            train_batch_mean: Some(batch_sum / steps_per_epoch as f64),
            lr,
        });
    }
    Ok((model, history))
}
