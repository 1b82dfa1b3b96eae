//! Fusion-oriented reward model: a shared frozen patch transformer encodes the
//! infrared, visible and fused images; a linear projection and a second
//! transformer fuse the three token sets into a spatial feature map, from
//! which a score head regresses five quality scores and a heatmap head
//! predicts per-pixel artifact probability.

mod heads;
mod train;
mod vit;

use std::path::PathBuf;

use candle_core::{Device, Module, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::image::{stack, Image};
use crate::nn::{Linear, ParamStore, VarBuilder};

pub use heads::{HeatmapHead, ScoreHead};
pub use train::{
    build_reward_samples, evaluate_loss, load_annotation_dir, reward_loss, train_reward,
    LossTensors, RewardBatch, RewardEpoch, RewardHistory, RewardLoss, RewardSample,
    RewardTrainConfig,
};
pub use vit::{Transformer, Vit};

pub const CHECKPOINT_KIND: &str = "reward_model";

/// Parameter-name prefixes.
pub const BACKBONE: &str = "backbone.";
pub const PROJECTION: &str = "projection.";
pub const FUSION: &str = "fusion.";
pub const HEATMAP_HEAD: &str = "heatmap_head.";
pub const SCORE_HEAD: &str = "score_head.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub use_positional: bool,
    pub frozen: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            embed_dim: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
            use_positional: true,
            frozen: true,
        }
    }
}

impl EncoderConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.patch_size == 0 || !self.patch_size.is_power_of_two() {
            return bad(format!("patch_size must be a power of two, got {}", self.patch_size));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return bad("depth and mlp_ratio must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardModelConfig {
    pub encoder: EncoderConfig,
    pub head_channels: usize,
    pub score_hidden: usize,
    /// Reward checkpoint whose `backbone.*` tensors replace the random
    /// backbone initialization.
    pub backbone_weights: Option<PathBuf>,
}

impl Default for RewardModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            head_channels: 16,
            score_hidden: 32,
            backbone_weights: None,
        }
    }
}

/// Patch tokens of the three modalities, each `(B, N, D)`.
#[derive(Debug, Clone)]
pub struct TriEncoding {
    pub f_ir: Tensor,
    pub f_vi: Tensor,
    pub f_fused: Tensor,
}

/// Differentiable model outputs.
#[derive(Debug, Clone)]
pub struct RewardTensors {
    /// `(B, 5)`.
    pub scores: Tensor,
    /// `(B, 1, S, S)`.
    pub heatmap: Tensor,
}

/// Inference result for one triplet at its original resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardOutput {
    pub scores: [f64; 5],
    /// Single-channel, same dimensions as the input images.
    pub heatmap: Image,
}

impl RewardOutput {
    pub fn overall(&self) -> f64 {
        self.scores[crate::annotation::OVERALL]
    }
}

pub struct RewardModel {
    config: RewardModelConfig,
    store: ParamStore,
    backbone: Vit,
    projection: Linear,
    fusion: Transformer,
    heatmap_head: HeatmapHead,
    score_head: ScoreHead,
}

impl std::fmt::Debug for RewardModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RewardModel")
            .field("config", &self.config)
            .field("parameters", &self.store.total_elements())
            .finish()
    }
}

impl RewardModel {
    fn build(config: RewardModelConfig, mut vb: VarBuilder) -> Result<Self> {
        let enc = &config.encoder;
        enc.validate()?;
        let backbone = {
            let mut sub = vb.pp("backbone");
            sub.set_frozen(enc.frozen);
            Vit::new(&mut sub, enc)?
        };
        let d = enc.embed_dim;
        let projection = Linear::new(&mut vb.pp("projection"), 3 * d, d)?;
        let fusion = Transformer::new(&mut vb.pp("fusion"), enc)?;
        let heatmap_head = HeatmapHead::new(&mut vb.pp("heatmap_head"), d, config.head_channels, enc.patch_size)?;
        let score_head = ScoreHead::new(
            &mut vb.pp("score_head"),
            d,
            config.head_channels,
            enc.grid(),
            config.score_hidden,
        )?;
        drop(vb);
        Ok(Self {
            config,
            store: ParamStore::new(),
            backbone,
            projection,
            fusion,
            heatmap_head,
            score_head,
        })
    }

    /// Fresh model with parameters drawn from `seed`.
    pub fn new(config: RewardModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Self::build(config, VarBuilder::fresh(&mut store, &mut rng))?;
        model.store = store;
        if let Some(path) = model.config.backbone_weights.clone() {
            let ckpt = Checkpoint::load(&path)?;
            for (name, tensor) in ckpt.tensors()? {
                if name.starts_with(BACKBONE) {
                    model.store.assign(&name, &tensor)?;
                }
            }
        }
        Ok(model)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(CHECKPOINT_KIND)?;
        let config: RewardModelConfig = ckpt.config()?;
        let tensors = ckpt.tensors()?;
        let mut store = ParamStore::new();
        let mut model = Self::build(config, VarBuilder::load(&mut store, &tensors))?;
        if store.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model uses {}",
                tensors.len(),
                store.len()
            )));
        }
        model.store = store;
        Ok(model)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_store(CHECKPOINT_KIND, &self.config, &self.store)
    }

    pub fn config(&self) -> &RewardModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Everything except a frozen backbone.
    pub fn trainable_vars(&self) -> Vec<Var> {
        self.store
            .iter()
            .filter(|(name, _)| !(self.config.encoder.frozen && name.starts_with(BACKBONE)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.store
            .names()
            .filter(|name| !(self.config.encoder.frozen && name.starts_with(BACKBONE)))
            .map(str::to_string)
            .collect()
    }

    /// Resizes to the encoder input size; single-channel images are
    /// replicated to three channels.
    pub fn preprocess(&self, image: &Image) -> Image {
        let s = self.config.encoder.image_size;
        let rgb = image.to_rgb();
        if rgb.width() == s && rgb.height() == s {
            rgb
        } else {
            rgb.resize(s, s)
        }
    }

    /// Encodes three `(B, 3, S, S)` batches with the shared backbone.
    pub fn encode(&self, visible: &Tensor, infrared: &Tensor, fused: &Tensor) -> Result<TriEncoding> {
        let b = visible.dim(0)?;
        if infrared.dims() != visible.dims() || fused.dims() != visible.dims() {
            return Err(Error::DimensionMismatch(format!(
                "triplet batches differ: {:?} / {:?} / {:?}",
                visible.dims(),
                infrared.dims(),
                fused.dims()
            )));
        }
        let all = self.backbone.forward(&Tensor::cat(&[infrared, visible, fused], 0)?)?;
        Ok(TriEncoding {
            f_ir: all.narrow(0, 0, b)?,
            f_vi: all.narrow(0, b, b)?,
            f_fused: all.narrow(0, 2 * b, b)?,
        })
    }

    /// Projected fusion-transformer output `(B, N, D)`, before reshaping.
    pub fn fusion_tokens(&self, enc: &TriEncoding) -> Result<Tensor> {
        let cat = Tensor::cat(&[&enc.f_ir, &enc.f_vi, &enc.f_fused], 2)?;
        let projected = self.projection.forward(&cat)?;
        self.fusion.forward(&projected)
    }

    /// Fused feature map `(B, D, H', W')`; token `r·W' + c` lands at `(r, c)`.
    pub fn fuse_features(&self, enc: &TriEncoding) -> Result<Tensor> {
        let tokens = self.fusion_tokens(enc)?;
        let (b, _, d) = tokens.dims3()?;
        let g = self.config.encoder.grid();
        Ok(tokens.transpose(1, 2)?.contiguous()?.reshape((b, d, g, g))?)
    }

    pub fn predict_heatmap(&self, map: &Tensor) -> Result<Tensor> {
        self.heatmap_head.forward(map)
    }

    pub fn predict_scores(&self, map: &Tensor) -> Result<Tensor> {
        self.score_head.forward(map)
    }

    pub fn forward(&self, visible: &Tensor, infrared: &Tensor, fused: &Tensor) -> Result<RewardTensors> {
        let map = self.fuse_features(&self.encode(visible, infrared, fused)?)?;
        Ok(RewardTensors {
            scores: self.predict_scores(&map)?,
            heatmap: self.predict_heatmap(&map)?,
        })
    }

    /// Runs preprocessed images through the model in one batch.
    pub fn forward_images(&self, triplets: &[(&Image, &Image, &Image)]) -> Result<RewardTensors> {
        let prep = |imgs: Vec<&Image>| -> Result<Tensor> {
            let imgs: Vec<Image> = imgs.into_iter().map(|im| self.preprocess(im)).collect();
            stack(&imgs.iter().collect::<Vec<_>>(), &Device::Cpu)
        };
        let v = prep(triplets.iter().map(|t| t.0).collect())?;
        let i = prep(triplets.iter().map(|t| t.1).collect())?;
        let f = prep(triplets.iter().map(|t| t.2).collect())?;
        self.forward(&v, &i, &f)
    }

    /// Scores and a heatmap resized back to the input resolution.
    pub fn predict(&self, visible: &Image, infrared: &Image, fused: &Image) -> Result<RewardOutput> {
        Ok(self.predict_batch(&[(visible, infrared, fused)])?.remove(0))
    }

    pub fn predict_batch(&self, triplets: &[(&Image, &Image, &Image)]) -> Result<Vec<RewardOutput>> {
        if triplets.is_empty() {
            return Ok(Vec::new());
        }
        for (v, i, f) in triplets {
            if v.dims() != i.dims() || v.dims() != f.dims() {
                return Err(Error::DimensionMismatch(format!(
                    "triplet images differ: {:?} / {:?} / {:?}",
                    v.dims(),
                    i.dims(),
                    f.dims()
                )));
            }
        }
        let out = self.forward_images(triplets)?;
        let scores = out.scores.to_vec2::<f64>()?;
        triplets
            .iter()
            .enumerate()
            .map(|(k, (v, _, _))| {
                let heat = Image::from_tensor(&out.heatmap.get(k)?)?;
                let heat = if heat.dims() == v.dims() {
                    heat
                } else {
                    heat.resize(v.width(), v.height())
                };
                let s = &scores[k];
                Ok(RewardOutput {
                    scores: [s[0], s[1], s[2], s[3], s[4]],
                    heatmap: heat,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(pos: bool) -> RewardModel {
        let cfg = RewardModelConfig {
            encoder: EncoderConfig {
                use_positional: pos,
                ..EncoderConfig::default()
            },
            ..RewardModelConfig::default()
        };
        RewardModel::new(cfg, 5).unwrap()
    }

    fn rand_image(seed: u64, channels: usize) -> Image {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(32, 32, channels, |_, _, _| rng.random::<f64>())
    }

    fn batch(img: &Image) -> Tensor {
        img.to_rgb().to_tensor(&Device::Cpu).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        for bad in [
            EncoderConfig { image_size: 30, ..Default::default() },
            EncoderConfig { patch_size: 3, image_size: 33, ..Default::default() },
            EncoderConfig { heads: 5, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn shapes_for_toy_config() {
        let m = toy(true);
        let x = batch(&rand_image(1, 3));
        let enc = m.encode(&x, &x, &x).unwrap();
        assert_eq!(enc.f_ir.dims(), &[1, 64, 32]);
        let map = m.fuse_features(&enc).unwrap();
        assert_eq!(map.dims(), &[1, 32, 8, 8]);
        let out = m.forward(&x, &x, &x).unwrap();
        assert_eq!(out.scores.dims(), &[1, 5]);
        assert_eq!(out.heatmap.dims(), &[1, 1, 32, 32]);
        assert_eq!(m.heatmap_head.num_stages(), 2);
    }

    #[test]
    fn shared_weights_give_identical_tokens() {
        let m = toy(true);
        let x = batch(&rand_image(2, 3));
        let y = batch(&rand_image(3, 3));
        let enc = m.encode(&x, &x, &y).unwrap();
        let a = enc.f_vi.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = enc.f_ir.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn map_reshape_matches_token_index() {
        let m = toy(true);
        let x = batch(&rand_image(4, 3));
        let y = batch(&rand_image(5, 3));
        let enc = m.encode(&x, &y, &x).unwrap();
        let tokens = m.fusion_tokens(&enc).unwrap().get(0).unwrap().to_vec2::<f64>().unwrap();
        let map = m.fuse_features(&enc).unwrap().get(0).unwrap().to_vec3::<f64>().unwrap();
        for d in 0..32 {
            for r in 0..8 {
                for c in 0..8 {
                    assert_eq!(map[d][r][c], tokens[r * 8 + c][d]);
                }
            }
        }
    }

    #[test]
    fn patch_permutation_without_positions_permutes_rows() {
        let m = toy(false);
        let img = rand_image(6, 3);
        // Swap patch (0,0) with patch (2,5).
        let mut swapped = img.clone();
        for dy in 0..4 {
            for dx in 0..4 {
                for ch in 0..3 {
                    let a = img.get(dx, dy, ch);
                    let b = img.get(20 + dx, 8 + dy, ch);
                    swapped.set(dx, dy, ch, b);
                    swapped.set(20 + dx, 8 + dy, ch, a);
                }
            }
        }
        let rows = |im: &Image| {
            let t = m.backbone.forward(&batch(im)).unwrap();
            t.get(0).unwrap().to_vec2::<f64>().unwrap()
        };
        let (a, b) = (rows(&img), rows(&swapped));
        let (p, q) = (0, 2 * 8 + 5);
        let close = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(u, v)| (u - v).abs() < 1e-10);
        assert!(close(&a[p], &b[q]) && close(&a[q], &b[p]));
        for k in (0..64).filter(|&k| k != p && k != q) {
            assert!(close(&a[k], &b[k]));
        }
    }

    #[test]
    fn zero_projection_gives_zero_output_on_zero_tokens() {
        let m = toy(true);
        let zeros = Tensor::zeros((1, 64, 32), candle_core::DType::F64, &Device::Cpu).unwrap();
        let out = m.projection.forward(&Tensor::cat(&[&zeros, &zeros, &zeros], 2).unwrap()).unwrap();
        assert_eq!(out.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn zeroed_output_layers_give_half() {
        let m = toy(true);
        for name in ["heatmap_head.out.weight", "heatmap_head.out.bias", "score_head.fc2.weight", "score_head.fc2.bias"] {
            let v = m.params().get(name).unwrap();
            v.set(&v.as_tensor().zeros_like().unwrap()).unwrap();
        }
        let out = m.predict(&rand_image(7, 3), &rand_image(8, 1), &rand_image(9, 3)).unwrap();
        assert_eq!(out.scores, [0.5; 5]);
        assert!(out.heatmap.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn outputs_in_open_unit_interval_and_input_sized() {
        let m = toy(true);
        let v = Image::from_fn(40, 24, 3, |x, y, _| ((x * y) % 7) as f64 / 7.0);
        let i = Image::from_fn(40, 24, 1, |x, _, _| x as f64 / 40.0);
        let out = m.predict(&v, &i, &v).unwrap();
        assert_eq!(out.heatmap.dims(), (24, 40));
        assert!(out.scores.iter().chain(out.heatmap.data()).all(|&s| s > 0.0 && s < 1.0));
    }

    #[test]
    fn different_inputs_give_different_scores() {
        let m = toy(true);
        let a = m.predict(&rand_image(10, 3), &rand_image(11, 1), &rand_image(12, 3)).unwrap();
        let b = m.predict(&rand_image(13, 3), &rand_image(14, 1), &rand_image(15, 3)).unwrap();
        assert_ne!(a.scores, b.scores);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = toy(true);
        let ckpt = m.to_checkpoint().unwrap();
        let back = RewardModel::from_checkpoint(&Checkpoint::from_json(&ckpt.to_json().unwrap()).unwrap()).unwrap();
        assert_eq!(back.params().max_abs_diff(m.params(), "").unwrap(), 0.0);
        let (v, i) = (rand_image(16, 3), rand_image(17, 1));
        assert_eq!(m.predict(&v, &i, &v).unwrap(), back.predict(&v, &i, &v).unwrap());
    }

    #[test]
    fn frozen_backbone_is_excluded_from_training() {
        let m = toy(true);
        assert!(m.trainable_names().iter().all(|n| !n.starts_with(BACKBONE)));
        assert!(m.trainable_names().iter().any(|n| n.starts_with(FUSION)));
    }
}
