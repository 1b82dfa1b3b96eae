//! Compact encoder-decoder fusion network used as the policy.
//!
//! One encoder (shared between the visible and the three-channel-replicated
//! infrared input) downsamples through three stages; the two bottleneck
//! features are concatenated and decoded with skip connections from both
//! encoders into a sigmoid RGB image.

use candle_core::{Device, Module, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data_pipeline::ImagePair;
use crate::error::{Error, Result};
use crate::image::{stack, Image};
use crate::nn::{cosine_lr, scalar, upsample2x, Conv2d, ParamStore, VarBuilder};

pub const CHECKPOINT_KIND: &str = "fusion_policy";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    /// Channels of the three encoder stages.
    pub channels: [usize; 3],
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { channels: [16, 32, 64] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Trainable,
    Reference,
}

struct Encoder {
    stages: [Conv2d; 3],
}

impl Encoder {
    fn new(vb: &mut VarBuilder, ch: [usize; 3]) -> Result<Self> {
        Ok(Self {
            stages: [
                Conv2d::new(&mut vb.pp("stage0"), 3, ch[0], 3, 1, 1)?,
                Conv2d::new(&mut vb.pp("stage1"), ch[0], ch[1], 3, 2, 1)?,
                Conv2d::new(&mut vb.pp("stage2"), ch[1], ch[2], 3, 2, 1)?,
            ],
        })
    }

    /// Features at full, half and quarter resolution.
    fn forward(&self, xs: &Tensor) -> candle_core::Result<[Tensor; 3]> {
        let f0 = self.stages[0].forward(xs)?.gelu()?;
        let f1 = self.stages[1].forward(&f0)?.gelu()?;
        let f2 = self.stages[2].forward(&f1)?.gelu()?;
        Ok([f0, f1, f2])
    }
}

pub struct FusionPolicy {
    config: PolicyConfig,
    role: Role,
    store: ParamStore,
    encoder: Encoder,
    bottleneck: Conv2d,
    dec1: Conv2d,
    dec0: Conv2d,
    out: Conv2d,
}

impl std::fmt::Debug for FusionPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FusionPolicy")
            .field("config", &self.config)
            .field("role", &self.role)
            .field("parameters", &self.store.total_elements())
            .finish()
    }
}

impl FusionPolicy {
    fn build(config: PolicyConfig, role: Role, mut vb: VarBuilder) -> Result<Self> {
        let ch = config.channels;
        if ch.contains(&0) {
            return Err(Error::InvalidArgument("policy channels must be positive".into()));
        }
        vb.set_frozen(role == Role::Reference);
        let encoder = Encoder::new(&mut vb.pp("encoder"), ch)?;
        let bottleneck = Conv2d::same3(&mut vb.pp("bottleneck"), 2 * ch[2], ch[2])?;
        let dec1 = Conv2d::same3(&mut vb.pp("dec1"), ch[2] + 2 * ch[1], ch[1])?;
        let dec0 = Conv2d::same3(&mut vb.pp("dec0"), ch[1] + 2 * ch[0], ch[0])?;
        let out = Conv2d::same3(&mut vb.pp("out"), ch[0], 3)?;
        drop(vb);
        Ok(Self {
            config,
            role,
            store: ParamStore::new(),
            encoder,
            bottleneck,
            dec1,
            dec0,
            out,
        })
    }

    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::build(config, Role::Trainable, VarBuilder::fresh(&mut store, &mut rng))?;
        p.store = store;
        Ok(p)
    }

    fn from_tensors(
        config: PolicyConfig,
        role: Role,
        tensors: &std::collections::BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut p = Self::build(config, role, VarBuilder::load(&mut store, tensors))?;
        if store.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, policy uses {}",
                tensors.len(),
                store.len()
            )));
        }
        p.store = store;
        Ok(p)
    }

    /// Loads a trainable policy.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(CHECKPOINT_KIND)?;
        Self::from_tensors(ckpt.config()?, Role::Trainable, &ckpt.tensors()?)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_store(CHECKPOINT_KIND, &self.config, &self.store)
    }

    /// Deep copy with role `Reference`: independent storage, no gradients.
    pub fn clone_reference(&self) -> Result<Self> {
        Self::from_tensors(self.config.clone(), Role::Reference, &self.store.tensors()?)
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Empty for a reference copy.
    pub fn trainable_vars(&self) -> Vec<Var> {
        match self.role {
            Role::Trainable => self.store.all_vars(),
            Role::Reference => Vec::new(),
        }
    }

    /// Overwrites this policy's parameters with `other`'s values.
    pub fn copy_from(&self, other: &FusionPolicy) -> Result<()> {
        for (name, tensor) in other.store.tensors()? {
            self.store.assign(&name, &tensor)?;
        }
        Ok(())
    }

    /// `(B, 3, H, W)` visible and infrared batches in `[0, 1]` to a fused
    /// `(B, 3, H, W)` batch in `(0, 1)`. Inputs are edge-padded to a multiple
    /// of 4 and the output cropped back.
    pub fn forward(&self, visible: &Tensor, infrared: &Tensor) -> Result<Tensor> {
        if visible.dims() != infrared.dims() {
            return Err(Error::DimensionMismatch(format!(
                "visible {:?} vs infrared {:?}",
                visible.dims(),
                infrared.dims()
            )));
        }
        let (b, c, h, w) = visible.dims4()?;
        if c != 3 {
            return Err(Error::DimensionMismatch(format!("expected 3 channels, got {c}")));
        }
        let (ph, pw) = ((4 - h % 4) % 4, (4 - w % 4) % 4);
        let pad = |t: &Tensor| -> candle_core::Result<Tensor> { t.pad_with_same(2, 0, ph)?.pad_with_same(3, 0, pw) };
        let both = pad(&Tensor::cat(&[visible, infrared], 0)?)?;
        let [f0, f1, f2] = self.encoder.forward(&both)?;
        let split = |t: &Tensor| -> candle_core::Result<Tensor> {
            Tensor::cat(&[t.narrow(0, 0, b)?, t.narrow(0, b, b)?], 1)
        };
        let x = self.bottleneck.forward(&split(&f2)?)?.gelu()?;
        let x = self.dec1.forward(&Tensor::cat(&[&upsample2x(&x)?, &split(&f1)?], 1)?)?.gelu()?;
        let x = self.dec0.forward(&Tensor::cat(&[&upsample2x(&x)?, &split(&f0)?], 1)?)?.gelu()?;
        let y = candle_nn::ops::sigmoid(&self.out.forward(&x)?)?;
        Ok(y.narrow(2, 0, h)?.narrow(3, 0, w)?)
    }

    /// Fuses one pair; single-channel inputs are replicated to RGB.
    pub fn fuse(&self, visible: &Image, infrared: &Image) -> Result<Image> {
        if !visible.same_dims(infrared) {
            return Err(Error::DimensionMismatch(format!(
                "visible {:?} vs infrared {:?}",
                visible.dims(),
                infrared.dims()
            )));
        }
        let (v, i) = input_tensors(&[(visible, infrared)])?;
        Image::from_tensor(&self.forward(&v, &i)?.get(0)?)
    }
}

/// Batches `(visible, infrared)` pairs as two `(B, 3, H, W)` tensors.
pub fn input_tensors(pairs: &[(&Image, &Image)]) -> Result<(Tensor, Tensor)> {
    let vis: Vec<Image> = pairs.iter().map(|p| p.0.to_rgb()).collect();
    let ir: Vec<Image> = pairs.iter().map(|p| p.1.to_rgb()).collect();
    Ok((
        stack(&vis.iter().collect::<Vec<_>>(), &Device::Cpu)?,
        stack(&ir.iter().collect::<Vec<_>>(), &Device::Cpu)?,
    ))
}

/// BT.601 luma of a `(B, 3, H, W)` batch, `(B, 1, H, W)`.
pub fn gray(xs: &Tensor) -> Result<Tensor> {
    let w = Tensor::new(&[0.299f64, 0.587, 0.114], xs.device())?.reshape((1, 3, 1, 1))?;
    Ok(xs.broadcast_mul(&w)?.sum_keepdim(1)?)
}

/// Forward differences along width and height.
fn diffs(xs: &Tensor) -> candle_core::Result<(Tensor, Tensor)> {
    let (_, _, h, w) = xs.dims4()?;
    let dx = (xs.narrow(3, 1, w - 1)? - xs.narrow(3, 0, w - 1)?)?;
    let dy = (xs.narrow(2, 1, h - 1)? - xs.narrow(2, 0, h - 1)?)?;
    Ok((dx, dy))
}

/// Unsupervised proxy loss on luma: `mean|F - max(V, I)|` plus, per axis,
/// `mean| |dF| - max(|dV|, |dI|) |`.
pub fn proxy_loss(fused: &Tensor, visible: &Tensor, infrared: &Tensor) -> Result<Tensor> {
    let (f, v, i) = (gray(fused)?, gray(visible)?, gray(infrared)?);
    let intensity = (&f - v.maximum(&i)?)?.abs()?.mean_all()?;
    let (_, _, h, w) = f.dims4()?;
    if h < 2 || w < 2 {
        return Ok(intensity);
    }
    let (fx, fy) = diffs(&f)?;
    let (vx, vy) = diffs(&v)?;
    let (ix, iy) = diffs(&i)?;
    let gx = (fx.abs()? - vx.abs()?.maximum(&ix.abs()?)?)?.abs()?.mean_all()?;
    let gy = (fy.abs()? - vy.abs()?.maximum(&iy.abs()?)?)?.abs()?.mean_all()?;
    Ok((intensity + ((gx + gy)? * 0.5)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr_max: 2e-3,
            lr_min: 1e-4,
            weight_decay: 0.0,
            batch_size: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    /// 0 is the initial policy.
    pub epoch: usize,
    /// Mean loss over all pairs after the epoch.
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainHistory {
    pub epochs: Vec<PretrainEpoch>,
}

impl PretrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,lr\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{}\n", e.epoch, e.loss, e.lr));
        }
        out
    }
}

fn mean_proxy_loss(policy: &FusionPolicy, pairs: &[ImagePair]) -> Result<f64> {
    let mut acc = 0.0;
    for p in pairs {
        let (v, i) = input_tensors(&[(&p.visible, &p.infrared)])?;
        acc += scalar(&proxy_loss(&policy.forward(&v, &i)?, &v, &i)?)?;
    }
    Ok(acc / pairs.len() as f64)
}

/// Minimizes [`proxy_loss`] in place. Pairs in a minibatch must share
/// dimensions; batches are formed from a seeded shuffle.
pub fn pretrain_supervised(
    policy: &FusionPolicy,
    pairs: &[ImagePair],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainHistory> {
    if policy.role() != Role::Trainable {
        return Err(Error::InvalidArgument("cannot train a reference policy".into()));
    }
    if pairs.is_empty() || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("need at least one pair and a positive batch size".into()));
    }
    let mut opt = AdamW::new(
        policy.trainable_vars(),
        ParamsAdamW {
            lr: cfg.lr_max,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total_steps = pairs.len().div_ceil(cfg.batch_size) * cfg.epochs;
    let mut history = PretrainHistory {
        epochs: vec![PretrainEpoch {
            epoch: 0,
            loss: mean_proxy_loss(policy, pairs)?,
            lr: cfg.lr_max,
        }],
    };
    let mut step = 0;
    let mut lr = cfg.lr_max;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            lr = cosine_lr(step, total_steps, cfg.lr_max, cfg.lr_min);
            opt.set_learning_rate(lr);
            let batch: Vec<(&Image, &Image)> = chunk.iter().map(|&k| (&pairs[k].visible, &pairs[k].infrared)).collect();
            let (v, i) = input_tensors(&batch)?;
            let loss = proxy_loss(&policy.forward(&v, &i)?, &v, &i)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("pretraining loss {value} at epoch {epoch}, step {step}")));
            }
            opt.backward_step(&loss)?;
            step += 1;
        }
        let loss = mean_proxy_loss(policy, pairs)?;
        log::info!("pretrain epoch {epoch}: loss {loss:.6}");
        history.epochs.push(PretrainEpoch { epoch, loss, lr });
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::synthetic_pair;

    #[test]
    fn output_matches_input_dims_and_range() {
        let p = FusionPolicy::new(PolicyConfig::default(), 1).unwrap();
        for (w, h) in [(32, 32), (13, 10), (5, 7)] {
            let v = Image::from_fn(w, h, 3, |x, y, c| ((x + y + c) % 5) as f64 / 4.0);
            let i = Image::from_fn(w, h, 1, |x, _, _| x as f64 / w as f64);
            let f = p.fuse(&v, &i).unwrap();
            assert_eq!(f.dims(), (h, w));
            assert_eq!(f.channels(), 3);
            assert!(f.data().iter().all(|&x| x > 0.0 && x < 1.0));
        }
        let v = Image::filled(8, 8, 3, 0.5);
        assert!(p.fuse(&v, &Image::filled(8, 9, 1, 0.5)).is_err());
    }

    #[test]
    fn zero_output_layer_gives_half() {
        let p = FusionPolicy::new(PolicyConfig::default(), 2).unwrap();
        for name in ["out.weight", "out.bias"] {
            let v = p.params().get(name).unwrap();
            v.set(&v.as_tensor().zeros_like().unwrap()).unwrap();
        }
        let pair = synthetic_pair("a", 16, 1);
        let f = p.fuse(&pair.visible, &pair.infrared).unwrap();
        assert!(f.data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn reference_copy_is_independent() {
        let p = FusionPolicy::new(PolicyConfig::default(), 3).unwrap();
        let pair = synthetic_pair("a", 16, 2);
        let before = p.fuse(&pair.visible, &pair.infrared).unwrap();
        let r = p.clone_reference().unwrap();
        assert_eq!(r.role(), Role::Reference);
        assert!(r.trainable_vars().is_empty());
        assert!(r.params().same_layout(p.params()));
        assert_eq!(r.fuse(&pair.visible, &pair.infrared).unwrap(), before);
        let rr = r.clone_reference().unwrap();
        assert_eq!(rr.params().max_abs_diff(r.params(), "").unwrap(), 0.0);

        pretrain_supervised(&p, &[pair.clone()], &PretrainConfig { epochs: 1, ..Default::default() }, 0).unwrap();
        assert!(p.params().max_abs_diff(r.params(), "").unwrap() > 0.0);
        assert_eq!(r.fuse(&pair.visible, &pair.infrared).unwrap(), before);
    }

    #[test]
    fn proxy_loss_zero_at_target() {
        let pair = synthetic_pair("a", 12, 3);
        let (v, _) = input_tensors(&[(&pair.visible, &pair.infrared)]).unwrap();
        // Identical sources: the max-intensity and max-gradient targets are
        // the source itself.
        let l = scalar(&proxy_loss(&v, &v, &v).unwrap()).unwrap();
        assert_eq!(l, 0.0);
        let (v, i) = input_tensors(&[(&pair.visible, &pair.infrared)]).unwrap();
        assert!(scalar(&proxy_loss(&i, &v, &i).unwrap()).unwrap() >= 0.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = FusionPolicy::new(PolicyConfig::default(), 4).unwrap();
        let ckpt = Checkpoint::from_json(&p.to_checkpoint().unwrap().to_json().unwrap()).unwrap();
        let q = FusionPolicy::from_checkpoint(&ckpt).unwrap();
        let pair = synthetic_pair("a", 16, 4);
        assert_eq!(p.fuse(&pair.visible, &pair.infrared).unwrap(), q.fuse(&pair.visible, &pair.infrared).unwrap());
    }
}
