use candle_core::{Module, Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, LayerNorm, Linear, VarBuilder};

use super::EncoderConfig;

struct Attention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl Attention {
    fn new(vb: &mut VarBuilder, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            qkv: Linear::new(&mut vb.pp("qkv"), dim, 3 * dim)?,
            proj: Linear::new(&mut vb.pp("proj"), dim, dim)?,
            heads,
        })
    }

    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let (b, t, d) = xs.dims3()?;
        let dh = d / self.heads;
        let qkv = self
            .qkv
            .forward(xs)?
            .reshape((b, t, 3, self.heads, dh))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, t, d))?;
        self.proj.forward(&out)
    }
}

struct Block {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new(vb: &mut VarBuilder, dim: usize, heads: usize, mlp_dim: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&mut vb.pp("norm1"), dim)?,
            attn: Attention::new(&mut vb.pp("attn"), dim, heads)?,
            norm2: LayerNorm::new(&mut vb.pp("norm2"), dim)?,
            fc1: Linear::new(&mut vb.pp("fc1"), dim, mlp_dim)?,
            fc2: Linear::new(&mut vb.pp("fc2"), mlp_dim, dim)?,
        })
    }

    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let xs = (xs + self.attn.forward(&self.norm1.forward(xs)?)?)?;
        let mlp = self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&xs)?)?.gelu()?)?;
        xs + mlp
    }
}

/// Class token, optional learned positions, pre-norm blocks and a final norm
/// over a token sequence.
pub struct Transformer {
    cls: Tensor,
    pos: Option<Tensor>,
    blocks: Vec<Block>,
    norm: LayerNorm,
    tokens: usize,
    dim: usize,
}

impl Transformer {
    pub fn new(vb: &mut VarBuilder, cfg: &EncoderConfig) -> Result<Self> {
        let (n, d) = (cfg.num_patches(), cfg.embed_dim);
        let cls = vb.get("cls_token", &[1, 1, d], Init::Normal(0.02))?;
        let pos = if cfg.use_positional {
            Some(vb.get("pos_embed", &[1, n + 1, d], Init::Normal(0.02))?)
        } else {
            None
        };
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(&mut vb.pp(&format!("blocks.{i}")), d, cfg.heads, cfg.mlp_ratio * d))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cls,
            pos,
            blocks,
            norm: LayerNorm::new(&mut vb.pp("norm"), d)?,
            tokens: n,
            dim: d,
        })
    }

    /// `(B, N, D)` in, `(B, N, D)` out: the class token is prepended for the
    /// blocks and dropped from the result.
    pub fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        let (b, n, d) = tokens.dims3()?;
        if n != self.tokens || d != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "transformer expects {}x{} tokens, got {n}x{d}",
                self.tokens, self.dim
            )));
        }
        let cls = self.cls.broadcast_as((b, 1, d))?;
        let mut xs = Tensor::cat(&[&cls, tokens], 1)?;
        if let Some(pos) = &self.pos {
            xs = xs.broadcast_add(pos)?;
        }
        for block in &self.blocks {
            xs = block.forward(&xs)?;
        }
        Ok(self.norm.forward(&xs)?.narrow(1, 1, n)?)
    }
}

/// Patch embedding followed by a [`Transformer`].
pub struct Vit {
    patch_embed: Conv2d,
    transformer: Transformer,
    image_size: usize,
}

impl Vit {
    pub fn new(vb: &mut VarBuilder, cfg: &EncoderConfig) -> Result<Self> {
        let p = cfg.patch_size;
        Ok(Self {
            patch_embed: Conv2d::new(&mut vb.pp("patch_embed"), 3, cfg.embed_dim, p, p, 0)?,
            transformer: Transformer::new(vb, cfg)?,
            image_size: cfg.image_size,
        })
    }

    /// `(B, 3, S, S)` images to `(B, N, D)` patch tokens in row-major order.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || h != self.image_size || w != self.image_size {
            return Err(Error::DimensionMismatch(format!(
                "encoder expects 3x{s}x{s} input, got {c}x{h}x{w}",
                s = self.image_size
            )));
        }
        let patches = self.patch_embed.forward(images)?.flatten_from(2)?.transpose(1, 2)?;
        self.transformer.forward(&patches.contiguous()?)
    }
}
