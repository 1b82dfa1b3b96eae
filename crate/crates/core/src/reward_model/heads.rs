use candle_core::{Module, Tensor};

use crate::error::Result;
use crate::nn::{upsample2x, Conv2d, Linear, VarBuilder};

struct ResidualBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResidualBlock {
    fn new(vb: &mut VarBuilder, ch: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::same3(&mut vb.pp("conv1"), ch, ch)?,
            conv2: Conv2d::same3(&mut vb.pp("conv2"), ch, ch)?,
        })
    }

    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let inner = self.conv2.forward(&self.conv1.forward(xs)?.gelu()?)?;
        (xs + inner)?.gelu()
    }
}

/// Channel compression, `log2(patch)` doubling stages with residual
/// refinement, then a 1-channel sigmoid map.
pub struct HeatmapHead {
    compress: Conv2d,
    stages: Vec<ResidualBlock>,
    out: Conv2d,
}

impl HeatmapHead {
    pub fn new(vb: &mut VarBuilder, dim: usize, ch: usize, patch_size: usize) -> Result<Self> {
        let n_stages = patch_size.trailing_zeros() as usize;
        Ok(Self {
            compress: Conv2d::same3(&mut vb.pp("compress"), dim, ch)?,
            stages: (0..n_stages)
                .map(|i| ResidualBlock::new(&mut vb.pp(&format!("up.{i}")), ch))
                .collect::<Result<_>>()?,
            out: Conv2d::same3(&mut vb.pp("out"), ch, 1)?,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// `(B, D, H', W')` to `(B, 1, H'·patch, W'·patch)` in `(0, 1)`.
    pub fn forward(&self, map: &Tensor) -> Result<Tensor> {
        let mut xs = self.compress.forward(map)?.gelu()?;
        for stage in &self.stages {
            xs = stage.forward(&upsample2x(&xs)?)?;
        }
        Ok(candle_nn::ops::sigmoid(&self.out.forward(&xs)?)?)
    }
}

/// Stride-2 convolutions down to at most 2x2, flatten, two-layer MLP, five
/// sigmoid outputs.
pub struct ScoreHead {
    convs: Vec<Conv2d>,
    fc1: Linear,
    fc2: Linear,
}

impl ScoreHead {
    pub fn new(vb: &mut VarBuilder, dim: usize, ch: usize, grid: usize, hidden: usize) -> Result<Self> {
        let mut convs = Vec::new();
        let (mut side, mut in_ch) = (grid, dim);
        while side > 2 {
            let conv = Conv2d::new(&mut vb.pp(&format!("conv.{}", convs.len())), in_ch, ch, 3, 2, 1)?;
            side = conv.out_size(side);
            in_ch = ch;
            convs.push(conv);
        }
        Ok(Self {
            convs,
            fc1: Linear::new(&mut vb.pp("fc1"), in_ch * side * side, hidden)?,
            fc2: Linear::new(&mut vb.pp("fc2"), hidden, 5)?,
        })
    }

    /// `(B, D, H', W')` to `(B, 5)` in `(0, 1)`.
    pub fn forward(&self, map: &Tensor) -> Result<Tensor> {
        let mut xs = map.clone();
        for conv in &self.convs {
            xs = conv.forward(&xs)?.gelu()?;
        }
        let hidden = self.fc1.forward(&xs.flatten_from(1)?)?.gelu()?;
        Ok(candle_nn::ops::sigmoid(&self.fc2.forward(&hidden)?)?)
    }
}
