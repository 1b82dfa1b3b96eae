//! Small neural-network toolkit on top of candle: a named parameter store with
//! seeded initialization, the handful of layers the models need, and the
//! cosine learning-rate schedule.
//!
//! Parameters are always `f64` on the CPU. Initialization draws from a
//! caller-provided ChaCha stream so two builds with the same seed are
//! bit-identical.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Named trainable tensors. Cloning shares the underlying storage; rebuild a
/// model from [`ParamStore::tensors`] for an independent copy.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Variables whose name starts with any of `prefixes`.
    pub fn vars_with_prefixes(&self, prefixes: &[&str]) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(name, _)| prefixes.iter().any(|p| name.starts_with(p)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    /// Overwrites the value of an existing parameter in place.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(Error::DimensionMismatch(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(DType::F64)?)?;
        Ok(())
    }

    pub fn total_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Detached copies of every tensor, keyed by name.
    pub fn tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
            .collect()
    }

    /// `name -> (shape, flattened values)`.
    pub fn values(&self) -> Result<BTreeMap<String, (Vec<usize>, Vec<f64>)>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let data = v.as_tensor().flatten_all()?.to_vec1::<f64>()?;
                Ok((k.clone(), (v.dims().to_vec(), data)))
            })
            .collect()
    }

    /// Largest absolute elementwise difference over the parameters whose names
    /// start with `prefix` (all parameters for an empty prefix).
    pub fn max_abs_diff(&self, other: &ParamStore, prefix: &str) -> Result<f64> {
        let mut worst = 0.0f64;
        for (name, var) in self.vars.iter().filter(|(n, _)| n.starts_with(prefix)) {
            let theirs = other
                .vars
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))?;
            let d = (var.as_tensor() - theirs.as_tensor())?
                .abs()?
                .flatten_all()?
                .max(0)?
                .to_scalar::<f64>()?;
            worst = worst.max(d);
        }
        Ok(worst)
    }

    /// Euclidean distance between two stores over all shared parameters.
    pub fn l2_distance(&self, other: &ParamStore) -> Result<f64> {
        let mut acc = 0.0;
        for (name, var) in &self.vars {
            if let Some(theirs) = other.vars.get(name) {
                acc += (var.as_tensor() - theirs.as_tensor())?
                    .sqr()?
                    .sum_all()?
                    .to_scalar::<f64>()?;
            }
        }
        Ok(acc.sqrt())
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.vars.len() == other.vars.len()
            && self
                .vars
                .iter()
                .zip(&other.vars)
                .all(|((a, va), (b, vb))| a == b && va.dims() == vb.dims())
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-bound, bound)`.
    Uniform(f64),
    Normal(f64),
}

enum Source<'a> {
    Fresh(&'a mut ChaCha8Rng),
    Load(&'a BTreeMap<String, Tensor>),
}

/// Creates (or loads) named parameters while building a module tree.
pub struct VarBuilder<'a> {
    store: &'a mut ParamStore,
    source: Source<'a>,
    prefix: String,
    frozen: bool,
}

impl<'a> VarBuilder<'a> {
    /// Fresh parameters drawn from `rng`.
    pub fn fresh(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            source: Source::Fresh(rng),
            prefix: String::new(),
            frozen: false,
        }
    }

    /// Parameters taken from previously saved tensors.
    pub fn load(store: &'a mut ParamStore, tensors: &'a BTreeMap<String, Tensor>) -> Self {
        Self {
            store,
            source: Source::Load(tensors),
            prefix: String::new(),
            frozen: false,
        }
    }

    pub fn pp(&mut self, name: &str) -> VarBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let source = match &mut self.source {
            Source::Fresh(rng) => Source::Fresh(rng),
            Source::Load(t) => Source::Load(t),
        };
        VarBuilder {
            store: &mut *self.store,
            source,
            prefix,
            frozen: self.frozen,
        }
    }

    /// Tensors handed out below this point are detached from autograd.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let n: usize = shape.iter().product();
        let tensor = match &mut self.source {
            Source::Fresh(rng) => {
                let data: Vec<f64> = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
                    Init::Normal(std) => {
                        let dist = Normal::new(0.0, std)
                            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
                        (0..n).map(|_| dist.sample(&mut **rng)).collect()
                    }
                };
                Tensor::from_vec(data, shape, &Device::Cpu)?
            }
            Source::Load(tensors) => {
                let t = tensors.get(&full).ok_or_else(|| {
                    Error::Checkpoint(format!("missing parameter `{full}`"))
                })?;
                if t.dims() != shape {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{full}` has shape {:?}, expected {shape:?}",
                        t.dims()
                    )));
                }
                t.to_dtype(DType::F64)?.copy()?
            }
        };
        let var = Var::from_tensor(&tensor)?;
        let out = if self.frozen {
            var.as_detached_tensor()
        } else {
            var.as_tensor().clone()
        };
        self.store.vars.insert(full, var);
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(vb: &mut VarBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = vb.get("weight", &[out_dim, in_dim], Init::Uniform(bound))?;
        let bias = vb.get("bias", &[out_dim], Init::Zeros)?;
        Ok(Self { weight, bias })
    }
}

impl Module for Linear {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        xs.broadcast_matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        vb: &mut VarBuilder,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        let weight = vb.get("weight", &[out_ch, in_ch, kernel, kernel], Init::Uniform(bound))?;
        let bias = vb.get("bias", &[out_ch], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// 3x3, stride 1, "same" padding.
    pub fn same3(vb: &mut VarBuilder, in_ch: usize, out_ch: usize) -> Result<Self> {
        Self::new(vb, in_ch, out_ch, 3, 1, 1)
    }

    pub fn out_size(&self, input: usize) -> usize {
        let k = self.weight.dim(2).expect("rank-4 kernel");
        (input + 2 * self.padding - k) / self.stride + 1
    }
}

impl Module for Conv2d {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let out_ch = self.bias.dim(0)?;
        xs.conv2d(&self.weight, self.padding, self.stride, 1, 1)?
            .broadcast_add(&self.bias.reshape((1, out_ch, 1, 1))?)
    }
}

/// Layer normalization over the last dimension, assembled from primitive ops
/// so it is differentiable end to end.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(vb: &mut VarBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: vb.get("weight", &[dim], Init::Ones)?,
            beta: vb.get("bias", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let mean = xs.mean_keepdim(D::Minus1)?;
        let centered = xs.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)
    }
}

/// Nearest-neighbour 2x upsampling of an `(N, C, H, W)` tensor, written with
/// broadcast + reshape so the backward pass is exact.
pub fn upsample2x(xs: &Tensor) -> candle_core::Result<Tensor> {
    let (n, c, h, w) = xs.dims4()?;
    xs.reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, 2, w, 2))?
        .reshape((n, c, 2 * h, 2 * w))
}

/// Cosine annealing: `min + (max - min) * (1 + cos(pi * step / last)) / 2`,
/// where `last = total_steps - 1` is the index of the final optimizer step.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total_steps <= 1 {
        return lr_max;
    }
    let last = (total_steps - 1) as f64;
    let t = (step as f64).min(last) / last;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn fresh_builds_are_seed_deterministic() {
        let build = |seed| {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut vb = VarBuilder::fresh(&mut store, &mut rng);
            Linear::new(&mut vb.pp("fc"), 4, 3).unwrap();
            store.values().unwrap()
        };
        assert_eq!(build(7), build(7));
        assert_ne!(build(7), build(8));
    }

    #[test]
    fn load_reproduces_fresh_values() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fc = Linear::new(&mut VarBuilder::fresh(&mut store, &mut rng).pp("fc"), 4, 2).unwrap();
        let saved = store.tensors().unwrap();
        let mut loaded = ParamStore::new();
        let fc2 = Linear::new(&mut VarBuilder::load(&mut loaded, &saved).pp("fc"), 4, 2).unwrap();
        let x = Tensor::new(&[[1.0f64, -2.0, 0.5, 3.0]], &Device::Cpu).unwrap();
        let a = fc.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = fc2.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(a, b);
        assert_eq!(loaded.max_abs_diff(&store, "").unwrap(), 0.0);
    }

    #[test]
    fn frozen_parameters_receive_no_gradient() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut vb = VarBuilder::fresh(&mut store, &mut rng);
        let frozen = {
            let mut sub = vb.pp("frozen");
            sub.set_frozen(true);
            Linear::new(&mut sub, 2, 2).unwrap()
        };
        let live = Linear::new(&mut vb.pp("live"), 2, 1).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0]], &Device::Cpu).unwrap();
        let y = live.forward(&frozen.forward(&x).unwrap()).unwrap().sum_all().unwrap();
        let grads = y.backward().unwrap();
        assert!(grads.get(store.get("frozen.weight").unwrap().as_tensor()).is_none());
        assert!(grads.get(store.get("live.weight").unwrap().as_tensor()).is_some());
    }

    #[test]
    fn upsample_repeats_pixels() {
        let x = Tensor::new(&[[[[1.0f64, 2.0], [3.0, 4.0]]]], &Device::Cpu).unwrap();
        let up = upsample2x(&x).unwrap();
        assert_eq!(up.dims(), &[1, 1, 4, 4]);
        let rows = up.squeeze(0).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(rows[0], vec![1.0, 1.0, 2.0, 2.0]);
        assert_eq!(rows[3], vec![3.0, 3.0, 4.0, 4.0]);
    }

    #[test]
    fn layer_norm_standardizes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ln = LayerNorm::new(&mut VarBuilder::fresh(&mut store, &mut rng), 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 2e-5, 1e-5), 2e-5);
        assert!((cosine_lr(99, 100, 2e-5, 1e-5) - 1e-5).abs() < 1e-18);
        let mid = cosine_lr(50, 101, 2e-5, 1e-5);
        assert!((mid - 1.5e-5).abs() < 1e-15);
        assert_eq!(cosine_lr(0, 1, 1e-4, 1e-6), 1e-4);
    }
}
