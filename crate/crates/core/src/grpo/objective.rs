use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::RegionSet;
use crate::error::{Error, Result};

/// Below this masked L1 mass of the old image a region ratio is defined as 1.
pub const RATIO_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAdvantage {
    pub scores: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub advantages: Vec<f64>,
}

/// `A_k = (s_k - mean) / (std + eps_adv)` within one group.
pub fn group_advantage(scores: &[f64], eps_adv: f64) -> Result<GroupAdvantage> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("an advantage group needs at least one score".into()));
    }
    let k = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / k;
    let std = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / k).sqrt();
    Ok(GroupAdvantage {
        scores: scores.to_vec(),
        mean,
        std,
        advantages: scores.iter().map(|s| (s - mean) / (std + eps_adv)).collect(),
    })
}

pub fn clip(r: f64, eps: f64) -> f64 {
    r.clamp(1.0 - eps, 1.0 + eps)
}

/// `min(r A, clip(r, 1-eps, 1+eps) A)`.
pub fn clipped_surrogate(r: f64, advantage: f64, eps: f64) -> f64 {
    (r * advantage).min(clip(r, eps) * advantage)
}

/// `1 + alpha * |(new - old) * M|_1 / |old * M|_1` over all masked pixels and
/// channels, or 1 when the old mass is below [`RATIO_GUARD`]. Images are
/// `H x W x C` interleaved with the mask indexed by pixel.
pub fn region_ratio(new: &[f64], old: &[f64], mask: &[bool], channels: usize, alpha: f64) -> Result<f64> {
    if new.len() != old.len() || new.len() != mask.len() * channels {
        return Err(Error::DimensionMismatch(format!(
            "ratio inputs: new {}, old {}, mask {} x {channels} channels",
            new.len(),
            old.len(),
            mask.len()
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for c in 0..channels {
            let i = p * channels + c;
            num += (new[i] - old[i]).abs();
            den += old[i].abs();
        }
    }
    if den < RATIO_GUARD {
        return Ok(1.0);
    }
    Ok(1.0 + alpha * num / den)
}

/// `(B, 1, H, W)` f64 mask tensor for one region of each image in a batch.
pub fn mask_tensor(regions: &RegionSet, k: usize) -> Result<Tensor> {
    let data: Vec<f64> = regions.masks[k].iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::from_vec(data, (1, 1, regions.height, regions.width), &Device::Cpu)?)
}

/// Differentiable ratio for `(1, C, H, W)` images; `old` is treated as a
/// constant.
pub fn region_ratio_tensor(new: &Tensor, old: &Tensor, mask: &Tensor, alpha: f64) -> Result<Tensor> {
    let old = old.detach();
    let den = old.abs()?.broadcast_mul(mask)?.sum_all()?.to_scalar::<f64>()?;
    if den < RATIO_GUARD {
        return Ok(Tensor::new(1.0f64, new.device())?);
    }
    let num = (new - &old)?.abs()?.broadcast_mul(mask)?.sum_all()?;
    Ok(((num * (alpha / den))? + 1.0)?)
}

/// Gaussian-surrogate KL between two deterministic image policies:
/// `mean((F - F_ref)^2) / (2 sigma^2)`.
pub fn gaussian_kl(f_theta: &Tensor, f_ref: &Tensor, sigma: f64) -> Result<Tensor> {
    let msd = (f_theta - f_ref.detach())?.sqr()?.mean_all()?;
    Ok((msd / (2.0 * sigma * sigma))?)
}

pub fn gaussian_kl_value(f_theta: &[f64], f_ref: &[f64], sigma: f64) -> f64 {
    let msd = f_theta.iter().zip(f_ref).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / f_theta.len() as f64;
    msd / (2.0 * sigma * sigma)
}

/// Scalar parts of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub j: f64,
    pub surrogate: f64,
    pub kl: f64,
}

/// `J = sum_k w_k min(r_k A_k, clip(r_k) A_k) - beta kl` on plain numbers.
pub fn grpo_objective_value(
    advantages: &[f64],
    ratios: &[f64],
    weights: &[f64],
    kl: f64,
    beta: f64,
    eps_clip: f64,
) -> Result<ObjectiveValue> {
    if advantages.len() != ratios.len() || advantages.len() != weights.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} advantages, {} ratios, {} weights",
            advantages.len(),
            ratios.len(),
            weights.len()
        )));
    }
    let surrogate = advantages
        .iter()
        .zip(ratios)
        .zip(weights)
        .map(|((&a, &r), &w)| w * clipped_surrogate(r, a, eps_clip))
        .sum::<f64>();
    Ok(ObjectiveValue {
        j: surrogate - beta * kl,
        surrogate,
        kl,
    })
}

/// Differentiable objective terms.
#[derive(Debug, Clone)]
pub struct ObjectiveTensors {
    pub j: Tensor,
    pub surrogate: Tensor,
    pub kl: Tensor,
}

/// Weighted clipped surrogate over regions. The advantages are constants.
/// Each region contributes `r_k A_k` when that is the smaller branch;
/// otherwise it contributes the detached constant `clip(r_k) A_k`, so a
/// clipped region passes no gradient.
pub fn surrogate_tensor(ratios: &[Tensor], advantages: &[f64], weights: &[f64], eps_clip: f64) -> Result<Tensor> {
    if advantages.len() != ratios.len() || advantages.len() != weights.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} advantages, {} ratios, {} weights",
            advantages.len(),
            ratios.len(),
            weights.len()
        )));
    }
    let mut total = Tensor::new(0.0f64, &Device::Cpu)?;
    for ((r, &a), &w) in ratios.iter().zip(advantages).zip(weights) {
        let rv = r.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let term = if rv * a <= clip(rv, eps_clip) * a {
            (r * (a * w))?
        } else {
            Tensor::new(clip(rv, eps_clip) * a * w, &Device::Cpu)?
        };
        total = (total + term)?;
    }
    Ok(total)
}

/// `J = surrogate - beta * kl` with the Gaussian-surrogate KL.
pub fn grpo_objective(
    ratios: &[Tensor],
    advantages: &[f64],
    weights: &[f64],
    f_theta: &Tensor,
    f_ref: &Tensor,
    beta: f64,
    eps_clip: f64,
    kl_sigma: f64,
) -> Result<ObjectiveTensors> {
    let surrogate = surrogate_tensor(ratios, advantages, weights, eps_clip)?;
    let kl = gaussian_kl(f_theta, f_ref, kl_sigma)?;
    let j = (&surrogate - (&kl * beta)?)?;
    Ok(ObjectiveTensors { j, surrogate, kl })
}
