//! Effective receptive field (ERF) measurement.
//!
//! The ERF of a student output location is the set of input pixels whose
//! gradient (of that output activation, summed over channels) is nonzero.
//! Exact nonzero-ness is numerically vacuous, so the support is thresholded
//! at a fraction tau of the per-map gradient maximum.

use crate::data::ImageTensor;
use crate::model::{OmniAd, params};
use burn::prelude::*;
use burn::tensor::backend::AutodiffBackend;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub const DEFAULT_TAU: f64 = 0.025;

#[derive(thiserror::Error, Debug)]
pub enum ErfError {
    #[error("location ({0}, {1}) outside the {2}x{3} output grid")]
    OutOfRangeLocation(usize, usize, usize, usize),
    #[error("level {0} out of range (model has 3 feature levels)")]
    OutOfRangeLevel(usize),
    #[error("mismatched models: {0}")]
    MismatchedConfigs(String),
}

#[derive(Debug, Clone)]
pub struct ErfMap {
    /// Output-grid location the cotangent was injected at.
    pub location: (usize, usize),
    /// |input gradient| summed over channels, normalised by its maximum.
    pub magnitude: Array2<f32>,
    /// magnitude > tau
    pub support_mask: Array2<bool>,
    /// Number of support pixels.
    pub area: usize,
    pub tau: f64,
}

/// ERF of `forward`'s output at `location`, probed with `input`.
/// `forward` must map (1,C,H,W) to a (1,C',H',W') feature map.
pub fn compute_erf_of<B: AutodiffBackend>(
    forward: impl Fn(Tensor<B, 4>) -> Tensor<B, 4>,
    input: Tensor<B, 4>,
    location: (usize, usize),
    tau: f64,
) -> Result<ErfMap, ErfError> {
    let input = input.require_grad();
    let out = forward(input.clone());
    let [_, _, oh, ow] = out.dims();
    let (i, j) = location;
    if i >= oh || j >= ow {
        return Err(ErfError::OutOfRangeLocation(i, j, oh, ow));
    }
    // Unit cotangent at (i, j), summed over channels.
    let scalar = out.narrow(2, i, 1).narrow(3, j, 1).sum();
    let grads = scalar.backward();
    let grad = input.grad(&grads).expect("input requires grad");
    let grad = grad.abs().sum_dim(1);
    let [_, _, h, w] = grad.dims();
    let data: Vec<f32> = grad
        .into_data()
        .convert::<f32>()
        .to_vec()
        .expect("contiguous gradient");
    let mut magnitude = Array2::from_shape_vec((h, w), data).unwrap();
    let max = magnitude.iter().copied().fold(0.0f32, f32::max);
    if max > 0.0 {
        magnitude.mapv_inplace(|v| v / max);
    }
    let support_mask = magnitude.mapv(|v| (v as f64) > tau);
    let area = support_mask.iter().filter(|&&m| m).count();
    Ok(ErfMap {
        location,
        magnitude,
        support_mask,
        area,
        tau,
    })
}

/// ERF of the model's student output at one of the three feature levels
/// (0 = finest, stride 4).
pub fn compute_erf<B: AutodiffBackend>(
    model: &OmniAd<B>,
    x: &ImageTensor,
    location: (usize, usize),
    level: usize,
    tau: f64,
    device: &B::Device,
) -> Result<ErfMap, ErfError> {
    if level >= 3 {
        return Err(ErfError::OutOfRangeLevel(level));
    }
    let input = x.to_batch::<B>(device);
    compute_erf_of(
        |input| {
            let out = model.forward(input);
            out.student[level].clone()
        },
        input,
        location,
        tau,
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErfComparisonEntry {
    pub location: (usize, usize),
    pub area_with: usize,
    pub area_without: usize,
    /// area_with / area_without; 1.0 when both are empty.
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErfComparison {
    pub level: usize,
    pub per_location: Vec<ErfComparisonEntry>,
    pub mean_ratio: f64,
    pub mean_area_with: f64,
    pub mean_area_without: f64,
    /// Locations where the attention model's ERF is strictly smaller.
    pub violations: usize,
}

/// Measure the broadening claim: compare ERF areas of a model with
/// attention (gates nonzero) against its attention-free counterpart at the
/// given output locations. The two models must share teacher and bottleneck
/// weights so the comparison isolates the attention modules.
pub fn compare_erf<B: AutodiffBackend>(
    with_attention: &OmniAd<B>,
    without_attention: &OmniAd<B>,
    x: &ImageTensor,
    locations: &[(usize, usize)],
    level: usize,
    tau: f64,
    device: &B::Device,
) -> Result<ErfComparison, ErfError> {
    if !with_attention.config.0.use_attention_modules {
        return Err(ErfError::MismatchedConfigs(
            "first model must have attention modules".into(),
        ));
    }
    if without_attention.config.0.use_attention_modules {
        return Err(ErfError::MismatchedConfigs(
            "second model must not have attention modules".into(),
        ));
    }
    let mut a = with_attention.config.0.clone();
    let mut b = without_attention.config.0.clone();
    a.use_attention_modules = false;
    b.use_attention_modules = false;
    if a != b {
        return Err(ErfError::MismatchedConfigs(
            "model configs differ beyond attention".into(),
        ));
    }
    if params::flatten_params(&with_attention.teacher)
        != params::flatten_params(&without_attention.teacher)
        || params::flatten_params(&with_attention.student.bottleneck)
            != params::flatten_params(&without_attention.student.bottleneck)
    {
        return Err(ErfError::MismatchedConfigs(
            "teacher/bottleneck weights differ".into(),
        ));
    }

    let mut per_location = Vec::with_capacity(locations.len());
    let mut ratio_sum = 0.0;
    let mut violations = 0;
    for &loc in locations {
        let erf_with = compute_erf(with_attention, x, loc, level, tau, device)?;
        let erf_without = compute_erf(without_attention, x, loc, level, tau, device)?;
        let ratio = if erf_without.area == 0 {
            if erf_with.area == 0 { 1.0 } else { f64::INFINITY }
        } else {
            erf_with.area as f64 / erf_without.area as f64
        };
        if erf_with.area < erf_without.area {
            violations += 1;
        }
        ratio_sum += ratio;
        per_location.push(ErfComparisonEntry {
            location: loc,
            area_with: erf_with.area,
            area_without: erf_without.area,
            ratio,
        });
    }
    let n = locations.len().max(1) as f64;
    let mean_area_with = per_location.iter().map(|e| e.area_with as f64).sum::<f64>() / n;
    let mean_area_without = per_location.iter().map(|e| e.area_without as f64).sum::<f64>() / n;
    Ok(ErfComparison {
        level,
        per_location,
        mean_ratio: ratio_sum / n,
        mean_area_with,
        mean_area_without,
        violations,
    })
}
