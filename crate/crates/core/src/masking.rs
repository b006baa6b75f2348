//! Random spatial masking of student features and the two-convolution
//! generator that reconstructs them at the teacher's channel width.

use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::nn::{conv2d, conv2d_grad, relu_map, relu_map_grad, ConvGrads, ConvLayer};
use crate::rng::Rng;
use crate::tensor::FeatureMap;

pub const DEFAULT_MASK_RATIO: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Each position masked independently with probability ζ.
    #[default]
    Bernoulli,
    /// Exactly `round(ζ·H·W)` positions masked.
    ExactCount,
}

/// `H×W` keep/drop pattern broadcast over channels; `true` keeps the pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMask {
    h: usize,
    w: usize,
    ratio: f64,
    keep: Vec<bool>,
}

impl SpatialMask {
    pub fn all_kept(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            ratio: 0.0,
            keep: vec![true; h * w],
        }
    }

    pub fn from_bits(h: usize, w: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != h * w {
            return shape_err(format!("{h}x{w} mask needs {} bits, got {}", h * w, keep.len()));
        }
        Ok(Self {
            h,
            w,
            ratio: 0.0,
            keep,
        })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn is_kept(&self, y: usize, x: usize) -> bool {
        self.keep[y * self.w + x]
    }

    pub fn bits(&self) -> &[bool] {
        &self.keep
    }

    pub fn masked_fraction(&self) -> f64 {
        self.keep.iter().filter(|&&k| !k).count() as f64 / self.keep.len() as f64
    }
}

pub fn sample_mask(h: usize, w: usize, ratio: f64, rng: &mut Rng) -> Result<SpatialMask> {
    sample_mask_with(h, w, ratio, MaskMode::Bernoulli, rng)
}

pub fn sample_mask_with(h: usize, w: usize, ratio: f64, mode: MaskMode, rng: &mut Rng) -> Result<SpatialMask> {
    if !(0.0..1.0).contains(&ratio) {
        return param_err(format!("mask ratio must lie in [0, 1), got {ratio}"));
    }
    let keep = match mode {
        MaskMode::Bernoulli => (0..h * w).map(|_| !rng.bernoulli(ratio)).collect(),
        MaskMode::ExactCount => {
            let dropped = (ratio * (h * w) as f64).round() as usize;
            let mut keep = vec![true; h * w];
            for i in rng.sample_indices(h * w, dropped) {
                keep[i] = false;
            }
            keep
        }
    };
    Ok(SpatialMask { h, w, ratio, keep })
}

/// Zeroes the channel vector of every dropped position.
pub fn apply_mask(f: &FeatureMap, mask: &SpatialMask) -> Result<FeatureMap> {
    if (f.height(), f.width()) != (mask.h, mask.w) {
        return shape_err(format!(
            "mask {}x{} vs feature map {}x{}",
            mask.h,
            mask.w,
            f.height(),
            f.width()
        ));
    }
    let mut out = f.clone();
    for y in 0..mask.h {
        for x in 0..mask.w {
            if !mask.is_kept(y, x) {
                out.pixel_mut(y, x).fill(0.0);
            }
        }
    }
    Ok(out)
}

/// conv(Cs→Ct) → ReLU → conv(Ct→Ct).
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
}

impl GeneratorParams {
    pub fn new(conv1: ConvLayer, conv2: ConvLayer) -> Result<Self> {
        if conv1.out_channels() != conv2.in_channels() || conv2.in_channels() != conv2.out_channels() {
            return shape_err("generator layers must chain Cs→Ct→Ct");
        }
        Ok(Self { conv1, conv2 })
    }

    pub fn zeros(student_channels: usize, teacher_channels: usize) -> Self {
        Self {
            conv1: ConvLayer::zeros(teacher_channels, student_channels),
            conv2: ConvLayer::zeros(teacher_channels, teacher_channels),
        }
    }

    pub fn student_channels(&self) -> usize {
        self.conv1.in_channels()
    }

    pub fn teacher_channels(&self) -> usize {
        self.conv2.out_channels()
    }
}

/// Kernels uniform in `(−b, b)` with `b = sqrt(1/(9·in))`, zero biases.
pub fn generator_init(student_channels: usize, teacher_channels: usize, rng: &mut Rng) -> Result<GeneratorParams> {
    if student_channels == 0 || teacher_channels == 0 {
        return param_err("generator channel counts must be positive");
    }
    let bound = |inp: usize| (1.0 / (9.0 * inp as f64)).sqrt();
    Ok(GeneratorParams {
        conv1: ConvLayer::uniform(teacher_channels, student_channels, bound(student_channels), rng),
        conv2: ConvLayer::uniform(teacher_channels, teacher_channels, bound(teacher_channels), rng),
    })
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GeneratorCache {
    input: FeatureMap,
    hidden_pre: FeatureMap,
    hidden: FeatureMap,
}

#[derive(Debug, Clone)]
pub struct GeneratorGrads {
    pub input: FeatureMap,
    pub conv1: ConvGrads,
    pub conv2: ConvGrads,
}

pub fn generator_forward(masked: &FeatureMap, params: &GeneratorParams) -> Result<(FeatureMap, GeneratorCache)> {
    if masked.channels() != params.student_channels() {
        return shape_err(format!(
            "generator expects {} input channels, got {}",
            params.student_channels(),
            masked.channels()
        ));
    }
    let hidden_pre = conv2d(masked, &params.conv1)?;
    let hidden = relu_map(&hidden_pre);
    let out = conv2d(&hidden, &params.conv2)?;
    Ok((
        out,
        GeneratorCache {
            input: masked.clone(),
            hidden_pre,
            hidden,
        },
    ))
}

pub fn generator_backward(cache: &GeneratorCache, params: &GeneratorParams, upstream: &FeatureMap) -> Result<GeneratorGrads> {
    let conv2 = conv2d_grad(&cache.hidden, &params.conv2, upstream)?;
    let hidden_grad = relu_map_grad(&cache.hidden_pre, &conv2.input)?;
    let conv1 = conv2d_grad(&cache.input, &params.conv1, &hidden_grad)?;
    Ok(GeneratorGrads {
        input: conv1.input.clone(),
        conv1,
        conv2,
    })
}
