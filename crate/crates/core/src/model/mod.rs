//! Reverse-distillation anomaly detector with attention-augmented student.
//!
//! A frozen teacher encoder extracts multiscale features; a trainable
//! bottleneck + decoder ("student") reconstructs them. Anomalies show up as
//! regions where reconstruction disagrees with the teacher. Optional
//! attention modules refine each student feature level.

pub mod anomaly;
pub mod attention;
pub mod backbone;
pub mod bottleneck;
pub mod decoder;
pub mod fastconv;
pub mod params;

pub use anomaly::{AnomalyMap, anomaly_maps_from_features, bilinear_upsample, gaussian_blur};
pub use attention::{AttentionModule, SelfAttention2d};
pub use backbone::Teacher;
pub use bottleneck::Bottleneck;
pub use decoder::StudentDecoder;

use burn::module::{Ignored, Module};
use burn::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// Convolution flavour for the encoder/decoder stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageStyle {
    /// Grouped 3x3 convolutions (ResNeXt-like cardinality 4).
    Grouped,
    /// Plain 3x3 convolutions (ResNet-like).
    Plain,
}

/// Which backbone to build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BackboneKind {
    /// Full-width grouped backbone with pretrained weights loaded from disk.
    ResnextPretrained { weights: PathBuf },
    /// Full-width plain backbone with pretrained weights loaded from disk.
    RdDefaultPretrained { weights: PathBuf },
    /// Width-reduced randomly initialised backbone for fast experiments.
    TinyRandom { divisor: usize, style: StageStyle },
}

impl BackboneKind {
    pub fn divisor(&self) -> usize {
        match self {
            BackboneKind::TinyRandom { divisor, .. } => (*divisor).max(1),
            _ => 1,
        }
    }

    pub fn style(&self) -> StageStyle {
        match self {
            BackboneKind::ResnextPretrained { .. } => StageStyle::Grouped,
            BackboneKind::RdDefaultPretrained { .. } => StageStyle::Plain,
            BackboneKind::TinyRandom { style, .. } => *style,
        }
    }

    pub fn pretrained_weights(&self) -> Option<&PathBuf> {
        match self {
            BackboneKind::ResnextPretrained { weights } => Some(weights),
            BackboneKind::RdDefaultPretrained { weights } => Some(weights),
            BackboneKind::TinyRandom { .. } => None,
        }
    }
}

/// Channel widths derived from the backbone divisor. Levels are ordered
/// fine-to-coarse: strides 4, 8, 16 relative to the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Widths {
    pub stem: usize,
    pub levels: [usize; 3],
}

impl Widths {
    pub fn for_divisor(divisor: usize) -> Self {
        let d = divisor.max(1);
        Widths {
            stem: (64 / d).max(4),
            levels: [(256 / d).max(4), (512 / d).max(8), (1024 / d).max(16)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub use_attention_modules: bool,
    pub input_height: usize,
    pub input_width: usize,
    pub norm_mean: [f32; 3],
    pub norm_std: [f32; 3],
    /// Gaussian smoothing applied to the combined anomaly map, in pixels.
    pub smoothing_sigma: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(backbone: BackboneKind) -> Self {
        ModelConfig {
            backbone,
            use_attention_modules: true,
            input_height: 256,
            input_width: 256,
            norm_mean: [0.485, 0.456, 0.406],
            norm_std: [0.229, 0.224, 0.225],
            smoothing_sigma: 4.0,
            seed: 0,
        }
    }

    pub fn widths(&self) -> Widths {
        Widths::for_divisor(self.backbone.divisor())
    }

    pub fn validate(&self) -> Result<(), String> {
        let w = self.widths();
        if self.input_height % 16 != 0 || self.input_width % 16 != 0 {
            return Err(format!(
                "input size {}x{} must be a multiple of 16",
                self.input_height, self.input_width
            ));
        }
        if self.use_attention_modules && (self.input_height < 64 || self.input_width < 64) {
            // The coarsest attention module pools twice, so its stride-16
            // input must be at least 4x4.
            return Err(format!(
                "attention modules need inputs of at least 64x64, got {}x{}",
                self.input_height, self.input_width
            ));
        }
        if self.backbone.style() == StageStyle::Grouped {
            for c in [w.stem, w.levels[0], w.levels[1], w.levels[2]] {
                if c % 4 != 0 {
                    return Err(format!("grouped style needs channel counts divisible by 4, got {c}"));
                }
            }
        }
        if self.norm_std.iter().any(|&s| s <= 0.0) {
            return Err("normalisation std must be positive".into());
        }
        Ok(())
    }
}

/// Trainable half of the model: everything the optimiser touches.
#[derive(Module, Debug)]
pub struct StudentHead<B: Backend> {
    pub bottleneck: Bottleneck<B>,
    pub decoder: StudentDecoder<B>,
    /// One attention module per feature level, fine-to-coarse.
    pub attention: Option<Vec<AttentionModule<B>>>,
}

impl<B: Backend> StudentHead<B> {
    /// Student reconstructions for the three teacher levels, fine-to-coarse.
    pub fn forward(&self, teacher_feats: &[Tensor<B, 4>; 3]) -> [Tensor<B, 4>; 3] {
        let embedding = self.bottleneck.forward(teacher_feats);
        let decoded = self.decoder.forward(embedding);
        match &self.attention {
            None => decoded,
            Some(mods) => {
                let [s1, s2, s3] = decoded;
                [
                    mods[0].forward(s1),
                    mods[1].forward(s2),
                    mods[2].forward(s3),
                ]
            }
        }
    }

    /// Overwrite every attention gate (module-level and self-attention
    /// gamma) with a constant. No-op when attention is disabled.
    pub fn with_attention_gates(mut self, value: f32) -> Self {
        self.attention = self
            .attention
            .map(|mods| mods.into_iter().map(|m| m.with_gates(value)).collect());
        self
    }
}

#[derive(Module, Debug)]
pub struct OmniAd<B: Backend> {
    pub teacher: Teacher<B>,
    pub student: StudentHead<B>,
    pub config: Ignored<ModelConfig>,
}

pub struct ModelOutput<B: Backend> {
    pub teacher: [Tensor<B, 4>; 3],
    pub student: [Tensor<B, 4>; 3],
}

pub const COSINE_EPS: f32 = 1e-8;

#[derive(thiserror::Error, Debug)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("failed to load pretrained backbone weights from {path}: {source}")]
    PretrainedWeights {
        path: PathBuf,
        source: burn::record::RecorderError,
    },
}

impl<B: Backend> OmniAd<B> {
    /// Build the model on `device`. Parameter initialisation is forced
    /// eagerly in definition order so two models built under the same seed
    /// share weights for every module they have in common.
    pub fn init(config: &ModelConfig, device: &B::Device) -> Result<Self, ModelError> {
        config.validate().map_err(ModelError::InvalidConfig)?;
        let widths = config.widths();
        let style = config.backbone.style();
        let teacher = Teacher::init(&widths, style, device).no_grad();
        let bottleneck = Bottleneck::init(&widths, device);
        let decoder = StudentDecoder::init(&widths, style, device);
        let attention = config.use_attention_modules.then(|| {
            let inner = (64 / config.backbone.divisor()).max(4);
            widths
                .levels
                .iter()
                .map(|&c| AttentionModule::init(c, inner, device))
                .collect()
        });
        let mut model = OmniAd {
            teacher,
            student: StudentHead {
                bottleneck,
                decoder,
                attention,
            },
            config: Ignored(config.clone()),
        };
        params::force_init(&model);
        if let Some(path) = config.backbone.pretrained_weights() {
            use burn::record::Recorder;
            let recorder = burn::record::BinFileRecorder::<burn::record::FullPrecisionSettings>::new();
            let record = recorder
                .load(path.clone(), device)
                .map_err(|source| ModelError::PretrainedWeights {
                    path: path.clone(),
                    source,
                })?;
            model.teacher = model.teacher.load_record(record).no_grad();
        }
        Ok(model)
    }

    /// [`OmniAd::init`] with the backend RNG seeded from the config, under a
    /// global lock so parallel builds stay reproducible.
    pub fn init_seeded(config: &ModelConfig, device: &B::Device) -> Result<Self, ModelError> {
        params::with_seed::<B, _>(config.seed, || Self::init(config, device))
    }

    /// Per-channel normalisation applied before the teacher.
    pub fn normalize(&self, input: Tensor<B, 4>) -> Tensor<B, 4> {
        let device = input.device();
        let mean = Tensor::<B, 1>::from_floats(self.config.0.norm_mean, &device).reshape([1, 3, 1, 1]);
        let std = Tensor::<B, 1>::from_floats(self.config.0.norm_std, &device).reshape([1, 3, 1, 1]);
        (input - mean) / std
    }

    /// Full forward pass: raw image batch in [0,1] -> teacher and student
    /// features at strides 4, 8 and 16.
    pub fn forward(&self, input: Tensor<B, 4>) -> ModelOutput<B> {
        let x = self.normalize(input);
        let teacher = self.teacher.forward(x);
        let student = self.student.forward(&teacher);
        ModelOutput { teacher, student }
    }

    /// Finest-resolution student feature; the observable whose input
    /// gradient defines the effective receptive field.
    pub fn student_output(&self, input: Tensor<B, 4>) -> Tensor<B, 4> {
        let out = self.forward(input);
        let [s1, _, _] = out.student;
        s1
    }
}

/// Per-position cosine distance between matching feature maps: (B,H,W).
/// The epsilon sits inside the square roots so both the value and the
/// gradient stay finite when a feature vector is exactly zero (a ReLU
/// output can be); with the epsilon outside, sqrt's unbounded derivative
/// at zero turns the backward pass into NaNs.
pub fn cosine_distance_map<B: Backend>(t: Tensor<B, 4>, s: Tensor<B, 4>) -> Tensor<B, 3> {
    let dot = (t.clone() * s.clone()).sum_dim(1);
    let nt = (t.powi_scalar(2).sum_dim(1) + COSINE_EPS).sqrt();
    let ns = (s.powi_scalar(2).sum_dim(1) + COSINE_EPS).sqrt();
    let cos = dot / (nt * ns);
    (-cos + 1.0).squeeze(1)
}

/// Distillation loss: cosine distance averaged over positions within each
/// level, then averaged over levels.
pub fn distillation_loss<B: Backend>(output: &ModelOutput<B>) -> Tensor<B, 1> {
    let mut acc: Option<Tensor<B, 1>> = None;
    for (t, s) in output.teacher.iter().zip(output.student.iter()) {
        // Teacher features are constants for the student's optimisation.
        let level = cosine_distance_map(t.clone().detach(), s.clone()).mean();
        acc = Some(match acc {
            None => level,
            Some(a) => a + level,
        });
    }
    acc.expect("three levels") / output.teacher.len() as f32
}
