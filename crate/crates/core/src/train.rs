//! Training loop: optimize the student head (bottleneck, decoder, attention)
//! against the frozen teacher on non-anomalous images, validate per epoch on
//! a held-out slice of the query set, and keep the best checkpoint.

use crate::data::{AugmentationTag, DataError, ImageRef, SceneDataset};
use crate::eval::{EvalError, EvalReport, evaluate_pooled};
use crate::model::anomaly::anomaly_maps_from_features;
use crate::model::{ModelConfig, ModelError, OmniAd, distillation_loss, params};
use crate::util;
use burn::backend::{Autodiff, NdArray};
use burn::module::{AutodiffModule, Module};
use burn::optim::{AdamConfig, GradientsParams, Optimizer};
use burn::prelude::*;
use burn::record::{BinBytesRecorder, FullPrecisionSettings, Recorder};
use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

/// CPU training backend; inference runs on its inner backend.
pub type TrainBackend = Autodiff<NdArray<f32>>;
pub type InferBackend = NdArray<f32>;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("training split is empty")]
    EmptyTrainSet,
    #[error("non-finite loss {loss} at epoch {epoch}, step {step}: aborting")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },
    #[error("image {rel} is {got_w}x{got_h} but the model expects {want_w}x{want_h}")]
    WrongImageSize {
        rel: String,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("validation and test refs overlap: {0}")]
    SplitLeak(String),
    #[error("checkpoint at {path} unreadable: {reason}")]
    BadCheckpoint { path: PathBuf, reason: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f32,
    pub beta2: f32,
    pub seed: u64,
    /// Fraction of query images held out for per-epoch validation. The
    /// remainder is the final test set; the two never overlap.
    pub val_fraction: f64,
    pub augmentation_tag: AugmentationTag,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 100,
            batch_size: 32,
            learning_rate: 0.005,
            beta1: 0.5,
            beta2: 0.999,
            seed: 0,
            val_fraction: 0.2,
            augmentation_tag: AugmentationTag::None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(TrainError::InvalidConfig("max_epochs must be >= 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(TrainError::InvalidConfig(format!(
                "val_fraction must lie in (0,1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

/// Everything needed to reproduce and audit one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    /// Hash over (model_config, train_config, dataset root).
    pub config_hash: String,
    pub dataset_root: PathBuf,
    pub per_epoch_train_loss: Vec<f64>,
    pub per_epoch_val_f1: Vec<f64>,
    /// argmax of `per_epoch_val_f1`; ties resolve to the earliest epoch.
    pub best_epoch: usize,
    pub checkpoint_path: PathBuf,
    /// Query refs used for per-epoch validation.
    pub val_refs: Vec<String>,
    /// Query refs reserved for the final test evaluation.
    pub test_refs: Vec<String>,
    /// Held-out test metrics of the best checkpoint.
    pub test_report: EvalReport,
    pub wall_clock_secs: f64,
}

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Serialized best model: configs plus a base64 full-precision record of
/// every parameter (teacher included, so a load is bitwise self-contained).
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub epoch: usize,
    pub val_f1: f64,
    pub record_b64: String,
}

pub fn save_checkpoint<B: Backend>(
    model: &OmniAd<B>,
    epoch: usize,
    val_f1: f64,
    path: &Path,
) -> Result<(), TrainError> {
    let recorder = BinBytesRecorder::<FullPrecisionSettings>::new();
    let bytes = recorder
        .record(model.clone().into_record(), ())
        .map_err(|e| TrainError::BadCheckpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    use base64::Engine;
    let checkpoint = Checkpoint {
        model_config: model.config.0.clone(),
        epoch,
        val_f1,
        record_b64: base64::engine::general_purpose::STANDARD.encode(bytes),
    };
    util::write_json_atomic(path, &checkpoint).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint<B: Backend>(
    path: &Path,
    device: &B::Device,
) -> Result<(OmniAd<B>, Checkpoint), TrainError> {
    let bad = |reason: String| TrainError::BadCheckpoint {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = std::fs::read(path).map_err(|e| bad(e.to_string()))?;
    let checkpoint: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| bad(e.to_string()))?;
    use base64::Engine;
    let record_bytes = base64::engine::general_purpose::STANDARD
        .decode(&checkpoint.record_b64)
        .map_err(|e| bad(e.to_string()))?;
    let recorder = BinBytesRecorder::<FullPrecisionSettings>::new();
    let record = recorder
        .load(record_bytes, device)
        .map_err(|e| bad(e.to_string()))?;
    let model = OmniAd::<B>::init_seeded(&checkpoint.model_config, device)?;
    let model = model.load_record(record);
    // The recorded teacher is authoritative but stays frozen.
    let model = OmniAd {
        teacher: model.teacher.no_grad(),
        ..model
    };
    Ok((model, checkpoint))
}

fn load_batch_tensor<B: Backend>(
    dataset: &SceneDataset,
    image: &ImageRef,
    config: &ModelConfig,
    device: &B::Device,
) -> Result<Tensor<B, 4>, TrainError> {
    let img = dataset.load_image(image)?;
    if img.height() != config.input_height || img.width() != config.input_width {
        return Err(TrainError::WrongImageSize {
            rel: image.rel_path.clone(),
            got_w: img.width(),
            got_h: img.height(),
            want_w: config.input_width,
            want_h: config.input_height,
        });
    }
    Ok(img.to_batch::<B>(device))
}

/// Fixed-seed validation/test partition of the query indices. Validation
/// gets `ceil(val_fraction * n)` images (at least 1, at most n - 1).
pub fn split_queries(
    n_queries: usize,
    val_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n_queries).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7601_55ee);
    order.shuffle(&mut rng);
    let n_val = ((n_queries as f64 * val_fraction).ceil() as usize)
        .max(1)
        .min(n_queries.saturating_sub(1).max(1));
    let mut val: Vec<usize> = order[..n_val].to_vec();
    let mut test: Vec<usize> = order[n_val..].to_vec();
    val.sort_unstable();
    test.sort_unstable();
    (val, test)
}

/// Pooled evaluation of `model` on the query images selected by `indices`.
pub fn evaluate_on_queries<B: Backend>(
    model: &OmniAd<B>,
    dataset: &SceneDataset,
    indices: &[usize],
    device: &B::Device,
) -> Result<EvalReport, TrainError> {
    let config = &model.config.0;
    let mut score_maps = Vec::with_capacity(indices.len());
    let mut masks = Vec::with_capacity(indices.len());
    for &i in indices {
        let input = load_batch_tensor::<B>(dataset, &dataset.test_images[i], config, device)?;
        let output = model.forward(input);
        let maps = anomaly_maps_from_features(
            &output,
            config.input_height,
            config.input_width,
            config.smoothing_sigma,
        );
        score_maps.push(maps[0].combined.iter().copied().collect::<Vec<f32>>());
        masks.push(dataset.load_mask(i)?.iter().copied().collect::<Vec<u8>>());
    }
    Ok(evaluate_pooled(&score_maps, &masks)?)
}

/// Train on `dataset`, writing `checkpoint.json` and `run_manifest.json`
/// into `out_dir`. Deterministic for fixed configs and dataset.
pub fn train(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    dataset: &SceneDataset,
    out_dir: &Path,
) -> Result<RunManifest, TrainError> {
    train_config.validate()?;
    if dataset.train_images.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    std::fs::create_dir_all(out_dir).map_err(|source| TrainError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let started = Instant::now();
    let device = <TrainBackend as Backend>::Device::default();

    let mut model = OmniAd::<TrainBackend>::init_seeded(model_config, &device)?;
    let teacher_before = params::flatten_params(&model.teacher);

    // The teacher is frozen, so its features per training image are
    // constants: compute them once up front instead of re-encoding every
    // epoch. Extraction runs on the inner (inference) backend so the
    // teacher's normalisation statistics stay bit-identical, then the
    // features are lifted into the autodiff graph as constants.
    // Desk-scale feature sets fit in memory.
    let eval_model = model.valid();
    let infer_device = <InferBackend as Backend>::Device::default();
    let mut train_feats: Vec<[Tensor<TrainBackend, 4>; 3]> =
        Vec::with_capacity(dataset.train_images.len());
    for image in &dataset.train_images {
        let input = load_batch_tensor::<InferBackend>(dataset, image, model_config, &infer_device)?;
        let feats = eval_model.teacher.forward(eval_model.normalize(input));
        train_feats.push(feats.map(Tensor::<TrainBackend, 4>::from_inner));
    }

    let (val_indices, test_indices) =
        split_queries(dataset.test_images.len(), train_config.val_fraction, train_config.seed);
    if let Some(&i) = val_indices.iter().find(|i| test_indices.contains(i)) {
        return Err(TrainError::SplitLeak(dataset.test_images[i].rel_path.clone()));
    }

    let mut optim = AdamConfig::new()
        .with_beta_1(train_config.beta1)
        .with_beta_2(train_config.beta2)
        .init();
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let checkpoint_path = out_dir.join(CHECKPOINT_FILE);

    let mut per_epoch_train_loss = Vec::with_capacity(train_config.max_epochs);
    let mut per_epoch_val_f1 = Vec::with_capacity(train_config.max_epochs);
    let mut best: Option<(usize, f64)> = None;

    for epoch in 0..train_config.max_epochs {
        let mut order: Vec<usize> = (0..train_feats.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        let mut sample_count = 0usize;
        for (step, chunk) in order.chunks(train_config.batch_size).enumerate() {
            let teacher: [Tensor<TrainBackend, 4>; 3] = std::array::from_fn(|level| {
                Tensor::cat(
                    chunk.iter().map(|&i| train_feats[i][level].clone()).collect(),
                    0,
                )
            });
            let student = model.student.forward(&teacher);
            let output = crate::model::ModelOutput { teacher, student };
            let loss = distillation_loss(&output);
            let loss_value = loss.clone().into_scalar() as f64;
            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    step,
                    loss: loss_value,
                });
            }
            loss_sum += loss_value * chunk.len() as f64;
            sample_count += chunk.len();

            let grads = loss.backward();
            let grads = GradientsParams::from_grads(grads, &model.student);
            model.student = optim.step(train_config.learning_rate, model.student, grads);
        }
        per_epoch_train_loss.push(loss_sum / sample_count as f64);

        let val_model = model.valid();
        let infer_device = <InferBackend as Backend>::Device::default();
        let val_report = evaluate_on_queries(&val_model, dataset, &val_indices, &infer_device)?;
        per_epoch_val_f1.push(val_report.pixel_f1);

        let improved = match best {
            None => true,
            Some((_, f1)) => val_report.pixel_f1 > f1,
        };
        if improved {
            best = Some((epoch, val_report.pixel_f1));
            save_checkpoint(&model, epoch, val_report.pixel_f1, &checkpoint_path)?;
        }
    }

    let (best_epoch, _) = best.expect("at least one epoch ran");
    assert_eq!(
        teacher_before,
        params::flatten_params(&model.teacher),
        "teacher parameters must stay frozen during training"
    );

    // Final held-out metrics come from the best checkpoint, not the last
    // epoch's weights.
    let infer_device = <InferBackend as Backend>::Device::default();
    let (best_model, _) = load_checkpoint::<InferBackend>(&checkpoint_path, &infer_device)?;
    let test_report = evaluate_on_queries(&best_model, dataset, &test_indices, &infer_device)?;

    let manifest = RunManifest {
        model_config: model_config.clone(),
        train_config: train_config.clone(),
        config_hash: util::config_hash(&(model_config, train_config, &dataset.root)),
        dataset_root: dataset.root.clone(),
        per_epoch_train_loss,
        per_epoch_val_f1,
        best_epoch,
        checkpoint_path,
        val_refs: val_indices
            .iter()
            .map(|&i| dataset.test_images[i].rel_path.clone())
            .collect(),
        test_refs: test_indices
            .iter()
            .map(|&i| dataset.test_images[i].rel_path.clone())
            .collect(),
        test_report,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    util::write_json_atomic(&out_dir.join(MANIFEST_FILE), &manifest).map_err(|source| {
        TrainError::Io {
            path: out_dir.join(MANIFEST_FILE),
            source,
        }
    })?;
    Ok(manifest)
}
