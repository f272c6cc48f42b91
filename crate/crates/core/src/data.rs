//! On-disk dataset layout shared by every other module.
//!
//! ```text
//! root/train/good/*.png            captured non-anomalous
//! root/train/qanv/*.png            synthesized (optional)
//! root/train/inv/*.png             synthesized (optional)
//! root/test/*.png                  query images
//! root/ground_truth/*_mask.png     binary masks, name-paired with test images
//! root/poses.json                  image path -> world-to-camera pose
//! root/manifest.json               counts, augmentation provenance, backend ids
//! ```

use crate::pose::{CameraPose, PinholeIntrinsics};
use crate::util;
use image::ImageReader;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unreadable file {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("test image {0} has no ground-truth mask")]
    MissingMask(String),
    #[error("mask {mask} is {mask_w}x{mask_h} but image {image} is {img_w}x{img_h}")]
    DimMismatch {
        image: String,
        mask: String,
        img_w: u32,
        img_h: u32,
        mask_w: u32,
        mask_h: u32,
    },
    #[error("manifest disagrees with files on disk: {0}")]
    BadManifest(String),
    #[error("dataset has no test masks")]
    EmptyTestSet,
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn unreadable(path: &Path, err: impl std::error::Error + Send + Sync + 'static) -> DataError {
    DataError::Unreadable {
        path: path.to_path_buf(),
        source: Box::new(err),
    }
}

/// Which augmentation folders are merged into the training split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentationTag {
    None,
    Qanv,
    Inv,
    Both,
}

impl AugmentationTag {
    pub const ALL: [AugmentationTag; 4] = [Self::None, Self::Qanv, Self::Inv, Self::Both];

    pub fn includes_qanv(self) -> bool {
        matches!(self, Self::Qanv | Self::Both)
    }

    pub fn includes_inv(self) -> bool {
        matches!(self, Self::Inv | Self::Both)
    }
}

impl fmt::Display for AugmentationTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::None => "none",
            Self::Qanv => "qanv",
            Self::Inv => "inv",
            Self::Both => "both",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageSource {
    Captured,
    Synthesized,
}

/// RGB image as a C x H x W float array with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub data: Array3<f32>,
    pub source: ImageSource,
}

impl ImageTensor {
    pub fn new(data: Array3<f32>, source: ImageSource) -> Self {
        debug_assert_eq!(data.shape()[0], 3);
        Self { data, source }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Uniform image of one intensity, e.g. mid-gray probes.
    pub fn constant(value: f32, height: usize, width: usize) -> Self {
        Self::new(Array3::from_elem((3, height, width), value), ImageSource::Synthesized)
    }

    /// (1, 3, H, W) batch tensor on the given backend.
    pub fn to_batch<B: burn::prelude::Backend>(
        &self,
        device: &B::Device,
    ) -> burn::prelude::Tensor<B, 4> {
        let (h, w) = (self.height(), self.width());
        let values: Vec<f32> = self.data.iter().copied().collect();
        burn::prelude::Tensor::from_data(
            burn::tensor::TensorData::new(values, [1, 3, h, w]),
            device,
        )
    }

    pub fn load_png(path: &Path, source: ImageSource) -> Result<Self, DataError> {
        let img = ImageReader::open(path)
            .map_err(|e| unreadable(path, e))?
            .decode()
            .map_err(|e| unreadable(path, e))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = Array3::zeros((3, h, w));
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[[c, y as usize, x as usize]] = px.0[c] as f32 / 255.0;
            }
        }
        Ok(Self::new(data, source))
    }

    /// Quantizes to 8-bit; values are clamped to [0, 1] first.
    pub fn save_png(&self, path: &Path) -> Result<(), DataError> {
        let (h, w) = (self.height(), self.width());
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [0, 1, 2].map(|c| {
                    (self.data[[c, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8
                });
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        let mut bytes = Vec::new();
        img.write_to(
            &mut std::io::Cursor::new(&mut bytes),
            image::ImageFormat::Png,
        )
        .map_err(|e| unreadable(path, e))?;
        util::write_atomic(path, &bytes).map_err(|e| DataError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

/// Load an 8-bit mask image: any pixel with value > 127 maps to 1, else 0.
pub fn load_binary_mask(path: &Path) -> Result<Array2<u8>, DataError> {
    let img = ImageReader::open(path)
        .map_err(|e| unreadable(path, e))?
        .decode()
        .map_err(|e| unreadable(path, e))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut mask = Array2::zeros((h, w));
    for (x, y, px) in img.enumerate_pixels() {
        mask[[y as usize, x as usize]] = (px.0[0] > 127) as u8;
    }
    Ok(mask)
}

/// Save a binary mask as an 8-bit grayscale PNG (1 -> 255).
pub fn save_binary_mask(path: &Path, mask: &Array2<u8>) -> Result<(), DataError> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, image::Luma([mask[[y, x]] * 255]));
        }
    }
    let mut bytes = Vec::new();
    img.write_to(
        &mut std::io::Cursor::new(&mut bytes),
        image::ImageFormat::Png,
    )
    .map_err(|e| unreadable(path, e))?;
    util::write_atomic(path, &bytes).map_err(|e| DataError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    /// Path relative to the dataset root, e.g. `train/good/0003.png`.
    pub rel_path: String,
    pub source: ImageSource,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseRecord {
    pub quaternion_wxyz: [f64; 4],
    pub translation_xyz: [f64; 3],
    pub intrinsics_ref: String,
}

/// Serialized pose file: world-to-camera, right-handed, meters.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PosesFile {
    pub intrinsics: BTreeMap<String, PinholeIntrinsics>,
    pub poses: BTreeMap<String, PoseRecord>,
}

impl PosesFile {
    pub fn insert(&mut self, rel_path: &str, pose: &CameraPose) {
        self.poses.insert(
            rel_path.to_string(),
            PoseRecord {
                quaternion_wxyz: pose.quaternion_wxyz(),
                translation_xyz: [
                    pose.translation.x,
                    pose.translation.y,
                    pose.translation.z,
                ],
                intrinsics_ref: pose.intrinsics_ref.clone(),
            },
        );
    }

    pub fn get(&self, rel_path: &str) -> Option<CameraPose> {
        self.poses.get(rel_path).map(|r| {
            CameraPose::from_wxyz_t(r.quaternion_wxyz, r.translation_xyz, &r.intrinsics_ref)
        })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let bytes = std::fs::read(path).map_err(|e| DataError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_slice(&bytes).map_err(|e| unreadable(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        util::write_json_atomic(path, self).map_err(|e| DataError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train_good: usize,
    pub train_qanv: usize,
    pub train_inv: usize,
    pub test: usize,
    pub masks: usize,
}

/// Dataset manifest: counts per split plus provenance of any synthesized
/// content.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub counts: SplitCounts,
    pub renderer_id: Option<String>,
    pub localizer_id: Option<String>,
    /// Query images whose localization failed during QANV construction.
    pub qanv_localization_failures: usize,
    /// Free-form provenance notes (fixture seed, interpolation factor, ...).
    pub provenance: BTreeMap<String, String>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let bytes = std::fs::read(path).map_err(|_| {
            DataError::BadManifest(format!("missing manifest at {}", path.display()))
        })?;
        serde_json::from_slice(&bytes).map_err(|e| unreadable(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        util::write_json_atomic(path, self).map_err(|e| DataError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

/// Partitioned image collection plus optional camera poses. Read-only after
/// construction; loaders are pure functions over immutable paths.
#[derive(Debug, Clone)]
pub struct SceneDataset {
    pub root: PathBuf,
    pub train_images: Vec<ImageRef>,
    pub test_images: Vec<ImageRef>,
    /// Mask path (relative) for each test image, index-aligned.
    pub test_masks: Vec<String>,
    pub poses: Option<PosesFile>,
    pub augmentation_tag: AugmentationTag,
    pub manifest: DatasetManifest,
}

impl SceneDataset {
    pub fn image_path(&self, image: &ImageRef) -> PathBuf {
        self.root.join(&image.rel_path)
    }

    pub fn mask_path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn load_image(&self, image: &ImageRef) -> Result<ImageTensor, DataError> {
        ImageTensor::load_png(&self.image_path(image), image.source)
    }

    pub fn load_mask(&self, index: usize) -> Result<Array2<u8>, DataError> {
        load_binary_mask(&self.mask_path(&self.test_masks[index]))
    }

    pub fn pose_for(&self, image: &ImageRef) -> Option<CameraPose> {
        self.poses.as_ref().and_then(|p| p.get(&image.rel_path))
    }

    pub fn intrinsics(&self, intrinsics_ref: &str) -> Option<&PinholeIntrinsics> {
        self.poses.as_ref().and_then(|p| p.intrinsics.get(intrinsics_ref))
    }
}

/// Relative mask path paired with a test image file name.
pub fn mask_rel_for_test(test_name: &str) -> String {
    let stem = test_name.strip_suffix(".png").unwrap_or(test_name);
    format!("ground_truth/{stem}_mask.png")
}

fn png_dims(path: &Path) -> Result<(u32, u32), DataError> {
    ImageReader::open(path)
        .map_err(|e| unreadable(path, e))?
        .into_dimensions()
        .map_err(|e| unreadable(path, e))
}

/// Load a dataset tree, merging the synthesized folders selected by
/// `variant` into the training split. Ordering is deterministic:
/// lexicographic within each folder, captured images first.
pub fn load_dataset(root: &Path, variant: AugmentationTag) -> Result<SceneDataset, DataError> {
    let manifest = DatasetManifest::load(&root.join("manifest.json"))?;

    let good = util::sorted_files_with_ext(&root.join("train/good"), "png").map_err(|e| {
        DataError::Io {
            path: root.join("train/good"),
            source: e,
        }
    })?;
    let qanv = util::sorted_files_with_ext(&root.join("train/qanv"), "png").map_err(|e| {
        DataError::Io {
            path: root.join("train/qanv"),
            source: e,
        }
    })?;
    let inv = util::sorted_files_with_ext(&root.join("train/inv"), "png").map_err(|e| {
        DataError::Io {
            path: root.join("train/inv"),
            source: e,
        }
    })?;
    let test = util::sorted_files_with_ext(&root.join("test"), "png").map_err(|e| DataError::Io {
        path: root.join("test"),
        source: e,
    })?;

    let c = &manifest.counts;
    if good.len() != c.train_good || test.len() != c.test {
        return Err(DataError::BadManifest(format!(
            "expected {} train/good and {} test, found {} and {}",
            c.train_good,
            c.test,
            good.len(),
            test.len()
        )));
    }
    if variant.includes_qanv() && qanv.len() != c.train_qanv {
        return Err(DataError::BadManifest(format!(
            "expected {} train/qanv, found {}",
            c.train_qanv,
            qanv.len()
        )));
    }
    if variant.includes_inv() && inv.len() != c.train_inv {
        return Err(DataError::BadManifest(format!(
            "expected {} train/inv, found {}",
            c.train_inv,
            inv.len()
        )));
    }

    let mut train_images: Vec<ImageRef> = good
        .iter()
        .map(|n| ImageRef {
            rel_path: format!("train/good/{n}"),
            source: ImageSource::Captured,
        })
        .collect();
    if variant.includes_qanv() {
        train_images.extend(qanv.iter().map(|n| ImageRef {
            rel_path: format!("train/qanv/{n}"),
            source: ImageSource::Synthesized,
        }));
    }
    if variant.includes_inv() {
        train_images.extend(inv.iter().map(|n| ImageRef {
            rel_path: format!("train/inv/{n}"),
            source: ImageSource::Synthesized,
        }));
    }

    let mut test_images = Vec::with_capacity(test.len());
    let mut test_masks = Vec::with_capacity(test.len());
    for name in &test {
        let mask_rel = mask_rel_for_test(name);
        let mask_path = root.join(&mask_rel);
        if !mask_path.exists() {
            return Err(DataError::MissingMask(format!("test/{name}")));
        }
        let (img_w, img_h) = png_dims(&root.join(format!("test/{name}")))?;
        let (mask_w, mask_h) = png_dims(&mask_path)?;
        if (img_w, img_h) != (mask_w, mask_h) {
            return Err(DataError::DimMismatch {
                image: format!("test/{name}"),
                mask: mask_rel,
                img_w,
                img_h,
                mask_w,
                mask_h,
            });
        }
        test_images.push(ImageRef {
            rel_path: format!("test/{name}"),
            source: ImageSource::Captured,
        });
        test_masks.push(mask_rel);
    }
    if test_masks.len() != c.masks {
        return Err(DataError::BadManifest(format!(
            "expected {} masks, found {}",
            c.masks,
            test_masks.len()
        )));
    }

    let poses_path = root.join("poses.json");
    let poses = if poses_path.exists() {
        Some(PosesFile::load(&poses_path)?)
    } else {
        None
    };

    Ok(SceneDataset {
        root: root.to_path_buf(),
        train_images,
        test_images,
        test_masks,
        poses,
        augmentation_tag: variant,
        manifest,
    })
}

/// Aggregate anomalous-pixel fractions over the test masks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnomalyPixelStats {
    pub mean_fraction: f64,
    pub std_fraction: f64,
    pub min_fraction: f64,
    pub max_fraction: f64,
}

pub fn anomaly_pixel_stats(dataset: &SceneDataset) -> Result<AnomalyPixelStats, DataError> {
    if dataset.test_masks.is_empty() {
        return Err(DataError::EmptyTestSet);
    }
    let mut fractions = Vec::with_capacity(dataset.test_masks.len());
    for i in 0..dataset.test_masks.len() {
        let mask = dataset.load_mask(i)?;
        let total = mask.len() as f64;
        let pos: u64 = mask.iter().map(|&v| v as u64).sum();
        fractions.push(pos as f64 / total);
    }
    let n = fractions.len() as f64;
    let mean = fractions.iter().sum::<f64>() / n;
    let var = fractions.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / n;
    let min = fractions.iter().copied().fold(f64::INFINITY, f64::min);
    let max = fractions.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(AnomalyPixelStats {
        mean_fraction: mean,
        std_fraction: var.sqrt(),
        min_fraction: min,
        max_fraction: max,
    })
}
