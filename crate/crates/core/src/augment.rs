//! Novel-view training augmentation.
//!
//! INV (interpolated novel views) densifies the captured viewpoint space:
//! a greedy trajectory over the training poses is interpolated and each
//! intermediate pose is rendered as a synthesized non-anomalous image.
//!
//! QANV (query-aligned novel views) renders the non-anomalous scene at each
//! query's localized pose, so every query has an aligned anomaly-free
//! counterpart in the training set.

use crate::data::{DataError, PosesFile, SceneDataset};
use crate::localize::Localizer;
use crate::pose::{CameraPose, PinholeIntrinsics, PoseError, build_greedy_trajectory, densify_trajectory};
use crate::scene::{RenderError, Renderer};
use crate::data::ImageTensor;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error("no recorded pose for {0}; augmentation needs poses.json entries for every captured train image")]
    MissingPoses(String),
    #[error("no intrinsics named {0} in poses.json")]
    MissingIntrinsics(String),
    #[error("external renderer at {dir} has no render for requested pose {index}")]
    MissingExternalRender { dir: PathBuf, index: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvReport {
    pub k: usize,
    pub start_index: usize,
    /// Exactly k * (n - 1) for n captured training poses.
    pub rendered: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QanvReport {
    pub rendered: usize,
    pub localization_failures: usize,
}

fn captured_train_poses(dataset: &SceneDataset) -> Result<Vec<CameraPose>, AugmentError> {
    let mut poses = Vec::new();
    for image in &dataset.train_images {
        if image.source != crate::data::ImageSource::Captured {
            continue;
        }
        poses.push(
            dataset
                .pose_for(image)
                .ok_or_else(|| AugmentError::MissingPoses(image.rel_path.clone()))?,
        );
    }
    if poses.is_empty() {
        return Err(AugmentError::MissingPoses("train/good".into()));
    }
    Ok(poses)
}

fn intrinsics_for<'a>(
    dataset: &'a SceneDataset,
    pose: &CameraPose,
) -> Result<&'a PinholeIntrinsics, AugmentError> {
    dataset
        .intrinsics(&pose.intrinsics_ref)
        .ok_or_else(|| AugmentError::MissingIntrinsics(pose.intrinsics_ref.clone()))
}

fn update_tree(
    dataset: &SceneDataset,
    new_poses: &[(String, CameraPose)],
    update_manifest: impl FnOnce(&mut crate::data::DatasetManifest),
) -> Result<(), AugmentError> {
    let poses_path = dataset.root.join("poses.json");
    let mut poses = if poses_path.exists() {
        PosesFile::load(&poses_path)?
    } else {
        PosesFile::default()
    };
    for (rel, pose) in new_poses {
        poses.insert(rel, pose);
    }
    poses.save(&poses_path)?;

    let manifest_path = dataset.root.join("manifest.json");
    let mut manifest = crate::data::DatasetManifest::load(&manifest_path)?;
    update_manifest(&mut manifest);
    manifest.save(&manifest_path)?;
    Ok(())
}

/// Render `k` interpolated poses per consecutive trajectory pair into
/// `train/inv/`, updating poses.json and the manifest.
pub fn build_inv_augmentation(
    dataset: &SceneDataset,
    renderer: &dyn Renderer,
    k: usize,
    start_index: usize,
) -> Result<InvReport, AugmentError> {
    let poses = captured_train_poses(dataset)?;
    let novel = if poses.len() == 1 {
        Vec::new()
    } else {
        let trajectory = build_greedy_trajectory(&poses, start_index)?;
        densify_trajectory(&poses, &trajectory, k)?
    };

    let mut recorded = Vec::with_capacity(novel.len());
    for (i, pose) in novel.iter().enumerate() {
        let intrinsics = intrinsics_for(dataset, pose)?;
        let rel = format!("train/inv/{i:05}.png");
        renderer
            .render(pose, intrinsics)?
            .save_png(&dataset.root.join(&rel))?;
        recorded.push((rel, pose.clone()));
    }

    let rendered = recorded.len();
    update_tree(dataset, &recorded, |m| {
        m.counts.train_inv = rendered;
        m.renderer_id = Some(renderer.scene_id());
        m.provenance.insert("inv_k".into(), k.to_string());
        m.provenance
            .insert("inv_start".into(), start_index.to_string());
    })?;

    Ok(InvReport {
        k,
        start_index,
        rendered,
    })
}

/// Localize each query image and render the non-anomalous scene at the
/// estimated pose into `train/qanv/`. Failed localizations are skipped and
/// counted; an all-failed run yields an empty (but valid) augmentation.
pub fn build_qanv_augmentation(
    dataset: &SceneDataset,
    renderer: &dyn Renderer,
    localizer: &dyn Localizer,
) -> Result<QanvReport, AugmentError> {
    let mut recorded = Vec::new();
    let mut failures = 0usize;
    for (i, query) in dataset.test_images.iter().enumerate() {
        let image = dataset.load_image(query)?;
        let Some(pose) = localizer.localize(&query.rel_path, &image) else {
            failures += 1;
            continue;
        };
        let intrinsics = intrinsics_for(dataset, &pose)?;
        let rel = format!("train/qanv/{i:04}.png");
        renderer
            .render(&pose, intrinsics)?
            .save_png(&dataset.root.join(&rel))?;
        recorded.push((rel, pose));
    }
    if recorded.is_empty() {
        log::warn!(
            "QANV: all {} localizations failed; augmentation is empty",
            failures
        );
    }

    let rendered = recorded.len();
    update_tree(dataset, &recorded, |m| {
        m.counts.train_qanv = rendered;
        m.renderer_id = Some(renderer.scene_id());
        m.localizer_id = Some(localizer.backend_id());
        m.qanv_localization_failures = failures;
    })?;

    Ok(QanvReport {
        rendered,
        localization_failures: failures,
    })
}

/// File name of the pose-request manifest consumed by an external renderer.
pub const RENDER_REQUESTS_FILE: &str = "requested_poses.json";

fn external_render_rel(index: usize) -> String {
    format!("renders/{index:05}.png")
}

/// First half of the external-renderer contract: record the poses (and the
/// shared intrinsics) an external novel-view tool must render. The tool
/// writes `renders/00000.png, ...` next to the request file.
pub fn write_render_requests(
    dir: &Path,
    poses: &[CameraPose],
    intrinsics_name: &str,
    intrinsics: &PinholeIntrinsics,
) -> Result<(), DataError> {
    let mut file = PosesFile::default();
    file.intrinsics
        .insert(intrinsics_name.to_string(), intrinsics.clone());
    for (i, pose) in poses.iter().enumerate() {
        file.insert(&external_render_rel(i), pose);
    }
    file.save(&dir.join(RENDER_REQUESTS_FILE))
}

/// Second half of the external-renderer contract: serve previously rendered
/// PNGs keyed by pose. A pose matches a requested pose when quaternion and
/// translation agree to 1e-9.
pub struct ExternalRenderer {
    pub dir: PathBuf,
    pub scene_id: String,
    requests: PosesFile,
}

impl ExternalRenderer {
    pub fn load(dir: &Path, scene_id: impl Into<String>) -> Result<Self, DataError> {
        let requests = PosesFile::load(&dir.join(RENDER_REQUESTS_FILE))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            scene_id: scene_id.into(),
            requests,
        })
    }

    fn find(&self, pose: &CameraPose) -> Option<usize> {
        let q = pose.quaternion_wxyz();
        self.requests.poses.iter().position(|(_, record)| {
            let dq = record
                .quaternion_wxyz
                .iter()
                .zip(q.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            let dt = [
                record.translation_xyz[0] - pose.translation.x,
                record.translation_xyz[1] - pose.translation.y,
                record.translation_xyz[2] - pose.translation.z,
            ]
            .iter()
            .map(|v| v.abs())
            .fold(0.0f64, f64::max);
            dq < 1e-9 && dt < 1e-9
        })
    }
}

impl Renderer for ExternalRenderer {
    fn scene_id(&self) -> String {
        self.scene_id.clone()
    }

    fn render(
        &self,
        pose: &CameraPose,
        _intrinsics: &PinholeIntrinsics,
    ) -> Result<ImageTensor, RenderError> {
        let index = self
            .find(pose)
            .ok_or_else(|| RenderError::UnrequestedPose(self.dir.clone()))?;
        let path = self.dir.join(external_render_rel(index));
        ImageTensor::load_png(&path, crate::data::ImageSource::Synthesized)
            .map_err(|_| RenderError::ExternalRenderMissing { index, path })
    }

    fn deterministic(&self) -> bool {
        false
    }

    fn has_ground_truth_geometry(&self) -> bool {
        false
    }
}
