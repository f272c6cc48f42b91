//! Pose localizers: stand-ins for a feature-matching localization pipeline.
//!
//! The ground-truth localizer reads poses recorded alongside the synthetic
//! scene; the noisy localizer perturbs them by a configurable SE(3) error to
//! emulate estimates obtained from structure-from-motion in the wild.

use crate::data::{ImageTensor, PosesFile};
use crate::pose::CameraPose;
use nalgebra::{UnitQuaternion, UnitVector3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::path::PathBuf;

/// 6-DoF localization of a query image. `None` models a localization
/// failure; callers skip and count those.
pub trait Localizer {
    fn backend_id(&self) -> String;
    fn localize(&self, query_ref: &str, image: &ImageTensor) -> Option<CameraPose>;
}

/// Exact localizer for synthetic scenes with recorded poses.
pub struct GroundTruthLocalizer {
    pub poses: PosesFile,
}

impl Localizer for GroundTruthLocalizer {
    fn backend_id(&self) -> String {
        "gt".into()
    }

    fn localize(&self, query_ref: &str, _image: &ImageTensor) -> Option<CameraPose> {
        self.poses.get(query_ref)
    }
}

/// Ground truth plus a deterministic SE(3) perturbation per query.
pub struct NoisyLocalizer {
    pub poses: PosesFile,
    pub seed: u64,
    /// Rotation error magnitude, radians.
    pub rotation_err: f64,
    /// Translation error magnitude, meters (typically a fraction of the
    /// scene diameter).
    pub translation_err: f64,
}

impl NoisyLocalizer {
    fn rng_for(&self, query_ref: &str) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(query_ref.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(key)
    }
}

impl Localizer for NoisyLocalizer {
    fn backend_id(&self) -> String {
        format!("noisy(rot={:.4},trans={:.4})", self.rotation_err, self.translation_err)
    }

    fn localize(&self, query_ref: &str, _image: &ImageTensor) -> Option<CameraPose> {
        let pose = self.poses.get(query_ref)?;
        let mut rng = self.rng_for(query_ref);
        let axis = random_unit(&mut rng);
        let delta_rot = UnitQuaternion::from_axis_angle(&axis, self.rotation_err);
        let delta_t = random_unit(&mut rng).into_inner() * self.translation_err;
        Some(CameraPose::new(
            delta_rot * pose.rotation,
            pose.translation + delta_t,
            pose.intrinsics_ref,
        ))
    }
}

fn random_unit(rng: &mut ChaCha8Rng) -> UnitVector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return UnitVector3::new_normalize(v);
        }
    }
}

/// Adapter for an external localization pipeline. The external tool writes
/// `localized_poses.json` (same schema as `poses.json`); query refs absent
/// from it count as failures.
pub struct ExternalLocalizer {
    pub poses_path: PathBuf,
    pub poses: PosesFile,
}

impl ExternalLocalizer {
    pub fn load(poses_path: PathBuf) -> Result<Self, crate::data::DataError> {
        let poses = PosesFile::load(&poses_path)?;
        Ok(Self { poses_path, poses })
    }
}

impl Localizer for ExternalLocalizer {
    fn backend_id(&self) -> String {
        format!("external({})", self.poses_path.display())
    }

    fn localize(&self, query_ref: &str, _image: &ImageTensor) -> Option<CameraPose> {
        self.poses.get(query_ref)
    }
}
