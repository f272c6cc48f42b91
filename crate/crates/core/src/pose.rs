//! Camera pose representation and the trajectory machinery used by the
//! interpolated-view augmentation: greedy nearest-neighbour trajectory
//! construction and geodesic pose interpolation.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PoseError {
    #[error("pose set is empty")]
    EmptyPoseSet,
    #[error("start index {start} out of range for {len} poses")]
    StartOutOfRange { start: usize, len: usize },
    #[error("trajectory is not a permutation of the pose indices")]
    InvalidTrajectory,
    #[error("poses reference different intrinsics: {a} vs {b}")]
    IntrinsicsMismatch { a: String, b: String },
}

/// Shared pinhole intrinsics record. All poses in a scene reference one of
/// these by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinholeIntrinsics {
    pub focal_px: f64,
    pub principal_x_px: f64,
    pub principal_y_px: f64,
    pub width: u32,
    pub height: u32,
}

impl PinholeIntrinsics {
    /// Symmetric pinhole with the principal point at the image centre.
    pub fn centered(focal_px: f64, width: u32, height: u32) -> Self {
        Self {
            focal_px,
            principal_x_px: width as f64 / 2.0,
            principal_y_px: height as f64 / 2.0,
            width,
            height,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.focal_px > 0.0 && self.width > 0 && self.height > 0
    }
}

/// World-to-camera rigid transform: `x_cam = R * x_world + t`.
///
/// Right-handed, camera looks along +z, x right, y down. The quaternion is
/// kept on the canonical branch of the double cover (`w >= 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
    pub intrinsics_ref: String,
}

impl CameraPose {
    pub fn new(
        rotation: UnitQuaternion<f64>,
        translation: Vector3<f64>,
        intrinsics_ref: impl Into<String>,
    ) -> Self {
        Self {
            rotation: canonicalize(rotation),
            translation,
            intrinsics_ref: intrinsics_ref.into(),
        }
    }

    /// Quaternion components in `(w, x, y, z)` order.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn from_wxyz_t(wxyz: [f64; 4], t: [f64; 3], intrinsics_ref: impl Into<String>) -> Self {
        let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
        Self::new(
            UnitQuaternion::from_quaternion(q),
            Vector3::new(t[0], t[1], t[2]),
            intrinsics_ref,
        )
    }

    /// Camera centre in world coordinates: `-R^T t`.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    /// World-to-camera pose for a camera at `eye` looking at `target`,
    /// with `up` fixing the roll.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        intrinsics_ref: impl Into<String>,
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right).normalize();
        // Rows of R map world axes onto (x right, y down, z forward).
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let rotation = UnitQuaternion::from_matrix(&r);
        let translation = -(rotation * eye);
        Self::new(rotation, translation, intrinsics_ref)
    }
}

fn canonicalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if q.quaternion().w < 0.0 {
        UnitQuaternion::new_unchecked(-q.quaternion())
    } else {
        q
    }
}

/// Visit order over a pose set; a permutation of `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory(pub Vec<usize>);

impl Trajectory {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_permutation_of(&self, n: usize) -> bool {
        if self.0.len() != n {
            return false;
        }
        let mut seen = vec![false; n];
        for &i in &self.0 {
            if i >= n || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        true
    }
}

/// Greedy nearest-neighbour trajectory over camera translations.
///
/// Starts at `start_index` and repeatedly steps to the unvisited pose with
/// the smallest Euclidean distance between translations. Distance ties break
/// towards the lowest index so the result is deterministic.
pub fn build_greedy_trajectory(
    poses: &[CameraPose],
    start_index: usize,
) -> Result<Trajectory, PoseError> {
    if poses.is_empty() {
        return Err(PoseError::EmptyPoseSet);
    }
    if start_index >= poses.len() {
        return Err(PoseError::StartOutOfRange {
            start: start_index,
            len: poses.len(),
        });
    }
    let n = poses.len();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut current = start_index;
    visited[current] = true;
    order.push(current);
    for _ in 1..n {
        let here = &poses[current].translation;
        let mut best: Option<(usize, f64)> = None;
        for (j, pose) in poses.iter().enumerate() {
            if visited[j] {
                continue;
            }
            let d = (pose.translation - here).norm_squared();
            let better = match best {
                None => true,
                Some((_, bd)) => d < bd,
            };
            if better {
                best = Some((j, d));
            }
        }
        let (next, _) = best.expect("unvisited pose must exist");
        visited[next] = true;
        order.push(next);
        current = next;
    }
    Ok(Trajectory(order))
}

/// Geodesic pose interpolation: linear translation, shortest-arc spherical
/// interpolation of the rotation. `t = 0` returns `a`, `t = 1` returns `b`.
pub fn interpolate_pose(a: &CameraPose, b: &CameraPose, t: f64) -> Result<CameraPose, PoseError> {
    if a.intrinsics_ref != b.intrinsics_ref {
        return Err(PoseError::IntrinsicsMismatch {
            a: a.intrinsics_ref.clone(),
            b: b.intrinsics_ref.clone(),
        });
    }
    let translation = a.translation * (1.0 - t) + b.translation * t;
    let rotation = slerp(a.rotation, b.rotation, t);
    Ok(CameraPose::new(rotation, translation, a.intrinsics_ref.clone()))
}

/// Shortest-arc slerp with sign-flip canonicalization; near-parallel
/// quaternions fall back to normalized lerp.
pub fn slerp(a: UnitQuaternion<f64>, b: UnitQuaternion<f64>, t: f64) -> UnitQuaternion<f64> {
    let qa = *a.quaternion();
    let mut qb = *b.quaternion();
    let mut dot = qa.dot(&qb);
    if dot < 0.0 {
        qb = -qb;
        dot = -dot;
    }
    if dot > 1.0 - 1e-12 {
        let q = qa * (1.0 - t) + qb * t;
        return UnitQuaternion::from_quaternion(q);
    }
    let theta = dot.clamp(-1.0, 1.0).acos();
    let sin_theta = theta.sin();
    let wa = ((1.0 - t) * theta).sin() / sin_theta;
    let wb = (t * theta).sin() / sin_theta;
    UnitQuaternion::from_quaternion(qa * wa + qb * wb)
}

/// Emit `k` evenly spaced intermediate poses for every consecutive pair
/// along the trajectory, at `t = 1/(k+1), ..., k/(k+1)`. Endpoints are
/// excluded; the output has exactly `k * (len - 1)` poses.
pub fn densify_trajectory(
    poses: &[CameraPose],
    trajectory: &Trajectory,
    k: usize,
) -> Result<Vec<CameraPose>, PoseError> {
    if !trajectory.is_permutation_of(poses.len()) {
        return Err(PoseError::InvalidTrajectory);
    }
    let mut out = Vec::new();
    for pair in trajectory.0.windows(2) {
        let a = &poses[pair[0]];
        let b = &poses[pair[1]];
        for step in 1..=k {
            let t = step as f64 / (k as f64 + 1.0);
            out.push(interpolate_pose(a, b, t)?);
        }
    }
    Ok(out)
}
