//! Deterministic procedural scene renderer and pose localizers.
//!
//! The renderer stands in for a learned novel-view-synthesis model at desk
//! scale: a pinhole camera over a ground plane and axis-aligned colored
//! cuboids with Lambertian shading. Identical (scene, pose) inputs produce
//! bit-identical 8-bit images, which is what makes the render-diff anomaly
//! masks exact.

use crate::data::{ImageSource, ImageTensor};
use crate::pose::{CameraPose, PinholeIntrinsics};
use nalgebra::Vector3;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("degenerate intrinsics: focal and image dimensions must be positive")]
    DegenerateIntrinsics,
    #[error("primitive index {0} does not exist")]
    MissingTarget(usize),
    #[error("external render missing for pose {index}: expected {path}")]
    ExternalRenderMissing { index: usize, path: PathBuf },
    #[error("pose was never requested from the external renderer at {0}")]
    UnrequestedPose(PathBuf),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

/// Axis-aligned colored cuboid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cuboid {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub albedo: [f32; 3],
}

impl Cuboid {
    pub fn is_degenerate(&self) -> bool {
        self.size.iter().any(|&s| s <= 0.0)
    }
}

/// Desk-scale scene description, reproducible from its seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProceduralScene {
    /// Half-extent of the ground plane at z = 0.
    pub ground_extent: f64,
    pub ground_albedo: [f32; 3],
    pub primitives: Vec<Cuboid>,
    /// Direction light travels (world frame); normalized before use.
    pub light_dir: [f64; 3],
    pub background: [f32; 3],
    pub seed: u64,
}

impl ProceduralScene {
    pub fn scene_id(&self) -> String {
        format!("procedural-{:016x}", self.seed)
    }
}

const AMBIENT: f32 = 0.35;

struct Hit {
    t: f64,
    normal: Vector3<f64>,
    albedo: [f32; 3],
}

fn intersect_cuboid(origin: &Vector3<f64>, dir: &Vector3<f64>, c: &Cuboid) -> Option<(f64, f64)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for axis in 0..3 {
        let half = c.size[axis] / 2.0;
        let lo = c.center[axis] - half;
        let hi = c.center[axis] + half;
        if dir[axis].abs() < 1e-12 {
            if origin[axis] < lo || origin[axis] > hi {
                return None;
            }
        } else {
            let inv = 1.0 / dir[axis];
            let (t0, t1) = {
                let a = (lo - origin[axis]) * inv;
                let b = (hi - origin[axis]) * inv;
                if a < b {
                    (a, b)
                } else {
                    (b, a)
                }
            };
            t_near = t_near.max(t0);
            t_far = t_far.min(t1);
            if t_near > t_far {
                return None;
            }
        }
    }
    if t_far < 0.0 {
        return None;
    }
    Some((t_near, t_far))
}

fn cuboid_normal(point: &Vector3<f64>, c: &Cuboid) -> Vector3<f64> {
    // Face of largest relative offset from the centre.
    let mut best_axis = 0;
    let mut best_ratio = f64::NEG_INFINITY;
    for axis in 0..3 {
        let ratio = (point[axis] - c.center[axis]).abs() / (c.size[axis] / 2.0);
        if ratio > best_ratio {
            best_ratio = ratio;
            best_axis = axis;
        }
    }
    let mut n = Vector3::zeros();
    n[best_axis] = (point[best_axis] - c.center[best_axis]).signum();
    n
}

/// Rasterize the scene at a pose by per-pixel nearest-surface ray casting
/// (equivalent visible-surface result to painter's-algorithm depth
/// ordering), with Lambertian shading, quantized to 8 bits.
pub fn render_procedural(
    scene: &ProceduralScene,
    pose: &CameraPose,
    intrinsics: &PinholeIntrinsics,
) -> Result<ImageTensor, RenderError> {
    if !intrinsics.is_valid() {
        return Err(RenderError::DegenerateIntrinsics);
    }
    let (w, h) = (intrinsics.width as usize, intrinsics.height as usize);
    let rot_inv = pose.rotation.inverse();
    let origin = pose.camera_center();
    let light = -Vector3::new(scene.light_dir[0], scene.light_dir[1], scene.light_dir[2])
        .normalize();

    let mut data = Array3::zeros((3, h, w));
    for v in 0..h {
        for u in 0..w {
            // Ray through the pixel centre; camera frame is x right, y down,
            // z forward.
            let x = (u as f64 + 0.5 - intrinsics.principal_x_px) / intrinsics.focal_px;
            let y = (v as f64 + 0.5 - intrinsics.principal_y_px) / intrinsics.focal_px;
            let dir = (rot_inv * Vector3::new(x, y, 1.0)).normalize();

            let mut hit: Option<Hit> = None;

            // Ground plane z = 0 within the square extent.
            if dir.z.abs() > 1e-12 {
                let t = -origin.z / dir.z;
                if t > 1e-9 {
                    let p = origin + dir * t;
                    if p.x.abs() <= scene.ground_extent && p.y.abs() <= scene.ground_extent {
                        hit = Some(Hit {
                            t,
                            normal: Vector3::new(0.0, 0.0, if origin.z >= 0.0 { 1.0 } else { -1.0 }),
                            albedo: scene.ground_albedo,
                        });
                    }
                }
            }

            for c in &scene.primitives {
                if let Some((t_near, t_far)) = intersect_cuboid(&origin, &dir, c) {
                    // A camera inside the primitive sees its interior.
                    let t = if t_near > 1e-9 { t_near } else { t_far };
                    if t > 1e-9 && hit.as_ref().map(|hh| t < hh.t).unwrap_or(true) {
                        let p = origin + dir * t;
                        hit = Some(Hit {
                            t,
                            normal: cuboid_normal(&p, c),
                            albedo: c.albedo,
                        });
                    }
                }
            }

            let rgb = match hit {
                Some(hh) => {
                    let lambert = hh.normal.dot(&light).max(0.0) as f32;
                    let shade = AMBIENT + (1.0 - AMBIENT) * lambert;
                    [0, 1, 2].map(|i| hh.albedo[i] * shade)
                }
                None => scene.background,
            };
            for ch in 0..3 {
                // 8-bit quantization keeps renders bit-identical and gives
                // the mask oracle an exact tolerance semantics.
                let q = (rgb[ch].clamp(0.0, 1.0) * 255.0).round() / 255.0;
                data[[ch, v, u]] = q;
            }
        }
    }
    Ok(ImageTensor::new(data, ImageSource::Synthesized))
}

/// Project a world point into pixel coordinates; `None` when behind the
/// camera.
pub fn project_point(
    pose: &CameraPose,
    intrinsics: &PinholeIntrinsics,
    point: &Vector3<f64>,
) -> Option<(f64, f64)> {
    let cam = pose.rotation * point + pose.translation;
    if cam.z <= 1e-9 {
        return None;
    }
    Some((
        intrinsics.focal_px * cam.x / cam.z + intrinsics.principal_x_px,
        intrinsics.focal_px * cam.y / cam.z + intrinsics.principal_y_px,
    ))
}

/// Pluggable novel-view renderer.
pub trait Renderer {
    fn scene_id(&self) -> String;
    fn render(
        &self,
        pose: &CameraPose,
        intrinsics: &PinholeIntrinsics,
    ) -> Result<ImageTensor, RenderError>;
    fn deterministic(&self) -> bool;
    fn has_ground_truth_geometry(&self) -> bool;
}

pub struct ProceduralRenderer {
    pub scene: ProceduralScene,
}

impl Renderer for ProceduralRenderer {
    fn scene_id(&self) -> String {
        self.scene.scene_id()
    }

    fn render(
        &self,
        pose: &CameraPose,
        intrinsics: &PinholeIntrinsics,
    ) -> Result<ImageTensor, RenderError> {
        render_procedural(&self.scene, pose, intrinsics)
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn has_ground_truth_geometry(&self) -> bool {
        true
    }
}

pub const RENDER_DIFF_TOLERANCE: f32 = 2.0 / 255.0;

/// Per-pixel mask of where two renders differ beyond the RGB tolerance.
pub fn render_diff_mask(a: &ImageTensor, b: &ImageTensor, tolerance: f32) -> Array2<u8> {
    let (h, w) = (a.height(), a.width());
    let mut mask = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let differs = (0..3).any(|c| {
                (a.data[[c, y, x]] - b.data[[c, y, x]]).abs() > tolerance
            });
            mask[[y, x]] = differs as u8;
        }
    }
    mask
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum AnomalyKind {
    AddPrimitive(Cuboid),
    RemovePrimitive(usize),
    RecolorPrimitive { index: usize, albedo: [f32; 3] },
}

/// Ground-truth mask generator for one injected anomaly: for any pose, the
/// mask is the set of pixels where renders of the original and mutated
/// scenes differ beyond the RGB tolerance.
pub struct MaskOracle {
    pub original: ProceduralScene,
    pub mutated: ProceduralScene,
    pub tolerance: f32,
}

impl MaskOracle {
    pub fn mask(
        &self,
        pose: &CameraPose,
        intrinsics: &PinholeIntrinsics,
    ) -> Result<Array2<u8>, RenderError> {
        let a = render_procedural(&self.original, pose, intrinsics)?;
        let b = render_procedural(&self.mutated, pose, intrinsics)?;
        Ok(render_diff_mask(&a, &b, self.tolerance))
    }
}

/// Apply an anomaly to the scene, returning the mutated scene and its mask
/// oracle.
pub fn inject_anomaly(
    scene: &ProceduralScene,
    kind: &AnomalyKind,
) -> Result<(ProceduralScene, MaskOracle), RenderError> {
    let mut mutated = scene.clone();
    match kind {
        AnomalyKind::AddPrimitive(c) => mutated.primitives.push(c.clone()),
        AnomalyKind::RemovePrimitive(index) => {
            if *index >= mutated.primitives.len() {
                return Err(RenderError::MissingTarget(*index));
            }
            mutated.primitives.remove(*index);
        }
        AnomalyKind::RecolorPrimitive { index, albedo } => {
            let prim = mutated
                .primitives
                .get_mut(*index)
                .ok_or(RenderError::MissingTarget(*index))?;
            prim.albedo = *albedo;
        }
    }
    let oracle = MaskOracle {
        original: scene.clone(),
        mutated: mutated.clone(),
        tolerance: RENDER_DIFF_TOLERANCE,
    };
    Ok((mutated, oracle))
}
