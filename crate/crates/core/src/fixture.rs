//! Synthetic desk-scale dataset generation: a procedural cuboid scene,
//! hemisphere-ring camera poses, clean training renders, anomaly-injected
//! query renders, and oracle ground-truth masks.

use crate::data::{
    self, DataError, DatasetManifest, PosesFile, SplitCounts,
};
use crate::pose::{CameraPose, PinholeIntrinsics};
use crate::scene::{
    AnomalyKind, Cuboid, ProceduralScene, RenderError, inject_anomaly, render_procedural,
};
use crate::util;
use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const INTRINSICS_REF: &str = "cam0";

/// Mask-fraction bracket that counts as a plausible localized anomaly;
/// queries outside it are reported as warnings, not errors.
pub const ANOMALY_FRACTION_MIN: f64 = 0.0003;
pub const ANOMALY_FRACTION_MAX: f64 = 0.05;

/// Retries per query image to hit the anomaly-fraction bracket.
const MAX_ANOMALY_ATTEMPTS: usize = 24;

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("fixture needs at least 1 train and 1 query pose, got {train} and {query}")]
    TooFewPoses { train: usize, query: usize },
    #[error("image size must be a positive multiple of 16, got {0}")]
    BadImageSize(u32),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_query: usize,
    pub image_size: u32,
    /// Cuboids placed on the ground plane of the clean scene.
    pub n_primitives: usize,
}

impl FixtureConfig {
    pub fn new(seed: u64, n_train: usize, n_query: usize, image_size: u32) -> Self {
        Self {
            seed,
            n_train,
            n_query,
            image_size,
            n_primitives: 6,
        }
    }
}

/// What was written, plus any realism warnings (mask fractions outside the
/// expected bracket).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureReport {
    pub config: FixtureConfig,
    pub scene_id: String,
    pub counts: SplitCounts,
    pub mask_fractions: Vec<f64>,
    pub warnings: Vec<String>,
}

fn random_albedo(rng: &mut ChaCha8Rng) -> [f32; 3] {
    // One strong channel keeps primitives distinguishable after shading.
    let strong = rng.random_range(0..3usize);
    let mut a = [0f32; 3];
    for (c, v) in a.iter_mut().enumerate() {
        *v = if c == strong {
            rng.random_range(0.6..0.95)
        } else {
            rng.random_range(0.05..0.45)
        };
    }
    a
}

fn grounded_cuboid(rng: &mut ChaCha8Rng, min_size: f64, max_size: f64, spread: f64) -> Cuboid {
    let size = [
        rng.random_range(min_size..max_size),
        rng.random_range(min_size..max_size),
        rng.random_range(min_size..max_size),
    ];
    Cuboid {
        center: [
            rng.random_range(-spread..spread),
            rng.random_range(-spread..spread),
            size[2] / 2.0,
        ],
        size,
        albedo: random_albedo(rng),
    }
}

/// Deterministic desk-top scene for a seed: gray ground plane at z = 0,
/// colored cuboids resting on it, one directional light from above.
pub fn build_scene(seed: u64, n_primitives: usize) -> ProceduralScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce0e9a5_6015fec5);
    let gray = rng.random_range(0.45..0.6);
    let primitives = (0..n_primitives)
        .map(|_| grounded_cuboid(&mut rng, 0.12, 0.3, 0.7))
        .collect();
    ProceduralScene {
        ground_extent: 1.2,
        ground_albedo: [gray, gray, gray],
        primitives,
        light_dir: [
            rng.random_range(-0.4..0.4),
            rng.random_range(-0.4..0.4),
            -1.0,
        ],
        background: [0.08, 0.09, 0.12],
        seed,
    }
}

/// Camera on a hemisphere ring around the scene: azimuth around the ring,
/// elevation and radius jittered (radius within ±10% of the base), always
/// looking at the scene center.
fn ring_pose(rng: &mut ChaCha8Rng, azimuth: f64) -> CameraPose {
    let radius = 2.4 * (1.0 + rng.random_range(-0.1..0.1));
    let elevation: f64 = rng.random_range(0.35..1.0); // ~20..57 degrees
    let eye = Vector3::new(
        radius * elevation.cos() * azimuth.cos(),
        radius * elevation.cos() * azimuth.sin(),
        radius * elevation.sin(),
    );
    CameraPose::look_at(
        eye,
        Vector3::new(0.0, 0.0, 0.1),
        Vector3::new(0.0, 0.0, 1.0),
        INTRINSICS_REF,
    )
}

fn sample_anomaly(rng: &mut ChaCha8Rng, scene: &ProceduralScene) -> AnomalyKind {
    match rng.random_range(0..3usize) {
        // Small foreign object dropped onto the desk.
        0 => AnomalyKind::AddPrimitive(grounded_cuboid(rng, 0.07, 0.16, 0.6)),
        1 if !scene.primitives.is_empty() => {
            AnomalyKind::RemovePrimitive(rng.random_range(0..scene.primitives.len()))
        }
        _ if !scene.primitives.is_empty() => {
            let index = rng.random_range(0..scene.primitives.len());
            AnomalyKind::RecolorPrimitive {
                index,
                albedo: random_albedo(rng),
            }
        }
        _ => AnomalyKind::AddPrimitive(grounded_cuboid(rng, 0.07, 0.16, 0.6)),
    }
}

fn mask_fraction(mask: &ndarray::Array2<u8>) -> f64 {
    let pos: u64 = mask.iter().map(|&v| v as u64).sum();
    pos as f64 / mask.len() as f64
}

/// Generate the full dataset tree under `root`. Same config twice writes
/// bit-identical files; the tree passes `data::load_dataset`.
pub fn generate_fixture(root: &Path, config: &FixtureConfig) -> Result<FixtureReport, FixtureError> {
    if config.n_train == 0 || config.n_query == 0 {
        return Err(FixtureError::TooFewPoses {
            train: config.n_train,
            query: config.n_query,
        });
    }
    if config.image_size == 0 || config.image_size % 16 != 0 {
        return Err(FixtureError::BadImageSize(config.image_size));
    }

    let scene = build_scene(config.seed, config.n_primitives);
    let intrinsics =
        PinholeIntrinsics::centered(config.image_size as f64 * 1.2, config.image_size, config.image_size);

    let mut poses = PosesFile::default();
    poses
        .intrinsics
        .insert(INTRINSICS_REF.to_string(), intrinsics.clone());

    // Independent streams so changing n_train never reshuffles queries.
    let mut train_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x0001);
    let mut query_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x0002);
    let mut warnings = Vec::new();

    for i in 0..config.n_train {
        let azimuth =
            std::f64::consts::TAU * i as f64 / config.n_train as f64
                + train_rng.random_range(-0.05..0.05);
        let pose = ring_pose(&mut train_rng, azimuth);
        let rel = format!("train/good/{i:04}.png");
        render_procedural(&scene, &pose, &intrinsics)?.save_png(&root.join(&rel))?;
        poses.insert(&rel, &pose);
    }

    let mut mask_fractions = Vec::with_capacity(config.n_query);
    for i in 0..config.n_query {
        let azimuth =
            std::f64::consts::TAU * (i as f64 + 0.5) / config.n_query as f64
                + query_rng.random_range(-0.05..0.05);
        let pose = ring_pose(&mut query_rng, azimuth);

        // Resample the anomaly until its mask fraction at this pose falls
        // in the plausible bracket; keep the last attempt otherwise.
        let mut chosen: Option<(ProceduralScene, ndarray::Array2<u8>, f64)> = None;
        for _ in 0..MAX_ANOMALY_ATTEMPTS {
            let kind = sample_anomaly(&mut query_rng, &scene);
            let (mutated, oracle) = inject_anomaly(&scene, &kind)?;
            let mask = oracle.mask(&pose, &intrinsics)?;
            let fraction = mask_fraction(&mask);
            let in_bracket =
                (ANOMALY_FRACTION_MIN..=ANOMALY_FRACTION_MAX).contains(&fraction);
            chosen = Some((mutated, mask, fraction));
            if in_bracket {
                break;
            }
        }
        let (mutated, mask, fraction) = chosen.expect("at least one anomaly attempt");
        if !(ANOMALY_FRACTION_MIN..=ANOMALY_FRACTION_MAX).contains(&fraction) {
            warnings.push(format!(
                "query {i:04}: anomaly mask fraction {fraction:.5} outside \
                 [{ANOMALY_FRACTION_MIN}, {ANOMALY_FRACTION_MAX}]"
            ));
        }
        mask_fractions.push(fraction);

        let rel = format!("test/{i:04}.png");
        render_procedural(&mutated, &pose, &intrinsics)?.save_png(&root.join(&rel))?;
        data::save_binary_mask(
            &root.join(data::mask_rel_for_test(&format!("{i:04}.png"))),
            &mask,
        )?;
        poses.insert(&rel, &pose);
    }

    // Ensure the optional augmentation folders exist so loaders can list
    // them before any augmentation has run.
    for sub in ["train/qanv", "train/inv"] {
        std::fs::create_dir_all(root.join(sub)).map_err(|e| DataError::Io {
            path: root.join(sub),
            source: e,
        })?;
    }

    poses.save(&root.join("poses.json"))?;

    // The scene definition is saved alongside the tree so augmentation can
    // re-render novel views of the clean scene.
    util::write_json_atomic(&root.join("scene.json"), &scene).map_err(|e| DataError::Io {
        path: root.join("scene.json"),
        source: e,
    })?;

    let counts = SplitCounts {
        train_good: config.n_train,
        train_qanv: 0,
        train_inv: 0,
        test: config.n_query,
        masks: config.n_query,
    };
    let mut manifest = DatasetManifest {
        counts: counts.clone(),
        renderer_id: Some(scene.scene_id()),
        ..Default::default()
    };
    manifest
        .provenance
        .insert("fixture_seed".into(), config.seed.to_string());
    manifest
        .provenance
        .insert("image_size".into(), config.image_size.to_string());
    manifest
        .provenance
        .insert("n_primitives".into(), config.n_primitives.to_string());
    manifest.save(&root.join("manifest.json"))?;

    for w in &warnings {
        log::warn!("{w}");
    }

    Ok(FixtureReport {
        config: config.clone(),
        scene_id: scene.scene_id(),
        counts,
        mask_fractions,
        warnings,
    })
}

/// Reload the procedural scene a fixture tree was rendered from.
pub fn load_scene(root: &Path) -> Result<ProceduralScene, DataError> {
    let path = root.join("scene.json");
    let bytes = std::fs::read(&path).map_err(|e| DataError::Io {
        path: path.clone(),
        source: e,
    })?;
    serde_json::from_slice(&bytes).map_err(|e| DataError::Unreadable {
        path,
        source: Box::new(e),
    })
}
