//! Core library for scene-level pixelwise anomaly detection with novel-view
//! augmentation: synthetic scene data, camera pose geometry, view synthesis,
//! the detection model, effective-receptive-field analysis, training, and
//! evaluation.

pub mod augment;
pub mod data;
pub mod erf;
pub mod eval;
pub mod fixture;
pub mod localize;
pub mod model;
pub mod pose;
pub mod report;
pub mod scene;
pub mod train;
pub mod util;
