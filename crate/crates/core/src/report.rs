//! Ablation grid (method x augmentation variant) and its rendered tables.

use crate::data::{AugmentationTag, load_dataset};
use crate::model::{BackboneKind, ModelConfig, StageStyle};
use crate::train::{self, TrainConfig, TrainError};
use crate::util;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// The four ablation rows: the full model and its three reductions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MethodKind {
    /// Grouped-conv backbone + student attention modules.
    OmniAd,
    /// Plain-conv backbone, attention kept ("without ResNeXt").
    WithoutGroupedBackbone,
    /// Grouped-conv backbone, attention removed.
    WithoutAttention,
    /// Plain reverse-distillation baseline: no grouping, no attention.
    Rd,
}

impl MethodKind {
    pub const ALL: [MethodKind; 4] = [
        MethodKind::OmniAd,
        MethodKind::WithoutGroupedBackbone,
        MethodKind::WithoutAttention,
        MethodKind::Rd,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            MethodKind::OmniAd => "OmniAD",
            MethodKind::WithoutGroupedBackbone => "OmniAD w/o R",
            MethodKind::WithoutAttention => "OmniAD w/o A",
            MethodKind::Rd => "RD",
        }
    }

    pub fn slug(&self) -> &'static str {
        match self {
            MethodKind::OmniAd => "omniad",
            MethodKind::WithoutGroupedBackbone => "omniad-wo-r",
            MethodKind::WithoutAttention => "omniad-wo-a",
            MethodKind::Rd => "rd",
        }
    }

    pub fn uses_attention(&self) -> bool {
        matches!(self, MethodKind::OmniAd | MethodKind::WithoutGroupedBackbone)
    }

    pub fn stage_style(&self) -> StageStyle {
        match self {
            MethodKind::OmniAd | MethodKind::WithoutAttention => StageStyle::Grouped,
            MethodKind::WithoutGroupedBackbone | MethodKind::Rd => StageStyle::Plain,
        }
    }

    /// Specialise a base model config to this ablation row.
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut config = base.clone();
        config.use_attention_modules = self.uses_attention();
        if let BackboneKind::TinyRandom { divisor, .. } = config.backbone {
            config.backbone = BackboneKind::TinyRandom {
                divisor,
                style: self.stage_style(),
            };
        }
        config
    }
}

fn variant_label(tag: AugmentationTag) -> &'static str {
    match tag {
        AugmentationTag::None => "No Aug",
        AugmentationTag::Qanv => "QANV",
        AugmentationTag::Inv => "INV",
        AugmentationTag::Both => "Both",
    }
}

fn variant_slug(tag: AugmentationTag) -> &'static str {
    match tag {
        AugmentationTag::None => "noaug",
        AugmentationTag::Qanv => "qanv",
        AugmentationTag::Inv => "inv",
        AugmentationTag::Both => "both",
    }
}

/// Headline metrics of one trained (method, variant) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellMetrics {
    pub pixel_f1: f64,
    pub pixel_auroc: f64,
    pub run_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridCell {
    pub method: MethodKind,
    pub variant: AugmentationTag,
    pub metrics: Option<CellMetrics>,
    /// Populated when the cell's training run failed; the grid continues.
    pub error: Option<String>,
}

/// Full 4x4 ablation grid for one dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridReport {
    pub dataset_root: PathBuf,
    pub seed: u64,
    pub cells: Vec<GridCell>,
}

pub const GRID_REPORT_FILE: &str = "grid_report.json";

#[derive(Debug, Error)]
pub enum GridError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl GridReport {
    pub fn cell(&self, method: MethodKind, variant: AugmentationTag) -> Option<&GridCell> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.variant == variant)
    }

    pub fn f1(&self, method: MethodKind, variant: AugmentationTag) -> Option<f64> {
        self.cell(method, variant)
            .and_then(|c| c.metrics.as_ref())
            .map(|m| m.pixel_f1)
    }

    /// Mean F1 over the variants a method completed; None when none did.
    pub fn mean_f1(&self, method: MethodKind) -> Option<f64> {
        let values: Vec<f64> = AugmentationTag::ALL
            .iter()
            .filter_map(|&v| self.f1(method, v))
            .collect();
        (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Train every (method, variant) cell on the dataset at `dataset_root`,
/// writing each run under `out_dir/<method>/<variant>` and the grid report
/// to `out_dir/grid_report.json`. Failed cells are annotated, not fatal.
pub fn ablation_grid(
    dataset_root: &Path,
    base_model_config: &ModelConfig,
    base_train_config: &TrainConfig,
    out_dir: &Path,
) -> Result<GridReport, GridError> {
    let mut cells = Vec::with_capacity(16);
    for method in MethodKind::ALL {
        for variant in AugmentationTag::ALL {
            let run_dir = out_dir.join(method.slug()).join(variant_slug(variant));
            let model_config = method.apply(base_model_config);
            let train_config = TrainConfig {
                augmentation_tag: variant,
                ..base_train_config.clone()
            };
            let outcome = load_dataset(dataset_root, variant)
                .map_err(TrainError::from)
                .and_then(|dataset| train::train(&model_config, &train_config, &dataset, &run_dir));
            let (metrics, error) = match outcome {
                Ok(manifest) => (
                    Some(CellMetrics {
                        pixel_f1: manifest.test_report.pixel_f1,
                        pixel_auroc: manifest.test_report.pixel_auroc,
                        run_dir: run_dir.clone(),
                    }),
                    None,
                ),
                Err(e) => {
                    log::warn!(
                        "grid cell {} / {} failed: {e}",
                        method.label(),
                        variant_label(variant)
                    );
                    (None, Some(e.to_string()))
                }
            };
            cells.push(GridCell {
                method,
                variant,
                metrics,
                error,
            });
        }
    }
    let report = GridReport {
        dataset_root: dataset_root.to_path_buf(),
        seed: base_train_config.seed,
        cells,
    };
    let path = out_dir.join(GRID_REPORT_FILE);
    util::write_json_atomic(&path, &report).map_err(|source| GridError::Io { path, source })?;
    Ok(report)
}

/// Relative gain of `a` over baseline `b`.
pub fn relative_improvement(a: f64, b: f64) -> f64 {
    (a - b) / b
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.4}"),
        None => "  -   ".to_string(),
    }
}

fn fmt_improvement(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{:.2}%", 100.0 * v),
        None => "-".to_string(),
    }
}

fn render_table(
    title: &str,
    value: impl Fn(MethodKind, AugmentationTag) -> Option<f64>,
    fmt: impl Fn(Option<f64>) -> String,
) -> String {
    let mut out = String::new();
    out.push_str(&format!("{title}\n"));
    out.push_str(&format!("{:<14}", "method"));
    for variant in AugmentationTag::ALL {
        out.push_str(&format!("{:>10}", variant_label(variant)));
    }
    out.push('\n');
    for method in MethodKind::ALL {
        out.push_str(&format!("{:<14}", method.label()));
        for variant in AugmentationTag::ALL {
            out.push_str(&format!("{:>10}", fmt(value(method, variant))));
        }
        out.push('\n');
    }
    out
}

/// Render the grid as four plain-text tables: pixel F1, pixel AUROC, mean
/// F1 per method, and improvement over the RD / No Aug baseline. Missing
/// cells render as gaps.
pub fn render_grid_tables(report: &GridReport) -> String {
    let mut out = String::new();
    out.push_str(&render_table("Pixel F1", |m, v| report.f1(m, v), fmt_opt));
    out.push('\n');
    out.push_str(&render_table(
        "Pixel AUROC",
        |m, v| {
            report
                .cell(m, v)
                .and_then(|c| c.metrics.as_ref())
                .map(|x| x.pixel_auroc)
        },
        fmt_opt,
    ));
    out.push('\n');

    out.push_str("Mean pixel F1 across variants\n");
    for method in MethodKind::ALL {
        out.push_str(&format!(
            "{:<14}{:>10}\n",
            method.label(),
            fmt_opt(report.mean_f1(method))
        ));
    }
    out.push('\n');

    let baseline = report.f1(MethodKind::Rd, AugmentationTag::None);
    out.push_str(&render_table(
        "Improvement over RD / No Aug",
        |m, v| match (report.f1(m, v), baseline) {
            (Some(a), Some(b)) => Some(relative_improvement(a, b)),
            _ => None,
        },
        fmt_improvement,
    ));

    let failed: Vec<&GridCell> = report.cells.iter().filter(|c| c.error.is_some()).collect();
    if !failed.is_empty() {
        out.push('\n');
        out.push_str("Failed cells\n");
        for cell in failed {
            out.push_str(&format!(
                "{} / {}: {}\n",
                cell.method.label(),
                variant_label(cell.variant),
                cell.error.as_deref().unwrap_or("unknown")
            ));
        }
    }
    out
}
