//! `scenead`: fixture generation, view-synthesis augmentation, training,
//! ablation grids, evaluation, and receptive-field analysis for scene-level
//! anomaly detection.

use anyhow::{Context, Result, bail};
use burn::prelude::Backend;
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scenead_core::augment::{ExternalRenderer, build_inv_augmentation, build_qanv_augmentation};
use scenead_core::data::{
    AugmentationTag, ImageSource, ImageTensor, PosesFile, SceneDataset, load_dataset,
};
use scenead_core::erf::{self, ErfComparison};
use scenead_core::eval::imbalance_demo;
use scenead_core::fixture::{FixtureConfig, generate_fixture, load_scene};
use scenead_core::localize::{ExternalLocalizer, GroundTruthLocalizer, Localizer, NoisyLocalizer};
use scenead_core::model::anomaly::anomaly_maps_from_features;
use scenead_core::model::{BackboneKind, ModelConfig, StageStyle};
use scenead_core::pose::{build_greedy_trajectory, densify_trajectory};
use scenead_core::report::{GridReport, ablation_grid, render_grid_tables};
use scenead_core::scene::{ProceduralRenderer, Renderer};
use scenead_core::train::{
    InferBackend, TrainBackend, TrainConfig, evaluate_on_queries, load_checkpoint, train,
};
use scenead_core::util;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "scenead", about, version)]
struct Cli {
    /// Verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset (clean train views + anomalous
    /// query views with ground-truth masks and poses).
    Fixture(FixtureArgs),
    /// Build novel-view training augmentations (INV and/or QANV).
    Augment(AugmentArgs),
    /// Train one model on a dataset.
    Train(TrainArgs),
    /// Train the full 4x4 method-by-augmentation ablation grid.
    Grid(GridArgs),
    /// Evaluate a checkpoint on a dataset's query images.
    Eval(EvalArgs),
    /// Effective-receptive-field analysis of a checkpoint.
    Erf(ErfArgs),
    /// Render the tables of a saved grid report.
    Report(ReportArgs),
    /// Camera pose utilities.
    Poses(PosesArgs),
}

/// Seed precedence: explicit flag, then SCENEAD_SEED, then 0.
fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| {
        std::env::var("SCENEAD_SEED")
            .ok()
            .and_then(|s| s.parse().ok())
    })
    .unwrap_or(0)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    util::write_json_atomic(path, value).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Args)]
struct FixtureArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 64)]
    n_train: usize,
    #[arg(long, default_value_t = 32)]
    n_query: usize,
    /// Image edge length in pixels (positive multiple of 16).
    #[arg(long, default_value_t = 128)]
    size: u32,
    #[arg(long, default_value_t = 6)]
    n_primitives: usize,
}

fn cmd_fixture(args: FixtureArgs) -> Result<()> {
    let mut config = FixtureConfig::new(resolve_seed(args.seed), args.n_train, args.n_query, args.size);
    config.n_primitives = args.n_primitives;
    let report = generate_fixture(&args.out, &config)?;
    write_json(&args.out.join("fixture_report.json"), &report)?;
    for warning in &report.warnings {
        log::warn!("{warning}");
    }
    println!(
        "fixture: {} train / {} query images at {}px in {} (scene {})",
        report.counts.train_good,
        report.counts.test,
        args.size,
        args.out.display(),
        report.scene_id
    );
    Ok(())
}

#[derive(Clone, Copy, ValueEnum)]
enum AugmentVariant {
    Inv,
    Qanv,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum RendererKind {
    /// Re-render the stored procedural scene.
    Procedural,
    /// Pre-rendered PNGs matched against a pose request file.
    External,
}

#[derive(Clone, Copy, ValueEnum)]
enum LocalizerKind {
    /// Ground-truth poses recorded with the dataset.
    Gt,
    /// Ground truth plus a deterministic SE(3) perturbation.
    Noisy,
    /// Poses estimated by an external tool, read from a poses file.
    External,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum)]
    variant: AugmentVariant,
    /// Intermediate poses per trajectory edge (INV).
    #[arg(long, default_value_t = 12)]
    k: usize,
    /// Trajectory start index (INV).
    #[arg(long, default_value_t = 0)]
    start: usize,
    #[arg(long, value_enum, default_value_t = RendererKind::Procedural)]
    renderer: RendererKind,
    /// Directory holding requested_poses.json + renders/ (external renderer).
    #[arg(long)]
    renderer_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = LocalizerKind::Gt)]
    localizer: LocalizerKind,
    /// Rotation error in radians (noisy localizer).
    #[arg(long, default_value_t = 0.01)]
    noise_rot: f64,
    /// Translation error in meters (noisy localizer).
    #[arg(long, default_value_t = 0.01)]
    noise_trans: f64,
    /// Poses file of an external localizer.
    #[arg(long)]
    localizer_poses: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Serialize)]
struct AugmentManifest {
    variant: String,
    renderer_id: String,
    localizer_id: Option<String>,
    inv: Option<scenead_core::augment::InvReport>,
    qanv: Option<scenead_core::augment::QanvReport>,
}

fn build_renderer(args: &AugmentArgs, dataset_root: &Path) -> Result<Box<dyn Renderer>> {
    match args.renderer {
        RendererKind::Procedural => {
            let scene = load_scene(dataset_root)
                .context("procedural renderer needs scene.json in the dataset root")?;
            Ok(Box::new(ProceduralRenderer { scene }))
        }
        RendererKind::External => {
            let dir = args
                .renderer_dir
                .clone()
                .context("--renderer-dir is required with --renderer external")?;
            let scene_id = load_scene(dataset_root)
                .map(|s| s.scene_id())
                .unwrap_or_else(|_| "external".to_string());
            Ok(Box::new(ExternalRenderer::load(&dir, scene_id)?))
        }
    }
}

fn build_localizer(args: &AugmentArgs, dataset: &SceneDataset) -> Result<Box<dyn Localizer>> {
    let poses = dataset
        .poses
        .clone()
        .context("dataset has no poses.json; QANV needs recorded poses")?;
    Ok(match args.localizer {
        LocalizerKind::Gt => Box::new(GroundTruthLocalizer { poses }),
        LocalizerKind::Noisy => Box::new(NoisyLocalizer {
            poses,
            seed: resolve_seed(args.seed),
            rotation_err: args.noise_rot,
            translation_err: args.noise_trans,
        }),
        LocalizerKind::External => {
            let path = args
                .localizer_poses
                .clone()
                .context("--localizer-poses is required with --localizer external")?;
            Box::new(ExternalLocalizer::load(path)?)
        }
    })
}

fn cmd_augment(args: AugmentArgs) -> Result<()> {
    let dataset = load_dataset(&args.dataset, AugmentationTag::None)?;
    let renderer = build_renderer(&args, &args.dataset)?;

    let want_inv = matches!(args.variant, AugmentVariant::Inv | AugmentVariant::Both);
    let want_qanv = matches!(args.variant, AugmentVariant::Qanv | AugmentVariant::Both);

    let inv = want_inv
        .then(|| build_inv_augmentation(&dataset, renderer.as_ref(), args.k, args.start))
        .transpose()?;
    let mut localizer_id = None;
    let qanv = if want_qanv {
        let localizer = build_localizer(&args, &dataset)?;
        localizer_id = Some(localizer.backend_id());
        Some(build_qanv_augmentation(&dataset, renderer.as_ref(), localizer.as_ref())?)
    } else {
        None
    };

    if let Some(inv) = &inv {
        println!("inv: rendered {} novel views (k={})", inv.rendered, inv.k);
    }
    if let Some(qanv) = &qanv {
        println!(
            "qanv: rendered {} aligned views, {} localization failures",
            qanv.rendered, qanv.localization_failures
        );
    }
    let variant = match args.variant {
        AugmentVariant::Inv => "inv",
        AugmentVariant::Qanv => "qanv",
        AugmentVariant::Both => "both",
    };
    write_json(
        &args.dataset.join(format!("augment_{variant}.json")),
        &AugmentManifest {
            variant: variant.to_string(),
            renderer_id: renderer.scene_id(),
            localizer_id,
            inv,
            qanv,
        },
    )
}

/// On-disk run configuration: every field explicit, no hidden defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
}

impl RunConfig {
    fn default_for(seed: u64) -> Self {
        let mut model = ModelConfig::new(BackboneKind::TinyRandom {
            divisor: 32,
            style: StageStyle::Grouped,
        });
        model.input_height = 128;
        model.input_width = 128;
        model.seed = seed;
        let train = TrainConfig {
            max_epochs: 30,
            seed,
            ..TrainConfig::default()
        };
        RunConfig { model, train }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON file holding {"model": ModelConfig, "train": TrainConfig}.
    /// Defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Augmentation variant to train on.
    #[arg(long, value_enum)]
    variant: Option<CliTag>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CliTag {
    None,
    Qanv,
    Inv,
    Both,
}

impl From<CliTag> for AugmentationTag {
    fn from(tag: CliTag) -> Self {
        match tag {
            CliTag::None => AugmentationTag::None,
            CliTag::Qanv => AugmentationTag::Qanv,
            CliTag::Inv => AugmentationTag::Inv,
            CliTag::Both => AugmentationTag::Both,
        }
    }
}

fn resolve_run_config(
    config: Option<&PathBuf>,
    seed: Option<u64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    variant: Option<CliTag>,
) -> Result<RunConfig> {
    let mut run = match config {
        Some(path) => read_json(path)?,
        None => RunConfig::default_for(resolve_seed(seed)),
    };
    if let Some(seed) = seed.or_else(|| std::env::var("SCENEAD_SEED").ok()?.parse().ok()) {
        run.model.seed = seed;
        run.train.seed = seed;
    }
    if let Some(epochs) = epochs {
        run.train.max_epochs = epochs;
    }
    if let Some(batch) = batch_size {
        run.train.batch_size = batch;
    }
    if let Some(variant) = variant {
        run.train.augmentation_tag = variant.into();
    }
    Ok(run)
}

/// Point the default model config at the dataset's native image size. An
/// explicit `--config` file always wins.
fn adapt_input_size(run: &mut RunConfig, dataset: &SceneDataset) -> Result<()> {
    let first = dataset
        .train_images
        .first()
        .context("dataset has no training images")?;
    let image = dataset.load_image(first)?;
    run.model.input_height = image.height();
    run.model.input_width = image.width();
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut run = resolve_run_config(
        args.config.as_ref(),
        args.seed,
        args.epochs,
        args.batch_size,
        args.variant,
    )?;
    let dataset = load_dataset(&args.dataset, run.train.augmentation_tag)?;
    if args.config.is_none() {
        adapt_input_size(&mut run, &dataset)?;
    }
    let manifest = train(&run.model, &run.train, &dataset, &args.out)?;
    write_json(&args.out.join("run_config.json"), &run)?;
    println!(
        "trained {} epochs in {:.1}s; best epoch {}; test F1 {:.4}, AUROC {:.4}",
        manifest.per_epoch_train_loss.len(),
        manifest.wall_clock_secs,
        manifest.best_epoch,
        manifest.test_report.pixel_f1,
        manifest.test_report.pixel_auroc
    );
    Ok(())
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

fn cmd_grid(args: GridArgs) -> Result<()> {
    let mut run =
        resolve_run_config(args.config.as_ref(), args.seed, args.epochs, args.batch_size, None)?;
    if args.config.is_none() {
        let dataset = load_dataset(&args.dataset, AugmentationTag::None)?;
        adapt_input_size(&mut run, &dataset)?;
    }
    let report = ablation_grid(&args.dataset, &run.model, &run.train, &args.out)?;
    write_json(&args.out.join("run_config.json"), &run)?;
    print!("{}", render_grid_tables(&report));
    let failed = report.cells.iter().filter(|c| c.error.is_some()).count();
    if failed > 0 {
        bail!("{failed} grid cells failed");
    }
    Ok(())
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Directory for per-query anomaly heatmap PNGs.
    #[arg(long)]
    heatmaps: Option<PathBuf>,
}

fn save_gray_png(values: &ndarray::Array2<f32>, path: &Path) -> Result<()> {
    let (h, w) = values.dim();
    let max = values.iter().copied().fold(0.0f32, f32::max).max(1e-12);
    let mut data = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let v = values[[y, x]] / max;
            for c in 0..3 {
                data[[c, y, x]] = v;
            }
        }
    }
    ImageTensor::new(data, ImageSource::Synthesized).save_png(path)?;
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let device = <InferBackend as Backend>::Device::default();
    let (model, checkpoint) = load_checkpoint::<InferBackend>(&args.checkpoint, &device)?;
    let dataset = load_dataset(&args.dataset, AugmentationTag::None)?;
    let indices: Vec<usize> = (0..dataset.test_images.len()).collect();
    let report = evaluate_on_queries(&model, &dataset, &indices, &device)?;
    let diagnostic = imbalance_demo(&report);
    println!(
        "checkpoint from epoch {}: pixel F1 {:.4}, AUROC {:.4}, optimal threshold {:.4}",
        checkpoint.epoch, report.pixel_f1, report.pixel_auroc, report.optimal_threshold
    );
    if diagnostic.optimistic_auroc {
        println!("note: high AUROC with low F1 — metrics dominated by class imbalance");
    }

    if let Some(dir) = &args.heatmaps {
        std::fs::create_dir_all(dir)?;
        let config = &model.config.0;
        for &i in &indices {
            let image = dataset.load_image(&dataset.test_images[i])?;
            let output = model.forward(image.to_batch::<InferBackend>(&device));
            let maps = anomaly_maps_from_features(
                &output,
                config.input_height,
                config.input_width,
                config.smoothing_sigma,
            );
            let stem = Path::new(&dataset.test_images[i].rel_path)
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("query")
                .to_string();
            save_gray_png(&maps[0].combined, &dir.join(format!("{stem}_heatmap.png")))?;
        }
        println!("wrote {} heatmaps to {}", indices.len(), dir.display());
    }
    write_json(&args.out, &report)
}

#[derive(Args)]
struct ErfArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Random output locations sampled per feature level.
    #[arg(long, default_value_t = 16)]
    locations: usize,
    /// Support threshold as a fraction of the peak gradient magnitude.
    #[arg(long, default_value_t = erf::DEFAULT_TAU)]
    tau: f64,
    #[arg(long)]
    out: PathBuf,
    /// Dataset to draw the probe image from (mid-gray probe when absent).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Directory for ERF magnitude heatmap PNGs.
    #[arg(long)]
    heatmaps: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Serialize)]
struct ErfReportFile {
    tau: f64,
    locations: usize,
    /// Attention-vs-no-attention comparison per feature level (only for
    /// checkpoints trained with attention modules).
    comparisons: Vec<ErfComparison>,
    /// Mean support area per level for the checkpointed model as-is.
    mean_areas: Vec<f64>,
}

fn cmd_erf(args: ErfArgs) -> Result<()> {
    let device = <TrainBackend as Backend>::Device::default();
    let (model, _) = load_checkpoint::<TrainBackend>(&args.checkpoint, &device)?;
    let config = model.config.0.clone();

    let probe = match &args.dataset {
        Some(root) => {
            let dataset = load_dataset(root, AugmentationTag::None)?;
            dataset.load_image(&dataset.test_images[0])?
        }
        None => ImageTensor::constant(0.5, config.input_height, config.input_width),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(resolve_seed(args.seed) ^ 0x00e2_f00d);
    let mut comparisons = Vec::new();
    let mut mean_areas = Vec::new();
    for level in 0..3 {
        let (oh, ow) = (
            config.input_height / (4 << level),
            config.input_width / (4 << level),
        );
        let locations: Vec<(usize, usize)> = (0..args.locations)
            .map(|_| (rng.random_range(0..oh), rng.random_range(0..ow)))
            .collect();

        let mut areas = Vec::new();
        for &loc in &locations {
            let map = erf::compute_erf(&model, &probe, loc, level, args.tau, &device)?;
            areas.push(map.area as f64);
            if let Some(dir) = &args.heatmaps {
                if loc == locations[0] {
                    std::fs::create_dir_all(dir)?;
                    save_gray_png(
                        &map.magnitude,
                        &dir.join(format!("erf_level{level}_{}_{}.png", loc.0, loc.1)),
                    )?;
                }
            }
        }
        mean_areas.push(areas.iter().sum::<f64>() / areas.len().max(1) as f64);

        if config.use_attention_modules {
            // Isolate the attention modules: same weights, gates removed.
            let mut without = model.clone();
            without.student.attention = None;
            without.config.0.use_attention_modules = false;
            let comparison =
                erf::compare_erf(&model, &without, &probe, &locations, level, args.tau, &device)?;
            println!(
                "level {level}: mean ERF area {:.1} with attention vs {:.1} without (ratio {:.3})",
                comparison.mean_area_with, comparison.mean_area_without, comparison.mean_ratio
            );
            comparisons.push(comparison);
        } else {
            println!("level {level}: mean ERF area {:.1}", mean_areas[level]);
        }
    }

    write_json(
        &args.out,
        &ErfReportFile {
            tau: args.tau,
            locations: args.locations,
            comparisons,
            mean_areas,
        },
    )
}

#[derive(Args)]
struct ReportArgs {
    /// grid_report.json produced by `scenead grid`.
    #[arg(long)]
    grid: PathBuf,
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let report: GridReport = read_json(&args.grid)?;
    print!("{}", render_grid_tables(&report));
    Ok(())
}

#[derive(Args)]
struct PosesArgs {
    #[command(subcommand)]
    command: PosesCommand,
}

#[derive(Subcommand)]
enum PosesCommand {
    /// Order poses greedily by camera distance and emit k interpolated
    /// poses per consecutive pair.
    Densify(DensifyArgs),
}

#[derive(Args)]
struct DensifyArgs {
    /// Input poses.json.
    #[arg(long)]
    poses: PathBuf,
    #[arg(long, default_value_t = 12)]
    k: usize,
    /// Trajectory start index.
    #[arg(long, default_value_t = 0)]
    start: usize,
    /// Output poses.json holding only the interpolated poses.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_poses_densify(args: DensifyArgs) -> Result<()> {
    let file = PosesFile::load(&args.poses)?;
    let keys: Vec<&String> = file.poses.keys().collect();
    let poses: Vec<_> = keys
        .iter()
        .map(|k| file.get(k).expect("key from the same map"))
        .collect();
    if poses.is_empty() {
        bail!("{} holds no poses", args.poses.display());
    }
    let trajectory = build_greedy_trajectory(&poses, args.start)?;
    let novel = densify_trajectory(&poses, &trajectory, args.k)?;
    let mut out = PosesFile {
        intrinsics: file.intrinsics.clone(),
        ..PosesFile::default()
    };
    for (i, pose) in novel.iter().enumerate() {
        out.insert(&format!("densified/{i:05}"), pose);
    }
    out.save(&args.out)?;
    println!(
        "densified {} poses -> {} interpolated poses (k={}) in {}",
        poses.len(),
        novel.len(),
        args.k,
        args.out.display()
    );
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match cli.command {
        Command::Fixture(args) => cmd_fixture(args),
        Command::Augment(args) => cmd_augment(args),
        Command::Train(args) => cmd_train(args),
        Command::Grid(args) => cmd_grid(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Erf(args) => cmd_erf(args),
        Command::Report(args) => cmd_report(args),
        Command::Poses(args) => match args.command {
            PosesCommand::Densify(d) => cmd_poses_densify(d),
        },
    }
}
