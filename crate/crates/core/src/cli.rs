//! Command-line front end.
//!
//! Every subcommand resolves its configuration as built-in defaults, then an
//! optional `--config` JSON file, then explicit flags. The resolved config is
//! written next to the command's main output as `<command>.run.json`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use image::{Rgb, RgbImage};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate_patch_classifier, evaluate_score_map, sweep_threshold, sweep_threshold_region, EvalKind, EvalReport,
    Sweep,
};
use crate::inference::{
    anomaly_map, classify_raster, reconstruct_full, segment_raster, threshold, AnomalyMode, Blend, ScoreMap,
};
use crate::io_util::{atomic_write, write_json};
use crate::models::{build, load_model, ModelKind, ModelSpec};
use crate::objective::{ChannelMode, SsimConfig};
use crate::patching::{
    extract_mask_patch, extract_patch, filter_unsupervised, landslide_coverage, make_grid, patch_label, split_cells,
    BorderPolicy, PatchGrid, SplitAssignment, SplitMode, DEFAULT_FILTER_THRESHOLD, DEFAULT_POSITIVE_THRESHOLD,
};
use crate::raster::{encode_mask_png, load_mask, load_raster, save_mask, save_png, standardize, BitDepth, Mask, Raster};
use crate::synthgen::{generate_scene, AnomalyStyle, SceneSpec};
use crate::training::{
    save_checkpoint, train_classifier, train_denoiser, train_segmenter, AdamState, NoiseSpec, TrainOptions,
    TrainReport,
};

#[derive(Parser, Debug)]
#[command(name = "slidekit", version, about = "Landslide detection on tiled rasters")]
pub struct Cli {
    /// Worker threads (falls back to SLIDEKIT_THREADS, then all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic scene, its mask and a spec sidecar.
    Synth(SynthArgs),
    /// Tile a raster into a patch grid with per-cell coverage and labels.
    Tile(TileArgs),
    /// Split grid cells into train and test sets.
    Split(SplitArgs),
    /// Train the patch classifier.
    TrainPatch(SupervisedArgs),
    /// Train the segmenter.
    TrainSeg(SupervisedArgs),
    /// Train the denoiser on coverage-filtered patches.
    TrainAnomaly(AnomalyArgs),
    /// Produce a score map from a trained model.
    Infer(InferArgs),
    /// Score predictions against a ground-truth mask.
    Eval(EvalArgs),
    /// Draw a thresholded score map over a raster.
    Render(RenderArgs),
}

/// Resolves `C` from its defaults, an optional JSON file and the non-null
/// fields of the parsed flags.
pub fn resolve_config<C, A>(config: Option<&Path>, flags: &A) -> Result<C>
where
    C: Default + Serialize + DeserializeOwned,
    A: Serialize,
{
    let mut merged = match serde_json::to_value(C::default())? {
        Value::Object(m) => m,
        _ => unreachable!("configs serialize as objects"),
    };
    if let Some(path) = config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Unreadable {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let file: Value =
            serde_json::from_str(&text).map_err(|e| Error::Usage(format!("config {}: {e}", path.display())))?;
        let Value::Object(file) = file else {
            return Err(Error::Usage(format!("config {} must be a JSON object", path.display())));
        };
        overlay(&mut merged, file);
    }
    if let Value::Object(flags) = serde_json::to_value(flags)? {
        overlay(&mut merged, flags.into_iter().filter(|(_, v)| !v.is_null()).collect());
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| Error::Usage(format!("configuration: {e}")))
}

fn overlay(base: &mut Map<String, Value>, top: Map<String, Value>) {
    for (k, v) in top {
        base.insert(k, v);
    }
}

fn required<'a>(v: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
    v.as_deref().ok_or_else(|| Error::Usage(format!("missing required --{name}")))
}

fn parse_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Unreadable {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Unreadable {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

#[derive(Serialize)]
struct RunLog<'a, C> {
    command: &'a str,
    version: &'a str,
    config: &'a C,
}

/// Writes `<dir>/<command>.run.json`, `dir` being the directory that holds
/// (or is) the command's main output.
fn log_run<C: Serialize>(command: &str, dir: &Path, config: &C) -> Result<()> {
    let log = RunLog {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config,
    };
    log::info!("{command}: {}", serde_json::to_string(config)?);
    write_json(&dir.join(format!("{command}.run.json")), &log)
}

fn parent_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

// ---------------------------------------------------------------- synth

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub texture_octaves: Option<usize>,
    #[arg(long)]
    pub base_period: Option<usize>,
    #[arg(long)]
    pub blob_count: Option<usize>,
    #[arg(long)]
    pub radius_min: Option<f64>,
    #[arg(long)]
    pub radius_max: Option<f64>,
    #[arg(long)]
    pub contrast: Option<f64>,
    /// rough | smooth
    #[arg(long)]
    pub anomaly: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub texture_octaves: usize,
    pub base_period: usize,
    pub blob_count: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub contrast: f64,
    pub anomaly: AnomalyStyle,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let s = SceneSpec::default();
        Self {
            out: None,
            seed: s.seed,
            width: s.width,
            height: s.height,
            channels: s.channels,
            texture_octaves: s.texture_octaves,
            base_period: s.base_period,
            blob_count: s.blob_count,
            radius_min: s.blob_radius_range[0],
            radius_max: s.blob_radius_range[1],
            contrast: s.contrast,
            anomaly: s.anomaly,
        }
    }
}

impl SynthConfig {
    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            width: self.width,
            height: self.height,
            channels: self.channels,
            texture_octaves: self.texture_octaves,
            base_period: self.base_period,
            blob_count: self.blob_count,
            blob_radius_range: [self.radius_min, self.radius_max],
            contrast: self.contrast,
            anomaly: self.anomaly,
            seed: self.seed,
        }
    }
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let cfg: SynthConfig = resolve_config(args.config.as_deref(), args)?;
    let out = required(&cfg.out, "out")?;
    let spec = cfg.scene_spec();
    let (raster, mask) = generate_scene(&spec)?;
    std::fs::create_dir_all(out)?;
    save_png(&raster, &out.join("scene.png"), BitDepth::Eight)?;
    save_mask(&mask, &out.join("mask.png"))?;
    write_json(&out.join("scene.json"), &spec)?;
    log_run("synth", out, &cfg)?;
    println!(
        "wrote {} ({}x{}, {} landslide pixels)",
        out.display(),
        spec.width,
        spec.height,
        mask.count_ones()
    );
    Ok(())
}

// ---------------------------------------------------------------- tile

#[derive(Args, Debug, Serialize)]
pub struct TileArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub raster: Option<PathBuf>,
    /// Ground truth, for per-cell coverage and labels.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Output grid JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    /// drop_partial | pad_reflect
    #[arg(long)]
    pub border_policy: Option<String>,
    #[arg(long)]
    pub positive_threshold: Option<f64>,
    #[arg(long)]
    pub filter_threshold: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TileConfig {
    pub raster: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub patch_size: usize,
    pub stride: usize,
    pub border_policy: BorderPolicy,
    pub positive_threshold: f64,
    pub filter_threshold: f64,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self {
            raster: None,
            mask: None,
            out: None,
            patch_size: 64,
            stride: 64,
            border_policy: BorderPolicy::DropPartial,
            positive_threshold: DEFAULT_POSITIVE_THRESHOLD,
            filter_threshold: DEFAULT_FILTER_THRESHOLD,
        }
    }
}

/// Grid file written by `tile`.
#[derive(Debug, Serialize, Deserialize)]
pub struct TileFile {
    pub grid: PatchGrid,
    #[serde(default)]
    pub coverage: Option<Vec<f64>>,
    #[serde(default)]
    pub labels: Option<Vec<u8>>,
    /// Cells passing the unsupervised coverage filter.
    #[serde(default)]
    pub unsupervised: Option<Vec<usize>>,
}

fn cmd_tile(args: &TileArgs) -> Result<()> {
    let cfg: TileConfig = resolve_config(args.config.as_deref(), args)?;
    let raster = load_raster(required(&cfg.raster, "raster")?)?;
    let out = required(&cfg.out, "out")?;
    let grid = make_grid(raster.width(), raster.height(), cfg.patch_size, cfg.stride, cfg.border_policy)?;
    let mut file = TileFile {
        grid,
        coverage: None,
        labels: None,
        unsupervised: None,
    };
    if let Some(mp) = &cfg.mask {
        let mask = load_mask(mp)?;
        mask.check_dims(raster.width(), raster.height())?;
        let g = &file.grid;
        file.coverage = Some((0..g.len()).map(|i| landslide_coverage(&mask, g, i)).collect::<Result<_>>()?);
        file.labels = Some(
            (0..g.len())
                .map(|i| patch_label(&mask, g, i, cfg.positive_threshold))
                .collect::<Result<_>>()?,
        );
        file.unsupervised = Some(filter_unsupervised(&mask, g, cfg.filter_threshold)?);
    }
    write_json(out, &file)?;
    log_run("tile", parent_dir(out), &cfg)?;
    println!("{} cells -> {}", file.grid.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------- split

#[derive(Args, Debug, Serialize)]
pub struct SplitArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Grid JSON from `tile`.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// random | contiguous
    #[arg(long)]
    pub mode: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub grid: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub ratio: f64,
    pub seed: u64,
    pub mode: SplitMode,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            grid: None,
            out: None,
            ratio: 0.5,
            seed: 0,
            mode: SplitMode::Random,
        }
    }
}

fn cmd_split(args: &SplitArgs) -> Result<()> {
    let cfg: SplitConfig = resolve_config(args.config.as_deref(), args)?;
    let tiles: TileFile = parse_json(required(&cfg.grid, "grid")?)?;
    let out = required(&cfg.out, "out")?;
    let s = split_cells(tiles.grid.len(), cfg.ratio, cfg.seed, cfg.mode)?;
    write_json(out, &s)?;
    log_run("split", parent_dir(out), &cfg)?;
    println!("train {} / test {} -> {}", s.train.len(), s.test.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------- training

/// Flags shared by `train-patch` and `train-seg`.
#[derive(Args, Debug, Serialize)]
pub struct SupervisedArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub raster: Option<PathBuf>,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Grid JSON; without it a non-overlapping grid is built.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Split JSON; without it one is drawn with --ratio and --split-seed.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Output model file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub positive_threshold: Option<f64>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub base_width: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub dilation_rates: Option<Vec<usize>>,
    #[arg(long)]
    pub model_seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub shuffle_seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisedConfig {
    pub raster: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub grid: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub patch_size: usize,
    pub ratio: f64,
    pub split_seed: u64,
    pub positive_threshold: f64,
    pub depth: Option<usize>,
    pub base_width: usize,
    pub dilation_rates: Vec<usize>,
    pub model_seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub shuffle_seed: u64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            raster: None,
            mask: None,
            grid: None,
            split: None,
            out: None,
            patch_size: 64,
            ratio: 0.5,
            split_seed: 0,
            positive_threshold: DEFAULT_POSITIVE_THRESHOLD,
            depth: None,
            base_width: 16,
            dilation_rates: vec![1, 2, 4],
            model_seed: 0,
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-3,
            shuffle_seed: 0,
        }
    }
}

struct SupervisedData {
    raster: Raster,
    mask: Mask,
    grid: PatchGrid,
    split: SplitAssignment,
}

fn supervised_data(cfg: &SupervisedConfig) -> Result<SupervisedData> {
    let raster = standardize(&load_raster(required(&cfg.raster, "raster")?)?);
    let mask = load_mask(required(&cfg.mask, "mask")?)?;
    mask.check_dims(raster.width(), raster.height())?;
    let grid = match &cfg.grid {
        Some(p) => parse_json::<TileFile>(p)?.grid,
        None => make_grid(
            raster.width(),
            raster.height(),
            cfg.patch_size,
            cfg.patch_size,
            BorderPolicy::DropPartial,
        )?,
    };
    if grid.width != raster.width() || grid.height != raster.height() || grid.patch_size != cfg.patch_size {
        return Err(Error::shape("grid does not match the raster or patch size"));
    }
    let split = match &cfg.split {
        Some(p) => parse_json::<SplitAssignment>(p)?,
        None => split_cells(grid.len(), cfg.ratio, cfg.split_seed, SplitMode::Random)?,
    };
    if let Some(&bad) = split.train.iter().chain(&split.test).find(|&&i| i >= grid.len()) {
        return Err(Error::OutOfRange {
            index: bad,
            len: grid.len(),
        });
    }
    if split.train.is_empty() {
        return Err(Error::Empty("train split is empty".into()));
    }
    Ok(SupervisedData {
        raster,
        mask,
        grid,
        split,
    })
}

fn train_options(epochs: usize, batch_size: usize, seed: u64) -> TrainOptions {
    TrainOptions {
        epochs,
        batch_size,
        seed,
        max_steps: None,
    }
}

fn finish_training(
    command: &str,
    out: &Path,
    model: &crate::models::Model,
    opt: &AdamState,
    report: &TrainReport,
    cfg: &impl Serialize,
) -> Result<()> {
    save_checkpoint(model, opt, out)?;
    write_json(&report_path(out), report)?;
    log_run(command, parent_dir(out), cfg)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let last = report.loss_history.last().copied().unwrap_or(f64::NAN);
    println!(
        "{} steps, final loss {last:.6}, {:.1}s -> {}",
        report.steps,
        report.wall_time,
        out.display()
    );
    Ok(())
}

/// Training report path next to a model file.
pub fn report_path(model: &Path) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(".report.json");
    s.into()
}

fn cmd_train_patch(args: &SupervisedArgs) -> Result<()> {
    let cfg: SupervisedConfig = resolve_config(args.config.as_deref(), args)?;
    let out = required(&cfg.out, "out")?.to_path_buf();
    let d = supervised_data(&cfg)?;
    let patches = d
        .split
        .train
        .iter()
        .map(|&i| extract_patch(&d.raster, &d.grid, i))
        .collect::<Result<Vec<_>>>()?;
    let labels = d
        .split
        .train
        .iter()
        .map(|&i| patch_label(&d.mask, &d.grid, i, cfg.positive_threshold))
        .collect::<Result<Vec<_>>>()?;
    let mut spec = ModelSpec::patch_classifier(d.raster.channels())
        .with_width(cfg.base_width)
        .with_patch_size(cfg.patch_size)
        .with_seed(cfg.model_seed);
    if let Some(depth) = cfg.depth {
        spec = spec.with_depth(depth);
    }
    let model = build(&spec)?;
    let mut opt = AdamState::new(&model).with_learning_rate(cfg.learning_rate);
    let opts = train_options(cfg.epochs, cfg.batch_size, cfg.shuffle_seed);
    let (model, report) = train_classifier(model, &patches, &labels, &opts, &mut opt)?;
    finish_training("train-patch", &out, &model, &opt, &report, &cfg)
}

fn cmd_train_seg(args: &SupervisedArgs) -> Result<()> {
    let cfg: SupervisedConfig = resolve_config(args.config.as_deref(), args)?;
    let out = required(&cfg.out, "out")?.to_path_buf();
    let d = supervised_data(&cfg)?;
    let p = cfg.patch_size;
    let mut patches = Vec::with_capacity(d.split.train.len());
    let mut masks = Vec::with_capacity(d.split.train.len());
    for &i in &d.split.train {
        patches.push(extract_patch(&d.raster, &d.grid, i)?);
        masks.push(Mask::new(p, p, extract_mask_patch(&d.mask, &d.grid, i)?)?);
    }
    let mut spec = ModelSpec::segmenter(d.raster.channels())
        .with_width(cfg.base_width)
        .with_patch_size(p)
        .with_seed(cfg.model_seed);
    spec.dilation_rates = cfg.dilation_rates.clone();
    if let Some(depth) = cfg.depth {
        spec = spec.with_depth(depth);
    }
    let model = build(&spec)?;
    let mut opt = AdamState::new(&model).with_learning_rate(cfg.learning_rate);
    let opts = train_options(cfg.epochs, cfg.batch_size, cfg.shuffle_seed);
    let (model, report) = train_segmenter(model, &patches, &masks, &opts, &mut opt)?;
    finish_training("train-seg", &out, &model, &opt, &report, &cfg)
}

#[derive(Args, Debug, Serialize)]
pub struct AnomalyArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub raster: Option<PathBuf>,
    /// Ground truth used only for the coverage filter.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub filter_threshold: Option<f64>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub base_width: Option<usize>,
    #[arg(long)]
    pub model_seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub shuffle_seed: Option<u64>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub noise_seed: Option<u64>,
    #[arg(long)]
    pub window_size: Option<usize>,
    #[arg(long)]
    pub window_sigma: Option<f64>,
    /// per_channel | luminance
    #[arg(long)]
    pub channel_mode: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnomalyConfig {
    pub raster: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub patch_size: usize,
    pub stride: usize,
    pub filter_threshold: f64,
    pub depth: usize,
    pub base_width: usize,
    pub model_seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub shuffle_seed: u64,
    pub noise_sigma: f64,
    pub noise_seed: u64,
    pub window_size: usize,
    pub window_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub channel_mode: ChannelMode,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        let s = SsimConfig::default();
        Self {
            raster: None,
            mask: None,
            out: None,
            patch_size: 64,
            stride: 32,
            filter_threshold: DEFAULT_FILTER_THRESHOLD,
            depth: 3,
            base_width: 16,
            model_seed: 0,
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-3,
            shuffle_seed: 0,
            noise_sigma: 1.0,
            noise_seed: 0,
            window_size: s.window_size,
            window_sigma: s.window_sigma,
            k1: s.k1,
            k2: s.k2,
            channel_mode: s.channel_mode,
        }
    }
}

impl AnomalyConfig {
    pub fn ssim(&self) -> SsimConfig {
        SsimConfig {
            window_size: self.window_size,
            window_sigma: self.window_sigma,
            k1: self.k1,
            k2: self.k2,
            channel_mode: self.channel_mode,
            ..SsimConfig::default()
        }
    }
}

fn cmd_train_anomaly(args: &AnomalyArgs) -> Result<()> {
    let cfg: AnomalyConfig = resolve_config(args.config.as_deref(), args)?;
    let out = required(&cfg.out, "out")?.to_path_buf();
    let raster = standardize(&load_raster(required(&cfg.raster, "raster")?)?);
    let grid = make_grid(
        raster.width(),
        raster.height(),
        cfg.patch_size,
        cfg.stride,
        BorderPolicy::DropPartial,
    )?;
    let cells = match &cfg.mask {
        Some(mp) => {
            let mask = load_mask(mp)?;
            mask.check_dims(raster.width(), raster.height())?;
            filter_unsupervised(&mask, &grid, cfg.filter_threshold)?
        }
        None => {
            log::warn!("no mask given; training on all {} patches unfiltered", grid.len());
            (0..grid.len()).collect()
        }
    };
    if cells.is_empty() {
        return Err(Error::Empty(format!(
            "no patches pass the unsupervised training filter (landslide coverage < {:.0}%) out of {} cells",
            cfg.filter_threshold * 100.0,
            grid.len()
        )));
    }
    let patches = cells
        .iter()
        .map(|&i| extract_patch(&raster, &grid, i))
        .collect::<Result<Vec<_>>>()?;
    let spec = ModelSpec::denoiser(raster.channels())
        .with_depth(cfg.depth)
        .with_width(cfg.base_width)
        .with_patch_size(cfg.patch_size)
        .with_seed(cfg.model_seed);
    let model = build(&spec)?;
    let mut opt = AdamState::new(&model).with_learning_rate(cfg.learning_rate);
    let opts = train_options(cfg.epochs, cfg.batch_size, cfg.shuffle_seed);
    let noise = NoiseSpec::gaussian(cfg.noise_sigma, cfg.noise_seed);
    let (model, report) = train_denoiser(model, &patches, &noise, &opts, &mut opt, &cfg.ssim())?;
    finish_training("train-anomaly", &out, &model, &opt, &report, &cfg)
}

// ---------------------------------------------------------------- infer

#[derive(Args, Debug, Serialize)]
pub struct InferArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub raster: Option<PathBuf>,
    /// Output score map PNG (a .json sidecar is written beside it).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Window stride; defaults to half the patch size (full patch for the
    /// classifier).
    #[arg(long)]
    pub stride: Option<usize>,
    /// hann | average
    #[arg(long)]
    pub blend: Option<String>,
    /// ssim | residual (denoiser only)
    #[arg(long)]
    pub mode: Option<String>,
    /// Also write the denoiser reconstruction (raw raster) here.
    #[arg(long)]
    pub recon: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub model: Option<PathBuf>,
    pub raster: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub stride: Option<usize>,
    pub blend: Blend,
    pub mode: AnomalyMode,
    pub recon: Option<PathBuf>,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            model: None,
            raster: None,
            out: None,
            stride: None,
            blend: Blend::Hann,
            mode: AnomalyMode::Ssim,
            recon: None,
        }
    }
}

fn cmd_infer(args: &InferArgs) -> Result<()> {
    let cfg: InferConfig = resolve_config(args.config.as_deref(), args)?;
    let model_path = required(&cfg.model, "model")?;
    let raster_path = required(&cfg.raster, "raster")?;
    let out = required(&cfg.out, "out")?;
    let model = load_model(model_path)?;
    let raster = standardize(&load_raster(raster_path)?);
    let p = model.spec().patch_size;
    let sm = match model.kind() {
        ModelKind::Denoiser => {
            let recon = reconstruct_full(&model, &raster, p, cfg.stride.unwrap_or(p / 2), cfg.blend)?;
            if let Some(rp) = &cfg.recon {
                crate::raster::save_raw(&recon, rp)?;
            }
            let ssim = SsimConfig::default();
            anomaly_map(&raster, &recon, cfg.mode, &ssim)?
        }
        ModelKind::Segmenter => segment_raster(&model, &raster, p, cfg.stride.unwrap_or(p / 2), cfg.blend)?,
        ModelKind::PatchClassifier => {
            let grid = make_grid(
                raster.width(),
                raster.height(),
                p,
                cfg.stride.unwrap_or(p),
                BorderPolicy::PadReflect,
            )?;
            classify_raster(&model, &raster, &grid)?
        }
    };
    sm.save(out, &raster_path.display().to_string(), serde_json::to_value(&cfg)?)?;
    log_run("infer", parent_dir(out), &cfg)?;
    println!("{:?} score map -> {}", sm.provenance(), out.display());
    Ok(())
}

// ---------------------------------------------------------------- eval

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Ground-truth mask.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Score map PNG from `infer`.
    #[arg(long)]
    pub score: Option<PathBuf>,
    /// Binary prediction mask PNG (alternative to --score).
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Patch classifier to evaluate on the test split (with --raster).
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub raster: Option<PathBuf>,
    /// Grid and split restrict evaluation to test cells.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Fixed cutoff for score maps; without it the threshold is swept.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub positive_threshold: Option<f64>,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Output report JSON (a .txt table is written beside it).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Row label in the text table.
    #[arg(long)]
    pub label: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub mask: Option<PathBuf>,
    pub score: Option<PathBuf>,
    pub pred: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub raster: Option<PathBuf>,
    pub grid: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub threshold: Option<f64>,
    pub steps: usize,
    pub positive_threshold: f64,
    pub ratio: f64,
    pub split_seed: u64,
    pub out: Option<PathBuf>,
    pub label: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mask: None,
            score: None,
            pred: None,
            model: None,
            raster: None,
            grid: None,
            split: None,
            threshold: None,
            steps: 101,
            positive_threshold: DEFAULT_POSITIVE_THRESHOLD,
            ratio: 0.5,
            split_seed: 0,
            out: None,
            label: "model (test)".into(),
        }
    }
}

/// Report file written by `eval`.
#[derive(Debug, Serialize, Deserialize)]
pub struct EvalOutput {
    pub report: EvalReport,
    #[serde(default)]
    pub sweep: Option<Sweep>,
}

/// Pixels of the test cells, or every pixel without a grid/split.
fn test_region(cfg: &EvalConfig, w: usize, h: usize) -> Result<Option<Mask>> {
    let (Some(gp), Some(sp)) = (&cfg.grid, &cfg.split) else {
        if cfg.grid.is_some() != cfg.split.is_some() {
            return Err(Error::Usage("--grid and --split go together".into()));
        }
        return Ok(None);
    };
    let grid = parse_json::<TileFile>(gp)?.grid;
    let split: SplitAssignment = parse_json(sp)?;
    if (grid.width, grid.height) != (w, h) {
        return Err(Error::shape("grid does not match the mask"));
    }
    let mut region = Mask::zeros(w, h);
    for &i in &split.test {
        let c = grid.cell(i)?;
        for y in c.row..(c.row + grid.patch_size).min(h) {
            for x in c.col..(c.col + grid.patch_size).min(w) {
                region.set(x, y, true);
            }
        }
    }
    Ok(Some(region))
}

fn select(values: &[u8], region: Option<&Mask>) -> Vec<u8> {
    match region {
        Some(r) => values.iter().zip(r.data()).filter(|(_, &k)| k == 1).map(|(&v, _)| v).collect(),
        None => values.to_vec(),
    }
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let cfg: EvalConfig = resolve_config(args.config.as_deref(), args)?;
    let out = required(&cfg.out, "out")?;
    let truth = load_mask(required(&cfg.mask, "mask")?)?;
    let result = if let Some(mp) = &cfg.model {
        let model = load_model(mp)?;
        let raster = standardize(&load_raster(required(&cfg.raster, "raster")?)?);
        truth.check_dims(raster.width(), raster.height())?;
        let p = model.spec().patch_size;
        let grid = match &cfg.grid {
            Some(g) => parse_json::<TileFile>(g)?.grid,
            None => make_grid(raster.width(), raster.height(), p, p, BorderPolicy::DropPartial)?,
        };
        let split = match &cfg.split {
            Some(s) => parse_json::<SplitAssignment>(s)?,
            None => split_cells(grid.len(), cfg.ratio, cfg.split_seed, SplitMode::Random)?,
        };
        let labels = (0..grid.len())
            .map(|i| patch_label(&truth, &grid, i, cfg.positive_threshold))
            .collect::<Result<Vec<_>>>()?;
        EvalOutput {
            report: evaluate_patch_classifier(&model, &raster, &grid, &split.test, &labels)?,
            sweep: None,
        }
    } else {
        let region = test_region(&cfg, truth.width(), truth.height())?;
        match (&cfg.score, &cfg.pred) {
            (Some(sp), None) => {
                let (sm, _) = ScoreMap::load(sp)?;
                truth.check_dims(sm.width(), sm.height())?;
                let sweep = match &region {
                    Some(r) => sweep_threshold_region(&sm, &truth, r, cfg.steps)?,
                    None => sweep_threshold(&sm, &truth, cfg.steps)?,
                };
                let t = cfg.threshold.unwrap_or(sweep.best_threshold);
                let report = match &region {
                    Some(r) => {
                        let pred = threshold(&sm, t)?;
                        EvalReport::from_labels(
                            EvalKind::Pixel,
                            &select(pred.data(), Some(r)),
                            &select(truth.data(), Some(r)),
                            t,
                        )?
                    }
                    None => evaluate_score_map(&sm, &truth, t)?,
                };
                EvalOutput {
                    report,
                    sweep: Some(sweep),
                }
            }
            (None, Some(pp)) => {
                let pred = load_mask(pp)?;
                truth.check_dims(pred.width(), pred.height())?;
                let r = region.as_ref();
                EvalOutput {
                    report: EvalReport::from_labels(
                        EvalKind::Pixel,
                        &select(pred.data(), r),
                        &select(truth.data(), r),
                        0.5,
                    )?,
                    sweep: None,
                }
            }
            _ => return Err(Error::Usage("give exactly one of --score, --pred or --model".into())),
        }
    };
    write_json(out, &result)?;
    let table = result.report.render_table(&cfg.label);
    atomic_write(&out.with_extension("txt"), table.as_bytes())?;
    log_run("eval", parent_dir(out), &cfg)?;
    print!("{table}");
    if let Some(s) = &result.sweep {
        if let (Some(f), Some(t)) = (s.best_foreground_iou, s.best_foreground_threshold) {
            println!("best foreground IOU {f:.4} at threshold {t:.3}");
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- render

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Palette {
    #[default]
    Red,
    Yellow,
    Magenta,
    Cyan,
}

impl Palette {
    pub fn rgb(self) -> [u8; 3] {
        match self {
            Palette::Red => [230, 30, 30],
            Palette::Yellow => [250, 210, 20],
            Palette::Magenta => [220, 40, 200],
            Palette::Cyan => [20, 200, 230],
        }
    }
}

/// Height of the legend strip under a rendered overlay.
pub const LEGEND_HEIGHT: usize = 12;
const ALPHA: f64 = 0.5;

/// Grayscale base (channel mean, min–max scaled to 0..255).
pub fn grayscale_base(r: &Raster) -> Vec<u8> {
    let (w, h, c) = (r.width(), r.height(), r.channels());
    let lum: Vec<f64> = (0..w * h)
        .map(|i| r.data()[i * c..(i + 1) * c].iter().map(|&v| v as f64).sum::<f64>() / c as f64)
        .collect();
    let (lo, hi) = lum.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    lum.iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 128 })
        .collect()
}

fn tint(base: u8, colour: u8) -> u8 {
    ((1.0 - ALPHA) * base as f64 + ALPHA * colour as f64).round() as u8
}

/// Overlay of `sm >= t` on a grayscale rendering of `r`, with a legend strip
/// (gray ramp, then the tint over mid-gray) appended below.
pub fn render_overlay(r: &Raster, sm: &ScoreMap, t: f64, palette: Palette) -> Result<RgbImage> {
    if (r.width(), r.height()) != (sm.width(), sm.height()) {
        return Err(Error::shape(format!(
            "raster {}x{} vs score map {}x{}",
            r.width(),
            r.height(),
            sm.width(),
            sm.height()
        )));
    }
    let hit = threshold(sm, t)?;
    let (w, h) = (r.width(), r.height());
    let base = grayscale_base(r);
    let col = palette.rgb();
    let mut img = RgbImage::new(w as u32, (h + LEGEND_HEIGHT) as u32);
    for y in 0..h {
        for x in 0..w {
            let g = base[y * w + x];
            let px = if hit.get(x, y) == 1 {
                [tint(g, col[0]), tint(g, col[1]), tint(g, col[2])]
            } else {
                [g, g, g]
            };
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    let half = w / 2;
    for y in h..h + LEGEND_HEIGHT {
        for x in 0..w {
            let px = if x < half {
                let g = (x * 255 / half.max(1)) as u8;
                [g, g, g]
            } else {
                [tint(128, col[0]), tint(128, col[1]), tint(128, col[2])]
            };
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    Ok(img)
}

#[derive(Args, Debug, Serialize)]
pub struct RenderArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub raster: Option<PathBuf>,
    #[arg(long)]
    pub score: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// red | yellow | magenta | cyan
    #[arg(long)]
    pub palette: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the thresholded mask PNG here.
    #[arg(long)]
    pub mask_out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub raster: Option<PathBuf>,
    pub score: Option<PathBuf>,
    pub threshold: f64,
    pub palette: Palette,
    pub out: Option<PathBuf>,
    pub mask_out: Option<PathBuf>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            raster: None,
            score: None,
            threshold: 0.5,
            palette: Palette::Red,
            out: None,
            mask_out: None,
        }
    }
}

pub fn encode_rgb_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| Error::Unsupported(e.to_string()))?;
    Ok(buf.into_inner())
}

fn cmd_render(args: &RenderArgs) -> Result<()> {
    let cfg: RenderConfig = resolve_config(args.config.as_deref(), args)?;
    let raster = load_raster(required(&cfg.raster, "raster")?)?;
    let (sm, _) = ScoreMap::load(required(&cfg.score, "score")?)?;
    let out = required(&cfg.out, "out")?;
    let img = render_overlay(&raster, &sm, cfg.threshold, cfg.palette)?;
    atomic_write(out, &encode_rgb_png(&img)?)?;
    if let Some(mp) = &cfg.mask_out {
        atomic_write(mp, &encode_mask_png(&threshold(&sm, cfg.threshold)?)?)?;
    }
    log_run("render", parent_dir(out), &cfg)?;
    println!("overlay -> {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------- entry

fn configure_threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("SLIDEKIT_THREADS") {
            Ok(v) => Some(
                v.trim()
                    .parse()
                    .map_err(|_| Error::Usage(format!("SLIDEKIT_THREADS={v:?} is not a count")))?,
            ),
            Err(_) => None,
        },
    };
    if n == Some(0) {
        return Err(Error::Usage("thread count must be >= 1".into()));
    }
    if let Some(n) = n {
        // A pool built earlier in the same process wins; only the first
        // configuration takes effect.
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::debug!("thread pool already initialized");
        }
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    configure_threads(cli.threads)?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Tile(a) => cmd_tile(a),
        Command::Split(a) => cmd_split(a),
        Command::TrainPatch(a) => cmd_train_patch(a),
        Command::TrainSeg(a) => cmd_train_seg(a),
        Command::TrainAnomaly(a) => cmd_train_anomaly(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Render(a) => cmd_render(a),
    }
}

/// Parses `args`, runs the command and returns the process exit status:
/// 0 success, 1 usage error, 2 data error, 3 numeric failure.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("slidekit").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_config_file_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 3, "ratio": 0.25}"#).unwrap();
        let Command::Split(a) = parse(&["split", "--seed", "9"]).command else { unreachable!() };
        let cfg: SplitConfig = resolve_config(Some(&path), &a).unwrap();
        assert_eq!((cfg.seed, cfg.ratio, cfg.mode), (9, 0.25, SplitMode::Random));
    }

    #[test]
    fn unknown_config_key_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"strid": 16}"#).unwrap();
        let Command::Split(a) = parse(&["split"]).command else { unreachable!() };
        let err = resolve_config::<SplitConfig, _>(Some(&path), &a).unwrap_err();
        assert_eq!(err.exit_code(), 1, "{err}");
    }

    #[test]
    fn bad_enum_flag_is_a_usage_error() {
        let Command::Tile(a) = parse(&["tile", "--border-policy", "wrap"]).command else { unreachable!() };
        let err = resolve_config::<TileConfig, _>(None, &a).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn unknown_flag_exits_one() {
        assert_eq!(main_with_args(["slidekit", "synth", "--bogus", "1"]), 1);
        assert_eq!(main_with_args(["slidekit", "frobnicate"]), 1);
    }

    #[test]
    fn missing_required_path_exits_one() {
        assert_eq!(main_with_args(["slidekit", "synth"]), 1);
    }

    fn raster(w: usize, h: usize) -> Raster {
        Raster::new(w, h, 1, (0..w * h).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn zero_scores_render_plain_base() {
        let r = raster(6, 4);
        let sm = ScoreMap::new(6, 4, vec![0.0; 24], crate::inference::Provenance::SegProb).unwrap();
        let img = render_overlay(&r, &sm, 0.5, Palette::Red).unwrap();
        assert_eq!(img.height() as usize, 4 + LEGEND_HEIGHT);
        let base = grayscale_base(&r);
        for y in 0..4 {
            for x in 0..6 {
                let g = base[y * 6 + x];
                assert_eq!(img.get_pixel(x as u32, y as u32).0, [g, g, g]);
            }
        }
    }
}
