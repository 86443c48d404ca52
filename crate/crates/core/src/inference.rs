//! Whole-raster prediction by sliding windows, anomaly scoring and
//! thresholding.

use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::{atomic_write, write_json};
use crate::models::{Model, ModelKind};
use crate::objective::{dynamic_range, ssim_value, ChannelMode, SsimConfig};
use crate::patching::{extract_patch, make_grid, BorderPolicy, PatchGrid};
use crate::raster::{Mask, Raster};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    AnomalySsim,
    AnomalyResidual,
    SegProb,
    PatchProb,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Blend {
    Average,
    #[default]
    Hann,
}

/// Per-pixel scores in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    width: usize,
    height: usize,
    values: Vec<f32>,
    provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSidecar {
    pub provenance: Provenance,
    pub source: String,
    pub params: serde_json::Value,
}

impl ScoreMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>, provenance: Provenance) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::shape(format!(
                "{} scores for {width}x{height}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("score {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            values,
            provenance,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// 16-bit grayscale PNG, score × 65535.
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let px: Vec<u16> = self.values.iter().map(|&v| (v as f64 * 65535.0).round() as u16).collect();
        let buf = ImageBuffer::<Luma<u16>, _>::from_raw(self.width as u32, self.height as u32, px)
            .expect("buffer length matches dims");
        let mut out = std::io::Cursor::new(Vec::new());
        DynamicImage::ImageLuma16(buf)
            .write_to(&mut out, ImageFormat::Png)
            .map_err(|e| Error::Unsupported(e.to_string()))?;
        Ok(out.into_inner())
    }

    /// Writes the PNG and its `.json` sidecar next to it.
    pub fn save(&self, path: &Path, source: &str, params: serde_json::Value) -> Result<()> {
        atomic_write(path, &self.encode_png()?)?;
        let sidecar = ScoreSidecar {
            provenance: self.provenance,
            source: source.to_string(),
            params,
        };
        write_json(&sidecar_path(path), &sidecar)
    }

    pub fn load(path: &Path) -> Result<(Self, ScoreSidecar)> {
        let unreadable = |p: &Path, e: String| Error::Unreadable {
            path: p.to_path_buf(),
            reason: e,
        };
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| unreadable(&side, e.to_string()))?;
        let sidecar: ScoreSidecar = serde_json::from_str(&text).map_err(|e| unreadable(&side, e.to_string()))?;
        let bytes = std::fs::read(path).map_err(|e| unreadable(path, e.to_string()))?;
        let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
            .map_err(|e| unreadable(path, e.to_string()))?;
        let DynamicImage::ImageLuma16(buf) = img else {
            return Err(Error::Unsupported("score maps are 16-bit grayscale PNGs".into()));
        };
        let (w, h) = (buf.width() as usize, buf.height() as usize);
        let values = buf.into_raw().into_iter().map(|v| (v as f64 / 65535.0) as f32).collect();
        Ok((Self::new(w, h, values, sidecar.provenance)?, sidecar))
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Separable patch weights, row-major `P×P`. Hann uses
/// `sin²(π (i + ½) / P)`, which is positive everywhere.
pub fn blend_weights(p: usize, blend: Blend) -> Vec<f64> {
    let w1: Vec<f64> = match blend {
        Blend::Average => vec![1.0; p],
        Blend::Hann => (0..p)
            .map(|i| (std::f64::consts::PI * (i as f64 + 0.5) / p as f64).sin().powi(2))
            .collect(),
    };
    let mut w = Vec::with_capacity(p * p);
    for wy in &w1 {
        for wx in &w1 {
            w.push(wy * wx);
        }
    }
    w
}

/// Weighted sums of `[C,P,P]` patch outputs over a grid. Only in-bounds
/// pixels of each cell contribute; reflected padding is discarded.
pub struct BlendAccumulator {
    width: usize,
    height: usize,
    channels: usize,
    sum: Vec<f64>,
    weight: Vec<f64>,
}

impl BlendAccumulator {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            sum: vec![0.0; channels * width * height],
            weight: vec![0.0; width * height],
        }
    }

    pub fn add(&mut self, grid: &PatchGrid, cell: usize, patch: &Tensor<f32>, weights: &[f64]) -> Result<()> {
        let c = grid.cell(cell)?;
        let p = grid.patch_size;
        if patch.shape() != [self.channels, p, p] || weights.len() != p * p {
            return Err(Error::shape(format!(
                "patch {:?} for {} channels, size {p}",
                patch.shape(),
                self.channels
            )));
        }
        let plane = self.width * self.height;
        let d = patch.data();
        for py in 0..p.min(self.height.saturating_sub(c.row)) {
            let y = c.row + py;
            for px in 0..p.min(self.width.saturating_sub(c.col)) {
                let x = c.col + px;
                let wgt = weights[py * p + px];
                let at = y * self.width + x;
                self.weight[at] += wgt;
                for ch in 0..self.channels {
                    self.sum[ch * plane + at] += wgt * d[(ch * p + py) * p + px] as f64;
                }
            }
        }
        Ok(())
    }

    /// Normalized `[C,H,W]` planes; uncovered pixels are 0.
    pub fn finish(self) -> Vec<f64> {
        let plane = self.width * self.height;
        let mut out = self.sum;
        for (i, v) in out.iter_mut().enumerate() {
            let w = self.weight[i % plane];
            *v = if w > 0.0 { *v / w } else { 0.0 };
        }
        out
    }

    pub fn coverage(&self) -> &[f64] {
        &self.weight
    }
}

/// Cells evaluated per parallel chunk; bounds memory on large rasters.
const CHUNK: usize = 64;

fn sliding<F>(r: &Raster, grid: &PatchGrid, out_channels: usize, blend: Blend, f: F) -> Result<Vec<f64>>
where
    F: Fn(Tensor<f32>) -> Result<Tensor<f32>> + Sync,
{
    let weights = blend_weights(grid.patch_size, blend);
    let mut acc = BlendAccumulator::new(r.width(), r.height(), out_channels);
    let cells: Vec<usize> = (0..grid.len()).collect();
    for chunk in cells.chunks(CHUNK) {
        let outs: Vec<Tensor<f32>> = chunk
            .par_iter()
            .map(|&i| f(extract_patch(r, grid, i)?))
            .collect::<Result<_>>()?;
        for (&i, out) in chunk.iter().zip(&outs) {
            acc.add(grid, i, out, &weights)?;
        }
    }
    Ok(acc.finish())
}

fn window_grid(model: &Model, r: &Raster, patch_size: usize, stride: usize) -> Result<PatchGrid> {
    if stride == 0 || stride > patch_size {
        return Err(Error::invalid(format!("stride {stride} must be in 1..={patch_size}")));
    }
    if model.spec().patch_size != patch_size {
        return Err(Error::shape(format!(
            "model trained on {}-pixel patches, asked for {patch_size}",
            model.spec().patch_size
        )));
    }
    if r.channels() != model.spec().in_channels {
        return Err(Error::shape(format!(
            "model takes {} channels, raster has {}",
            model.spec().in_channels,
            r.channels()
        )));
    }
    if r.width() < patch_size || r.height() < patch_size {
        return Err(Error::invalid(format!(
            "raster {}x{} smaller than patch size {patch_size}",
            r.width(),
            r.height()
        )));
    }
    make_grid(r.width(), r.height(), patch_size, stride, BorderPolicy::PadReflect)
}

fn planes_to_raster(w: usize, h: usize, c: usize, planes: &[f64]) -> Result<Raster> {
    let plane = w * h;
    let mut data = Vec::with_capacity(c * plane);
    for i in 0..plane {
        for ch in 0..c {
            data.push(planes[ch * plane + i] as f32);
        }
    }
    Raster::new(w, h, c, data)
}

/// Denoiser output over the whole raster. `r` must be in the units the
/// model was trained on (standardized); no noise is added.
pub fn reconstruct_full(model: &Model, r: &Raster, patch_size: usize, stride: usize, blend: Blend) -> Result<Raster> {
    if model.kind() != ModelKind::Denoiser {
        return Err(Error::invalid("reconstruct_full needs a denoiser"));
    }
    let grid = window_grid(model, r, patch_size, stride)?;
    let planes = sliding(r, &grid, r.channels(), blend, |p| model.forward(&p))?;
    planes_to_raster(r.width(), r.height(), r.channels(), &planes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyMode {
    Ssim,
    Residual,
}

/// Anomaly scores from the discrepancy between `x` and its reconstruction.
/// SSIM mode scores `(1 - SSIM)/2` averaged over channels, with the dynamic
/// range taken from `x`; residual mode scores the channel-mean `|x - recon|`
/// divided by its maximum.
pub fn anomaly_map(x: &Raster, recon: &Raster, mode: AnomalyMode, ssim_cfg: &SsimConfig) -> Result<ScoreMap> {
    if (x.width(), x.height(), x.channels()) != (recon.width(), recon.height(), recon.channels()) {
        return Err(Error::shape(format!(
            "input {}x{}x{} vs reconstruction {}x{}x{}",
            x.width(),
            x.height(),
            x.channels(),
            recon.width(),
            recon.height(),
            recon.channels()
        )));
    }
    let (w, h, c) = (x.width(), x.height(), x.channels());
    let xt = x.to_tensor::<f64>();
    let rt = recon.to_tensor::<f64>();
    match mode {
        AnomalyMode::Ssim => {
            let cfg = ssim_cfg.with_dynamic_range(dynamic_range([&xt]));
            let plane = w * h;
            let mut acc = vec![0.0f64; plane];
            let n_maps = match cfg.channel_mode {
                ChannelMode::PerChannel => {
                    // One channel at a time keeps peak memory at a single plane.
                    for ch in 0..c {
                        let slice = |t: &Tensor<f64>| {
                            Tensor::new(&[1, h, w], t.data()[ch * plane..(ch + 1) * plane].to_vec())
                        };
                        let (_, map) = ssim_value(&slice(&xt)?, &slice(&rt)?, &cfg)?;
                        acc.iter_mut().zip(map.data()).for_each(|(a, m)| *a += m);
                    }
                    c
                }
                ChannelMode::Luminance => {
                    let (_, map) = ssim_value(&xt, &rt, &cfg)?;
                    acc.iter_mut().zip(map.data()).for_each(|(a, m)| *a += m);
                    1
                }
            };
            let values = acc
                .iter()
                .map(|s| ((1.0 - s / n_maps as f64) / 2.0).clamp(0.0, 1.0) as f32)
                .collect();
            ScoreMap::new(w, h, values, Provenance::AnomalySsim)
        }
        AnomalyMode::Residual => {
            let plane = w * h;
            let mut res = vec![0.0f64; plane];
            for ch in 0..c {
                let (a, b) = (&xt.data()[ch * plane..], &rt.data()[ch * plane..]);
                for i in 0..plane {
                    res[i] += (a[i] - b[i]).abs() / c as f64;
                }
            }
            let max = res.iter().cloned().fold(0.0, f64::max);
            if !max.is_finite() {
                return Err(Error::Numeric("non-finite reconstruction residual".into()));
            }
            let values = res
                .iter()
                .map(|v| if max > 0.0 { (v / max).clamp(0.0, 1.0) as f32 } else { 0.0 })
                .collect();
            ScoreMap::new(w, h, values, Provenance::AnomalyResidual)
        }
    }
}

/// Class 1 wherever `score >= t`.
pub fn threshold(sm: &ScoreMap, t: f64) -> Result<Mask> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("threshold {t} outside [0, 1]")));
    }
    let t = t as f32;
    let data = sm.values.iter().map(|&v| (v >= t) as u8).collect();
    Mask::new(sm.width, sm.height, data)
}

/// Each cell's patch probability painted over its in-bounds pixels, with
/// overlaps averaged. Pixels no cell covers score 0.
pub fn classify_raster(model: &Model, r: &Raster, grid: &PatchGrid) -> Result<ScoreMap> {
    if model.kind() != ModelKind::PatchClassifier {
        return Err(Error::invalid("classify_raster needs a patch classifier"));
    }
    if grid.is_empty() {
        return Err(Error::Empty("empty patch grid".into()));
    }
    if grid.patch_size != model.spec().patch_size {
        return Err(Error::shape("grid patch size differs from the model's"));
    }
    let probs = sliding(r, grid, 1, Blend::Average, |p| {
        let prob = model.forward(&p)?.item();
        Ok(Tensor::full(&[1, grid.patch_size, grid.patch_size], prob))
    })?;
    let values = probs.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
    ScoreMap::new(r.width(), r.height(), values, Provenance::PatchProb)
}

/// Sliding-window class-1 softmax probability.
pub fn segment_raster(model: &Model, r: &Raster, patch_size: usize, stride: usize, blend: Blend) -> Result<ScoreMap> {
    if model.kind() != ModelKind::Segmenter {
        return Err(Error::invalid("segment_raster needs a segmenter"));
    }
    let grid = window_grid(model, r, patch_size, stride)?;
    let probs = sliding(r, &grid, 1, blend, |p| {
        let logits = model.forward(&p)?;
        let n = patch_size * patch_size;
        let d = logits.data();
        let prob = (0..n).map(|i| 1.0 / (1.0 + ((d[i] - d[n + i]) as f64).exp()) as f32);
        Tensor::new(&[1, patch_size, patch_size], prob.collect())
    })?;
    let values = probs.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
    ScoreMap::new(r.width(), r.height(), values, Provenance::SegProb)
}
