//! Noise sampling, Adam, and the three training loops.
//!
//! Every loop processes a batch as independent per-sample graphs, averages
//! their parameter gradients in batch order and takes one Adam step. Sample
//! order comes from a per-epoch seeded shuffle, and denoiser noise from a
//! seeded stream keyed by a global draw counter, so a run is reproducible
//! bit-for-bit regardless of how many worker threads evaluate the batch.

use std::io::{Cursor, Write};
use std::path::Path;
use std::time::Instant;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::atomic_write;
use crate::models::{Model, ModelKind};
use crate::objective::{dynamic_range, pixel_cross_entropy, ssim_loss, SsimConfig};
use crate::raster::Mask;
use crate::rng::Rng;
use crate::tensor::{read_exact, read_u32, Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseDistribution {
    Gaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub distribution: NoiseDistribution,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            distribution: NoiseDistribution::Gaussian,
            sigma: 1.0,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn gaussian(sigma: f64, seed: u64) -> Self {
        Self {
            distribution: NoiseDistribution::Gaussian,
            sigma,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!("noise sigma {} must be >= 0", self.sigma)));
        }
        Ok(())
    }
}

/// I.i.d. N(0, sigma²) values from the stream `(spec.seed, counter)`.
pub fn sample_noise(shape: &[usize], spec: &NoiseSpec, counter: u64) -> Tensor<f32> {
    if spec.sigma == 0.0 {
        return Tensor::zeros(shape);
    }
    let mut rng = Rng::stream(spec.seed, counter);
    match spec.distribution {
        NoiseDistribution::Gaussian => Tensor::randn(shape, spec.sigma, &mut rng),
    }
}

const ADAM_MAGIC: &[u8; 4] = b"SLKA";
const ADAM_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl AdamState {
    /// Zeroed moments mirroring `model`'s parameters, standard defaults.
    pub fn new(model: &Model) -> Self {
        Self::for_params(model.params())
    }

    pub fn for_params(params: &IndexMap<String, Tensor<f32>>) -> Self {
        let zeros: Vec<_> = params.values().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            learning_rate: 1e-3,
        }
    }

    pub fn with_learning_rate(mut self, lr: f64) -> Self {
        self.learning_rate = lr;
        self
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.write_all(ADAM_MAGIC)?;
        out.write_all(&ADAM_VERSION.to_le_bytes())?;
        out.write_all(&self.step.to_le_bytes())?;
        for x in [self.beta1, self.beta2, self.epsilon, self.learning_rate] {
            out.write_all(&x.to_le_bytes())?;
        }
        out.write_all(&(self.m.len() as u32).to_le_bytes())?;
        for t in self.m.iter().chain(&self.v) {
            t.write_blob(&mut out)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != ADAM_MAGIC {
            return Err(Error::Version("not an optimizer state blob".into()));
        }
        let version = read_u32(&mut r)?;
        if version != ADAM_VERSION {
            return Err(Error::Version(format!("optimizer state version {version}")));
        }
        let mut b8 = [0u8; 8];
        read_exact(&mut r, &mut b8)?;
        let step = u64::from_le_bytes(b8);
        let mut f = [0.0f64; 4];
        for x in &mut f {
            read_exact(&mut r, &mut b8)?;
            *x = f64::from_le_bytes(b8);
        }
        let n = read_u32(&mut r)? as usize;
        let mut blobs = Vec::with_capacity(2 * n.min(4096));
        for _ in 0..2 * n {
            blobs.push(Tensor::read_blob(&mut r)?);
        }
        let v = blobs.split_off(n);
        Ok(Self {
            step,
            m: blobs,
            v,
            beta1: f[0],
            beta2: f[1],
            epsilon: f[2],
            learning_rate: f[3],
        })
    }
}

/// One bias-corrected Adam update. Gradients are checked for finiteness
/// before anything is modified.
pub fn adam_step(
    params: &mut IndexMap<String, Tensor<f32>>,
    grads: &[Tensor<f32>],
    state: &mut AdamState,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape("adam: parameter, gradient and moment counts differ"));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape(format!("adam: {name} gradient shape {:?}", g.shape())));
        }
        if !g.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient for {name} at step {}",
                state.step + 1
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params.values_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gv = gv as f64;
            let mn = b1 * *mv as f64 + (1.0 - b1) * gv;
            let vn = b2 * *vv as f64 + (1.0 - b2) * gv * gv;
            *mv = mn as f32;
            *vv = vn as f32;
            let update = state.learning_rate * (mn / c1) / ((vn / c2).sqrt() + state.epsilon);
            *pv = (*pv as f64 - update) as f32;
        }
    }
    Ok(())
}

/// Writes `path` (model file) and `path` + ".opt" (optimizer state).
pub fn save_checkpoint(model: &Model, state: &AdamState, path: &Path) -> Result<()> {
    atomic_write(path, &model.to_bytes()?)?;
    atomic_write(&optimizer_path(path), &state.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, AdamState)> {
    let model = crate::models::load_model(path)?;
    let opt_path = optimizer_path(path);
    let bytes = std::fs::read(&opt_path).map_err(|e| Error::Unreadable {
        path: opt_path,
        reason: e.to_string(),
    })?;
    let state = AdamState::from_bytes(&bytes)?;
    let mirrors = state.m.len() == model.params().len()
        && model
            .params()
            .values()
            .zip(state.m.iter().zip(&state.v))
            .all(|(p, (m, v))| p.shape() == m.shape() && p.shape() == v.shape());
    if !mirrors {
        return Err(Error::Corrupt("optimizer state does not match model parameters".into()));
    }
    Ok((model, state))
}

fn optimizer_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".opt");
    s.into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    /// Seed of the per-epoch sample shuffle.
    pub seed: u64,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            seed: 0,
            max_steps: None,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_history: Vec<f64>,
    pub epochs: usize,
    pub steps: usize,
    pub wall_time: f64,
    pub seed: u64,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl TrainReport {
    /// Mean of the first and last `window` losses.
    pub fn smoothed_ends(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.loss_history.len();
        if window == 0 || n < window {
            return None;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&self.loss_history[..window]), mean(&self.loss_history[n - window..])))
    }
}

/// What one denoiser step saw, handed to an observer before the update.
pub struct StepRecord<'a> {
    pub step: usize,
    pub params: &'a IndexMap<String, Tensor<f32>>,
    pub clean: Vec<&'a Tensor<f32>>,
    pub noise: &'a [Tensor<f32>],
    pub ssim: &'a SsimConfig,
    pub loss: f64,
}

/// Runs `per_sample` over a batch (in parallel, results kept in batch order)
/// and returns the mean loss and mean gradients.
fn batch_mean<F>(model: &Model, batch: &[usize], per_sample: F) -> Result<(f64, Vec<Tensor<f32>>)>
where
    F: Fn(&Model, usize, usize) -> Result<(f64, Vec<Tensor<f32>>)> + Sync,
{
    let results: Vec<(f64, Vec<Tensor<f32>>)> = batch
        .par_iter()
        .enumerate()
        .map(|(j, &idx)| per_sample(model, j, idx))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut iter = results.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(g) {
            for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                *a += *b;
            }
        }
    }
    for g in &mut grads {
        for v in g.data_mut() {
            *v = (*v as f64 * scale) as f32;
        }
    }
    Ok((loss * scale, grads))
}

/// Backward from `loss` and collect the gradients of `params`.
fn collect_grads(g: &mut Graph<f32>, loss: crate::tensor::Var, params: &[crate::tensor::Var]) -> Result<(f64, Vec<Tensor<f32>>)> {
    g.backward(loss)?;
    let value = g.value(loss).item() as f64;
    let grads = params
        .iter()
        .map(|&p| g.grad(p).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(p))))
        .collect();
    Ok((value, grads))
}

/// Epoch/batch driver shared by the three loops. `step` returns the batch's
/// mean loss and gradients for the current parameters.
fn drive(
    model: &mut Model,
    n: usize,
    opts: &TrainOptions,
    opt: &mut AdamState,
    mut step: impl FnMut(&Model, usize, &[usize]) -> Result<(f64, Vec<Tensor<f32>>)>,
) -> Result<TrainReport> {
    opts.validate()?;
    if n == 0 {
        return Err(Error::Empty("no training patches".into()));
    }
    if opt.m.len() != model.params().len() {
        return Err(Error::shape("optimizer state does not mirror the model"));
    }
    let start = Instant::now();
    let mut history = Vec::new();
    let mut epochs_run = 0;
    'outer: for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        Rng::stream(opts.seed, epoch as u64).shuffle(&mut order);
        epochs_run = epoch + 1;
        for batch in order.chunks(opts.batch_size) {
            if opts.max_steps.is_some_and(|m| history.len() >= m) {
                break 'outer;
            }
            let (loss, grads) = step(model, history.len(), batch)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss diverged ({loss}) at step {}",
                    history.len() + 1
                )));
            }
            adam_step(model.params_mut(), &grads, opt)?;
            history.push(loss);
            log::debug!("step {} loss {loss:.6}", history.len());
        }
    }
    Ok(TrainReport {
        steps: history.len(),
        loss_history: history,
        epochs: epochs_run,
        wall_time: start.elapsed().as_secs_f64(),
        seed: opts.seed,
        warnings: Vec::new(),
    })
}

fn check_model(model: &Model, kind: ModelKind) -> Result<()> {
    if model.kind() != kind {
        return Err(Error::invalid(format!("expected a {kind:?} model, got {:?}", model.kind())));
    }
    Ok(())
}

fn check_patches(model: &Model, patches: &[Tensor<f32>]) -> Result<()> {
    if patches.is_empty() {
        return Err(Error::Empty("no training patches".into()));
    }
    let want = model.input_shape();
    if let Some(p) = patches.iter().find(|p| p.shape() != want) {
        return Err(Error::shape(format!("patch shape {:?}, model expects {want:?}", p.shape())));
    }
    Ok(())
}

/// Noise-injection training: each step draws fresh `z` per sample and
/// minimises `ssim_loss(x, f(x + z))`, with the SSIM dynamic range taken
/// from the clean batch.
pub fn train_denoiser(
    model: Model,
    patches: &[Tensor<f32>],
    noise: &NoiseSpec,
    opts: &TrainOptions,
    opt: &mut AdamState,
    ssim: &SsimConfig,
) -> Result<(Model, TrainReport)> {
    train_denoiser_observed(model, patches, noise, opts, opt, ssim, |_| Ok(()))
}

/// [`train_denoiser`] with a hook that sees every step's inputs and loss
/// before the parameters are updated.
pub fn train_denoiser_observed(
    mut model: Model,
    patches: &[Tensor<f32>],
    noise: &NoiseSpec,
    opts: &TrainOptions,
    opt: &mut AdamState,
    ssim: &SsimConfig,
    mut observer: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<(Model, TrainReport)> {
    check_model(&model, ModelKind::Denoiser)?;
    check_patches(&model, patches)?;
    noise.validate()?;
    ssim.validate()?;
    let batch_size = opts.batch_size as u64;
    let report = drive(&mut model, patches.len(), opts, opt, |m, step, batch| {
        let cfg = ssim.with_dynamic_range(dynamic_range(batch.iter().map(|&i| &patches[i])));
        let z: Vec<Tensor<f32>> = (0..batch.len())
            .map(|j| sample_noise(patches[batch[j]].shape(), noise, step as u64 * batch_size + j as u64))
            .collect();
        let (loss, grads) = batch_mean(m, batch, |m, j, idx| {
            let x = &patches[idx];
            let noisy = Tensor::new(
                x.shape(),
                x.data().iter().zip(z[j].data()).map(|(a, b)| a + b).collect(),
            )?;
            let mut g = Graph::new();
            let input = g.constant(noisy);
            let target = g.constant(x.clone());
            let trace = m.record(&mut g, input, true)?;
            let loss = ssim_loss(&mut g, target, trace.output, &cfg)?;
            collect_grads(&mut g, loss, &trace.params)
        })?;
        observer(&StepRecord {
            step,
            params: m.params(),
            clean: batch.iter().map(|&i| &patches[i]).collect(),
            noise: &z,
            ssim: &cfg,
            loss,
        })?;
        Ok((loss, grads))
    })?;
    Ok((model, report))
}

/// Binary cross-entropy on sigmoid(logit) per patch.
pub fn train_classifier(
    mut model: Model,
    patches: &[Tensor<f32>],
    labels: &[u8],
    opts: &TrainOptions,
    opt: &mut AdamState,
) -> Result<(Model, TrainReport)> {
    check_model(&model, ModelKind::PatchClassifier)?;
    check_patches(&model, patches)?;
    if labels.len() != patches.len() {
        return Err(Error::shape(format!("{} labels for {} patches", labels.len(), patches.len())));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::invalid("patch labels must be 0 or 1"));
    }
    let mut warnings = Vec::new();
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == labels.len() {
        let msg = format!("single-class training set ({positives} of {} positive)", labels.len());
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let mut report = drive(&mut model, patches.len(), opts, opt, |m, _, batch| {
        batch_mean(m, batch, |m, _, idx| {
            let mut g = Graph::new();
            let input = g.constant(patches[idx].clone());
            let trace = m.record(&mut g, input, true)?;
            let prob = g.sigmoid(trace.output);
            let loss = g.bce(prob, &labels[idx..=idx])?;
            collect_grads(&mut g, loss, &trace.params)
        })
    })?;
    report.warnings = warnings;
    Ok((model, report))
}

/// Per-pixel softmax cross-entropy against the patch masks.
pub fn train_segmenter(
    mut model: Model,
    patches: &[Tensor<f32>],
    masks: &[Mask],
    opts: &TrainOptions,
    opt: &mut AdamState,
) -> Result<(Model, TrainReport)> {
    check_model(&model, ModelKind::Segmenter)?;
    check_patches(&model, patches)?;
    if masks.len() != patches.len() {
        return Err(Error::shape(format!("{} masks for {} patches", masks.len(), patches.len())));
    }
    let p = model.spec().patch_size;
    for m in masks {
        m.check_dims(p, p)?;
    }
    let mut warnings = Vec::new();
    let fg: usize = masks.iter().map(Mask::count_ones).sum();
    if fg == 0 || fg == masks.len() * p * p {
        let msg = "single-class training masks".to_string();
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let mut report = drive(&mut model, patches.len(), opts, opt, |m, _, batch| {
        batch_mean(m, batch, |m, _, idx| {
            let mut g = Graph::new();
            let input = g.constant(patches[idx].clone());
            let trace = m.record(&mut g, input, true)?;
            let loss = pixel_cross_entropy(&mut g, trace.output, &masks[idx])?;
            collect_grads(&mut g, loss, &trace.params)
        })
    })?;
    report.warnings = warnings;
    Ok((model, report))
}
