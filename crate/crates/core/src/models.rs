//! The three model families: a small residual patch classifier, a U-Net
//! shaped segmenter with a dilated bottleneck, and the U-Net denoiser.
//!
//! Parameters live in an ordered name → tensor map. A forward pass records
//! onto a [`Graph`]; when `track` is set the parameters become differentiable
//! leaves and their nodes are returned in map order.

use std::collections::HashMap;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::atomic_write;
use crate::rng::Rng;
use crate::tensor::{read_exact, read_u32, Graph, Tensor, Var};

pub const MODEL_MAGIC: &[u8; 4] = b"SLKM";
pub const MODEL_FORMAT_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    PatchClassifier,
    Segmenter,
    Denoiser,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub in_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    #[serde(default)]
    pub dilation_rates: Vec<usize>,
    pub patch_size: usize,
    pub seed: u64,
}

impl ModelSpec {
    pub fn denoiser(in_channels: usize) -> Self {
        Self {
            kind: ModelKind::Denoiser,
            in_channels,
            base_width: 16,
            depth: 3,
            dilation_rates: Vec::new(),
            patch_size: 64,
            seed: 0,
        }
    }

    pub fn patch_classifier(in_channels: usize) -> Self {
        Self {
            kind: ModelKind::PatchClassifier,
            ..Self::denoiser(in_channels)
        }
    }

    pub fn segmenter(in_channels: usize) -> Self {
        Self {
            kind: ModelKind::Segmenter,
            depth: 2,
            dilation_rates: vec![1, 2, 4],
            ..Self::denoiser(in_channels)
        }
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    pub fn with_width(mut self, base_width: usize) -> Self {
        self.base_width = base_width;
        self
    }

    pub fn with_patch_size(mut self, patch_size: usize) -> Self {
        self.patch_size = patch_size;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::invalid("model depth must be >= 1"));
        }
        if self.base_width < 4 {
            return Err(Error::invalid("model base_width must be >= 4"));
        }
        if !(1..=4).contains(&self.in_channels) {
            return Err(Error::invalid("in_channels must be 1-4"));
        }
        let unit = 1usize << self.depth;
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(unit) {
            return Err(Error::invalid(format!(
                "patch size {} not divisible by 2^depth = {unit}",
                self.patch_size
            )));
        }
        if self.kind == ModelKind::Segmenter {
            if self.dilation_rates.is_empty() {
                return Err(Error::invalid("segmenter needs at least one dilation rate"));
            }
            let side = self.patch_size / unit;
            for &r in &self.dilation_rates {
                if r == 0 || r >= side {
                    return Err(Error::invalid(format!(
                        "dilation rate {r} leaves no in-bounds taps at bottleneck size {side}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

/// Forward-pass handles on a graph.
#[derive(Debug)]
pub struct Trace {
    pub output: Var,
    /// Parameter leaves in the model's parameter order.
    pub params: Vec<Var>,
    /// Named intermediate nodes (for inspection).
    pub taps: Vec<(String, Var)>,
}

impl Trace {
    pub fn tap(&self, name: &str) -> Option<Var> {
        self.taps.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: IndexMap<String, Tensor<f32>>,
    topology: Vec<String>,
}

struct Builder {
    rng: Rng,
    params: IndexMap<String, Tensor<f32>>,
    topology: Vec<String>,
}

impl Builder {
    /// He fan-in initialisation: Gaussian draws standardized to the layer's
    /// exact target std `sqrt(2 / fan_in)`.
    fn he(&mut self, shape: &[usize], fan_in: usize) -> Tensor<f32> {
        let target = (2.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let z: Vec<f64> = (0..n).map(|_| self.rng.normal()).collect();
        let mean = z.iter().sum::<f64>() / n as f64;
        let sd = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let data = if n > 1 && sd > 0.0 {
            z.iter().map(|v| ((v - mean) / sd * target) as f32).collect()
        } else {
            z.iter().map(|v| (v * target) as f32).collect()
        };
        Tensor::new(shape, data).expect("shape product matches")
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, note: &str) {
        let w = self.he(&[cout, cin, k, k], cin * k * k);
        self.params.insert(format!("{name}.weight"), w);
        self.params.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
        self.topology
            .push(format!("{name}: conv{k}x{k} {cin}->{cout}{}{note}", if note.is_empty() { "" } else { " " }));
    }

    fn dense(&mut self, name: &str, n_in: usize, n_out: usize) {
        let w = self.he(&[n_out, n_in], n_in);
        self.params.insert(format!("{name}.weight"), w);
        self.params.insert(format!("{name}.bias"), Tensor::zeros(&[n_out]));
        self.topology.push(format!("{name}: dense {n_in}->{n_out}"));
    }

    fn note(&mut self, s: impl Into<String>) {
        self.topology.push(s.into());
    }
}

pub fn build(spec: &ModelSpec) -> Result<Model> {
    match spec.kind {
        ModelKind::Denoiser => build_denoiser(spec),
        ModelKind::PatchClassifier => build_patch_classifier(spec),
        ModelKind::Segmenter => build_segmenter(spec),
    }
}

fn check_kind(spec: &ModelSpec, kind: ModelKind) -> Result<()> {
    if spec.kind != kind {
        return Err(Error::invalid(format!("spec kind {:?}, expected {kind:?}", spec.kind)));
    }
    spec.validate()
}

fn builder(spec: &ModelSpec) -> Builder {
    Builder {
        rng: Rng::new(spec.seed),
        params: IndexMap::new(),
        topology: Vec::new(),
    }
}

/// U-Net: `depth` encoder levels of two 3×3 conv+relu with 2×2 max pooling
/// between levels, a mirrored nearest-upsampling decoder with skip
/// concatenation, and a linear 1×1 head back to `in_channels`.
pub fn build_denoiser(spec: &ModelSpec) -> Result<Model> {
    check_kind(spec, ModelKind::Denoiser)?;
    let mut b = builder(spec);
    let mut cin = spec.in_channels;
    for l in 0..spec.depth {
        if l > 0 {
            b.note(format!("pool{l}: maxpool 2x2"));
        }
        let w = spec.width(l);
        b.conv(&format!("enc{l}.conv1"), cin, w, 3, "relu");
        b.conv(&format!("enc{l}.conv2"), w, w, 3, "relu");
        cin = w;
    }
    for l in (0..spec.depth - 1).rev() {
        let w = spec.width(l);
        b.note(format!("up{l}: nearest x2, concat enc{l}"));
        b.conv(&format!("dec{l}.conv1"), cin + w, w, 3, "relu");
        b.conv(&format!("dec{l}.conv2"), w, w, 3, "relu");
        cin = w;
    }
    b.conv("head", cin, spec.in_channels, 1, "linear");
    Ok(b.finish(spec))
}

/// Stem conv, `depth` residual blocks (identity skip, 2×2 max-pool
/// downsampling between blocks), global average pool and a one-logit head.
pub fn build_patch_classifier(spec: &ModelSpec) -> Result<Model> {
    check_kind(spec, ModelKind::PatchClassifier)?;
    let mut b = builder(spec);
    let w = spec.base_width;
    b.conv("stem", spec.in_channels, w, 3, "relu");
    for i in 0..spec.depth {
        if i > 0 {
            b.note(format!("pool{i}: maxpool 2x2"));
        }
        b.conv(&format!("block{i}.conv1"), w, w, 3, "relu");
        b.conv(&format!("block{i}.conv2"), w, w, 3, "+ identity, relu");
    }
    b.note("gap: global average pool");
    b.dense("head", w, 1);
    Ok(b.finish(spec))
}

/// U-Net shaped encoder/decoder whose bottleneck sums parallel dilated 3×3
/// convolutions, ending in two class logits per pixel.
pub fn build_segmenter(spec: &ModelSpec) -> Result<Model> {
    check_kind(spec, ModelKind::Segmenter)?;
    let mut b = builder(spec);
    let mut cin = spec.in_channels;
    for l in 0..spec.depth {
        let w = spec.width(l);
        b.conv(&format!("enc{l}.conv1"), cin, w, 3, "relu");
        b.conv(&format!("enc{l}.conv2"), w, w, 3, "relu");
        b.note(format!("pool{l}: maxpool 2x2"));
        cin = w;
    }
    let wb = spec.width(spec.depth);
    for &r in &spec.dilation_rates {
        b.conv(&format!("bottleneck.d{r}"), cin, wb, 3, &format!("dilation {r}"));
    }
    b.note("bottleneck: sum of branches, relu");
    cin = wb;
    for l in (0..spec.depth).rev() {
        let w = spec.width(l);
        b.note(format!("up{l}: nearest x2, concat enc{l}"));
        b.conv(&format!("dec{l}.conv1"), cin + w, w, 3, "relu");
        b.conv(&format!("dec{l}.conv2"), w, w, 3, "relu");
        cin = w;
    }
    b.conv("head", cin, 2, 1, "logits");
    Ok(b.finish(spec))
}

impl Builder {
    fn finish(self, spec: &ModelSpec) -> Model {
        Model {
            spec: spec.clone(),
            params: self.params,
            topology: self.topology,
        }
    }
}

struct Recorder<'a> {
    g: &'a mut Graph<f32>,
    vars: HashMap<&'a str, Var>,
}

impl Recorder<'_> {
    fn conv(&mut self, x: Var, name: &str, dilation: usize) -> Result<Var> {
        let w = self.vars[format!("{name}.weight").as_str()];
        let b = self.vars[format!("{name}.bias").as_str()];
        let k = self.g.shape(w)[2];
        let pad = dilation * (k / 2);
        self.g.conv2d(x, w, Some(b), 1, dilation, pad)
    }

    fn conv_relu(&mut self, x: Var, name: &str) -> Result<Var> {
        let y = self.conv(x, name, 1)?;
        Ok(self.g.relu(y))
    }
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    pub fn params(&self) -> &IndexMap<String, Tensor<f32>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut IndexMap<String, Tensor<f32>> {
        &mut self.params
    }

    pub fn topology(&self) -> &[String] {
        &self.topology
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.spec.in_channels, self.spec.patch_size, self.spec.patch_size]
    }

    /// Records the raw forward pass: reconstruction for the denoiser, logits
    /// for the segmenter, a single logit for the classifier.
    pub fn record(&self, g: &mut Graph<f32>, input: Var, track: bool) -> Result<Trace> {
        if g.shape(input) != self.input_shape() {
            return Err(Error::shape(format!(
                "model expects input {:?}, got {:?}",
                self.input_shape(),
                g.shape(input)
            )));
        }
        let mut params = Vec::with_capacity(self.params.len());
        let mut vars = HashMap::new();
        for (name, t) in &self.params {
            let v = g.leaf(t.clone(), track);
            params.push(v);
            vars.insert(name.as_str(), v);
        }
        let mut rec = Recorder { g, vars };
        let mut taps = Vec::new();
        let d = self.spec.depth;
        let output = match self.spec.kind {
            ModelKind::Denoiser => {
                let mut h = input;
                let mut skips = Vec::new();
                for l in 0..d {
                    if l > 0 {
                        h = rec.g.maxpool2d(h, 2)?;
                    }
                    h = rec.conv_relu(h, &format!("enc{l}.conv1"))?;
                    h = rec.conv_relu(h, &format!("enc{l}.conv2"))?;
                    skips.push(h);
                }
                taps.push(("bottleneck".to_string(), h));
                for l in (0..d - 1).rev() {
                    let up = rec.g.upsample_nearest(h, 2)?;
                    h = rec.g.concat(&[up, skips[l]])?;
                    h = rec.conv_relu(h, &format!("dec{l}.conv1"))?;
                    h = rec.conv_relu(h, &format!("dec{l}.conv2"))?;
                }
                rec.conv(h, "head", 1)?
            }
            ModelKind::Segmenter => {
                let mut h = input;
                let mut skips = Vec::new();
                for l in 0..d {
                    h = rec.conv_relu(h, &format!("enc{l}.conv1"))?;
                    h = rec.conv_relu(h, &format!("enc{l}.conv2"))?;
                    skips.push(h);
                    h = rec.g.maxpool2d(h, 2)?;
                }
                taps.push(("bottleneck.in".to_string(), h));
                let mut sum: Option<Var> = None;
                for &r in &self.spec.dilation_rates {
                    let branch = rec.conv(h, &format!("bottleneck.d{r}"), r)?;
                    sum = Some(match sum {
                        None => branch,
                        Some(s) => rec.g.add(s, branch)?,
                    });
                }
                let sum = sum.expect("validated non-empty dilation rates");
                taps.push(("bottleneck.sum".to_string(), sum));
                h = rec.g.relu(sum);
                for l in (0..d).rev() {
                    let up = rec.g.upsample_nearest(h, 2)?;
                    h = rec.g.concat(&[up, skips[l]])?;
                    h = rec.conv_relu(h, &format!("dec{l}.conv1"))?;
                    h = rec.conv_relu(h, &format!("dec{l}.conv2"))?;
                }
                rec.conv(h, "head", 1)?
            }
            ModelKind::PatchClassifier => {
                let mut h = rec.conv_relu(input, "stem")?;
                taps.push(("stem".to_string(), h));
                for i in 0..d {
                    if i > 0 {
                        h = rec.g.maxpool2d(h, 2)?;
                    }
                    let r = rec.conv_relu(h, &format!("block{i}.conv1"))?;
                    let r = rec.conv(r, &format!("block{i}.conv2"), 1)?;
                    let s = rec.g.add(h, r)?;
                    h = rec.g.relu(s);
                }
                let pooled = rec.g.global_avg_pool(h)?;
                taps.push(("pooled".to_string(), pooled));
                let w = rec.vars["head.weight"];
                let b = rec.vars["head.bias"];
                rec.g.dense(pooled, w, b)?
            }
        };
        Ok(Trace { output, params, taps })
    }

    /// Inference output: reconstruction, per-pixel logits, or the patch
    /// probability (sigmoid of the logit) depending on the kind.
    pub fn forward(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let trace = self.record(&mut g, x, false)?;
        let out = match self.spec.kind {
            ModelKind::PatchClassifier => g.sigmoid(trace.output),
            _ => trace.output,
        };
        let value = g.value(out).clone();
        if !value.all_finite() {
            return Err(Error::Numeric("non-finite model output".into()));
        }
        Ok(value)
    }

    /// Replaces parameters in order; shapes must match.
    pub fn set_params(&mut self, values: Vec<Tensor<f32>>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::shape("parameter count mismatch"));
        }
        for ((name, p), v) in self.params.iter_mut().zip(values) {
            if p.shape() != v.shape() {
                return Err(Error::shape(format!(
                    "{name}: {:?} vs {:?}",
                    p.shape(),
                    v.shape()
                )));
            }
            *p = v;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.write_all(MODEL_MAGIC)?;
        out.write_all(&MODEL_FORMAT_VERSION.to_le_bytes())?;
        let spec = serde_json::to_vec(&self.spec)?;
        out.write_all(&(spec.len() as u32).to_le_bytes())?;
        out.write_all(&spec)?;
        out.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in &self.params {
            out.write_all(&(name.len() as u16).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            t.write_blob(&mut out)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Version(format!("not a model file (magic {magic:?})")));
        }
        let mut v = [0u8; 2];
        read_exact(&mut r, &mut v)?;
        let version = u16::from_le_bytes(v);
        if version != MODEL_FORMAT_VERSION {
            return Err(Error::Version(format!(
                "model format {version}, this build reads {MODEL_FORMAT_VERSION}"
            )));
        }
        let spec_len = read_u32(&mut r)? as usize;
        if spec_len > bytes.len() {
            return Err(Error::Corrupt("spec block length exceeds file".into()));
        }
        let mut spec_bytes = vec![0u8; spec_len];
        read_exact(&mut r, &mut spec_bytes)?;
        let spec: ModelSpec = serde_json::from_slice(&spec_bytes)
            .map_err(|e| Error::Corrupt(format!("spec block: {e}")))?;
        let mut model = build(&spec)?;
        let n = read_u32(&mut r)? as usize;
        if n != model.params.len() {
            return Err(Error::Corrupt(format!(
                "{n} parameter blobs, topology has {}",
                model.params.len()
            )));
        }
        let mut values = Vec::with_capacity(n);
        for expected in model.params.keys() {
            let mut l = [0u8; 2];
            read_exact(&mut r, &mut l)?;
            let mut name = vec![0u8; u16::from_le_bytes(l) as usize];
            read_exact(&mut r, &mut name)?;
            if name != expected.as_bytes() {
                return Err(Error::Corrupt(format!(
                    "parameter {:?}, expected {expected}",
                    String::from_utf8_lossy(&name)
                )));
            }
            let t = Tensor::read_blob(&mut r)?;
            if !t.all_finite() {
                return Err(Error::Corrupt(format!("{expected}: non-finite values")));
            }
            values.push(t);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Corrupt("trailing bytes after parameters".into()));
        }
        model.set_params(values).map_err(|e| Error::Corrupt(e.to_string()))?;
        Ok(model)
    }
}

pub fn save_model(m: &Model, path: &Path) -> Result<()> {
    atomic_write(path, &m.to_bytes()?)
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::Unreadable {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Model::from_bytes(&bytes)
}
