//! Shared fixtures for integration and acceptance tests.
#![allow(dead_code)]

pub mod props;

use slidekit::objective::{self, SsimConfig};
use slidekit::raster::Mask;
use slidekit::rng::Rng;
use slidekit::tensor::{Axis, Graph, Scalar, ScalarFn, Tensor, Var};
use slidekit::Result;

/// Direct quadruple-loop convolution, independent of the library kernels.
pub fn naive_conv(
    input: &Tensor<f64>,
    kernel: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    dilation: usize,
    padding: usize,
) -> Option<Tensor<f64>> {
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (co, k) = (kernel.shape()[0], kernel.shape()[2]);
    let span = dilation * (k - 1) + 1;
    if h + 2 * padding < span || w + 2 * padding < span {
        return None;
    }
    let ho = (h + 2 * padding - span) / stride + 1;
    let wo = (w + 2 * padding - span) / stride + 1;
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = bias.map_or(0.0, |b| b.data()[o]);
                for c in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                            let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            s += kernel.data()[((o * ci + c) * k + ky) * k + kx]
                                * input.data()[(c * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(o * ho + oy) * wo + ox] = s;
            }
        }
    }
    Some(Tensor::new(&[co, ho, wo], out).unwrap())
}

/// One differentiable operation under test; constants are stored in f64 and
/// cast to the graph's precision.
#[derive(Clone, Debug)]
pub enum Case {
    ConvInput { kernel: Tensor<f64>, bias: Tensor<f64>, stride: usize, dilation: usize, padding: usize },
    ConvKernel { input: Tensor<f64>, bias: Tensor<f64>, stride: usize, dilation: usize, padding: usize },
    ConvBias { input: Tensor<f64>, kernel: Tensor<f64> },
    ConvRelu { kernel: Tensor<f64>, bias: Tensor<f64> },
    Upsample(usize),
    MaxPool(usize),
    Relu,
    Sigmoid,
    Add(Tensor<f64>),
    Sub(Tensor<f64>),
    Mul(Tensor<f64>),
    Div(Tensor<f64>),
    DenseInput { weight: Tensor<f64>, bias: Tensor<f64> },
    DenseWeight { input: Tensor<f64>, bias: Tensor<f64> },
    Concat(Tensor<f64>),
    GlobalAvgPool,
    Correlate(Vec<f64>, Axis),
    Mean,
    SsimLoss { target: Tensor<f64>, cfg: SsimConfig },
    Bce(Vec<u8>),
    PixelCe(Mask),
}

/// `sum(projection ⊙ case(x))`, or the case's own scalar for losses.
#[derive(Clone, Debug)]
pub struct Projected {
    pub case: Case,
    pub projection: Option<Tensor<f64>>,
}

fn c<T: Scalar>(g: &mut Graph<T>, t: &Tensor<f64>) -> Var {
    g.constant(t.cast())
}

impl Case {
    pub fn record<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        Ok(match self {
            Case::ConvInput { kernel, bias, stride, dilation, padding } => {
                let (k, b) = (c(g, kernel), c(g, bias));
                g.conv2d(x, k, Some(b), *stride, *dilation, *padding)?
            }
            Case::ConvKernel { input, bias, stride, dilation, padding } => {
                let (i, b) = (c(g, input), c(g, bias));
                g.conv2d(i, x, Some(b), *stride, *dilation, *padding)?
            }
            Case::ConvBias { input, kernel } => {
                let (i, k) = (c(g, input), c(g, kernel));
                g.conv2d(i, k, Some(x), 1, 1, 1)?
            }
            Case::ConvRelu { kernel, bias } => {
                let (k, b) = (c(g, kernel), c(g, bias));
                let y = g.conv2d(x, k, Some(b), 1, 1, 1)?;
                g.relu(y)
            }
            Case::Upsample(f) => g.upsample_nearest(x, *f)?,
            Case::MaxPool(w) => g.maxpool2d(x, *w)?,
            Case::Relu => g.relu(x),
            Case::Sigmoid => g.sigmoid(x),
            Case::Add(o) => {
                let o = c(g, o);
                g.add(x, o)?
            }
            Case::Sub(o) => {
                let o = c(g, o);
                g.sub(o, x)?
            }
            Case::Mul(o) => {
                let o = c(g, o);
                let y = g.mul(x, o)?;
                g.mul(y, x)?
            }
            Case::Div(o) => {
                let o = c(g, o);
                let a = g.div(o, x)?;
                g.div(a, x)?
            }
            Case::DenseInput { weight, bias } => {
                let (w, b) = (c(g, weight), c(g, bias));
                g.dense(x, w, b)?
            }
            Case::DenseWeight { input, bias } => {
                let (i, b) = (c(g, input), c(g, bias));
                g.dense(i, x, b)?
            }
            Case::Concat(o) => {
                let o = c(g, o);
                g.concat(&[o, x])?
            }
            Case::GlobalAvgPool => g.global_avg_pool(x)?,
            Case::Correlate(taps, axis) => {
                let taps: Vec<T> = taps.iter().map(|&v| T::of(v)).collect();
                g.correlate(x, &taps, *axis)?
            }
            Case::Mean => g.mean(x),
            Case::SsimLoss { target, cfg } => {
                let t = c(g, target);
                objective::ssim_loss(g, x, t, cfg)?
            }
            Case::Bce(labels) => {
                let p = g.sigmoid(x);
                objective::bce(g, p, labels)?
            }
            Case::PixelCe(mask) => objective::pixel_cross_entropy(g, x, mask)?,
        })
    }
}

impl ScalarFn for Projected {
    fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = self.case.record(g, x)?;
        match &self.projection {
            None => Ok(y),
            Some(p) => {
                let p = c(g, p);
                let z = g.mul(y, p)?;
                Ok(g.sum(z))
            }
        }
    }
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Moves every entry at least `gap` away from zero (kinks of relu).
fn away_from_zero(mut t: Tensor<f64>, gap: f64) -> Tensor<f64> {
    for v in t.data_mut() {
        *v = v.signum() * (v.abs() + gap);
    }
    t
}

/// Spreads window entries apart so max-pool argmax is stable under ±eps.
fn distinct(rng: &mut Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05).collect();
    rng.shuffle(&mut v);
    v.iter().map(|x| x + rng.uniform() * 0.01).collect()
}

/// Named random instances of every differentiable operation and loss for
/// one seed: `(name, function, point)`.
pub fn op_instances(seed: u64) -> Vec<(&'static str, Projected, Tensor<f64>)> {
    let mut rng = Rng::new(1000 + seed);
    let r = &mut rng;
    let mut out = Vec::new();
    let mut push = |name, case: Case, point: Tensor<f64>, out_shape: Option<&[usize]>, r: &mut Rng| {
        let projection = out_shape.map(|s| randn(s, r));
        out.push((name, Projected { case, projection }, point));
    };

    let x = randn(&[2, 5, 5], r);
    let kernel = randn(&[3, 2, 3, 3], r);
    let bias = randn(&[3], r);
    push(
        "conv2d/input",
        Case::ConvInput { kernel: kernel.clone(), bias: bias.clone(), stride: 1, dilation: 1, padding: 1 },
        x.clone(),
        Some(&[3, 5, 5]),
        r,
    );
    push(
        "conv2d/kernel",
        Case::ConvKernel { input: x.clone(), bias: bias.clone(), stride: 2, dilation: 1, padding: 1 },
        kernel.clone(),
        Some(&[3, 3, 3]),
        r,
    );
    push(
        "conv2d/dilated",
        Case::ConvInput { kernel: kernel.clone(), bias: bias.clone(), stride: 1, dilation: 2, padding: 2 },
        x.clone(),
        Some(&[3, 5, 5]),
        r,
    );
    push(
        "conv2d/bias",
        Case::ConvBias { input: x.clone(), kernel: kernel.clone() },
        bias.clone(),
        Some(&[3, 5, 5]),
        r,
    );
    push(
        "conv2d+relu",
        Case::ConvRelu { kernel: kernel.clone(), bias: bias.clone() },
        x.clone(),
        Some(&[3, 5, 5]),
        r,
    );
    push("upsample_nearest", Case::Upsample(2), randn(&[2, 3, 3], r), Some(&[2, 6, 6]), r);
    let pool_in = Tensor::new(&[2, 4, 4], distinct(r, 32)).unwrap();
    push("maxpool2d", Case::MaxPool(2), pool_in, Some(&[2, 2, 2]), r);
    push("relu", Case::Relu, away_from_zero(randn(&[12], r), 0.05), Some(&[12]), r);
    push("sigmoid", Case::Sigmoid, randn(&[12], r), Some(&[12]), r);
    push("add", Case::Add(randn(&[12], r)), randn(&[12], r), Some(&[12]), r);
    push("sub", Case::Sub(randn(&[12], r)), randn(&[12], r), Some(&[12]), r);
    push("mul", Case::Mul(randn(&[12], r)), randn(&[12], r), Some(&[12]), r);
    push("div", Case::Div(randn(&[12], r)), away_from_zero(randn(&[12], r), 0.5), Some(&[12]), r);
    push(
        "dense/input",
        Case::DenseInput { weight: randn(&[4, 6], r), bias: randn(&[4], r) },
        randn(&[6], r),
        Some(&[4]),
        r,
    );
    push(
        "dense/weight",
        Case::DenseWeight { input: randn(&[6], r), bias: randn(&[4], r) },
        randn(&[4, 6], r),
        Some(&[4]),
        r,
    );
    push("concat", Case::Concat(randn(&[1, 3, 3], r)), randn(&[2, 3, 3], r), Some(&[3, 3, 3]), r);
    push("global_avg_pool", Case::GlobalAvgPool, randn(&[3, 4, 4], r), Some(&[3]), r);
    let taps: Vec<f64> = (0..3).map(|_| r.normal()).collect();
    push("correlate/width", Case::Correlate(taps.clone(), Axis::Width), randn(&[2, 4, 6], r), Some(&[2, 4, 4]), r);
    push("correlate/height", Case::Correlate(taps, Axis::Height), randn(&[2, 6, 4], r), Some(&[2, 4, 4]), r);
    push("mean", Case::Mean, randn(&[10], r), None, r);

    let a = randn(&[1, 12, 12], r);
    let noise = randn(&[1, 12, 12], r);
    let b = Tensor::from_fn(&[1, 12, 12], |i| a.data()[i] + 0.5 * noise.data()[i]);
    let cfg = SsimConfig::default().with_dynamic_range(objective::dynamic_range([&a]));
    push("ssim_loss", Case::SsimLoss { target: a, cfg }, b, None, r);
    let labels: Vec<u8> = (0..8).map(|_| (r.below(2)) as u8).collect();
    push("bce", Case::Bce(labels), randn(&[8], r), None, r);
    let mask = Mask::new(4, 3, (0..12).map(|_| r.below(2) as u8).collect()).unwrap();
    push("pixel_cross_entropy", Case::PixelCe(mask), randn(&[2, 3, 4], r), None, r);
    out
}
