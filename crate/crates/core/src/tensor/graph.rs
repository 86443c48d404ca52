use super::kernels::{self, ConvGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Height,
    Width,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Relu(Var),
    Sigmoid(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
    GlobalAvgPool(Var),
    Correlate {
        input: Var,
        taps: Vec<T>,
        axis: Axis,
    },
    Bce {
        prob: Var,
        labels: Vec<u8>,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<u8>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Recording tape. Insertion order is a topological order, so the graph is
/// acyclic by construction.
#[derive(Debug, Default)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
}

/// Lower clamp for probabilities entering the binary cross-entropy.
pub const PROB_CLAMP: f64 = 1e-7;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient left by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// `a * factor`.
    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = T::of(factor);
        let value = self.value(a).map(|x| x * f);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, f), rg)
    }

    /// `a + offset`.
    pub fn offset(&mut self, a: Var, offset: f64) -> Var {
        let o = T::of(offset);
        let value = self.value(a).map(|x| x + o);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Offset(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    /// 2-D convolution of `[C_in,H,W]` with `[C_out,C_in,k,k]` plus optional
    /// `[C_out]` bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3()?;
        let ks = self.shape(kernel).to_vec();
        let [co, ci, kh, kw] = ks[..] else {
            return Err(Error::shape(format!("kernel must be [C_out,C_in,k,k], got {ks:?}")));
        };
        if ci != c {
            return Err(Error::shape(format!(
                "conv2d: input has {c} channels, kernel expects {ci}"
            )));
        }
        if kh != kw {
            return Err(Error::shape("conv2d: kernel must be square"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [co] {
                return Err(Error::shape(format!(
                    "conv2d: bias shape {:?}, expected [{co}]",
                    self.shape(b)
                )));
            }
        }
        let geom = ConvGeom::new((c, h, w), co, kh, stride, dilation, padding)?;
        let mut out = Tensor::zeros(&geom.out_shape());
        kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            out.data_mut(),
        );
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::invalid("upsample factor must be >= 1"));
        }
        let (c, h, w) = self.value(input).dims3()?;
        let mut out = Tensor::zeros(&[c, h * factor, w * factor]);
        kernels::upsample_forward((c, h, w), factor, self.value(input).data(), out.data_mut());
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, Op::Upsample { input, factor }, rg))
    }

    pub fn maxpool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3()?;
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(Error::shape(format!(
                "maxpool: {h}x{w} not divisible by window {window}"
            )));
        }
        let mut out = Tensor::zeros(&[c, h / window, w / window]);
        let argmax = kernels::maxpool_forward((c, h, w), window, self.value(input).data(), out.data_mut());
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, Op::MaxPool { input, argmax }, rg))
    }

    /// `weight · input + bias` for `input [n]`, `weight [m,n]`, `bias [m]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let n = self.value(input).numel();
        let ws = self.shape(weight).to_vec();
        let [m, wn] = ws[..] else {
            return Err(Error::shape(format!("dense weight must be [m,n], got {ws:?}")));
        };
        if self.shape(input).len() != 1 || wn != n || self.shape(bias) != [m] {
            return Err(Error::shape(format!(
                "dense: input {:?}, weight {ws:?}, bias {:?}",
                self.shape(input),
                self.shape(bias)
            )));
        }
        let x = self.value(input).data();
        let wd = self.value(weight).data();
        let b = self.value(bias).data();
        let data = (0..m)
            .map(|r| {
                wd[r * n..(r + 1) * n]
                    .iter()
                    .zip(x)
                    .fold(b[r], |acc, (&wv, &xv)| acc + wv * xv)
            })
            .collect();
        let value = Tensor::new(&[m], data)?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(value, Op::Dense { input, weight, bias }, rg))
    }

    /// Concatenates `[C_i,H,W]` tensors along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of nothing"));
        }
        let (_, h, w) = self.value(parts[0]).dims3()?;
        let mut data = Vec::new();
        let mut channels = 0;
        for &p in parts {
            let (c, ph, pw) = self.value(p).dims3()?;
            if (ph, pw) != (h, w) {
                return Err(Error::shape(format!(
                    "concat: spatial {ph}x{pw} vs {h}x{w}"
                )));
            }
            channels += c;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(&[channels, h, w], data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|v| v.as_f64()).sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(T::of(s)), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: f64 = t.data().iter().map(|v| v.as_f64()).sum();
        let m = s / t.numel() as f64;
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(T::of(m)), Op::Mean(a), rg)
    }

    /// `[C,H,W]` to `[C]` by spatial averaging.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.value(a).dims3()?;
        let d = self.value(a).data();
        let data = (0..c)
            .map(|ch| {
                let s: f64 = d[ch * h * w..(ch + 1) * h * w].iter().map(|v| v.as_f64()).sum();
                T::of(s / (h * w) as f64)
            })
            .collect();
        let value = Tensor::new(&[c], data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::GlobalAvgPool(a), rg))
    }

    /// Valid 1-D correlation with fixed `taps` along one spatial axis.
    pub fn correlate(&mut self, input: Var, taps: &[T], axis: Axis) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3()?;
        let k = taps.len();
        let extent = if axis == Axis::Width { w } else { h };
        if k == 0 || k > extent {
            return Err(Error::shape(format!(
                "correlate: {k} taps over extent {extent}"
            )));
        }
        let shape = match axis {
            Axis::Width => [c, h, w + 1 - k],
            Axis::Height => [c, h + 1 - k, w],
        };
        let mut out = Tensor::zeros(&shape);
        kernels::correlate_axis((c, h, w), taps, axis == Axis::Width, self.value(input).data(), out.data_mut());
        let rg = self.any_grad(&[input]);
        Ok(self.push(
            out,
            Op::Correlate {
                input,
                taps: taps.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 labels, with
    /// probabilities clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, prob: Var, labels: &[u8]) -> Result<Var> {
        let p = self.value(prob);
        if p.numel() != labels.len() {
            return Err(Error::shape(format!(
                "bce: {} probabilities, {} labels",
                p.numel(),
                labels.len()
            )));
        }
        let s: f64 = p
            .data()
            .iter()
            .zip(labels)
            .map(|(&pv, &y)| bce_term(clamp_prob(pv).as_f64(), y))
            .sum();
        let value = Tensor::scalar(T::of(s / labels.len() as f64));
        let rg = self.any_grad(&[prob]);
        Ok(self.push(
            value,
            Op::Bce {
                prob,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `[K,H,W]` logits against per-pixel class
    /// ids.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let (k, h, w) = self.value(logits).dims3()?;
        if labels.len() != h * w {
            return Err(Error::shape(format!(
                "cross-entropy: {} labels for {h}x{w} logits",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(Error::invalid(format!("class id {bad} with {k} classes")));
        }
        let d = self.value(logits).data();
        let n = h * w;
        let mut total = 0.0f64;
        for (px, &label) in labels.iter().enumerate() {
            let (lse, _) = log_sum_exp(d, k, n, px);
            total += lse - d[label as usize * n + px].as_f64();
        }
        let value = Tensor::scalar(T::of(total / n as f64));
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            value,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients of every node that
    /// requires them are overwritten, never accumulated across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                if self.nodes[i].requires_grad && matches!(self.nodes[i].op, Op::Leaf) {
                    self.nodes[i].grad = Some(Tensor::zeros(self.nodes[i].value.shape()));
                }
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            let shape = self.nodes[i].value.shape().to_vec();
            self.nodes[i].grad = Some(Tensor::new(&shape, g)?);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        // Zero-initialised gradient buffer of `v`, or None when `v` needs none.
        let slot = |v: Var, grads: &mut [Option<Vec<T>>]| -> bool {
            if !nodes[v.0].requires_grad {
                return false;
            }
            if grads[v.0].is_none() {
                grads[v.0] = Some(vec![T::zero(); nodes[v.0].value.numel()]);
            }
            true
        };
        macro_rules! acc {
            ($v:expr, |$buf:ident| $body:expr) => {
                if slot($v, grads) {
                    let $buf = grads[$v.0].as_mut().unwrap();
                    $body
                }
            };
        }
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc!(*a, |buf| add_into(buf, g));
                acc!(*b, |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                acc!(*a, |buf| add_into(buf, g));
                acc!(*b, |buf| for (o, &gv) in buf.iter_mut().zip(g) {
                    *o -= gv;
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc!(*a, |buf| for ((o, &gv), &y) in buf.iter_mut().zip(g).zip(vb) {
                    *o += gv * y;
                });
                acc!(*b, |buf| for ((o, &gv), &x) in buf.iter_mut().zip(g).zip(va) {
                    *o += gv * x;
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc!(*a, |buf| for ((o, &gv), &y) in buf.iter_mut().zip(g).zip(vb) {
                    *o += gv / y;
                });
                acc!(*b, |buf| for (((o, &gv), &x), &y) in buf.iter_mut().zip(g).zip(va).zip(vb) {
                    *o -= gv * x / (y * y);
                });
            }
            Op::Scale(a, f) => acc!(*a, |buf| for (o, &gv) in buf.iter_mut().zip(g) {
                *o += gv * *f;
            }),
            Op::Offset(a) => acc!(*a, |buf| add_into(buf, g)),
            Op::Relu(a) => {
                let va = val(*a);
                acc!(*a, |buf| for ((o, &gv), &x) in buf.iter_mut().zip(g).zip(va) {
                    if x > T::zero() {
                        *o += gv;
                    }
                });
            }
            Op::Sigmoid(a) => {
                let out = node.value.data();
                acc!(*a, |buf| for ((o, &gv), &s) in buf.iter_mut().zip(g).zip(out) {
                    *o += gv * s * (T::one() - s);
                });
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let want_in = slot(*input, grads);
                let want_k = slot(*kernel, grads);
                let want_b = bias.is_some_and(|b| slot(b, grads));
                let mut gi = want_in.then(|| grads[input.0].take().unwrap());
                let mut gk = want_k.then(|| grads[kernel.0].take().unwrap());
                let mut gb = if want_b { grads[bias.unwrap().0].take() } else { None };
                kernels::conv2d_backward(
                    geom,
                    val(*input),
                    val(*kernel),
                    g,
                    gi.as_deref_mut(),
                    gk.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(v) = gi {
                    grads[input.0] = Some(v);
                }
                if let Some(v) = gk {
                    grads[kernel.0] = Some(v);
                }
                if let Some(v) = gb {
                    grads[bias.unwrap().0] = Some(v);
                }
            }
            Op::Upsample { input, factor } => {
                let dims = nodes[input.0].value.dims3().unwrap();
                acc!(*input, |buf| kernels::upsample_backward(dims, *factor, g, buf));
            }
            Op::MaxPool { input, argmax } => acc!(*input, |buf| for (&idx, &gv) in argmax.iter().zip(g) {
                buf[idx] += gv;
            }),
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let x = val(*input);
                let w = val(*weight);
                let n = x.len();
                acc!(*input, |buf| for (r, &gv) in g.iter().enumerate() {
                    for (o, &wv) in buf.iter_mut().zip(&w[r * n..(r + 1) * n]) {
                        *o += gv * wv;
                    }
                });
                acc!(*weight, |buf| for (r, &gv) in g.iter().enumerate() {
                    for (o, &xv) in buf[r * n..(r + 1) * n].iter_mut().zip(x) {
                        *o += gv * xv;
                    }
                });
                acc!(*bias, |buf| add_into(buf, g));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = nodes[p.0].value.numel();
                    acc!(*p, |buf| add_into(buf, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::Sum(a) => acc!(*a, |buf| for o in buf.iter_mut() {
                *o += g[0];
            }),
            Op::Mean(a) => {
                let scale = g[0] / T::of(nodes[a.0].value.numel() as f64);
                acc!(*a, |buf| for o in buf.iter_mut() {
                    *o += scale;
                });
            }
            Op::GlobalAvgPool(a) => {
                let (_, h, w) = nodes[a.0].value.dims3().unwrap();
                let inv = T::of(1.0 / (h * w) as f64);
                acc!(*a, |buf| for (ch, plane) in buf.chunks_mut(h * w).enumerate() {
                    let gv = g[ch] * inv;
                    for o in plane {
                        *o += gv;
                    }
                });
            }
            Op::Correlate { input, taps, axis } => {
                let dims = nodes[input.0].value.dims3().unwrap();
                acc!(*input, |buf| kernels::correlate_axis_backward(
                    dims,
                    taps,
                    *axis == Axis::Width,
                    g,
                    buf
                ));
            }
            Op::Bce { prob, labels } => {
                let p = val(*prob);
                let inv_n = 1.0 / labels.len() as f64;
                acc!(*prob, |buf| for ((o, &pv), &y) in buf.iter_mut().zip(p).zip(labels) {
                    let pf = pv.as_f64();
                    if (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&pf) {
                        let d = if y == 1 { -1.0 / pf } else { 1.0 / (1.0 - pf) };
                        *o += g[0] * T::of(d * inv_n);
                    }
                });
            }
            Op::SoftmaxCe { logits, labels } => {
                let d = val(*logits);
                let (k, h, w) = nodes[logits.0].value.dims3().unwrap();
                let n = h * w;
                let scale = g[0].as_f64() / n as f64;
                acc!(*logits, |buf| for (px, &label) in labels.iter().enumerate() {
                    let (lse, _) = log_sum_exp(d, k, n, px);
                    for c in 0..k {
                        let p = (d[c * n + px].as_f64() - lse).exp();
                        let t = if c == label as usize { 1.0 } else { 0.0 };
                        buf[c * n + px] += T::of(scale * (p - t));
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(buf: &mut [T], g: &[T]) {
    for (o, &gv) in buf.iter_mut().zip(g) {
        *o += gv;
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn clamp_prob<T: Scalar>(p: T) -> T {
    let lo = T::of(PROB_CLAMP);
    let hi = T::one() - lo;
    p.max(lo).min(hi)
}

fn bce_term(p: f64, y: u8) -> f64 {
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// `(log Σ_c exp(logit_c), max logit)` at pixel `px` of a `[K, n]` buffer.
fn log_sum_exp<T: Scalar>(d: &[T], k: usize, n: usize, px: usize) -> (f64, f64) {
    let m = (0..k).map(|c| d[c * n + px].as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = (0..k).map(|c| (d[c * n + px].as_f64() - m).exp()).sum();
    (m + s.ln(), m)
}
