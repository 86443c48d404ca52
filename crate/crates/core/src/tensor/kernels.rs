//! Raw loops behind the differentiable operators.
//!
//! All buffers are row-major `[C, H, W]` planes. The loop orders keep the
//! innermost loop over a contiguous output row so the compiler can vectorize
//! the common stride-1 case.

use super::Scalar;
use crate::error::{Error, Result};

/// Shape bookkeeping for a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    pub fn new(
        (in_channels, height, width): (usize, usize, usize),
        out_channels: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 || dilation == 0 || kernel == 0 {
            return Err(Error::invalid("stride, dilation and kernel must be >= 1"));
        }
        let span = dilation * (kernel - 1) + 1;
        let out = |n: usize| -> Result<usize> {
            let padded = n + 2 * padding;
            if padded < span {
                return Err(Error::shape(format!(
                    "non-positive conv output: extent {n} + 2*{padding} < receptive span {span}"
                )));
            }
            Ok((padded - span) / stride + 1)
        };
        Ok(Self {
            in_channels,
            height,
            width,
            out_channels,
            kernel,
            stride,
            dilation,
            padding,
            out_height: out(height)?,
            out_width: out(width)?,
        })
    }

    pub fn out_shape(&self) -> [usize; 3] {
        [self.out_channels, self.out_height, self.out_width]
    }

    /// Output positions `o` in `lo..hi` with `0 <= o*stride + offset < extent`.
    fn valid_range(&self, offset: isize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
        let last = extent as isize - 1 - offset;
        if last < 0 {
            return (0, 0);
        }
        let hi = (last / s + 1).min(out_extent as isize);
        let lo = lo.min(hi);
        (lo as usize, hi as usize)
    }

    fn tap_offset(&self, k: usize) -> isize {
        (k * self.dilation) as isize - self.padding as isize
    }

    /// Iterates every (out_channel, in_channel, ky, kx) tap and the valid
    /// output rows/columns for it, handing row slices to `f`.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, isize, isize, (usize, usize), (usize, usize))) {
        for co in 0..self.out_channels {
            for ci in 0..self.in_channels {
                for ky in 0..self.kernel {
                    let dy = self.tap_offset(ky);
                    let yr = self.valid_range(dy, self.height, self.out_height);
                    if yr.0 >= yr.1 {
                        continue;
                    }
                    for kx in 0..self.kernel {
                        let dx = self.tap_offset(kx);
                        let xr = self.valid_range(dx, self.width, self.out_width);
                        if xr.0 >= xr.1 {
                            continue;
                        }
                        f(co, ci, ky, kx, dy, dx, yr, xr);
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let (h, w, ho, wo, k, s) = (g.height, g.width, g.out_height, g.out_width, g.kernel, g.stride);
    for co in 0..g.out_channels {
        let b = bias.map_or(T::zero(), |b| b[co]);
        out[co * ho * wo..(co + 1) * ho * wo].fill(b);
    }
    g.for_each_tap(|co, ci, ky, kx, dy, dx, (ylo, yhi), (xlo, xhi)| {
        let wv = kernel[((co * g.in_channels + ci) * k + ky) * k + kx];
        let in_plane = &input[ci * h * w..(ci + 1) * h * w];
        let out_plane = &mut out[co * ho * wo..(co + 1) * ho * wo];
        for oy in ylo..yhi {
            let iy = (oy as isize * s as isize + dy) as usize;
            let in_row = &in_plane[iy * w..(iy + 1) * w];
            let out_row = &mut out_plane[oy * wo + xlo..oy * wo + xhi];
            if s == 1 {
                let start = (xlo as isize + dx) as usize;
                for (o, &i) in out_row.iter_mut().zip(&in_row[start..start + (xhi - xlo)]) {
                    *o += wv * i;
                }
            } else {
                for (j, o) in out_row.iter_mut().enumerate() {
                    let ix = ((xlo + j) as isize * s as isize + dx) as usize;
                    *o += wv * in_row[ix];
                }
            }
        }
    });
}

/// Accumulates input, kernel and bias gradients given the output gradient.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    mut grad_input: Option<&mut [T]>,
    mut grad_kernel: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
) {
    let (h, w, ho, wo, k, s) = (g.height, g.width, g.out_height, g.out_width, g.kernel, g.stride);
    if let Some(gb) = grad_bias {
        for co in 0..g.out_channels {
            let plane = &grad_out[co * ho * wo..(co + 1) * ho * wo];
            gb[co] += plane.iter().copied().sum::<T>();
        }
    }
    let mut acc = vec![T::zero(); wo];
    g.for_each_tap(|co, ci, ky, kx, dy, dx, (ylo, yhi), (xlo, xhi)| {
        let widx = ((co * g.in_channels + ci) * k + ky) * k + kx;
        let wv = kernel[widx];
        let go_plane = &grad_out[co * ho * wo..(co + 1) * ho * wo];
        let n = xhi - xlo;
        if let Some(gi) = grad_input.as_deref_mut() {
            let gi_plane = &mut gi[ci * h * w..(ci + 1) * h * w];
            for oy in ylo..yhi {
                let iy = (oy as isize * s as isize + dy) as usize;
                let go_row = &go_plane[oy * wo + xlo..oy * wo + xhi];
                let gi_row = &mut gi_plane[iy * w..(iy + 1) * w];
                if s == 1 {
                    let start = (xlo as isize + dx) as usize;
                    for (gi, &go) in gi_row[start..start + n].iter_mut().zip(go_row) {
                        *gi += wv * go;
                    }
                } else {
                    for (j, &go) in go_row.iter().enumerate() {
                        let ix = ((xlo + j) as isize * s as isize + dx) as usize;
                        gi_row[ix] += wv * go;
                    }
                }
            }
        }
        if let Some(gk) = grad_kernel.as_deref_mut() {
            let in_plane = &input[ci * h * w..(ci + 1) * h * w];
            let acc = &mut acc[..n];
            acc.fill(T::zero());
            for oy in ylo..yhi {
                let iy = (oy as isize * s as isize + dy) as usize;
                let go_row = &go_plane[oy * wo + xlo..oy * wo + xhi];
                let in_row = &in_plane[iy * w..(iy + 1) * w];
                if s == 1 {
                    let start = (xlo as isize + dx) as usize;
                    for ((a, &go), &i) in acc.iter_mut().zip(go_row).zip(&in_row[start..start + n]) {
                        *a += go * i;
                    }
                } else {
                    for (j, (a, &go)) in acc.iter_mut().zip(go_row).enumerate() {
                        let ix = ((xlo + j) as isize * s as isize + dx) as usize;
                        *a += go * in_row[ix];
                    }
                }
            }
            gk[widx] += acc.iter().copied().sum::<T>();
        }
    });
}

/// Max pooling with non-overlapping `window`×`window` cells. Returns the flat
/// input index of each window's maximum (first occurrence on ties).
pub fn maxpool_forward<T: Scalar>(
    (c, h, w): (usize, usize, usize),
    window: usize,
    input: &[T],
    out: &mut [T],
) -> Vec<usize> {
    let (ho, wo) = (h / window, w / window);
    let mut argmax = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = (ch * h + oy * window) * w + ox * window;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = (ch * h + oy * window + dy) * w + ox * window + dx;
                        if input[idx] > input[best] {
                            best = idx;
                        }
                    }
                }
                out[(ch * ho + oy) * wo + ox] = input[best];
                argmax.push(best);
            }
        }
    }
    argmax
}

pub fn upsample_forward<T: Scalar>(
    (c, h, w): (usize, usize, usize),
    factor: usize,
    input: &[T],
    out: &mut [T],
) {
    let (ho, wo) = (h * factor, w * factor);
    for ch in 0..c {
        for oy in 0..ho {
            let in_row = &input[(ch * h + oy / factor) * w..(ch * h + oy / factor + 1) * w];
            let out_row = &mut out[(ch * ho + oy) * wo..(ch * ho + oy + 1) * wo];
            for (ox, o) in out_row.iter_mut().enumerate() {
                *o = in_row[ox / factor];
            }
        }
    }
}

pub fn upsample_backward<T: Scalar>(
    (c, h, w): (usize, usize, usize),
    factor: usize,
    grad_out: &[T],
    grad_in: &mut [T],
) {
    let (ho, wo) = (h * factor, w * factor);
    for ch in 0..c {
        for oy in 0..ho {
            let go_row = &grad_out[(ch * ho + oy) * wo..(ch * ho + oy + 1) * wo];
            let gi_row = &mut grad_in[(ch * h + oy / factor) * w..(ch * h + oy / factor + 1) * w];
            for (ox, &g) in go_row.iter().enumerate() {
                gi_row[ox / factor] += g;
            }
        }
    }
}

/// Valid 1-D correlation of every row (`along_width`) or column with `taps`.
pub fn correlate_axis<T: Scalar>(
    (c, h, w): (usize, usize, usize),
    taps: &[T],
    along_width: bool,
    input: &[T],
    out: &mut [T],
) {
    let k = taps.len();
    if along_width {
        let wo = w + 1 - k;
        for row in 0..c * h {
            let in_row = &input[row * w..(row + 1) * w];
            let out_row = &mut out[row * wo..(row + 1) * wo];
            out_row.fill(T::zero());
            for (t, &tv) in taps.iter().enumerate() {
                for (o, &i) in out_row.iter_mut().zip(&in_row[t..t + wo]) {
                    *o += tv * i;
                }
            }
        }
    } else {
        let ho = h + 1 - k;
        for ch in 0..c {
            for oy in 0..ho {
                let out_row = &mut out[(ch * ho + oy) * w..(ch * ho + oy + 1) * w];
                out_row.fill(T::zero());
                for (t, &tv) in taps.iter().enumerate() {
                    let in_row = &input[(ch * h + oy + t) * w..(ch * h + oy + t + 1) * w];
                    for (o, &i) in out_row.iter_mut().zip(in_row) {
                        *o += tv * i;
                    }
                }
            }
        }
    }
}

pub fn correlate_axis_backward<T: Scalar>(
    (c, h, w): (usize, usize, usize),
    taps: &[T],
    along_width: bool,
    grad_out: &[T],
    grad_in: &mut [T],
) {
    let k = taps.len();
    if along_width {
        let wo = w + 1 - k;
        for row in 0..c * h {
            let go_row = &grad_out[row * wo..(row + 1) * wo];
            let gi_row = &mut grad_in[row * w..(row + 1) * w];
            for (t, &tv) in taps.iter().enumerate() {
                for (gi, &go) in gi_row[t..t + wo].iter_mut().zip(go_row) {
                    *gi += tv * go;
                }
            }
        }
    } else {
        let ho = h + 1 - k;
        for ch in 0..c {
            for oy in 0..ho {
                let go_row = &grad_out[(ch * ho + oy) * w..(ch * ho + oy + 1) * w];
                for (t, &tv) in taps.iter().enumerate() {
                    let gi_row = &mut grad_in[(ch * h + oy + t) * w..(ch * h + oy + t + 1) * w];
                    for (gi, &go) in gi_row.iter_mut().zip(go_row) {
                        *gi += tv * go;
                    }
                }
            }
        }
    }
}
