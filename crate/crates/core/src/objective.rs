//! Loss and similarity functions: SSIM reconstruction loss, binary
//! cross-entropy and per-pixel softmax cross-entropy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Mask;
use crate::tensor::{Axis, Graph, Scalar, Tensor, Var, PROB_CLAMP};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    /// SSIM per channel, averaged.
    #[default]
    PerChannel,
    /// Channels averaged into one luminance plane first.
    Luminance,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimConfig {
    pub window_size: usize,
    pub window_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Value span `L` in `C1 = (k1 L)²`, `C2 = (k2 L)²`.
    pub dynamic_range: f64,
    pub channel_mode: ChannelMode,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window_size: 11,
            window_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
            channel_mode: ChannelMode::PerChannel,
        }
    }
}

impl SsimConfig {
    pub fn with_dynamic_range(mut self, l: f64) -> Self {
        self.dynamic_range = l;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_size < 3 || self.window_size.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "SSIM window must be odd and >= 3, got {}",
                self.window_size
            )));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0 && self.dynamic_range > 0.0 && self.window_sigma > 0.0) {
            return Err(Error::invalid("SSIM k1, k2, sigma and dynamic range must be > 0"));
        }
        Ok(())
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    /// Normalized 1-D Gaussian window.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window_size / 2) as f64;
        let raw: Vec<f64> = (0..self.window_size)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * self.window_sigma * self.window_sigma)).exp()
            })
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }
}

/// Span `max - min` over a batch of tensors; 1.0 when the batch is flat.
pub fn dynamic_range<'a, T: Scalar>(batch: impl IntoIterator<Item = &'a Tensor<T>>) -> f64 {
    let (lo, hi) = batch
        .into_iter()
        .flat_map(|t| t.data().iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v.as_f64()), hi.max(v.as_f64()))
        });
    let span = hi - lo;
    if span.is_finite() && span > 0.0 {
        span
    } else {
        1.0
    }
}

pub struct SsimOutput<T> {
    /// Scalar node: SSIM averaged over all valid-window positions and
    /// channels.
    pub mean: Var,
    /// Per-pixel SSIM, edge-replicated back to the input's `[C,H,W]`.
    pub map: Tensor<T>,
}

fn broadcast_channels<T: Scalar>(values: &[f64], h: usize, w: usize) -> Tensor<T> {
    Tensor::from_fn(&[values.len(), h, w], |i| T::of(values[i / (h * w)]))
}

fn channel_means<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    let (c, h, w) = t.dims3().expect("rank checked by caller");
    (0..c)
        .map(|ch| t.data()[ch * h * w..(ch + 1) * h * w].iter().map(|v| v.as_f64()).sum::<f64>() / (h * w) as f64)
        .collect()
}

fn to_luminance<T: Scalar>(g: &mut Graph<T>, v: Var) -> Result<Var> {
    let (c, _, _) = g.value(v).dims3()?;
    let k = g.constant(Tensor::full(&[1, c, 1, 1], T::of(1.0 / c as f64)));
    g.conv2d(v, k, None, 1, 1, 0)
}

/// Structural similarity of two `[C,H,W]` nodes.
///
/// Local statistics use a separable Gaussian window over valid positions.
/// Variances and covariance are computed on per-channel mean-centred copies;
/// they are shift invariant, and centring keeps the `E[x²] - E[x]²`
/// cancellation small in single precision.
pub fn ssim<T: Scalar>(g: &mut Graph<T>, x: Var, y: Var, cfg: &SsimConfig) -> Result<SsimOutput<T>> {
    cfg.validate()?;
    if g.shape(x) != g.shape(y) {
        return Err(Error::shape(format!(
            "ssim: {:?} vs {:?}",
            g.shape(x),
            g.shape(y)
        )));
    }
    let (c_in, h, w) = g.value(x).dims3()?;
    let win = cfg.window_size;
    if h < win || w < win {
        return Err(Error::shape(format!(
            "ssim window {win} larger than {h}x{w} image"
        )));
    }
    let (x, y) = match cfg.channel_mode {
        ChannelMode::PerChannel => (x, y),
        ChannelMode::Luminance => (to_luminance(g, x)?, to_luminance(g, y)?),
    };
    let c = g.value(x).dims3()?.0;
    let taps: Vec<T> = cfg.taps().into_iter().map(T::of).collect();
    let blur = |g: &mut Graph<T>, v: Var| -> Result<Var> {
        let a = g.correlate(v, &taps, Axis::Width)?;
        g.correlate(a, &taps, Axis::Height)
    };

    let mx = channel_means(g.value(x));
    let my = channel_means(g.value(y));
    let mx_full = g.constant(broadcast_channels(&mx, h, w));
    let my_full = g.constant(broadcast_channels(&my, h, w));
    let xc = g.sub(x, mx_full)?;
    let yc = g.sub(y, my_full)?;

    let (ho, wo) = (h + 1 - win, w + 1 - win);
    let bx = blur(g, xc)?;
    let by = blur(g, yc)?;
    let mx_valid = g.constant(broadcast_channels(&mx, ho, wo));
    let my_valid = g.constant(broadcast_channels(&my, ho, wo));
    let mu_x = g.add(bx, mx_valid)?;
    let mu_y = g.add(by, my_valid)?;

    let xx = g.mul(xc, xc)?;
    let yy = g.mul(yc, yc)?;
    let xy = g.mul(xc, yc)?;
    let e_xx = blur(g, xx)?;
    let e_yy = blur(g, yy)?;
    let e_xy = blur(g, xy)?;
    let bx2 = g.mul(bx, bx)?;
    let by2 = g.mul(by, by)?;
    let bxy = g.mul(bx, by)?;
    let var_x = g.sub(e_xx, bx2)?;
    let var_y = g.sub(e_yy, by2)?;
    let cov = g.sub(e_xy, bxy)?;

    let mu_xy = g.mul(mu_x, mu_y)?;
    let lum_num = g.scale(mu_xy, 2.0);
    let lum_num = g.offset(lum_num, cfg.c1());
    let mu_x2 = g.mul(mu_x, mu_x)?;
    let mu_y2 = g.mul(mu_y, mu_y)?;
    let lum_den = g.add(mu_x2, mu_y2)?;
    let lum_den = g.offset(lum_den, cfg.c1());

    let cs_num = g.scale(cov, 2.0);
    let cs_num = g.offset(cs_num, cfg.c2());
    let cs_den = g.add(var_x, var_y)?;
    let cs_den = g.offset(cs_den, cfg.c2());

    let num = g.mul(lum_num, cs_num)?;
    let den = g.mul(lum_den, cs_den)?;
    let map = g.div(num, den)?;
    let mean = g.mean(map);

    let valid = g.value(map);
    let r = win / 2;
    let padded = Tensor::from_fn(&[c, h, w], |i| {
        let ch = i / (h * w);
        let yy = ((i / w) % h).saturating_sub(r).min(ho - 1);
        let xx = (i % w).saturating_sub(r).min(wo - 1);
        valid.data()[(ch * ho + yy) * wo + xx]
    });
    debug_assert!(c == c_in || cfg.channel_mode == ChannelMode::Luminance);
    Ok(SsimOutput { mean, map: padded })
}

/// `1 - ssim_mean`.
pub fn ssim_loss<T: Scalar>(g: &mut Graph<T>, x: Var, y: Var, cfg: &SsimConfig) -> Result<Var> {
    let s = ssim(g, x, y, cfg)?;
    let neg = g.scale(s.mean, -1.0);
    Ok(g.offset(neg, 1.0))
}

/// SSIM of two plain tensors: `(mean, map)`.
pub fn ssim_value<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, cfg: &SsimConfig) -> Result<(f64, Tensor<T>)> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let yv = g.constant(y.clone());
    let out = ssim(&mut g, xv, yv, cfg)?;
    Ok((g.value(out.mean).item().as_f64(), out.map))
}

/// Mean binary cross-entropy over a batch of probabilities.
pub fn bce<T: Scalar>(g: &mut Graph<T>, prob: Var, labels: &[u8]) -> Result<Var> {
    g.bce(prob, labels)
}

/// Binary cross-entropy of a single probability, clamped like [`bce`].
pub fn bce_value(prob: f64, label: u8) -> f64 {
    let p = prob.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Mean per-pixel softmax cross-entropy of `[2,H,W]` logits against a mask.
pub fn pixel_cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, mask: &Mask) -> Result<Var> {
    let (_, h, w) = g.value(logits).dims3()?;
    mask.check_dims(w, h)?;
    g.softmax_cross_entropy(logits, mask.data())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn closed_form(c1: f64, c2: f64, cfg: &SsimConfig) -> f64 {
        let k = cfg.c1();
        (2.0 * c1 * c2 + k) / (c1 * c1 + c2 * c2 + k)
    }

    #[test]
    fn self_similarity_is_one() {
        let mut rng = Rng::new(4);
        let x = Tensor::<f32>::randn(&[2, 16, 16], 1.0, &mut rng);
        let cfg = SsimConfig::default().with_dynamic_range(dynamic_range([&x]));
        let (m, map) = ssim_value(&x, &x, &cfg).unwrap();
        assert!((m - 1.0).abs() < 1e-6);
        assert!(map.data().iter().all(|v| (v - 1.0).abs() < 1e-5));
    }

    #[test]
    fn constant_pair_matches_closed_form() {
        let cfg = SsimConfig::default();
        let x = Tensor::<f32>::zeros(&[1, 12, 12]);
        let y = Tensor::<f32>::ones(&[1, 12, 12]);
        let (m, _) = ssim_value(&x, &y, &cfg).unwrap();
        assert!((m - 0.0001 / 1.0001).abs() < 1e-6, "{m}");
        assert!((m - closed_form(0.0, 1.0, &cfg)).abs() < 1e-9);
    }

    #[test]
    fn loss_of_constant_pair() {
        let cfg = SsimConfig::default();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 11, 11]));
        let y = g.constant(Tensor::ones(&[1, 11, 11]));
        let l = ssim_loss(&mut g, x, y, &cfg).unwrap();
        assert!((g.value(l).item() - (1.0 - 0.0001 / 1.0001)).abs() < 1e-12);
    }

    #[test]
    fn window_larger_than_image_errors() {
        let x = Tensor::<f32>::zeros(&[1, 8, 8]);
        assert!(matches!(ssim_value(&x, &x, &SsimConfig::default()), Err(Error::Shape(_))));
    }

    #[test]
    fn shape_mismatch_errors() {
        let x = Tensor::<f32>::zeros(&[1, 12, 12]);
        let y = Tensor::<f32>::zeros(&[1, 12, 13]);
        assert!(matches!(ssim_value(&x, &y, &SsimConfig::default()), Err(Error::Shape(_))));
    }

    #[test]
    fn even_window_is_rejected() {
        let cfg = SsimConfig {
            window_size: 10,
            ..SsimConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn luminance_mode_single_channel_map() {
        let mut rng = Rng::new(8);
        let x = Tensor::<f64>::randn(&[3, 12, 12], 1.0, &mut rng);
        let y = Tensor::<f64>::randn(&[3, 12, 12], 1.0, &mut rng);
        let cfg = SsimConfig {
            channel_mode: ChannelMode::Luminance,
            ..SsimConfig::default()
        };
        let (_, map) = ssim_value(&x, &y, &cfg).unwrap();
        assert_eq!(map.shape(), &[1, 12, 12]);
    }

    #[test]
    fn loss_decreases_along_interpolation() {
        let mut rng = Rng::new(21);
        let x = Tensor::<f32>::randn(&[1, 24, 24], 1.0, &mut rng);
        let noise = Tensor::<f32>::randn(&[1, 24, 24], 1.0, &mut rng);
        let cfg = SsimConfig::default().with_dynamic_range(dynamic_range([&x]));
        let losses: Vec<f64> = (0..10)
            .map(|i| {
                let a = i as f32 / 9.0;
                let y = Tensor::new(
                    &[1, 24, 24],
                    noise.data().iter().zip(x.data()).map(|(&n, &xv)| (1.0 - a) * n + a * xv).collect(),
                )
                .unwrap();
                1.0 - ssim_value(&x, &y, &cfg).unwrap().0
            })
            .collect();
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "{losses:?}");
        }
        assert!(losses[9].abs() < 1e-6);
    }

    #[test]
    fn bce_reference_values() {
        assert!((bce_value(0.5, 0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_value(0.5, 1) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_value(1.0 - 1e-7, 1) - 1e-7).abs() < 1e-12);
        assert!((bce_value(0.0, 1) - 16.118_095_650_958_32).abs() < 1e-9);
    }

    #[test]
    fn pixel_ce_reference_values() {
        let mask = Mask::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        let mut g = Graph::<f64>::new();
        let flat = g.constant(Tensor::zeros(&[2, 2, 2]));
        let l = pixel_cross_entropy(&mut g, flat, &mask).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

        // +10 margin toward the true class everywhere: ln(1 + e^-10)
        let logits = Tensor::from_fn(&[2, 2, 2], |i| {
            let (c, px) = (i / 4, i % 4);
            if c as u8 == mask.data()[px] { 10.0 } else { 0.0 }
        });
        let lv = g.constant(logits);
        let l = pixel_cross_entropy(&mut g, lv, &mask).unwrap();
        assert!((g.value(l).item() - 4.5398899e-5).abs() < 1e-10);
    }

    #[test]
    fn pixel_ce_dimension_mismatch() {
        let mask = Mask::zeros(3, 2);
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros(&[2, 2, 2]));
        assert!(pixel_cross_entropy(&mut g, l, &mask).is_err());
    }
}
