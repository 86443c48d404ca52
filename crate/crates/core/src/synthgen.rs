//! Procedural terrain-like scenes with elliptical "landslide" blobs.
//!
//! The background is layered value noise. Inside each blob the fine octaves
//! are replaced according to [`AnomalyStyle`] and the brightness is shifted.
//! The mask is written from the same geometry test as the pixels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Mask, Raster};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyStyle {
    /// Fine octaves replaced by per-pixel granular roughness.
    Rough,
    /// Fine octaves removed (smoothed texture).
    Smooth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub texture_octaves: usize,
    /// Lattice period of the coarsest octave, in pixels.
    pub base_period: usize,
    pub blob_count: usize,
    pub blob_radius_range: [f64; 2],
    /// Scales the blob brightness shift and roughness.
    pub contrast: f64,
    pub anomaly: AnomalyStyle,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 512,
            height: 512,
            channels: 3,
            texture_octaves: 5,
            base_period: 32,
            blob_count: 8,
            blob_radius_range: [10.0, 24.0],
            contrast: 1.0,
            anomaly: AnomalyStyle::Rough,
            seed: 0,
        }
    }
}

/// Amplitude ratio between successive octaves.
const PERSISTENCE: f64 = 0.8;

/// Octaves with a period at or below this stay in the background only.
const FINE_PERIOD: usize = 4;

/// Output value = MID + SPREAD * texture, clamped to the 8-bit range.
const MID: f64 = 128.0;
const SPREAD: f64 = 64.0;

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("scene dimensions must be positive"));
        }
        if !(1..=4).contains(&self.channels) {
            return Err(Error::invalid("scene channels must be 1-4"));
        }
        if self.texture_octaves == 0 || self.base_period < 2 {
            return Err(Error::invalid("need >= 1 octave and a base period >= 2"));
        }
        let [lo, hi] = self.blob_radius_range;
        if !(lo >= 2.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::invalid(format!("blob radius range [{lo}, {hi}] needs 2 <= min <= max")));
        }
        if self.blob_count > 0 && 2.0 * hi > self.width.min(self.height) as f64 {
            return Err(Error::invalid(format!(
                "blob radius {hi} cannot fit in a {}x{} scene",
                self.width, self.height
            )));
        }
        if !(self.contrast >= 0.0 && self.contrast.is_finite()) {
            return Err(Error::invalid("contrast must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub angle: f64,
}

impl Blob {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = (dx * c + dy * s) / self.rx;
        let v = (-dx * s + dy * c) / self.ry;
        u * u + v * v <= 1.0
    }

    fn reach(&self) -> f64 {
        self.rx.max(self.ry)
    }
}

/// One octave of 2-D value noise: uniform lattice values in [-1, 1],
/// smoothstep-interpolated.
struct ValueNoise {
    period: usize,
    cols: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(width: usize, height: usize, period: usize, rng: &mut Rng) -> Self {
        let cols = width / period + 2;
        let rows = height / period + 2;
        let lattice = (0..cols * rows).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        Self { period, cols, lattice }
    }

    fn at(&self, x: usize, y: usize) -> f64 {
        let p = self.period;
        let (gx, gy) = (x / p, y / p);
        let fade = |t: f64| t * t * (3.0 - 2.0 * t);
        let tx = fade((x % p) as f64 / p as f64);
        let ty = fade((y % p) as f64 / p as f64);
        let l = |i: usize, j: usize| self.lattice[j * self.cols + i];
        let top = l(gx, gy) * (1.0 - tx) + l(gx + 1, gy) * tx;
        let bottom = l(gx, gy + 1) * (1.0 - tx) + l(gx + 1, gy + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

fn place_blobs(spec: &SceneSpec, rng: &mut Rng) -> Vec<Blob> {
    let [lo, hi] = spec.blob_radius_range;
    let (w, h) = (spec.width as f64, spec.height as f64);
    let mut blobs: Vec<Blob> = Vec::with_capacity(spec.blob_count);
    for _ in 0..spec.blob_count {
        let mut candidate = None;
        // Prefer non-overlapping placements; accept overlap after 100 tries.
        for _ in 0..100 {
            let rx = rng.uniform_range(lo, hi);
            let ry = rng.uniform_range(lo, hi);
            let r = rx.max(ry);
            let b = Blob {
                cx: rng.uniform_range(r, w - r),
                cy: rng.uniform_range(r, h - r),
                rx,
                ry,
                angle: rng.uniform_range(0.0, std::f64::consts::PI),
            };
            let clear = blobs
                .iter()
                .all(|o| (o.cx - b.cx).hypot(o.cy - b.cy) > o.reach() + b.reach());
            candidate = Some(b);
            if clear {
                break;
            }
        }
        blobs.push(candidate.expect("at least one try"));
    }
    blobs
}

pub struct Scene {
    pub raster: Raster,
    pub mask: Mask,
    pub blobs: Vec<Blob>,
}

/// Generates the scene for `spec`; deterministic in `spec.seed`.
pub fn generate_scene(spec: &SceneSpec) -> Result<(Raster, Mask)> {
    let s = generate_scene_detailed(spec)?;
    Ok((s.raster, s.mask))
}

pub fn generate_scene_detailed(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = Rng::stream(spec.seed, 0);
    let octaves: Vec<(ValueNoise, f64)> = (0..spec.texture_octaves)
        .map(|o| {
            let period = (spec.base_period >> o).max(1);
            (ValueNoise::new(w, h, period, &mut rng), PERSISTENCE.powi(o as i32))
        })
        .collect();
    let norm: f64 = octaves.iter().map(|(_, a)| a).sum();
    // Per-channel gain and offset give the channels distinct but correlated
    // appearance.
    let tint: Vec<(f64, f64)> = (0..spec.channels)
        .map(|_| (rng.uniform_range(0.8, 1.2), rng.uniform_range(-0.2, 0.2)))
        .collect();
    let blobs = place_blobs(spec, &mut rng);
    let shift = 0.5 * spec.contrast;
    let roughness = 0.35 * spec.contrast;

    let mut grain = Rng::stream(spec.seed, 1);
    let mut mask = Mask::zeros(w, h);
    let mut data = Vec::with_capacity(w * h * spec.channels);
    for y in 0..h {
        for x in 0..w {
            let inside = blobs.iter().any(|b| b.contains(x as f64, y as f64));
            let mut coarse = 0.0;
            let mut fine = 0.0;
            for (n, a) in &octaves {
                let v = a * n.at(x, y);
                if n.period <= FINE_PERIOD {
                    fine += v;
                } else {
                    coarse += v;
                }
            }
            let t = if inside {
                mask.set(x, y, true);
                let detail = match spec.anomaly {
                    AnomalyStyle::Rough => roughness * grain.normal(),
                    AnomalyStyle::Smooth => 0.0,
                };
                (coarse + detail) / norm + shift
            } else {
                (coarse + fine) / norm
            };
            for &(gain, offset) in &tint {
                data.push((MID + SPREAD * (gain * t + offset)).clamp(0.0, 255.0) as f32);
            }
        }
    }
    Ok(Scene {
        raster: Raster::new(w, h, spec.channels, data)?,
        mask,
        blobs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_blobs_means_empty_mask() {
        let spec = SceneSpec {
            width: 64,
            height: 64,
            blob_count: 0,
            ..Default::default()
        };
        let (_, m) = generate_scene(&spec).unwrap();
        assert_eq!(m.count_ones(), 0);
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec {
            width: 96,
            height: 80,
            seed: 5,
            ..Default::default()
        };
        assert_eq!(generate_scene(&spec).unwrap(), generate_scene(&spec).unwrap());
    }

    #[test]
    fn oversized_blob_is_rejected() {
        let spec = SceneSpec {
            width: 40,
            height: 64,
            blob_radius_range: [10.0, 21.0],
            ..Default::default()
        };
        assert!(generate_scene(&spec).is_err());
    }

    #[test]
    fn mask_is_blob_support() {
        let spec = SceneSpec {
            width: 128,
            height: 128,
            blob_count: 3,
            blob_radius_range: [6.0, 12.0],
            ..Default::default()
        };
        let s = generate_scene_detailed(&spec).unwrap();
        for y in 0..128 {
            for x in 0..128 {
                let inside = s.blobs.iter().any(|b| b.contains(x as f64, y as f64));
                assert_eq!(s.mask.get(x, y) == 1, inside);
            }
        }
    }
}
