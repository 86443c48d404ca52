//! Raster and mask loading, standardization and persistence.
//!
//! Supported inputs are PNG (8 or 16 bit, 1–4 channels) and the raw `SLKR`
//! float format: a 16-byte header (`"SLKR"`, u32 width, u32 height,
//! u32 channels, little-endian) followed by little-endian f32 samples in
//! pixel-interleaved row-major order.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, LumaA, Rgb, Rgba};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::atomic_write;
use crate::tensor::{Scalar, Tensor};

pub const RAW_MAGIC: &[u8; 4] = b"SLKR";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

/// A 2-D image with 1–4 interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
    stats: Vec<ChannelStats>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Empty("zero-area raster".into()));
        }
        if !(1..=4).contains(&channels) {
            return Err(Error::Unsupported(format!("{channels} channels (1-4 supported)")));
        }
        if data.len() != width * height * channels {
            return Err(Error::shape(format!(
                "raster {width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("raster contains non-finite values".into()));
        }
        let stats = channel_stats(&data, channels);
        Ok(Self {
            width,
            height,
            channels,
            data,
            stats,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn stats(&self) -> &[ChannelStats] {
        &self.stats
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Planar `[C,H,W]` copy.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let (w, h, c) = (self.width, self.height, self.channels);
        Tensor::from_fn(&[c, h, w], |i| {
            let ch = i / (h * w);
            let p = i % (h * w);
            T::of(self.data[p * c + ch] as f64)
        })
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        let mut data = vec![0.0f32; c * h * w];
        for (i, v) in t.data().iter().enumerate() {
            let ch = i / (h * w);
            let p = i % (h * w);
            data[p * c + ch] = v.as_f64() as f32;
        }
        Raster::new(w, h, c, data)
    }
}

fn channel_stats(data: &[f32], channels: usize) -> Vec<ChannelStats> {
    let n = (data.len() / channels) as f64;
    (0..channels)
        .map(|c| {
            let mean = data.iter().skip(c).step_by(channels).map(|&v| v as f64).sum::<f64>() / n;
            let var = data
                .iter()
                .skip(c)
                .step_by(channels)
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>()
                / n;
            ChannelStats {
                mean,
                std: var.sqrt(),
            }
        })
        .collect()
}

/// Per-channel zero mean, unit (population) variance. Constant channels map
/// to all zeros.
pub fn standardize(r: &Raster) -> Raster {
    let c = r.channels;
    let data = r
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let s = r.stats[i % c];
            if s.std > 0.0 {
                ((v as f64 - s.mean) / s.std) as f32
            } else {
                0.0
            }
        })
        .collect();
    Raster::new(r.width, r.height, c, data).expect("standardize preserves raster invariants")
}

fn unreadable(path: &Path, reason: impl ToString) -> Error {
    Error::Unreadable {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn decode_image(path: &Path) -> Result<DynamicImage> {
    let bytes = std::fs::read(path).map_err(|e| unreadable(path, e))?;
    image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|e| unreadable(path, e))
}

pub fn load_raster(path: &Path) -> Result<Raster> {
    let bytes = std::fs::read(path).map_err(|e| unreadable(path, e))?;
    if bytes.starts_with(RAW_MAGIC) {
        return decode_raw(&bytes).map_err(|e| match e {
            Error::Corrupt(m) => unreadable(path, m),
            other => other,
        });
    }
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| unreadable(path, e))?;
    raster_from_image(img)
}

fn raster_from_image(img: DynamicImage) -> Result<Raster> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Empty("zero-area image".into()));
    }
    let to_f = |v: &[u8]| v.iter().map(|&b| b as f32).collect::<Vec<_>>();
    let to_f16 = |v: &[u16]| v.iter().map(|&b| b as f32).collect::<Vec<_>>();
    let (c, data) = match &img {
        DynamicImage::ImageLuma8(b) => (1, to_f(b.as_raw())),
        DynamicImage::ImageLumaA8(b) => (2, to_f(b.as_raw())),
        DynamicImage::ImageRgb8(b) => (3, to_f(b.as_raw())),
        DynamicImage::ImageRgba8(b) => (4, to_f(b.as_raw())),
        DynamicImage::ImageLuma16(b) => (1, to_f16(b.as_raw())),
        DynamicImage::ImageLumaA16(b) => (2, to_f16(b.as_raw())),
        DynamicImage::ImageRgb16(b) => (3, to_f16(b.as_raw())),
        DynamicImage::ImageRgba16(b) => (4, to_f16(b.as_raw())),
        other => {
            return Err(Error::Unsupported(format!(
                "bit depth / color type {:?}",
                other.color()
            )))
        }
    };
    Raster::new(w, h, c, data)
}

fn decode_raw(bytes: &[u8]) -> Result<Raster> {
    if bytes.len() < 16 {
        return Err(Error::Corrupt("raw header truncated".into()));
    }
    let u = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (w, h, c) = (u(4), u(8), u(12));
    let n = w
        .checked_mul(h)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::Corrupt("raw dimensions overflow".into()))?;
    let body = &bytes[16..];
    if body.len() != n * 4 {
        return Err(Error::Corrupt(format!(
            "raw body has {} bytes, header implies {}",
            body.len(),
            n * 4
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Raster::new(w, h, c, data)
}

pub fn encode_raw(r: &Raster) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + r.data.len() * 4);
    out.extend_from_slice(RAW_MAGIC);
    for v in [r.width, r.height, r.channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in &r.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn save_raw(r: &Raster, path: &Path) -> Result<()> {
    atomic_write(path, &encode_raw(r))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

/// PNG encoding; samples are rounded and clamped to the depth's range.
pub fn encode_png(r: &Raster, depth: BitDepth) -> Result<Vec<u8>> {
    let (w, h) = (r.width as u32, r.height as u32);
    let img = match depth {
        BitDepth::Eight => {
            let px: Vec<u8> = r.data.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
            match r.channels {
                1 => DynamicImage::ImageLuma8(ImageBuffer::<Luma<u8>, _>::from_raw(w, h, px).unwrap()),
                2 => DynamicImage::ImageLumaA8(ImageBuffer::<LumaA<u8>, _>::from_raw(w, h, px).unwrap()),
                3 => DynamicImage::ImageRgb8(ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, px).unwrap()),
                _ => DynamicImage::ImageRgba8(ImageBuffer::<Rgba<u8>, _>::from_raw(w, h, px).unwrap()),
            }
        }
        BitDepth::Sixteen => {
            let px: Vec<u16> = r.data.iter().map(|&v| v.round().clamp(0.0, 65535.0) as u16).collect();
            match r.channels {
                1 => DynamicImage::ImageLuma16(ImageBuffer::<Luma<u16>, _>::from_raw(w, h, px).unwrap()),
                2 => DynamicImage::ImageLumaA16(ImageBuffer::<LumaA<u16>, _>::from_raw(w, h, px).unwrap()),
                3 => DynamicImage::ImageRgb16(ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, px).unwrap()),
                _ => DynamicImage::ImageRgba16(ImageBuffer::<Rgba<u16>, _>::from_raw(w, h, px).unwrap()),
            }
        }
    };
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| Error::Unsupported(e.to_string()))?;
    Ok(buf.into_inner())
}

pub fn save_png(r: &Raster, path: &Path, depth: BitDepth) -> Result<()> {
    atomic_write(path, &encode_png(r, depth)?)
}

/// Binary ground truth: 0 = background, 1 = landslide.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(format!(
                "mask {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::invalid("mask class ids must be 0 or 1"));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn check_dims(&self, width: usize, height: usize) -> Result<()> {
        if (self.width, self.height) != (width, height) {
            return Err(Error::shape(format!(
                "mask is {}x{}, expected {width}x{height}",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

/// Single-channel image to mask: 8-bit value >= 128 is class 1.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = decode_image(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match &img {
        DynamicImage::ImageLuma8(b) => b.as_raw().iter().map(|&v| (v >= 128) as u8).collect(),
        DynamicImage::ImageLuma16(b) => b.as_raw().iter().map(|&v| (v >> 8 >= 128) as u8).collect(),
        other => {
            return Err(Error::Unsupported(format!(
                "mask must be single-channel, got {:?}",
                other.color()
            )))
        }
    };
    Mask::new(w, h, data)
}

pub fn encode_mask_png(m: &Mask) -> Result<Vec<u8>> {
    let px: Vec<u8> = m.data.iter().map(|&v| v * 255).collect();
    let img = ImageBuffer::<Luma<u8>, _>::from_raw(m.width as u32, m.height as u32, px).unwrap();
    let mut buf = Cursor::new(Vec::new());
    DynamicImage::ImageLuma8(img)
        .write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| Error::Unsupported(e.to_string()))?;
    Ok(buf.into_inner())
}

pub fn save_mask(m: &Mask, path: &Path) -> Result<()> {
    atomic_write(path, &encode_mask_png(m)?)
}
