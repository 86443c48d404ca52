//! Deterministic tiling of rasters into square patches, the coverage-based
//! training filter and train/test splitting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Mask, Raster};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Minimum landslide coverage for a patch to be labeled positive.
pub const DEFAULT_POSITIVE_THRESHOLD: f64 = 0.01;
/// Patches at or above this landslide coverage are excluded from
/// unsupervised training.
pub const DEFAULT_FILTER_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BorderPolicy {
    /// Only cells that lie fully inside the raster.
    DropPartial,
    /// Cells cover every pixel; samples past the edge are mirror-reflected.
    PadReflect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub width: usize,
    pub height: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub border_policy: BorderPolicy,
    /// Row-major cell origins.
    pub cells: Vec<Cell>,
}

fn axis_origins(extent: usize, patch: usize, stride: usize, policy: BorderPolicy) -> Vec<usize> {
    match policy {
        BorderPolicy::DropPartial if extent < patch => Vec::new(),
        BorderPolicy::DropPartial => (0..=(extent - patch) / stride).map(|i| i * stride).collect(),
        BorderPolicy::PadReflect if extent <= patch => vec![0],
        BorderPolicy::PadReflect => {
            let n = (extent - patch).div_ceil(stride) + 1;
            (0..n).map(|i| i * stride).collect()
        }
    }
}

pub fn make_grid(
    width: usize,
    height: usize,
    patch_size: usize,
    stride: usize,
    border_policy: BorderPolicy,
) -> Result<PatchGrid> {
    if patch_size == 0 || stride == 0 {
        return Err(Error::invalid("patch_size and stride must be >= 1"));
    }
    if width == 0 || height == 0 {
        return Err(Error::Empty("zero-area raster".into()));
    }
    let rows = axis_origins(height, patch_size, stride, border_policy);
    let cols = axis_origins(width, patch_size, stride, border_policy);
    let cells: Vec<Cell> = rows
        .iter()
        .flat_map(|&row| cols.iter().map(move |&col| Cell { row, col }))
        .collect();
    if cells.is_empty() {
        return Err(Error::Empty(format!(
            "patch size {patch_size} does not fit a {width}x{height} raster without padding"
        )));
    }
    Ok(PatchGrid {
        width,
        height,
        patch_size,
        stride,
        border_policy,
        cells,
    })
}

/// Mirror index into `0..n` without repeating the edge sample
/// (…, 2, 1, 0, 1, 2, …). A length-1 axis always maps to 0.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cell(&self, i: usize) -> Result<Cell> {
        self.cells.get(i).copied().ok_or(Error::OutOfRange {
            index: i,
            len: self.cells.len(),
        })
    }

    /// Source coordinate `(x, y)` of patch pixel `(px, py)` of cell `c`.
    #[inline]
    pub fn source_xy(&self, c: Cell, px: usize, py: usize) -> (usize, usize) {
        (
            reflect_index((c.col + px) as isize, self.width),
            reflect_index((c.row + py) as isize, self.height),
        )
    }

    fn check_source(&self, width: usize, height: usize) -> Result<()> {
        if (width, height) != (self.width, self.height) {
            return Err(Error::shape(format!(
                "grid built for {}x{}, got {width}x{height}",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

/// `[C, P, P]` tensor of cell `i`.
pub fn extract_patch(r: &Raster, g: &PatchGrid, i: usize) -> Result<Tensor<f32>> {
    g.check_source(r.width(), r.height())?;
    let cell = g.cell(i)?;
    let (c, p) = (r.channels(), g.patch_size);
    let mut data = vec![0.0f32; c * p * p];
    for py in 0..p {
        for px in 0..p {
            let (x, y) = g.source_xy(cell, px, py);
            for ch in 0..c {
                data[(ch * p + py) * p + px] = r.get(x, y, ch);
            }
        }
    }
    Tensor::new(&[c, p, p], data)
}

/// Class ids of cell `i`, row-major, with the same reflection as
/// [`extract_patch`].
pub fn extract_mask_patch(m: &Mask, g: &PatchGrid, i: usize) -> Result<Vec<u8>> {
    g.check_source(m.width(), m.height())?;
    let cell = g.cell(i)?;
    let p = g.patch_size;
    let mut out = Vec::with_capacity(p * p);
    for py in 0..p {
        for px in 0..p {
            let (x, y) = g.source_xy(cell, px, py);
            out.push(m.get(x, y));
        }
    }
    Ok(out)
}

/// Fraction of the cell's `P²` pixels labeled landslide.
pub fn landslide_coverage(m: &Mask, g: &PatchGrid, i: usize) -> Result<f64> {
    let labels = extract_mask_patch(m, g, i)?;
    let ones = labels.iter().filter(|&&v| v == 1).count();
    Ok(ones as f64 / labels.len() as f64)
}

/// Cells whose coverage is strictly below `threshold`, in grid order.
pub fn filter_unsupervised(m: &Mask, g: &PatchGrid, threshold: f64) -> Result<Vec<usize>> {
    let mut keep = Vec::new();
    for i in 0..g.len() {
        if landslide_coverage(m, g, i)? < threshold {
            keep.push(i);
        }
    }
    Ok(keep)
}

pub fn patch_label(m: &Mask, g: &PatchGrid, i: usize, positive_threshold: f64) -> Result<u8> {
    Ok((landslide_coverage(m, g, i)? >= positive_threshold) as u8)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Seeded uniform permutation of all cells.
    #[default]
    Random,
    /// Leading cells in grid order go to training.
    Contiguous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub ratio: f64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split(g: &PatchGrid, ratio: f64, seed: u64) -> Result<SplitAssignment> {
    split_cells(g.len(), ratio, seed, SplitMode::Random)
}

/// Partitions `0..n` into train/test; the first `floor(ratio * n)` entries of
/// the (possibly permuted) order are training cells.
pub fn split_cells(n: usize, ratio: f64, seed: u64, mode: SplitMode) -> Result<SplitAssignment> {
    if n == 0 {
        return Err(Error::Empty("cannot split an empty grid".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio {ratio} outside (0, 1)")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if mode == SplitMode::Random {
        Rng::new(seed).shuffle(&mut order);
    }
    let n_train = (ratio * n as f64).floor() as usize;
    let test = order.split_off(n_train);
    Ok(SplitAssignment {
        seed,
        ratio,
        train: order,
        test,
    })
}
