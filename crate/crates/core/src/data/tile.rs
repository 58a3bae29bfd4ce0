use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::network::SIZE_MULTIPLE;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TileSpec {
    pub size: usize,
    pub stride: usize,
}

impl Default for TileSpec {
    fn default() -> Self {
        TileSpec { size: 256, stride: 256 }
    }
}

impl TileSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % SIZE_MULTIPLE != 0 {
            return Err(Error::config(format!("tile size {} must be a positive multiple of {SIZE_MULTIPLE}", self.size)));
        }
        if self.stride == 0 || self.stride > self.size {
            return Err(Error::config(format!("tile stride {} must be in 1..={}", self.stride, self.size)));
        }
        Ok(())
    }

    /// Tile origins along an axis of length `len`; the last tile may run
    /// past the end.
    pub fn starts(&self, len: usize) -> Vec<usize> {
        let n = if len <= self.size { 1 } else { (len - self.size).div_ceil(self.stride) + 1 };
        (0..n).map(|i| i * self.stride).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    /// Top-left corner in the source image.
    pub y: usize,
    pub x: usize,
    pub sample: Sample,
}

/// Raster-order tiles. Pixels beyond the source are zero in the image and
/// `pad_label` in the labels.
pub fn tile(s: &Sample, spec: TileSpec, pad_label: u32) -> Result<Vec<Tile>> {
    spec.validate()?;
    let (h, w, c) = (s.height(), s.width(), s.image.shape()[0]);
    let size = spec.size;
    let src = s.image.data();
    let mut out = Vec::new();
    for &y in &spec.starts(h) {
        for &x in &spec.starts(w) {
            let mut img = vec![0.0f32; c * size * size];
            let mut labels = vec![pad_label; size * size];
            let rows = size.min(h.saturating_sub(y));
            let cols = size.min(w.saturating_sub(x));
            for r in 0..rows {
                let from = (y + r) * w + x;
                labels[r * size..r * size + cols].copy_from_slice(&s.labels[from..from + cols]);
                for k in 0..c {
                    let dst = k * size * size + r * size;
                    img[dst..dst + cols].copy_from_slice(&src[k * h * w + from..k * h * w + from + cols]);
                }
            }
            out.push(Tile {
                y,
                x,
                sample: Sample {
                    image: Tensor::from_parts(vec![c, size, size], img),
                    labels,
                },
            });
        }
    }
    Ok(out)
}

/// Paste per-tile class maps `(y, x, map)` of side `size` into an `h x w`
/// map, cropping the padding. Later tiles overwrite earlier ones.
pub fn stitch(h: usize, w: usize, size: usize, parts: &[(usize, usize, Vec<u32>)]) -> Result<Vec<u32>> {
    let mut out = vec![u32::MAX; h * w];
    for (y, x, map) in parts {
        if map.len() != size * size {
            return Err(Error::shape("stitch", format!("tile map of {} values for side {size}", map.len())));
        }
        for r in 0..size.min(h.saturating_sub(*y)) {
            let cols = size.min(w.saturating_sub(*x));
            out[(y + r) * w + x..(y + r) * w + x + cols].copy_from_slice(&map[r * size..r * size + cols]);
        }
    }
    if out.contains(&u32::MAX) {
        return Err(Error::shape("stitch", "tiles do not cover the image"));
    }
    Ok(out)
}
