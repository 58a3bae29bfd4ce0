//! Datasets on disk, tiling, augmentation, the synthetic shapes generator
//! and colour-coded prediction maps.

pub mod augment;
pub mod cvtn;
pub mod manifest;
pub mod pnm;
pub mod predict;
pub mod synth;
pub mod tile;

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use augment::{AugmentConfig, Normalization};
pub use manifest::{DatasetManifest, PairEntry};
pub use predict::{argmax_classes, emit_prediction, read_prediction};
pub use synth::{synth_generate, SynthConfig};
pub use tile::{stitch, tile, Tile, TileSpec};

/// An image `[C, H, W]` in `[0, 1]` with its row-major label map.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub labels: Vec<u32>,
}

impl Sample {
    pub fn new(image: Tensor<f32>, labels: Vec<u32>) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || labels.len() != s[1] * s[2] {
            return Err(Error::shape("sample", format!("image {s:?} with {} labels", labels.len())));
        }
        Ok(Sample { image, labels })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Interleaved `H x W x C` bytes to a channel-first tensor scaled by 1/255.
pub fn planar_from_interleaved(h: usize, w: usize, c: usize, bytes: &[u8]) -> Tensor<f32> {
    let mut data = vec![0.0f32; c * h * w];
    for (i, px) in bytes.chunks_exact(c).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            data[ch * h * w + i] = v as f32 / 255.0;
        }
    }
    Tensor::from_parts(vec![c, h, w], data)
}

/// A `P6` PPM or a `[3, H, W]` CVTN tensor (u8 values are scaled by 1/255).
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(cvtn::MAGIC) {
        let t = cvtn::decode(path, &bytes)?;
        if t.shape.len() != 3 || t.shape[0] != 3 {
            return Err(Error::format(path, format!("image tensor must be [3, H, W], got {:?}", t.shape)));
        }
        let data = match &t.data {
            cvtn::CvtnData::F32(v) => v.clone(),
            cvtn::CvtnData::U8(v) => v.iter().map(|&x| x as f32 / 255.0).collect(),
        };
        return Ok(Tensor::from_parts(t.shape, data));
    }
    let img = pnm::decode(path, &bytes)?;
    if img.channels != 3 {
        return Err(Error::format(path, "image must be a colour PPM (P6)"));
    }
    Ok(planar_from_interleaved(img.height, img.width, 3, &img.data))
}

/// A `P5` PGM or a `[H, W]` CVTN tensor of non-negative integers.
/// Returns `(height, width, labels)`.
pub fn load_labels(path: &Path) -> Result<(usize, usize, Vec<u32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(cvtn::MAGIC) {
        let t = cvtn::decode(path, &bytes)?;
        if t.shape.len() != 2 {
            return Err(Error::format(path, format!("label tensor must be [H, W], got {:?}", t.shape)));
        }
        let vals = t.values();
        if let Some(v) = vals.iter().find(|v| v.fract() != 0.0 || **v < 0.0 || **v > u32::MAX as f64) {
            return Err(Error::format(path, format!("label value {v} is not a class index")));
        }
        return Ok((t.shape[0], t.shape[1], vals.into_iter().map(|v| v as u32).collect()));
    }
    let img = pnm::decode(path, &bytes)?;
    if img.channels != 1 {
        return Err(Error::format(path, "label map must be a greyscale PGM (P5)"));
    }
    Ok((img.height, img.width, img.data.iter().map(|&v| v as u32).collect()))
}

/// Load an image and its labels, checking that the extents agree.
pub fn load_pair(image: &Path, label: &Path) -> Result<Sample> {
    let img = load_image(image)?;
    let (h, w, labels) = load_labels(label)?;
    if img.shape()[1..] != [h, w] {
        return Err(Error::format(
            label,
            format!("label map is {h}x{w} but {} is {}x{}", image.display(), img.shape()[1], img.shape()[2]),
        ));
    }
    Sample::new(img, labels)
}
