//! Synthetic shapes: coloured rectangles, disks and stripes over a
//! textured background, with exact label maps. Class 0 is background.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, PairEntry};
use super::pnm::{self, Pnm};
use super::{planar_from_interleaved, Sample};
use crate::error::{Error, Result};
use crate::network::SIZE_MULTIPLE;

pub const PALETTE: [[u8; 3]; 6] = [
    [110, 110, 110],
    [220, 40, 40],
    [40, 190, 60],
    [50, 80, 230],
    [235, 210, 40],
    [170, 60, 200],
];

pub const CLASS_NAMES: [&str; 6] = ["background", "red", "green", "blue", "yellow", "purple"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub images: usize,
    pub size: usize,
    pub classes: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            images: 8,
            size: 64,
            classes: 4,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % SIZE_MULTIPLE != 0 {
            return Err(Error::config(format!("synthetic size {} must be a positive multiple of {SIZE_MULTIPLE}", self.size)));
        }
        if !(2..=6).contains(&self.classes) {
            return Err(Error::config(format!("synthetic class count {} outside 2..=6", self.classes)));
        }
        if self.images == 0 {
            return Err(Error::config("at least one synthetic image is required"));
        }
        Ok(())
    }
}

/// One generated image as interleaved RGB bytes plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthImage {
    pub rgb: Vec<u8>,
    pub labels: Vec<u8>,
}

impl SynthImage {
    pub fn to_sample(&self, size: usize) -> Sample {
        Sample {
            image: planar_from_interleaved(size, size, 3, &self.rgb),
            labels: self.labels.iter().map(|&l| l as u32).collect(),
        }
    }
}

enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Disk { cy: f64, cx: f64, r: f64 },
    Stripe { nx: f64, ny: f64, off: f64, half: f64 },
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, n: f64) -> Shape {
        match rng.gen_range(0..3) {
            0 => {
                let (hh, ww) = (rng.gen_range(0.12..0.3) * n, rng.gen_range(0.12..0.3) * n);
                let (y0, x0) = (rng.gen_range(0.0..n - hh), rng.gen_range(0.0..n - ww));
                Shape::Rect { y0, x0, y1: y0 + hh, x1: x0 + ww }
            }
            1 => {
                let r = rng.gen_range(0.08..0.18) * n;
                Shape::Disk { cy: rng.gen_range(r..n - r), cx: rng.gen_range(r..n - r), r }
            }
            _ => {
                let a = rng.gen_range(0.0..std::f64::consts::PI);
                let (ny, nx) = (a.sin(), a.cos());
                let mid = n / 2.0;
                Shape::Stripe {
                    nx,
                    ny,
                    off: mid * (nx + ny) + rng.gen_range(-0.3..0.3) * n,
                    half: rng.gen_range(0.04..0.07) * n,
                }
            }
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Disk { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Stripe { nx, ny, off, half } => (x * nx + y * ny - off).abs() <= half,
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, size: usize, classes: usize) -> SynthImage {
    let n = size as f64;
    let mut labels = vec![0u8; size * size];
    let mut shapes: Vec<(Shape, u8)> = (1..classes).map(|c| (Shape::random(rng, n), c as u8)).collect();
    for _ in 0..rng.gen_range(0..3) {
        let c = rng.gen_range(1..classes) as u8;
        shapes.push((Shape::random(rng, n), c));
    }
    // stripes first so compact shapes stay visible on top of them
    shapes.sort_by_key(|(s, _)| !matches!(s, Shape::Stripe { .. }));
    for (shape, c) in &shapes {
        for (i, l) in labels.iter_mut().enumerate() {
            if shape.contains((i / size) as f64 + 0.5, (i % size) as f64 + 0.5) {
                *l = *c;
            }
        }
    }
    let tint: Vec<[f64; 3]> = (0..classes).map(|_| std::array::from_fn(|_| rng.gen_range(-12.0..12.0))).collect();
    let (fy, fx) = (rng.gen_range(0.2..0.6), rng.gen_range(0.2..0.6));
    let mut rgb = Vec::with_capacity(3 * size * size);
    for (i, &l) in labels.iter().enumerate() {
        let (y, x) = ((i / size) as f64, (i % size) as f64);
        let texture = if l == 0 { 14.0 * (fy * y).sin() * (fx * x).cos() } else { 0.0 };
        for ch in 0..3 {
            let v = PALETTE[l as usize][ch] as f64 + tint[l as usize][ch] + texture + rng.gen_range(-8.0..8.0);
            rgb.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    SynthImage { rgb, labels }
}

/// Deterministic in-memory dataset. Each image is redrawn until every class
/// covers at least 1% of it.
pub fn synth_images(cfg: &SynthConfig) -> Result<Vec<SynthImage>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let min_pixels = cfg.size * cfg.size / 100;
    (0..cfg.images)
        .map(|_| {
            for _ in 0..1000 {
                let img = draw(&mut rng, cfg.size, cfg.classes);
                let mut hist = vec![0usize; cfg.classes];
                img.labels.iter().for_each(|&l| hist[l as usize] += 1);
                if hist.iter().all(|&h| h >= min_pixels.max(1)) {
                    return Ok(img);
                }
            }
            Err(Error::config("could not place every class; increase the image size"))
        })
        .collect()
}

pub fn synth_samples(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    Ok(synth_images(cfg)?.iter().map(|im| im.to_sample(cfg.size)).collect())
}

pub fn synth_manifest(cfg: &SynthConfig, pairs: Vec<PairEntry>) -> DatasetManifest {
    DatasetManifest {
        pairs,
        num_classes: cfg.classes,
        palette: PALETTE[..cfg.classes].to_vec(),
        ignore_index: None,
        class_names: CLASS_NAMES[..cfg.classes].iter().map(|s| s.to_string()).collect(),
        normalization: None,
        root: PathBuf::new(),
    }
}

/// Write `img_NNN.ppm`, `lbl_NNN.pgm` and `manifest.json` into `dir`.
pub fn synth_generate(dir: &Path, cfg: &SynthConfig) -> Result<DatasetManifest> {
    let images = synth_images(cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut pairs = Vec::with_capacity(images.len());
    for (i, im) in images.iter().enumerate() {
        let (img_name, lbl_name) = (format!("img_{i:03}.ppm"), format!("lbl_{i:03}.pgm"));
        let (s, w) = (cfg.size, cfg.size);
        pnm::write(&dir.join(&img_name), &Pnm { width: w, height: s, channels: 3, data: im.rgb.clone() })?;
        pnm::write(&dir.join(&lbl_name), &Pnm { width: w, height: s, channels: 1, data: im.labels.clone() })?;
        pairs.push(PairEntry {
            image: img_name.into(),
            label: lbl_name.into(),
        });
    }
    let mut m = synth_manifest(cfg, pairs);
    m.save(&dir.join("manifest.json"))?;
    m.root = dir.to_path_buf();
    Ok(m)
}
