use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: vec![0.5; 3],
            std: vec![0.25; 3],
        }
    }
}

impl Normalization {
    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() || self.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::config("normalization needs one positive std per mean"));
        }
        Ok(())
    }

    pub fn apply(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let c = image.shape()[0];
        if c != self.mean.len() {
            return Err(Error::shape("normalize", format!("{c} channels, {} means", self.mean.len())));
        }
        let plane = image.numel() / c.max(1);
        let mut out = image.clone();
        for (ch, chunk) in out.data_mut().chunks_mut(plane.max(1)).enumerate() {
            chunk.iter_mut().for_each(|v| *v = (*v - self.mean[ch]) / self.std[ch]);
        }
        Ok(out)
    }
}

/// Random geometric augmentation. Each transform fires independently with
/// its probability; `rot90` is a quarter turn and only applies to square
/// samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub hflip: f64,
    pub vflip: f64,
    pub rot90: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            hflip: 0.5,
            vflip: 0.5,
            rot90: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            hflip: 0.0,
            vflip: 0.0,
            rot90: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("hflip", self.hflip), ("vflip", self.vflip), ("rot90", self.rot90)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Three draws are consumed whatever the probabilities, so the random
    /// stream does not depend on the configuration.
    pub fn apply(&self, s: &Sample, rng: &mut impl Rng) -> Sample {
        let draws: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let (h, w) = (s.height(), s.width());
        let mut map: Box<dyn Fn(usize, usize) -> (usize, usize)> = Box::new(|r, c| (r, c));
        let mut out_hw = (h, w);
        if draws[0] < self.hflip {
            map = Box::new(move |r, c| map(r, w - 1 - c));
        }
        if draws[1] < self.vflip {
            map = Box::new(move |r, c| map(h - 1 - r, c));
        }
        if draws[2] < self.rot90 && h == w {
            // out[r][c] = in[c][w - 1 - r]
            map = Box::new(move |r, c| map(c, w - 1 - r));
            out_hw = (w, h);
        }
        remap(s, out_hw, map)
    }
}

/// Build a sample whose pixel `(r, c)` is `src` pixel `f(r, c)`.
fn remap(src: &Sample, (h, w): (usize, usize), f: impl Fn(usize, usize) -> (usize, usize)) -> Sample {
    let (sh, sw) = (src.height(), src.width());
    let ch = src.image.shape()[0];
    let index: Vec<usize> = (0..h * w)
        .map(|i| {
            let (r, c) = f(i / w, i % w);
            r * sw + c
        })
        .collect();
    let data = src.image.data();
    let mut img = Vec::with_capacity(ch * h * w);
    for k in 0..ch {
        img.extend(index.iter().map(|&j| data[k * sh * sw + j]));
    }
    Sample {
        image: Tensor::from_parts(vec![ch, h, w], img),
        labels: index.iter().map(|&j| src.labels[j]).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Sample {
        let img = Tensor::from_fn([3, 2, 2], |i| i as f32);
        Sample::new(img, vec![0, 1, 2, 3]).unwrap()
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(AugmentConfig::none().apply(&s, &mut rng), s);
        }
    }

    #[test]
    fn flips_and_rotation() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = AugmentConfig { hflip: 1.0, ..AugmentConfig::none() }.apply(&s, &mut rng);
        assert_eq!(h.labels, [1, 0, 3, 2]);
        assert_eq!(&h.image.data()[4..8], &[5.0, 4.0, 7.0, 6.0]);
        let v = AugmentConfig { vflip: 1.0, ..AugmentConfig::none() }.apply(&s, &mut rng);
        assert_eq!(v.labels, [2, 3, 0, 1]);
        // counter-clockwise quarter turn of [[0,1],[2,3]]
        let r = AugmentConfig { rot90: 1.0, ..AugmentConfig::none() }.apply(&s, &mut rng);
        assert_eq!(r.labels, [1, 3, 0, 2]);
    }

    #[test]
    fn labels_follow_pixels() {
        let img = Tensor::from_fn([1, 4, 4], |i| i as f32);
        let s = Sample::new(img, (0..16).collect()).unwrap();
        let cfg = AugmentConfig { hflip: 0.5, vflip: 0.5, rot90: 0.5 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = cfg.apply(&s, &mut rng);
            assert!(a.labels.iter().zip(a.image.data()).all(|(&l, &v)| l as f32 == v));
        }
    }

    #[test]
    fn normalization_defaults() {
        let img = Tensor::full([3, 1, 2], 0.75f32);
        let n = Normalization::default().apply(&img).unwrap();
        assert!(n.data().iter().all(|&v| v == 1.0));
        assert!(AugmentConfig { hflip: 1.5, ..AugmentConfig::none() }.validate().is_err());
    }
}
