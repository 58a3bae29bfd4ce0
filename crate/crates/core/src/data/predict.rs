use std::path::Path;

use super::pnm::{self, Pnm};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Per-pixel argmax of `[N, K, H, W]` logits, `[N * H * W]` row-major.
/// Ties go to the lowest class index.
pub fn argmax_classes<T: Element>(logits: &Tensor<T>) -> Result<Vec<u32>> {
    let s = logits.shape();
    if s.len() != 4 || s[1] == 0 {
        return Err(Error::shape("argmax", format!("need [N, K, H, W] logits, got {s:?}")));
    }
    let (n, k, hw) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    let mut out = Vec::with_capacity(n * hw);
    for i in 0..n {
        let base = i * k * hw;
        for p in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if d[base + c * hw + p] > d[base + best * hw + p] {
                    best = c;
                }
            }
            out.push(best as u32);
        }
    }
    Ok(out)
}

/// Write a class map as a `P6` image in palette colours.
pub fn emit_prediction(path: &Path, classes: &[u32], h: usize, w: usize, palette: &[[u8; 3]]) -> Result<()> {
    if classes.len() != h * w {
        return Err(Error::shape("emit_prediction", format!("{} classes for {h}x{w}", classes.len())));
    }
    let mut data = Vec::with_capacity(3 * h * w);
    for &c in classes {
        let colour = palette
            .get(c as usize)
            .ok_or_else(|| Error::config(format!("palette has no colour for class {c}")))?;
        data.extend_from_slice(colour);
    }
    pnm::write(path, &Pnm { width: w, height: h, channels: 3, data })
}

/// Map a palette-coloured `P6` image back to class indices.
pub fn read_prediction(path: &Path, palette: &[[u8; 3]]) -> Result<(usize, usize, Vec<u32>)> {
    let img = pnm::read(path)?;
    if img.channels != 3 {
        return Err(Error::format(path, "prediction must be a colour PPM"));
    }
    let classes = img
        .data
        .chunks_exact(3)
        .map(|px| {
            palette
                .iter()
                .position(|c| c[..] == *px)
                .map(|c| c as u32)
                .ok_or_else(|| Error::format(path, format!("colour {px:?} is not in the palette")))
        })
        .collect::<Result<_>>()?;
    Ok((img.height, img.width, classes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_pick_lowest_class() {
        let t = Tensor::from_parts(vec![1, 3, 1, 2], vec![1.0f32, 0.0, 1.0, 2.0, 0.5, 2.0]);
        assert_eq!(argmax_classes(&t).unwrap(), [0, 1]);
        let flat = Tensor::<f32>::zeros([2, 4, 2, 2]);
        assert!(argmax_classes(&flat).unwrap().iter().all(|&c| c == 0));
    }

    #[test]
    fn palette_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ppm");
        let palette = [[0, 0, 0], [255, 0, 0], [0, 255, 0]];
        let map = vec![0, 1, 2, 2, 1, 0];
        emit_prediction(&path, &map, 2, 3, &palette).unwrap();
        assert_eq!(read_prediction(&path, &palette).unwrap(), (2, 3, map));
        assert!(emit_prediction(&path, &[3], 1, 1, &palette).is_err());
    }
}
