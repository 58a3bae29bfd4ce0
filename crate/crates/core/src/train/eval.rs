use crate::autograd::{ParamStore, Session};
use crate::data::{argmax_classes, stitch, tile, Normalization, Sample, TileSpec};
use crate::error::{Error, Result};
use crate::network::Cvmh;
use crate::tensor::Tensor;

use super::ConfusionMatrix;

/// Tiles forwarded together.
const TILE_BATCH: usize = 8;

/// Class map of a `[C, H, W]` image in `[0, 1]`, predicted tile by tile
/// and stitched back to the original extent.
pub fn predict_image(
    model: &Cvmh,
    store: &mut ParamStore<f32>,
    image: &Tensor<f32>,
    norm: &Normalization,
    spec: TileSpec,
) -> Result<Vec<u32>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("predict", format!("need a [C, H, W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let sample = Sample::new(image.clone(), vec![0; h * w])?;
    let tiles = tile(&sample, spec, 0)?;
    let mut parts = Vec::with_capacity(tiles.len());
    for chunk in tiles.chunks(TILE_BATCH) {
        let mut data = Vec::new();
        for t in chunk {
            data.extend_from_slice(norm.apply(&t.sample.image)?.data());
        }
        let x = Tensor::new(vec![chunk.len(), s[0], spec.size, spec.size], data)?;
        let mut sess = Session::inference(store);
        let xv = sess.constant(x);
        let logits = model.forward(&mut sess, &xv)?.into_value();
        let classes = argmax_classes(&logits)?;
        for (t, map) in chunk.iter().zip(classes.chunks(spec.size * spec.size)) {
            parts.push((t.y, t.x, map.to_vec()));
        }
    }
    stitch(h, w, spec.size, &parts)
}

/// Confusion matrix of the model's predictions over whole samples.
pub fn evaluate(
    model: &Cvmh,
    store: &mut ParamStore<f32>,
    samples: &[Sample],
    norm: &Normalization,
    spec: TileSpec,
    ignore: Option<u32>,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.config.num_classes);
    for s in samples {
        let pred = predict_image(model, store, &s.image, norm, spec)?;
        cm.accumulate(&s.labels, &pred, ignore)?;
    }
    Ok(cm)
}
