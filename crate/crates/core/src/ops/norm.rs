//! Layer normalization along one axis and batch normalization over
//! `(N, spatial)` per channel.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const NORM_EPS: f64 = 1e-5;

fn affine_check<T: Element>(op: &'static str, g: &Var<T>, b: &Var<T>, len: usize) -> Result<()> {
    if g.shape() != [len] || b.shape() != [len] {
        return Err(Error::shape(
            op,
            format!("affine {:?}/{:?}, expected [{len}]", g.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Normalize every 1-D fibre along `axis` to zero mean and unit (biased)
/// variance, then apply `gamma * x_hat + beta`.
pub fn layer_norm<T: Element>(t: &mut Tape<T>, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, axis: usize) -> Result<Var<T>> {
    if axis >= x.shape().len() || x.shape()[axis] == 0 {
        return Err(Error::shape("layer_norm", format!("axis {axis} of {:?}", x.shape())));
    }
    let (outer, len, inner) = Tensor::<T>::split_at_axis(x.shape(), axis);
    affine_check("layer_norm", gamma, beta, len)?;
    let eps = T::of(NORM_EPS);
    let inv_len = T::one() / T::of(len as f64);
    let xd = x.data();
    let (gd, bd) = (gamma.data(), beta.data());
    let block = len * inner;

    let mut xhat = vec![T::zero(); xd.len()];
    let mut rstd = vec![T::zero(); outer * inner];
    let mut y = vec![T::zero(); xd.len()];
    let mut mean = vec![T::zero(); inner];
    let mut var = vec![T::zero(); inner];
    for o in 0..outer {
        let xb = &xd[o * block..(o + 1) * block];
        mean.fill(T::zero());
        var.fill(T::zero());
        for row in xb.chunks(inner) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m *= inv_len;
        }
        for row in xb.chunks(inner) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(mean.iter()) {
                let d = v - m;
                *s += d * d;
            }
        }
        let rs = &mut rstd[o * inner..(o + 1) * inner];
        for (r, &s) in rs.iter_mut().zip(var.iter()) {
            *r = T::one() / (s * inv_len + eps).sqrt();
        }
        for c in 0..len {
            let off = o * block + c * inner;
            for i in 0..inner {
                let h = (xd[off + i] - mean[i]) * rs[i];
                xhat[off + i] = h;
                y[off + i] = gd[c] * h + bd[c];
            }
        }
    }

    let value = Tensor::from_parts(x.shape().to_vec(), y);
    let gv = gamma.value().clone();
    Ok(t.record("layer_norm", value, &[x, gamma, beta], move |g, sink| {
        let gd = gv.data();
        if let Some(gx) = sink.slot(0) {
            let mut m1 = vec![T::zero(); inner];
            let mut m2 = vec![T::zero(); inner];
            for o in 0..outer {
                m1.fill(T::zero());
                m2.fill(T::zero());
                for c in 0..len {
                    let off = o * block + c * inner;
                    for i in 0..inner {
                        let gh = g[off + i] * gd[c];
                        m1[i] += gh;
                        m2[i] += gh * xhat[off + i];
                    }
                }
                let rs = &rstd[o * inner..(o + 1) * inner];
                for c in 0..len {
                    let off = o * block + c * inner;
                    for i in 0..inner {
                        let gh = g[off + i] * gd[c];
                        gx[off + i] += rs[i] * (gh - inv_len * (m1[i] + xhat[off + i] * m2[i]));
                    }
                }
            }
        }
        if let Some(gg) = sink.slot(1) {
            for o in 0..outer {
                for (c, acc) in gg.iter_mut().enumerate() {
                    let off = o * block + c * inner;
                    for i in 0..inner {
                        *acc += g[off + i] * xhat[off + i];
                    }
                }
            }
        }
        if let Some(gb) = sink.slot(2) {
            for o in 0..outer {
                for (c, acc) in gb.iter_mut().enumerate() {
                    let off = o * block + c * inner;
                    *acc += g[off..off + inner].iter().copied().sum::<T>();
                }
            }
        }
    }))
}

/// Per-channel batch statistics of `x: [N, C, ...]`.
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance, as used for normalization.
    pub var: Vec<T>,
    /// Values reduced per channel, `N * spatial`.
    pub count: usize,
}

fn channel_split(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape("batch_norm", format!("need [N, C, ...], got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Normalize with `mean`/`var` per channel, then apply the affine. The
/// statistics are treated as constants by the backward pass.
fn normalize_with<T: Element>(
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    mean: &[T],
    var: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    let (n, c, s) = channel_split(x.shape())?;
    affine_check("batch_norm", gamma, beta, c)?;
    let eps = T::of(NORM_EPS);
    let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.data().len()];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * s;
            for j in 0..s {
                xhat[off + j] = (x.data()[off + j] - mean[ch]) * rstd[ch];
            }
        }
    }
    Ok((xhat, rstd))
}

fn apply_affine<T: Element>(xhat: &[T], gamma: &[T], beta: &[T], c: usize, s: usize) -> Vec<T> {
    xhat.chunks(s.max(1))
        .enumerate()
        .flat_map(|(plane, row)| {
            let ch = plane % c;
            row.iter().map(move |&h| gamma[ch] * h + beta[ch])
        })
        .collect()
}

/// Training-mode batch norm: normalizes with the batch's own statistics
/// (gradients flow through them) and returns those statistics so the
/// caller can update running estimates.
pub fn batch_norm_train<T: Element>(
    t: &mut Tape<T>,
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
) -> Result<(Var<T>, BatchStats<T>)> {
    let (n, c, s) = channel_split(x.shape())?;
    let count = n * s;
    if count == 0 {
        return Err(Error::shape("batch_norm", "empty batch"));
    }
    let inv = T::one() / T::of(count as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for (plane, row) in x.data().chunks(s).enumerate() {
        mean[plane % c] += row.iter().copied().sum::<T>();
    }
    for m in &mut mean {
        *m *= inv;
    }
    for (plane, row) in x.data().chunks(s).enumerate() {
        let m = mean[plane % c];
        var[plane % c] += row.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
    }
    for v in &mut var {
        *v *= inv;
    }
    let (xhat, rstd) = normalize_with(x, gamma, beta, &mean, &var)?;
    let y = apply_affine(&xhat, gamma.data(), beta.data(), c, s);
    let value = Tensor::from_parts(x.shape().to_vec(), y);
    let gv = gamma.value().clone();
    let out = t.record("batch_norm", value, &[x, gamma, beta], move |g, sink| {
        let gd = gv.data();
        if let Some(gx) = sink.slot(0) {
            let mut m1 = vec![T::zero(); c];
            let mut m2 = vec![T::zero(); c];
            for (plane, (gr, hr)) in g.chunks(s).zip(xhat.chunks(s)).enumerate() {
                let ch = plane % c;
                for (&gv, &h) in gr.iter().zip(hr) {
                    m1[ch] += gv * gd[ch];
                    m2[ch] += gv * gd[ch] * h;
                }
            }
            for (plane, ((gxr, gr), hr)) in gx.chunks_mut(s).zip(g.chunks(s)).zip(xhat.chunks(s)).enumerate() {
                let ch = plane % c;
                for ((o, &gv), &h) in gxr.iter_mut().zip(gr).zip(hr) {
                    *o += rstd[ch] * (gv * gd[ch] - inv * (m1[ch] + h * m2[ch]));
                }
            }
        }
        if let Some(gg) = sink.slot(1) {
            for (plane, (gr, hr)) in g.chunks(s).zip(xhat.chunks(s)).enumerate() {
                gg[plane % c] += gr.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>();
            }
        }
        if let Some(gb) = sink.slot(2) {
            for (plane, gr) in g.chunks(s).enumerate() {
                gb[plane % c] += gr.iter().copied().sum::<T>();
            }
        }
    });
    Ok((out, BatchStats { mean, var, count }))
}

/// Eval-mode batch norm: a fixed per-channel affine built from running
/// statistics.
pub fn batch_norm_eval<T: Element>(
    t: &mut Tape<T>,
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    mean: &[T],
    var: &[T],
) -> Result<Var<T>> {
    let (_, c, s) = channel_split(x.shape())?;
    if mean.len() != c || var.len() != c {
        return Err(Error::shape("batch_norm", format!("running stats for {} channels, input has {c}", mean.len())));
    }
    let (xhat, rstd) = normalize_with(x, gamma, beta, mean, var)?;
    let y = apply_affine(&xhat, gamma.data(), beta.data(), c, s);
    let value = Tensor::from_parts(x.shape().to_vec(), y);
    let gv = gamma.value().clone();
    Ok(t.record("batch_norm", value, &[x, gamma, beta], move |g, sink| {
        if let Some(gx) = sink.slot(0) {
            for (plane, (gxr, gr)) in gx.chunks_mut(s).zip(g.chunks(s)).enumerate() {
                let ch = plane % c;
                let k = gv.data()[ch] * rstd[ch];
                for (o, &v) in gxr.iter_mut().zip(gr) {
                    *o += k * v;
                }
            }
        }
        if let Some(gg) = sink.slot(1) {
            for (plane, (gr, hr)) in g.chunks(s).zip(xhat.chunks(s)).enumerate() {
                gg[plane % c] += gr.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>();
            }
        }
        if let Some(gb) = sink.slot(2) {
            for (plane, gr) in g.chunks(s).enumerate() {
                gb[plane % c] += gr.iter().copied().sum::<T>();
            }
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine(t: &mut Tape<f64>, c: usize) -> (Var<f64>, Var<f64>) {
        (t.constant(Tensor::ones([c])), t.constant(Tensor::zeros([c])))
    }

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let mut t = Tape::<f64>::no_grad();
        let x = t.constant(Tensor::full([2, 3, 2, 2], 4.0));
        let (g, b) = affine(&mut t, 3);
        let y = layer_norm(&mut t, &x, &g, &b, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_two_values() {
        let mut t = Tape::<f64>::no_grad();
        let x = t.constant(Tensor::new([1, 2], vec![1.0, 3.0]).unwrap());
        let (g, b) = affine(&mut t, 2);
        let y = layer_norm(&mut t, &x, &g, &b, 1).unwrap();
        let k = 1.0 / (1.0 + NORM_EPS).sqrt();
        assert!((y.data()[0] + k).abs() < 1e-12);
        assert!((y.data()[1] - k).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_channel_axis_normalizes_each_pixel() {
        let mut t = Tape::<f64>::no_grad();
        let x = t.constant(Tensor::from_fn([2, 4, 3, 3], |i| ((i * 7919) % 13) as f64));
        let (g, b) = affine(&mut t, 4);
        let y = layer_norm(&mut t, &x, &g, &b, 1).unwrap();
        for n in 0..2 {
            for p in 0..9 {
                let vals: Vec<f64> = (0..4).map(|c| y.data()[(n * 4 + c) * 9 + p]).collect();
                let m: f64 = vals.iter().sum::<f64>() / 4.0;
                let v: f64 = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 4.0;
                assert!(m.abs() < 1e-9);
                assert!((v - 1.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn batch_norm_train_two_values() {
        let mut t = Tape::<f64>::no_grad();
        let x = t.constant(Tensor::new([2, 1], vec![0.0, 2.0]).unwrap());
        let (g, b) = affine(&mut t, 1);
        let (y, stats) = batch_norm_train(&mut t, &x, &g, &b).unwrap();
        let k = 1.0 / (1.0 + NORM_EPS).sqrt();
        assert!((y.data()[0] + k).abs() < 1e-12 && (y.data()[1] - k).abs() < 1e-12);
        assert_eq!(stats.mean, vec![1.0]);
        assert_eq!(stats.var, vec![1.0]);
    }

    #[test]
    fn batch_norm_eval_with_init_stats_is_identity_up_to_eps() {
        let mut t = Tape::<f64>::no_grad();
        let xs = Tensor::from_fn([2, 3, 2, 2], |i| i as f64 - 10.0);
        let x = t.constant(xs.clone());
        let (g, b) = affine(&mut t, 3);
        let y = batch_norm_eval(&mut t, &x, &g, &b, &[0.0; 3], &[1.0; 3]).unwrap();
        let k = 1.0 / (1.0 + NORM_EPS).sqrt();
        assert!(y.value().max_abs_diff(&xs.map(|v| v * k)) < 1e-12);
    }
}
