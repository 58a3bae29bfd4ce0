//! Fused segmentation losses over logits `[N, K, H, W]` and integer labels
//! `[N, H, W]`. Pixels labelled with the ignore index contribute nothing.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

struct Layout {
    n: usize,
    k: usize,
    s: usize,
}

fn layout<T: Element>(logits: &Var<T>, labels: &[u32], ignore: Option<u32>) -> Result<Layout> {
    let sh = logits.shape();
    if sh.len() < 2 {
        return Err(Error::shape("loss", format!("logits need [N, K, ...], got {sh:?}")));
    }
    let (n, k) = (sh[0], sh[1]);
    let s: usize = sh[2..].iter().product();
    if labels.len() != n * s {
        return Err(Error::shape("loss", format!("{} labels for logits {sh:?}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| Some(l) != ignore && l as usize >= k) {
        return Err(Error::Label { label: bad, classes: k });
    }
    Ok(Layout { n, k, s })
}

/// Softmax over the class axis for every pixel, same layout as the logits.
fn softmax<T: Element>(x: &[T], l: &Layout) -> Vec<T> {
    let mut p = vec![T::zero(); x.len()];
    for i in 0..l.n {
        let base = i * l.k * l.s;
        for j in 0..l.s {
            let at = |c: usize| base + c * l.s + j;
            let m = (0..l.k).map(|c| x[at(c)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for c in 0..l.k {
                let e = (x[at(c)] - m).exp();
                p[at(c)] = e;
                z += e;
            }
            for c in 0..l.k {
                p[at(c)] /= z;
            }
        }
    }
    p
}

/// Mean negative log-likelihood over non-ignored pixels. With every pixel
/// ignored the loss is defined as 0 (a warning is logged).
pub fn cross_entropy<T: Element>(t: &mut Tape<T>, logits: &Var<T>, labels: &[u32], ignore: Option<u32>) -> Result<Var<T>> {
    let l = layout(logits, labels, ignore)?;
    let x = logits.data();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for i in 0..l.n {
        let base = i * l.k * l.s;
        for j in 0..l.s {
            let lab = labels[i * l.s + j];
            if Some(lab) == ignore {
                continue;
            }
            let at = |c: usize| base + c * l.s + j;
            let m = (0..l.k).map(|c| x[at(c)]).fold(T::neg_infinity(), T::max);
            let lse = m + (0..l.k).map(|c| (x[at(c)] - m).exp()).sum::<T>().ln();
            total += (lse - x[at(lab as usize)]).as_f64();
            count += 1;
        }
    }
    if count == 0 {
        log::warn!("cross-entropy: every pixel is ignored, loss defined as 0");
    }
    let value = Tensor::scalar(T::of(if count == 0 { 0.0 } else { total / count as f64 }));
    let probs = softmax(x, &l);
    let labels = labels.to_vec();
    Ok(t.record("cross_entropy", value, &[logits], move |g, sink| {
        if count == 0 {
            return;
        }
        let Some(gx) = sink.slot(0) else { return };
        let scale = g[0] / T::of(count as f64);
        for i in 0..l.n {
            let base = i * l.k * l.s;
            for j in 0..l.s {
                let lab = labels[i * l.s + j];
                if Some(lab) == ignore {
                    continue;
                }
                for c in 0..l.k {
                    let at = base + c * l.s + j;
                    let y = if c == lab as usize { T::one() } else { T::zero() };
                    gx[at] += scale * (probs[at] - y);
                }
            }
        }
    }))
}

/// `1 - mean_k (2 I_k + eps) / (S_k + Y_k + eps)` where, over the
/// non-ignored pixels of the whole batch, `I_k = sum p_k y_k`,
/// `S_k = sum p_k` and `Y_k = sum y_k`. Every class enters the mean.
pub fn dice<T: Element>(t: &mut Tape<T>, logits: &Var<T>, labels: &[u32], ignore: Option<u32>, eps: f64) -> Result<Var<T>> {
    let l = layout(logits, labels, ignore)?;
    let probs = softmax(logits.data(), &l);
    let eps = T::of(eps);
    let mut inter = vec![T::zero(); l.k];
    let mut psum = vec![T::zero(); l.k];
    let mut ysum = vec![T::zero(); l.k];
    for i in 0..l.n {
        let base = i * l.k * l.s;
        for j in 0..l.s {
            let lab = labels[i * l.s + j];
            if Some(lab) == ignore {
                continue;
            }
            for c in 0..l.k {
                psum[c] += probs[base + c * l.s + j];
            }
            inter[lab as usize] += probs[base + lab as usize * l.s + j];
            ysum[lab as usize] += T::one();
        }
    }
    let kf = T::of(l.k as f64);
    let mean_dice = (0..l.k)
        .map(|c| (inter[c] + inter[c] + eps) / (psum[c] + ysum[c] + eps))
        .sum::<T>()
        / kf;
    let value = Tensor::scalar(T::one() - mean_dice);
    let labels = labels.to_vec();
    Ok(t.record("dice", value, &[logits], move |g, sink| {
        let Some(gx) = sink.slot(0) else { return };
        // d loss / d p_c at a pixel with one-hot y:
        //   -(1/K) * (2 y_c D_c - N_c) / D_c^2, N_c = 2 I_c + eps, D_c = S_c + Y_c + eps
        let two = T::of(2.0);
        let num: Vec<T> = (0..l.k).map(|c| two * inter[c] + eps).collect();
        let den: Vec<T> = (0..l.k).map(|c| psum[c] + ysum[c] + eps).collect();
        let mut gp = vec![T::zero(); l.k];
        for i in 0..l.n {
            let base = i * l.k * l.s;
            for j in 0..l.s {
                let lab = labels[i * l.s + j];
                if Some(lab) == ignore {
                    continue;
                }
                for c in 0..l.k {
                    let y = if c == lab as usize { T::one() } else { T::zero() };
                    gp[c] = -g[0] / kf * (two * y * den[c] - num[c]) / (den[c] * den[c]);
                }
                // softmax backward: gz_c = p_c (gp_c - sum_j p_j gp_j)
                let dot = (0..l.k).map(|c| probs[base + c * l.s + j] * gp[c]).sum::<T>();
                for c in 0..l.k {
                    let at = base + c * l.s + j;
                    gx[at] += probs[at] * (gp[c] - dot);
                }
            }
        }
    }))
}
