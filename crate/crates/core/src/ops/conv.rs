//! Convolutions: dense 2D via im2col + GEMM, direct depthwise 2D, and the
//! single-filter 1D convolution that slides along the channel axis.

use rayon::prelude::*;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::linalg::gemm;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dGeom {
    pub fn same(k: usize) -> Self {
        Conv2dGeom { stride: 1, pad: k / 2 }
    }

    pub fn out_extent(&self, len: usize, k: usize) -> Option<usize> {
        let padded = len + 2 * self.pad;
        if self.stride == 0 || padded < k {
            return None;
        }
        Some((padded - k) / self.stride + 1)
    }
}

struct Plan {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Plan {
    /// Input coordinate for output `o` and tap `k`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, len: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < len).then_some(i as usize)
    }

    fn im2col<T: Element>(&self, x: &[T], col: &mut [T]) {
        let p = self.ho * self.wo;
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = &mut col[((ci * self.kh + ki) * self.kw + kj) * p..][..p];
                    for oh in 0..self.ho {
                        let Some(ih) = self.src(oh, ki, self.h) else {
                            row[oh * self.wo..(oh + 1) * self.wo].fill(T::zero());
                            continue;
                        };
                        for ow in 0..self.wo {
                            row[oh * self.wo + ow] = match self.src(ow, kj, self.w) {
                                Some(iw) => plane[ih * self.w + iw],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Element>(&self, col: &[T], gx: &mut [T]) {
        let p = self.ho * self.wo;
        for ci in 0..self.cin {
            let plane = &mut gx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = &col[((ci * self.kh + ki) * self.kw + kj) * p..][..p];
                    for oh in 0..self.ho {
                        let Some(ih) = self.src(oh, ki, self.h) else { continue };
                        for ow in 0..self.wo {
                            if let Some(iw) = self.src(ow, kj, self.w) {
                                plane[ih * self.w + iw] += row[oh * self.wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Dense 2D convolution. `x: [N, Cin, H, W]`, `w: [Cout, Cin, kh, kw]`.
pub fn conv2d<T: Element>(
    t: &mut Tape<T>,
    x: &Var<T>,
    w: &Var<T>,
    b: Option<&Var<T>>,
    geom: Conv2dGeom,
) -> Result<Var<T>> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] {
        return Err(Error::shape("conv2d", format!("x {:?}, w {:?}", xs, ws)));
    }
    let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    let (Some(ho), Some(wo)) = (geom.out_extent(h, kh), geom.out_extent(wd, kw)) else {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} does not fit {h}x{wd} with padding {}", geom.pad),
        ));
    };
    if let Some(b) = b {
        if b.shape() != [cout] {
            return Err(Error::shape("conv2d", format!("bias {:?}, expected [{cout}]", b.shape())));
        }
    }
    let plan = Plan {
        n,
        cin,
        h,
        w: wd,
        kh,
        kw,
        ho,
        wo,
        stride: geom.stride,
        pad: geom.pad,
    };
    let k = cin * kh * kw;
    let p = ho * wo;
    let (xv, wv) = (x.value().clone(), w.value().clone());
    let bias = b.map(|b| b.value().clone());

    let mut y = vec![T::zero(); n * cout * p];
    y.par_chunks_mut(cout * p).enumerate().for_each(|(i, yn)| {
        let mut col = vec![T::zero(); k * p];
        plan.im2col(&xv.data()[i * cin * h * wd..(i + 1) * cin * h * wd], &mut col);
        if let Some(bias) = &bias {
            for (row, &bv) in yn.chunks_mut(p).zip(bias.data()) {
                row.fill(bv);
            }
        }
        gemm(false, false, cout, k, p, T::one(), wv.data(), &col, T::one(), yn);
    });
    t.add_macs((n * cout * p * k) as u64);

    let value = Tensor::from_parts(vec![n, cout, ho, wo], y);
    let mut parents = vec![x, w];
    parents.extend(b);
    Ok(t.record("conv2d", value, &parents, move |g, sink| {
        let plan = &plan;
        let want_w = sink.wants(1);
        // per-sample weight-gradient partials, summed in sample order below
        let partials: Vec<Option<Vec<T>>> = if let Some(gx) = sink.slot(0) {
            gx.par_chunks_mut(cin * h * wd)
                .enumerate()
                .map(|(i, gxn)| {
                    let gn = &g[i * cout * p..(i + 1) * cout * p];
                    let mut gcol = vec![T::zero(); k * p];
                    gemm(true, false, k, cout, p, T::one(), wv.data(), gn, T::zero(), &mut gcol);
                    plan.col2im(&gcol, gxn);
                    want_w.then(|| weight_partial(plan, &xv, gn, i, cout, k, p))
                })
                .collect()
        } else if want_w {
            (0..plan.n)
                .into_par_iter()
                .map(|i| Some(weight_partial(plan, &xv, &g[i * cout * p..(i + 1) * cout * p], i, cout, k, p)))
                .collect()
        } else {
            Vec::new()
        };
        if let Some(gw) = sink.slot(1) {
            for part in partials.iter().flatten() {
                for (o, v) in gw.iter_mut().zip(part) {
                    *o += *v;
                }
            }
        }
        if let Some(gb) = sink.slot(2) {
            for gn in g.chunks(cout * p) {
                for (o, row) in gb.iter_mut().zip(gn.chunks(p)) {
                    *o += row.iter().copied().sum::<T>();
                }
            }
        }
    }))
}

fn weight_partial<T: Element>(plan: &Plan, xv: &Tensor<T>, gn: &[T], i: usize, cout: usize, k: usize, p: usize) -> Vec<T> {
    let sz = plan.cin * plan.h * plan.w;
    let mut col = vec![T::zero(); k * p];
    plan.im2col(&xv.data()[i * sz..(i + 1) * sz], &mut col);
    let mut part = vec![T::zero(); cout * k];
    gemm(false, true, cout, p, k, T::one(), gn, &col, T::zero(), &mut part);
    part
}

/// Valid output range `[lo, hi)` along one axis for tap `k` with stride 1.
#[inline]
fn tap_range(k: usize, pad: usize, len_in: usize, len_out: usize) -> (usize, usize) {
    // input index = o + k - pad must lie in [0, len_in)
    let lo = pad.saturating_sub(k);
    let hi = (len_in + pad).saturating_sub(k).min(len_out);
    (lo, hi.max(lo))
}

/// Per-channel 2D convolution with stride 1. `w: [C, 1, kh, kw]`.
pub fn depthwise_conv2d<T: Element>(
    t: &mut Tape<T>,
    x: &Var<T>,
    w: &Var<T>,
    b: Option<&Var<T>>,
    pad: usize,
) -> Result<Var<T>> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[1] != 1 {
        return Err(Error::shape("depthwise_conv2d", format!("x {:?}, w {:?}", xs, ws)));
    }
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (kh, kw) = (ws[2], ws[3]);
    if h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(Error::shape("depthwise_conv2d", format!("kernel {kh}x{kw} does not fit {h}x{wd}")));
    }
    if let Some(b) = b {
        if b.shape() != [c] {
            return Err(Error::shape("depthwise_conv2d", format!("bias {:?}, expected [{c}]", b.shape())));
        }
    }
    let ho = h + 2 * pad - kh + 1;
    let wo = wd + 2 * pad - kw + 1;
    let (xv, wv) = (x.value().clone(), w.value().clone());
    let bias = b.map(|b| b.value().clone());

    let mut y = vec![T::zero(); n * c * ho * wo];
    y.par_chunks_mut(ho * wo).enumerate().for_each(|(plane, out)| {
        let ch = plane % c;
        if let Some(bias) = &bias {
            out.fill(bias.data()[ch]);
        }
        let src = &xv.data()[plane * h * wd..(plane + 1) * h * wd];
        let ker = &wv.data()[ch * kh * kw..(ch + 1) * kh * kw];
        for ki in 0..kh {
            let (r0, r1) = tap_range(ki, pad, h, ho);
            for kj in 0..kw {
                let (c0, c1) = tap_range(kj, pad, wd, wo);
                let kv = ker[ki * kw + kj];
                for oh in r0..r1 {
                    let ih = oh + ki - pad;
                    let orow = &mut out[oh * wo + c0..oh * wo + c1];
                    let irow = &src[ih * wd + c0 + kj - pad..ih * wd + c1 + kj - pad];
                    for (o, &v) in orow.iter_mut().zip(irow) {
                        *o += kv * v;
                    }
                }
            }
        }
    });
    t.add_macs((n * c * ho * wo * kh * kw) as u64);

    let value = Tensor::from_parts(vec![n, c, ho, wo], y);
    let mut parents = vec![x, w];
    parents.extend(b);
    Ok(t.record("depthwise_conv2d", value, &parents, move |g, sink| {
        if let Some(gx) = sink.slot(0) {
            gx.par_chunks_mut(h * wd).enumerate().for_each(|(plane, gxp)| {
                let ch = plane % c;
                let gp = &g[plane * ho * wo..(plane + 1) * ho * wo];
                let ker = &wv.data()[ch * kh * kw..(ch + 1) * kh * kw];
                for ki in 0..kh {
                    let (r0, r1) = tap_range(ki, pad, h, ho);
                    for kj in 0..kw {
                        let (c0, c1) = tap_range(kj, pad, wd, wo);
                        let kv = ker[ki * kw + kj];
                        for oh in r0..r1 {
                            let ih = oh + ki - pad;
                            let grow = &gp[oh * wo + c0..oh * wo + c1];
                            let xrow = &mut gxp[ih * wd + c0 + kj - pad..ih * wd + c1 + kj - pad];
                            for (o, &v) in xrow.iter_mut().zip(grow) {
                                *o += kv * v;
                            }
                        }
                    }
                }
            });
        }
        if let Some(gw) = sink.slot(1) {
            gw.par_chunks_mut(kh * kw).enumerate().for_each(|(ch, gk)| {
                for i in 0..n {
                    let plane = i * c + ch;
                    let gp = &g[plane * ho * wo..(plane + 1) * ho * wo];
                    let src = &xv.data()[plane * h * wd..(plane + 1) * h * wd];
                    for ki in 0..kh {
                        let (r0, r1) = tap_range(ki, pad, h, ho);
                        for kj in 0..kw {
                            let (c0, c1) = tap_range(kj, pad, wd, wo);
                            let mut acc = T::zero();
                            for oh in r0..r1 {
                                let ih = oh + ki - pad;
                                let grow = &gp[oh * wo + c0..oh * wo + c1];
                                let xrow = &src[ih * wd + c0 + kj - pad..ih * wd + c1 + kj - pad];
                                for (&a, &b) in grow.iter().zip(xrow) {
                                    acc += a * b;
                                }
                            }
                            gk[ki * kw + kj] += acc;
                        }
                    }
                }
            });
        }
        if let Some(gb) = sink.slot(2) {
            for (plane, gp) in g.chunks(ho * wo).enumerate() {
                gb[plane % c] += gp.iter().copied().sum::<T>();
            }
        }
    }))
}

/// One shared odd-length filter slid along the last axis with zero padding
/// `(len - 1) / 2`, so the length is preserved. `w: [1, 1, len]`, `b: [1]`.
pub fn conv1d_shared<T: Element>(t: &mut Tape<T>, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Result<Var<T>> {
    let ws = w.shape();
    if ws.len() != 3 || ws[0] != 1 || ws[1] != 1 {
        return Err(Error::shape("conv1d", format!("weight {:?}, expected [1, 1, k]", ws)));
    }
    let k = ws[2];
    if k % 2 == 0 {
        return Err(Error::config(format!("conv1d kernel length must be odd, got {k}")));
    }
    if let Some(b) = b {
        if b.shape() != [1] {
            return Err(Error::shape("conv1d", format!("bias {:?}, expected [1]", b.shape())));
        }
    }
    let len = *x.shape().last().ok_or_else(|| Error::shape("conv1d", "rank-0 input"))?;
    let half = k / 2;
    let (xv, wv) = (x.value().clone(), w.value().clone());
    let b0 = b.map(|b| b.data()[0]).unwrap_or_else(T::zero);
    let mut y = vec![b0; xv.numel()];
    for (yr, xr) in y.chunks_mut(len.max(1)).zip(xv.data().chunks(len.max(1))) {
        for (j, &kv) in wv.data().iter().enumerate() {
            // y[i] += w[j] * x[i + j - half]
            let lo = half.saturating_sub(j);
            let hi = (len + half).saturating_sub(j).min(len);
            for i in lo..hi {
                yr[i] += kv * xr[i + j - half];
            }
        }
    }
    t.add_macs((xv.numel() * k) as u64);

    let value = Tensor::from_parts(x.shape().to_vec(), y);
    let mut parents = vec![x, w];
    parents.extend(b);
    Ok(t.record("conv1d", value, &parents, move |g, sink| {
        let rows = || g.chunks(len.max(1)).zip(xv.data().chunks(len.max(1)));
        if let Some(gx) = sink.slot(0) {
            for (gxr, gr) in gx.chunks_mut(len.max(1)).zip(g.chunks(len.max(1))) {
                for (j, &kv) in wv.data().iter().enumerate() {
                    let lo = half.saturating_sub(j);
                    let hi = (len + half).saturating_sub(j).min(len);
                    for i in lo..hi {
                        gxr[i + j - half] += kv * gr[i];
                    }
                }
            }
        }
        if let Some(gw) = sink.slot(1) {
            for (gr, xr) in rows() {
                for (j, o) in gw.iter_mut().enumerate() {
                    let lo = half.saturating_sub(j);
                    let hi = (len + half).saturating_sub(j).min(len);
                    for i in lo..hi {
                        *o += gr[i] * xr[i + j - half];
                    }
                }
            }
        }
        if let Some(gb) = sink.slot(2) {
            gb[0] += g.iter().copied().sum::<T>();
        }
    }))
}
