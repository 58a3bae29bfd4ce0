//! Data movement: reshape, slicing, concatenation, index gathers and the
//! 2x2 space/depth rearrangements used by patch merging and expanding.

use std::sync::Arc;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, Element, Tensor};

pub fn reshape<T: Element>(t: &mut Tape<T>, x: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
    let value = x.value().reshape(shape.to_vec())?;
    Ok(t.record("reshape", value, &[x], |g, sink| sink.add(0, g)))
}

/// Elements `start..start + len` along `axis`.
pub fn narrow<T: Element>(t: &mut Tape<T>, x: &Var<T>, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
    if axis >= x.shape().len() || start + len > x.shape()[axis] {
        return Err(Error::shape(
            "narrow",
            format!("{start}..{} along axis {axis} of {:?}", start + len, x.shape()),
        ));
    }
    let (outer, full, inner) = Tensor::<T>::split_at_axis(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    let value = Tensor::from_parts(shape, out);
    Ok(t.record("narrow", value, &[x], move |g, sink| {
        if let Some(gx) = sink.slot(0) {
            for o in 0..outer {
                let base = (o * full + start) * inner;
                let src = &g[o * len * inner..(o + 1) * len * inner];
                for (d, s) in gx[base..base + len * inner].iter_mut().zip(src) {
                    *d += *s;
                }
            }
        }
    }))
}

/// Join along `axis`; every other extent must agree.
pub fn concat<T: Element>(t: &mut Tape<T>, xs: &[&Var<T>], axis: usize) -> Result<Var<T>> {
    let first = xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
    let rank = first.shape().len();
    if axis >= rank {
        return Err(Error::shape("concat", format!("axis {axis} of rank {rank}")));
    }
    for x in xs {
        let ok = x.shape().len() == rank
            && x.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::shape("concat", format!("{:?} vs {:?}", x.shape(), first.shape())));
        }
    }
    let (outer, _, inner) = Tensor::<T>::split_at_axis(first.shape(), axis);
    let lens: Vec<usize> = xs.iter().map(|x| x.shape()[axis]).collect();
    let total: usize = lens.iter().sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (x, &l) in xs.iter().zip(&lens) {
            out.extend_from_slice(&x.data()[o * l * inner..(o + 1) * l * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let value = Tensor::from_parts(shape, out);
    Ok(t.record("concat", value, xs, move |g, sink| {
        let mut offset = 0;
        for (k, &l) in lens.iter().enumerate() {
            if let Some(gx) = sink.slot(k) {
                for o in 0..outer {
                    let src = &g[(o * total + offset) * inner..(o * total + offset + l) * inner];
                    for (d, s) in gx[o * l * inner..(o + 1) * l * inner].iter_mut().zip(src) {
                        *d += *s;
                    }
                }
            }
            offset += l;
        }
    }))
}

/// `out[.., j] = x[.., index[j]]` along the last axis. Repeated indices
/// accumulate in the backward pass.
pub fn gather_last<T: Element>(t: &mut Tape<T>, x: &Var<T>, index: Arc<[usize]>) -> Result<Var<T>> {
    let len = *x.shape().last().ok_or_else(|| Error::shape("gather", "rank-0 input"))?;
    if let Some(&bad) = index.iter().find(|&&i| i >= len) {
        return Err(Error::shape("gather", format!("index {bad} out of range for length {len}")));
    }
    let rows = if len == 0 { 0 } else { x.value().numel() / len };
    let m = index.len();
    let mut out = Vec::with_capacity(rows * m);
    for r in 0..rows {
        let row = &x.data()[r * len..(r + 1) * len];
        out.extend(index.iter().map(|&i| row[i]));
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = m;
    let value = Tensor::from_parts(shape, out);
    Ok(t.record("gather", value, &[x], move |g, sink| {
        if let Some(gx) = sink.slot(0) {
            for r in 0..rows {
                let row = &mut gx[r * len..(r + 1) * len];
                for (j, &i) in index.iter().enumerate() {
                    row[i] += g[r * m + j];
                }
            }
        }
    }))
}

/// `out.flat[i] = x.flat[map[i]]` for a bijective `map`.
fn permute_flat<T: Element>(t: &mut Tape<T>, name: &'static str, x: &Var<T>, shape: Vec<usize>, map: Vec<usize>) -> Var<T> {
    debug_assert_eq!(numel(&shape), map.len());
    let out: Vec<T> = map.iter().map(|&i| x.data()[i]).collect();
    let value = Tensor::from_parts(shape, out);
    t.record(name, value, &[x], move |g, sink| {
        if let Some(gx) = sink.slot(0) {
            for (o, &i) in map.iter().enumerate() {
                gx[i] += g[o];
            }
        }
    })
}

/// Order in which the four pixels of a 2x2 cell are stacked along channels:
/// `(row offset, column offset)`.
pub const CELL_ORDER: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];

/// `[N, C, H, W] -> [N, 4C, H/2, W/2]`; output channel `q * C + c` holds
/// pixel `CELL_ORDER[q]` of each cell.
pub fn space_to_depth2<T: Element>(t: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
    let s = x.shape();
    if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
        return Err(Error::shape("space_to_depth", format!("need even H, W in [N, C, H, W], got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut map = Vec::with_capacity(n * c * h * w);
    for i in 0..n {
        for (dh, dw) in CELL_ORDER {
            for ch in 0..c {
                for oh in 0..ho {
                    for ow in 0..wo {
                        map.push(((i * c + ch) * h + 2 * oh + dh) * w + 2 * ow + dw);
                    }
                }
            }
        }
    }
    Ok(permute_flat(t, "space_to_depth", x, vec![n, 4 * c, ho, wo], map))
}

/// `[N, 4D, H, W] -> [N, D, 2H, 2W]`; input channel `(p1 * 2 + p2) * D + c`
/// lands at row offset `p1`, column offset `p2`.
pub fn depth_to_space2<T: Element>(t: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
    let s = x.shape();
    if s.len() != 4 || s[1] % 4 != 0 {
        return Err(Error::shape("depth_to_space", format!("need channels divisible by 4, got {s:?}")));
    }
    let (n, c4, h, w) = (s[0], s[1], s[2], s[3]);
    let d = c4 / 4;
    let mut map = Vec::with_capacity(n * c4 * h * w);
    for i in 0..n {
        for ch in 0..d {
            for oh in 0..2 * h {
                for ow in 0..2 * w {
                    let q = (oh % 2) * 2 + ow % 2;
                    map.push(((i * c4 + q * d + ch) * h + oh / 2) * w + ow / 2);
                }
            }
        }
    }
    Ok(permute_flat(t, "depth_to_space", x, vec![n, d, 2 * h, 2 * w], map))
}
