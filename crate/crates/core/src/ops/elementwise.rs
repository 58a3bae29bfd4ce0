//! Elementwise arithmetic with numpy-style broadcasting, activations, and
//! the convex blend used by skip fusion.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, Element, Tensor};

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Row-major strides of `shape` right-aligned to `out`, zero on broadcast axes.
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let pad = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[pad + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visit every output position with the matching offsets into `a` and `b`.
fn for_each_pair(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel(out);
    if n == 0 {
        return;
    }
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let last = out.len() - 1;
    let inner = out[last];
    let (ia_step, ib_step) = (sa[last], sb[last]);
    let mut idx = vec![0usize; out.len()];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut i = 0;
    while i < n {
        let (mut pa, mut pb) = (oa, ob);
        for _ in 0..inner {
            f(i, pa, pb);
            pa += ia_step;
            pb += ib_step;
            i += 1;
        }
        // carry into the outer axes
        let mut ax = last;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

fn binary<T: Element>(t: &mut Tape<T>, kind: Binary, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let name = match kind {
        Binary::Add => "add",
        Binary::Sub => "sub",
        Binary::Mul => "mul",
    };
    let out_shape = broadcast_shape(a.shape(), b.shape())
        .ok_or_else(|| Error::shape(name, format!("{:?} vs {:?}", a.shape(), b.shape())))?;
    let av = a.value().clone();
    let bv = b.value().clone();
    let f = |x: T, y: T| match kind {
        Binary::Add => x + y,
        Binary::Sub => x - y,
        Binary::Mul => x * y,
    };
    let same = a.shape() == b.shape();
    let (sa, sb) = (aligned_strides(a.shape(), &out_shape), aligned_strides(b.shape(), &out_shape));
    let mut out = vec![T::zero(); numel(&out_shape)];
    if same {
        for ((o, &x), &y) in out.iter_mut().zip(av.data()).zip(bv.data()) {
            *o = f(x, y);
        }
    } else {
        let (ad, bd) = (av.data(), bv.data());
        for_each_pair(&out_shape, &sa, &sb, |i, ia, ib| out[i] = f(ad[ia], bd[ib]));
    }
    let value = Tensor::from_parts(out_shape.clone(), out);
    Ok(t.record(name, value, &[a, b], move |g, sink| {
        // d/da and d/db of the three ops, evaluated at one position
        let da = |_: T, y: T| match kind {
            Binary::Add | Binary::Sub => T::one(),
            Binary::Mul => y,
        };
        let db = |x: T, _: T| match kind {
            Binary::Add => T::one(),
            Binary::Sub => -T::one(),
            Binary::Mul => x,
        };
        let (ad, bd) = (av.data(), bv.data());
        if same {
            if let Some(ga) = sink.slot(0) {
                for i in 0..g.len() {
                    ga[i] += g[i] * da(ad[i], bd[i]);
                }
            }
            if let Some(gb) = sink.slot(1) {
                for i in 0..g.len() {
                    gb[i] += g[i] * db(ad[i], bd[i]);
                }
            }
            return;
        }
        if let Some(ga) = sink.slot(0) {
            for_each_pair(&out_shape, &sa, &sb, |i, ia, ib| ga[ia] += g[i] * da(ad[ia], bd[ib]));
        }
        if let Some(gb) = sink.slot(1) {
            for_each_pair(&out_shape, &sa, &sb, |i, ia, ib| gb[ib] += g[i] * db(ad[ia], bd[ib]));
        }
    }))
}

pub fn add<T: Element>(t: &mut Tape<T>, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    binary(t, Binary::Add, a, b)
}

pub fn sub<T: Element>(t: &mut Tape<T>, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    binary(t, Binary::Sub, a, b)
}

pub fn mul<T: Element>(t: &mut Tape<T>, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    binary(t, Binary::Mul, a, b)
}

/// Map `f` over `x`; `df(x, y)` is the derivative at input `x` with output `y`.
fn unary<T: Element>(
    t: &mut Tape<T>,
    name: &'static str,
    x: &Var<T>,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + 'static,
) -> Var<T> {
    let xv = x.value().clone();
    let yv = xv.map(f);
    let keep = yv.clone();
    t.record(name, yv, &[x], move |g, sink| {
        if let Some(gx) = sink.slot(0) {
            for (i, o) in gx.iter_mut().enumerate() {
                *o += g[i] * df(xv.data()[i], keep.data()[i]);
            }
        }
    })
}

pub(crate) fn sigmoid_f<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus_f<T: Element>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn gelu_f64(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad_f64(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn neg<T: Element>(t: &mut Tape<T>, x: &Var<T>) -> Var<T> {
    unary(t, "neg", x, |v| -v, |_, _| -T::one())
}

pub fn relu<T: Element>(t: &mut Tape<T>, x: &Var<T>) -> Var<T> {
    unary(
        t,
        "relu",
        x,
        |v| v.max(T::zero()),
        |v, _| if v > T::zero() { T::one() } else { T::zero() },
    )
}

pub fn sigmoid<T: Element>(t: &mut Tape<T>, x: &Var<T>) -> Var<T> {
    unary(t, "sigmoid", x, sigmoid_f, |_, y| y * (T::one() - y))
}

pub fn silu<T: Element>(t: &mut Tape<T>, x: &Var<T>) -> Var<T> {
    unary(
        t,
        "silu",
        x,
        |v| v * sigmoid_f(v),
        |v, _| {
            let s = sigmoid_f(v);
            s * (T::one() + v * (T::one() - s))
        },
    )
}

/// Exact (erf-based) GELU.
pub fn gelu<T: Element>(t: &mut Tape<T>, x: &Var<T>) -> Var<T> {
    unary(
        t,
        "gelu",
        x,
        |v| T::of(gelu_f64(v.as_f64())),
        |v, _| T::of(gelu_grad_f64(v.as_f64())),
    )
}

pub fn softplus<T: Element>(t: &mut Tape<T>, x: &Var<T>) -> Var<T> {
    unary(t, "softplus", x, softplus_f, |v, _| sigmoid_f(v))
}

pub fn exp<T: Element>(t: &mut Tape<T>, x: &Var<T>) -> Var<T> {
    unary(t, "exp", x, |v| v.exp(), |_, y| y)
}

pub fn scale<T: Element>(t: &mut Tape<T>, x: &Var<T>, k: T) -> Var<T> {
    unary(t, "scale", x, move |v| v * k, move |_, _| k)
}

/// `ft + w * (f - ft)`, clamped into `[min(f, ft), max(f, ft)]` so rounding
/// can never leave the segment. `f == ft` returns `f` exactly.
pub fn blend<T: Element>(t: &mut Tape<T>, f: &Var<T>, ft: &Var<T>, w: &Var<T>) -> Result<Var<T>> {
    if f.shape() != ft.shape() || f.shape() != w.shape() {
        return Err(Error::shape(
            "blend",
            format!("{:?}, {:?}, {:?}", f.shape(), ft.shape(), w.shape()),
        ));
    }
    let (fv, tv, wv) = (f.value().clone(), ft.value().clone(), w.value().clone());
    let out: Vec<T> = fv
        .data()
        .iter()
        .zip(tv.data())
        .zip(wv.data())
        .map(|((&a, &b), &w)| {
            let z = b + w * (a - b);
            z.max(a.min(b)).min(a.max(b))
        })
        .collect();
    let value = Tensor::from_parts(f.shape().to_vec(), out);
    Ok(t.record("blend", value, &[f, ft, w], move |g, sink| {
        let (a, b, w) = (fv.data(), tv.data(), wv.data());
        if let Some(gf) = sink.slot(0) {
            for i in 0..g.len() {
                gf[i] += g[i] * w[i];
            }
        }
        if let Some(gt) = sink.slot(1) {
            for i in 0..g.len() {
                gt[i] += g[i] * (T::one() - w[i]);
            }
        }
        if let Some(gw) = sink.slot(2) {
            for i in 0..g.len() {
                gw[i] += g[i] * (a[i] - b[i]);
            }
        }
    }))
}
