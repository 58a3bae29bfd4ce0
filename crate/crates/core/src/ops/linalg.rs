//! Dense matrix products: `linear` over the last axis and `pointwise`
//! (1x1 convolution) over the channel axis.

use rayon::prelude::*;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// `c = alpha * op(a) @ op(b) + beta * c` on contiguous row-major buffers,
/// where `op(a)` is `m x k` and `op(b)` is `k x n`. A transposed operand is
/// stored in its untransposed layout (`k x m` for `a`, `n x k` for `b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Element>(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index reachable via these strides.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_bias<T: Element>(op: &'static str, b: Option<&Var<T>>, len: usize) -> Result<()> {
    match b {
        Some(b) if b.shape() != [len] => Err(Error::shape(op, format!("bias {:?}, expected [{len}]", b.shape()))),
        _ => Ok(()),
    }
}

/// Affine map over the last axis: `y = x @ w^T + b` with `w: [out, in]`.
pub fn linear<T: Element>(t: &mut Tape<T>, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Result<Var<T>> {
    let ws = w.shape();
    let din = *x.shape().last().unwrap_or(&0);
    if ws.len() != 2 || ws[1] != din || x.shape().is_empty() {
        return Err(Error::shape("linear", format!("x {:?}, w {:?}", x.shape(), ws)));
    }
    let dout = ws[0];
    check_bias("linear", b, dout)?;
    let rows = x.value().numel() / din.max(1);
    let (xv, wv) = (x.value().clone(), w.value().clone());
    let mut y = vec![T::zero(); rows * dout];
    if let Some(b) = b {
        for row in y.chunks_mut(dout) {
            row.copy_from_slice(b.data());
        }
    }
    gemm(false, true, rows, din, dout, T::one(), xv.data(), wv.data(), T::one(), &mut y);
    t.add_macs((rows * din * dout) as u64);

    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    let value = Tensor::from_parts(shape, y);
    let mut parents = vec![x, w];
    parents.extend(b);
    Ok(t.record("linear", value, &parents, move |g, sink| {
        if let Some(gx) = sink.slot(0) {
            gemm(false, false, rows, dout, din, T::one(), g, wv.data(), T::one(), gx);
        }
        if let Some(gw) = sink.slot(1) {
            gemm(true, false, dout, rows, din, T::one(), g, xv.data(), T::one(), gw);
        }
        if let Some(gb) = sink.slot(2) {
            for row in g.chunks(dout) {
                for (o, v) in gb.iter_mut().zip(row) {
                    *o += *v;
                }
            }
        }
    }))
}

/// Channel mixing at every position: `x: [N, Cin, ...]`, `w: [Cout, Cin]`.
pub fn pointwise<T: Element>(t: &mut Tape<T>, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Result<Var<T>> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() < 2 || ws.len() != 2 || ws[1] != xs[1] {
        return Err(Error::shape("pointwise", format!("x {:?}, w {:?}", xs, ws)));
    }
    let (n, cin, cout) = (xs[0], xs[1], ws[0]);
    check_bias("pointwise", b, cout)?;
    let s: usize = xs[2..].iter().product();
    let (xv, wv) = (x.value().clone(), w.value().clone());
    let bias = b.map(|b| b.value().clone());

    let mut y = vec![T::zero(); n * cout * s];
    if s > 0 {
        y.par_chunks_mut(cout * s).enumerate().for_each(|(i, yn)| {
            let beta = if let Some(bias) = &bias {
                for (row, &bv) in yn.chunks_mut(s).zip(bias.data()) {
                    row.fill(bv);
                }
                T::one()
            } else {
                T::zero()
            };
            let xn = &xv.data()[i * cin * s..(i + 1) * cin * s];
            gemm(false, false, cout, cin, s, T::one(), wv.data(), xn, beta, yn);
        });
    }
    t.add_macs((n * s * cin * cout) as u64);

    let mut shape = xs.to_vec();
    shape[1] = cout;
    let value = Tensor::from_parts(shape, y);
    let mut parents = vec![x, w];
    parents.extend(b);
    Ok(t.record("pointwise", value, &parents, move |g, sink| {
        if s == 0 {
            return;
        }
        if let Some(gx) = sink.slot(0) {
            gx.par_chunks_mut(cin * s).enumerate().for_each(|(i, gxn)| {
                let gn = &g[i * cout * s..(i + 1) * cout * s];
                gemm(true, false, cin, cout, s, T::one(), wv.data(), gn, T::one(), gxn);
            });
        }
        if let Some(gw) = sink.slot(1) {
            let partials: Vec<Vec<T>> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut p = vec![T::zero(); cout * cin];
                    let gn = &g[i * cout * s..(i + 1) * cout * s];
                    let xn = &xv.data()[i * cin * s..(i + 1) * cin * s];
                    gemm(false, true, cout, s, cin, T::one(), gn, xn, T::zero(), &mut p);
                    p
                })
                .collect();
            for p in &partials {
                for (o, v) in gw.iter_mut().zip(p) {
                    *o += *v;
                }
            }
        }
        if let Some(gb) = sink.slot(2) {
            for gn in g.chunks(cout * s) {
                for (o, row) in gb.iter_mut().zip(gn.chunks(s)) {
                    *o += row.iter().copied().sum::<T>();
                }
            }
        }
    }))
}
