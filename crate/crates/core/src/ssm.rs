//! Selective state-space scan and the four-direction SSM built on it.
//!
//! Sequences are channel-first, `[N, D, L]`. For every row `(n, d)` and
//! state `s`:
//!
//! ```text
//! h_t[s] = exp(delta_t * A[d, s]) * h_{t-1}[s] + delta_t * u_t * B_t[s]
//! y_t    = sum_s C_t[s] * h_t[s] + D[d] * u_t,        h_0 = 0
//! ```
//!
//! with `A = -exp(A_log)`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamBuilder, ParamId, Session, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Init, Pointwise};
use crate::ops;
use crate::scan::{build_paths, flatten_along, merge_directions, ScanMode};
use crate::tensor::{Element, Tensor};

/// How the recurrence is evaluated along a row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase", tag = "kind", content = "block")]
pub enum ScanKernel {
    #[default]
    Sequential,
    /// Independent scans over blocks of this length, stitched together by
    /// composing the affine maps `h -> a h + b` of consecutive blocks.
    Blocked(usize),
}

/// Zero-order hold for the state, Euler for the input:
/// returns `(exp(delta * a), delta * b)`.
pub fn discretize<T: Element>(delta: T, a: T, b: T) -> (T, T) {
    ((delta * a).exp(), delta * b)
}

/// Problem sizes of one scan call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub n: usize,
    pub d: usize,
    pub l: usize,
    pub s: usize,
}

/// Borrowed operands. `a` is the (negative) state matrix `[D, S]`; `b` and
/// `c` are position-major, `[N, L, S]`.
#[derive(Clone, Copy)]
pub struct ScanInputs<'a, T> {
    pub u: &'a [T],
    pub delta: &'a [T],
    pub a: &'a [T],
    pub b: &'a [T],
    pub c: &'a [T],
    pub d_skip: &'a [T],
}

impl<T> ScanInputs<'_, T> {
    fn check(&self, dims: ScanDims) -> Result<()> {
        let ScanDims { n, d, l, s } = dims;
        let want = [
            ("u", self.u.len(), n * d * l),
            ("delta", self.delta.len(), n * d * l),
            ("A", self.a.len(), d * s),
            ("B", self.b.len(), n * l * s),
            ("C", self.c.len(), n * l * s),
            ("D", self.d_skip.len(), d),
        ];
        for (name, got, exp) in want {
            if got != exp {
                return Err(Error::shape("selective_scan", format!("{name} has {got} elements, expected {exp} for {dims:?}")));
            }
        }
        Ok(())
    }
}

/// Sequential recurrence for one row. `bt`/`ct` are `[L, S]`. When `hs` is
/// given it receives every state, `[L, S]`.
/// With `trace`, also records every state and decay factor, `[L, S]` each.
#[allow(clippy::too_many_arguments)]
fn row_sequential<T: Element>(
    u: &[T],
    delta: &[T],
    a: &[T],
    bt: &[T],
    ct: &[T],
    dskip: T,
    y: &mut [T],
    mut trace: Option<(&mut [T], &mut [T])>,
) {
    let s = a.len();
    let mut h = vec![T::zero(); s];
    for t in 0..u.len() {
        let (dt, x) = (delta[t], u[t]);
        let bu = dt * x;
        let (bt, ct) = (&bt[t * s..(t + 1) * s], &ct[t * s..(t + 1) * s]);
        let mut acc = T::zero();
        match trace.as_mut() {
            None => {
                for k in 0..s {
                    h[k] = (dt * a[k]).exp() * h[k] + bu * bt[k];
                    acc += ct[k] * h[k];
                }
            }
            Some((hs, das)) => {
                for k in 0..s {
                    let da = (dt * a[k]).exp();
                    das[t * s + k] = da;
                    h[k] = da * h[k] + bu * bt[k];
                    hs[t * s + k] = h[k];
                    acc += ct[k] * h[k];
                }
            }
        }
        y[t] = acc + dskip * x;
    }
}

/// Blocked recurrence for one row.
///
/// Each block is first scanned from a zero state while tracking the running
/// product of its decays; the true state is then `local + prod * carry`,
/// where `carry` is the state at the end of the previous block.
#[allow(clippy::too_many_arguments)]
fn row_blocked<T: Element>(u: &[T], delta: &[T], a: &[T], bt: &[T], ct: &[T], dskip: T, block: usize, y: &mut [T]) {
    let s = a.len();
    let l = u.len();
    let mut local = vec![T::zero(); block * s];
    let mut prod = vec![T::zero(); block * s];
    let mut carry = vec![T::zero(); s];
    for start in (0..l).step_by(block) {
        let len = block.min(l - start);
        for j in 0..len {
            let t = start + j;
            let (dt, x) = (delta[t], u[t]);
            let bu = dt * x;
            let bt = &bt[t * s..(t + 1) * s];
            for k in 0..s {
                let da = (dt * a[k]).exp();
                let b = bu * bt[k];
                let (hl, p) = if j == 0 {
                    (b, da)
                } else {
                    (da * local[(j - 1) * s + k] + b, da * prod[(j - 1) * s + k])
                };
                local[j * s + k] = hl;
                prod[j * s + k] = p;
            }
        }
        for j in 0..len {
            let t = start + j;
            let ct = &ct[t * s..(t + 1) * s];
            let mut acc = T::zero();
            for k in 0..s {
                let h = local[j * s + k] + prod[j * s + k] * carry[k];
                acc += ct[k] * h;
                if j + 1 == len {
                    carry[k] = h;
                }
            }
            y[t] = acc + dskip * u[t];
        }
    }
}

/// Run the scan over all rows in parallel; returns `y`, `[N, D, L]`.
pub fn scan_raw<T: Element>(kernel: ScanKernel, dims: ScanDims, x: ScanInputs<'_, T>) -> Result<Vec<T>> {
    x.check(dims)?;
    if let ScanKernel::Blocked(0) = kernel {
        return Err(Error::config("blocked scan needs a block length of at least 1"));
    }
    let ScanDims { d, l, s, .. } = dims;
    let mut y = vec![T::zero(); x.u.len()];
    if l == 0 {
        return Ok(y);
    }
    y.par_chunks_mut(l).enumerate().for_each(|(row, yr)| {
        let (ni, di) = (row / d, row % d);
        let r = row * l..(row + 1) * l;
        let bs = &x.b[ni * l * s..(ni + 1) * l * s];
        let cs = &x.c[ni * l * s..(ni + 1) * l * s];
        let a = &x.a[di * s..(di + 1) * s];
        match kernel {
            ScanKernel::Sequential => row_sequential(&x.u[r.clone()], &x.delta[r], a, bs, cs, x.d_skip[di], yr, None),
            ScanKernel::Blocked(block) => row_blocked(&x.u[r.clone()], &x.delta[r], a, bs, cs, x.d_skip[di], block, yr),
        }
    });
    Ok(y)
}

/// Gradients of the scan, by a reverse sweep that recomputes each row's
/// states. `ga` is with respect to `A` (not `A_log`).
struct ScanGrads<T> {
    gu: Vec<T>,
    gdelta: Vec<T>,
    ga: Vec<T>,
    gb: Vec<T>,
    gc: Vec<T>,
    gd: Vec<T>,
}

fn scan_backward<T: Element>(dims: ScanDims, x: ScanInputs<'_, T>, gy: &[T]) -> ScanGrads<T> {
    let ScanDims { n, d, l, s } = dims;
    let per: Vec<ScanGrads<T>> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let mut out = ScanGrads {
                gu: vec![T::zero(); d * l],
                gdelta: vec![T::zero(); d * l],
                ga: vec![T::zero(); d * s],
                gb: vec![T::zero(); l * s],
                gc: vec![T::zero(); l * s],
                gd: vec![T::zero(); d],
            };
            let bs = &x.b[ni * l * s..(ni + 1) * l * s];
            let cs = &x.c[ni * l * s..(ni + 1) * l * s];
            let mut hs = vec![T::zero(); l * s];
            let mut das = vec![T::zero(); l * s];
            let mut yscratch = vec![T::zero(); l];
            let mut carry = vec![T::zero(); s];
            let zero_row = vec![T::zero(); s];
            for di in 0..d {
                let row = ni * d + di;
                let u = &x.u[row * l..(row + 1) * l];
                let delta = &x.delta[row * l..(row + 1) * l];
                let g = &gy[row * l..(row + 1) * l];
                let a = &x.a[di * s..(di + 1) * s];
                let dsk = x.d_skip[di];
                row_sequential(u, delta, a, bs, cs, dsk, &mut yscratch, Some((&mut hs, &mut das)));
                carry.fill(T::zero());
                let ga = &mut out.ga[di * s..(di + 1) * s];
                for t in (0..l).rev() {
                    let (dt, xu, gt) = (delta[t], u[t], g[t]);
                    out.gd[di] += gt * xu;
                    let mut gu = gt * dsk;
                    let mut gdt = T::zero();
                    let row = t * s..(t + 1) * s;
                    let (h_t, da_t, b_t, c_t) = (&hs[row.clone()], &das[row.clone()], &bs[row.clone()], &cs[row.clone()]);
                    let zeros = &zero_row[..];
                    let h_prev = if t > 0 { &hs[(t - 1) * s..t * s] } else { zeros };
                    let (gc_t, gb_t) = (&mut out.gc[row.clone()], &mut out.gb[row]);
                    let dtx = dt * xu;
                    for k in 0..s {
                        let dh = carry[k] + c_t[k] * gt;
                        gc_t[k] += gt * h_t[k];
                        let dda = dh * h_prev[k] * da_t[k];
                        gdt += dda * a[k] + dh * xu * b_t[k];
                        ga[k] += dda * dt;
                        gu += dh * dt * b_t[k];
                        gb_t[k] += dh * dtx;
                        carry[k] = dh * da_t[k];
                    }
                    out.gu[di * l + t] += gu;
                    out.gdelta[di * l + t] += gdt;
                }
            }
            out
        })
        .collect();

    let mut g = ScanGrads {
        gu: Vec::with_capacity(n * d * l),
        gdelta: Vec::with_capacity(n * d * l),
        ga: vec![T::zero(); d * s],
        gb: Vec::with_capacity(n * l * s),
        gc: Vec::with_capacity(n * l * s),
        gd: vec![T::zero(); d],
    };
    for p in per {
        g.gu.extend(p.gu);
        g.gdelta.extend(p.gdelta);
        g.gb.extend(p.gb);
        g.gc.extend(p.gc);
        for (o, v) in g.ga.iter_mut().zip(&p.ga) {
            *o += *v;
        }
        for (o, v) in g.gd.iter_mut().zip(&p.gd) {
            *o += *v;
        }
    }
    g
}

/// `[N, S, L] <-> [N, L, S]`.
fn swap_last2<T: Copy>(x: &[T], n: usize, r: usize, c: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for ni in 0..n {
        let m = &x[ni * r * c..(ni + 1) * r * c];
        for j in 0..c {
            out.extend((0..r).map(|i| m[i * c + j]));
        }
    }
    out
}

/// Differentiable selective scan.
///
/// `u`, `delta`: `[N, D, L]` (delta already positive); `a_log`: `[D, S]`;
/// `b`, `c`: `[N, S, L]`; `d_skip`: `[D]`. Returns `y`, `[N, D, L]`.
#[allow(clippy::too_many_arguments)]
pub fn selective_scan<T: Element>(
    t: &mut Tape<T>,
    u: &Var<T>,
    delta: &Var<T>,
    a_log: &Var<T>,
    b: &Var<T>,
    c: &Var<T>,
    d_skip: &Var<T>,
    kernel: ScanKernel,
) -> Result<Var<T>> {
    let us = u.shape();
    let (als, bs) = (a_log.shape(), b.shape());
    if us.len() != 3 || als.len() != 2 || bs.len() != 3 || delta.shape() != us || c.shape() != bs {
        return Err(Error::shape(
            "selective_scan",
            format!("u {us:?}, delta {:?}, A_log {als:?}, B {bs:?}, C {:?}", delta.shape(), c.shape()),
        ));
    }
    let dims = ScanDims {
        n: us[0],
        d: us[1],
        l: us[2],
        s: als[1],
    };
    if als[0] != dims.d || bs[0] != dims.n || bs[1] != dims.s || bs[2] != dims.l || d_skip.shape() != [dims.d] {
        return Err(Error::shape(
            "selective_scan",
            format!("u {us:?} with A_log {als:?}, B {bs:?}, D {:?}", d_skip.shape()),
        ));
    }
    let a: Arc<Vec<T>> = Arc::new(a_log.data().iter().map(|&v| -v.exp()).collect());
    let bt = Arc::new(swap_last2(b.data(), dims.n, dims.s, dims.l));
    let ct = Arc::new(swap_last2(c.data(), dims.n, dims.s, dims.l));
    let (uv, dv, dsk) = (u.value().clone(), delta.value().clone(), d_skip.value().clone());
    let y = scan_raw(
        kernel,
        dims,
        ScanInputs {
            u: uv.data(),
            delta: dv.data(),
            a: &a,
            b: &bt,
            c: &ct,
            d_skip: dsk.data(),
        },
    )?;
    t.add_macs(2 * (dims.n * dims.d * dims.l * dims.s) as u64);
    let value = Tensor::from_parts(us.to_vec(), y);
    Ok(t.record("selective_scan", value, &[u, delta, a_log, b, c, d_skip], move |gy, sink| {
        let inputs = ScanInputs {
            u: uv.data(),
            delta: dv.data(),
            a: &a,
            b: &bt,
            c: &ct,
            d_skip: dsk.data(),
        };
        let g = scan_backward(dims, inputs, gy);
        sink.add(0, &g.gu);
        sink.add(1, &g.gdelta);
        if let Some(ga_log) = sink.slot(2) {
            // dA/dA_log = A
            for ((o, gv), av) in ga_log.iter_mut().zip(&g.ga).zip(a.iter()) {
                *o += *gv * *av;
            }
        }
        if sink.wants(3) {
            sink.add(3, &swap_last2(&g.gb, dims.n, dims.l, dims.s));
        }
        if sink.wants(4) {
            sink.add(4, &swap_last2(&g.gc, dims.n, dims.l, dims.s));
        }
        sink.add(5, &g.gd);
    }))
}

/// Per-direction projections and state parameters.
#[derive(Clone, Debug)]
pub struct SsmDirection {
    /// Token to `[delta_low (R), B (S), C (S)]`.
    pub x_proj: Pointwise,
    /// `R -> D`, bias is the delta bias.
    pub dt_proj: Pointwise,
    pub a_log: ParamId,
    pub d_skip: ParamId,
}

/// Four selective scans over one feature map, one per scan order, merged
/// by summation.
#[derive(Clone, Debug)]
pub struct DirectionalSsm {
    pub dirs: Vec<SsmDirection>,
    pub channels: usize,
    pub state: usize,
    pub rank: usize,
    pub mode: ScanMode,
    pub kernel: ScanKernel,
}

pub const DT_MIN: f64 = 1e-3;
pub const DT_MAX: f64 = 0.1;

fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Rank of the low-rank delta projection for `channels` inner channels.
pub fn dt_rank(channels: usize) -> usize {
    channels.div_ceil(16).max(1)
}

impl DirectionalSsm {
    pub fn new<T: Element>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        channels: usize,
        state: usize,
        mode: ScanMode,
        kernel: ScanKernel,
    ) -> Self {
        let rank = dt_rank(channels);
        let dirs = pb.scope(name, |pb| {
            (0..4)
                .map(|i| {
                    pb.scope(format!("dir{i}"), |pb| {
                        let x_proj = Pointwise::new(pb, "x_proj", channels, rank + 2 * state, false, Init::Uniform);
                        let dt_proj = pb.scope("dt_proj", |pb| {
                            let std = (rank as f64).powf(-0.5);
                            let w = pb.uniform("weight", &[channels, rank], -std, std, false);
                            let bias: Vec<T> = (0..channels)
                                .map(|_| {
                                    let u = pb.sample_f64();
                                    let dt = (DT_MIN.ln() + u * (DT_MAX.ln() - DT_MIN.ln())).exp().max(1e-4);
                                    T::of(inv_softplus(dt))
                                })
                                .collect();
                            let b = pb.tensor("bias", Tensor::from_parts(vec![channels], bias), true);
                            Pointwise {
                                w,
                                b: Some(b),
                                cin: rank,
                                cout: channels,
                            }
                        });
                        let a_log = Tensor::from_fn([channels, state], |i| T::of(((i % state) + 1) as f64).ln());
                        SsmDirection {
                            x_proj,
                            dt_proj,
                            a_log: pb.tensor("A_log", a_log, true),
                            d_skip: pb.ones("D", &[channels], true),
                        }
                    })
                })
                .collect()
        });
        DirectionalSsm {
            dirs,
            channels,
            state,
            rank,
            mode,
            kernel,
        }
    }

    /// Parameter count of one direction.
    pub fn direction_params(channels: usize, state: usize) -> usize {
        let r = dt_rank(channels);
        (r + 2 * state) * channels + channels * r + channels + channels * state + channels
    }

    /// `[N, D, H, W] -> [N, D, H, W]`.
    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: &Var<T>) -> Result<Var<T>> {
        let sh = x.shape();
        if sh.len() != 4 || sh[1] != self.channels {
            return Err(Error::shape("directional_ssm", format!("expected [N, {}, H, W], got {sh:?}", self.channels)));
        }
        let paths = build_paths(sh[2], sh[3], self.mode)?;
        let (r, st) = (self.rank, self.state);
        let mut ys = Vec::with_capacity(4);
        for (dir, order) in self.dirs.iter().zip(paths.iter()) {
            let seq = flatten_along(s, x, order)?;
            let proj = dir.x_proj.forward(s, &seq)?;
            let dt_low = ops::narrow(s, &proj, 1, 0, r)?;
            let b = ops::narrow(s, &proj, 1, r, st)?;
            let c = ops::narrow(s, &proj, 1, r + st, st)?;
            let dt_pre = dir.dt_proj.forward(s, &dt_low)?;
            let delta = ops::softplus(s, &dt_pre);
            let a_log = s.param(dir.a_log);
            let d_skip = s.param(dir.d_skip);
            ys.push(selective_scan(s, &seq, &delta, &a_log, &b, &c, &d_skip, self.kernel)?);
        }
        merge_directions(s, &ys, &paths[..])
    }
}
