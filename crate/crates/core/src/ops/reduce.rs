//! Reductions along one axis and over the whole tensor.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    /// Gradient goes to the first maximal element along the axis.
    Max,
    /// Gradient goes to the first minimal element along the axis.
    Min,
}

/// Reduce `axis` away: `[.., len, ..] -> [.., ..]`.
pub fn reduce_axis<T: Element>(t: &mut Tape<T>, x: &Var<T>, axis: usize, kind: Reduce) -> Result<Var<T>> {
    if axis >= x.shape().len() || x.shape()[axis] == 0 {
        return Err(Error::shape("reduce", format!("axis {axis} of {:?}", x.shape())));
    }
    let (outer, len, inner) = Tensor::<T>::split_at_axis(x.shape(), axis);
    let xd = x.data();
    let mut y = vec![T::zero(); outer * inner];
    // winning position along the axis for max/min
    let mut arg = vec![0usize; if matches!(kind, Reduce::Max | Reduce::Min) { outer * inner } else { 0 }];
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let at = |k: usize| xd[base + k * inner + i];
            let r = o * inner + i;
            match kind {
                Reduce::Sum | Reduce::Mean => {
                    let mut acc = T::zero();
                    for k in 0..len {
                        acc += at(k);
                    }
                    y[r] = if kind == Reduce::Mean { acc / T::of(len as f64) } else { acc };
                }
                Reduce::Max | Reduce::Min => {
                    let mut best = 0;
                    for k in 1..len {
                        let better = if kind == Reduce::Max { at(k) > at(best) } else { at(k) < at(best) };
                        if better {
                            best = k;
                        }
                    }
                    arg[r] = best;
                    y[r] = at(best);
                }
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    let value = Tensor::from_parts(shape, y);
    let name = match kind {
        Reduce::Sum => "sum",
        Reduce::Mean => "mean",
        Reduce::Max => "max",
        Reduce::Min => "min",
    };
    Ok(t.record(name, value, &[x], move |g, sink| {
        let Some(gx) = sink.slot(0) else { return };
        let scale = if kind == Reduce::Mean { T::one() / T::of(len as f64) } else { T::one() };
        for o in 0..outer {
            let base = o * len * inner;
            for i in 0..inner {
                let r = o * inner + i;
                match kind {
                    Reduce::Sum | Reduce::Mean => {
                        for k in 0..len {
                            gx[base + k * inner + i] += g[r] * scale;
                        }
                    }
                    Reduce::Max | Reduce::Min => gx[base + arg[r] * inner + i] += g[r],
                }
            }
        }
    }))
}

pub fn sum_all<T: Element>(t: &mut Tape<T>, x: &Var<T>) -> Var<T> {
    let n = x.value().numel();
    let value = Tensor::scalar(x.value().sum());
    t.record("sum_all", value, &[x], move |g, sink| {
        if let Some(gx) = sink.slot(0) {
            for o in gx.iter_mut().take(n) {
                *o += g[0];
            }
        }
    })
}

pub fn mean_all<T: Element>(t: &mut Tape<T>, x: &Var<T>) -> Var<T> {
    let n = x.value().numel().max(1);
    let inv = T::one() / T::of(n as f64);
    let value = Tensor::scalar(x.value().sum() * inv);
    t.record("mean_all", value, &[x], move |g, sink| {
        if let Some(gx) = sink.slot(0) {
            for o in gx.iter_mut() {
                *o += g[0] * inv;
            }
        }
    })
}

/// Average, maximum and minimum over `H x W` of `x: [N, C, H, W]`, each `[N, C]`.
pub fn global_pools<T: Element>(t: &mut Tape<T>, x: &Var<T>) -> Result<[Var<T>; 3]> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape("global_pools", format!("need [N, C, H, W], got {s:?}")));
    }
    let flat = crate::ops::reshape(t, x, &[s[0], s[1], s[2] * s[3]])?;
    Ok([
        reduce_axis(t, &flat, 2, Reduce::Mean)?,
        reduce_axis(t, &flat, 2, Reduce::Max)?,
        reduce_axis(t, &flat, 2, Reduce::Min)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pools_of_constant_and_small_map() {
        let mut t = Tape::<f64>::no_grad();
        let x = t.constant(Tensor::full([1, 1, 3, 3], 2.5));
        let [a, m, n] = global_pools(&mut t, &x).unwrap();
        assert_eq!((a.data()[0], m.data()[0], n.data()[0]), (2.5, 2.5, 2.5));

        let x = t.constant(Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let [a, m, n] = global_pools(&mut t, &x).unwrap();
        assert_eq!((a.data()[0], m.data()[0], n.data()[0]), (2.5, 4.0, 1.0));
    }

    #[test]
    fn max_gradient_routes_to_first_winner() {
        let mut t = Tape::<f64>::new();
        let x = t.input(Tensor::new([1, 4], vec![1.0, 5.0, 5.0, 0.0]).unwrap());
        let m = reduce_axis(&mut t, &x, 1, Reduce::Max).unwrap();
        let s = sum_all(&mut t, &m);
        let g = t.backward(&s).unwrap().wrt(&x).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn min_gradient_matches_finite_difference_away_from_ties() {
        let xs = [0.3, -1.2, 0.7, 2.0];
        let mut t = Tape::<f64>::new();
        let x = t.input(Tensor::new([4], xs.to_vec()).unwrap());
        let m = reduce_axis(&mut t, &x, 0, Reduce::Min).unwrap();
        let g = t.backward(&m).unwrap().wrt(&x).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            let f = |d: f64| {
                let mut v = xs;
                v[i] += d;
                v.iter().copied().fold(f64::INFINITY, f64::min)
            };
            let fd = (f(h) - f(-h)) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn mean_over_middle_axis() {
        let mut t = Tape::<f64>::no_grad();
        let x = t.constant(Tensor::from_fn([2, 3, 2], |i| i as f64));
        let y = reduce_axis(&mut t, &x, 1, Reduce::Mean).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert_eq!(y.data(), &[2.0, 3.0, 8.0, 9.0]);
    }
}
