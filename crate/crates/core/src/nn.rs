//! Parameterised layers. Each holds only parameter ids and static shape
//! information; values live in the [`ParamStore`](crate::ParamStore).

use crate::autograd::{BufferId, ParamBuilder, ParamId, Session, Var};
use crate::error::Result;
use crate::ops::{self, Conv2dGeom};
use crate::tensor::{Element, Tensor};

/// Initial weight values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    Uniform,
    Zeros,
}

fn weight<T: Element>(pb: &mut ParamBuilder<'_, T>, shape: &[usize], fan_in: usize, init: Init) -> ParamId {
    match init {
        Init::Uniform => pb.weight("weight", shape, fan_in),
        Init::Zeros => pb.zeros("weight", shape, false),
    }
}

fn bias<T: Element>(pb: &mut ParamBuilder<'_, T>, len: usize, fan_in: usize, init: Init) -> ParamId {
    match init {
        Init::Uniform => pb.bias("bias", len, fan_in),
        Init::Zeros => pb.zeros("bias", &[len], true),
    }
}

fn opt<T: Element>(s: &mut Session<T>, id: Option<ParamId>) -> Option<Var<T>> {
    id.map(|id| s.param(id))
}

/// 1x1 convolution over `[N, Cin, ...]`.
#[derive(Clone, Debug)]
pub struct Pointwise {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
}

impl Pointwise {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize, has_bias: bool, init: Init) -> Self {
        pb.scope(name, |pb| Pointwise {
            w: weight(pb, &[cout, cin], cin, init),
            b: has_bias.then(|| bias(pb, cout, cin, init)),
            cin,
            cout,
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = s.param(self.w);
        let b = opt(s, self.b);
        ops::pointwise(s, x, &w, b.as_ref())
    }
}

/// Affine map over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str, din: usize, dout: usize, has_bias: bool, init: Init) -> Self {
        pb.scope(name, |pb| Linear {
            w: weight(pb, &[dout, din], din, init),
            b: has_bias.then(|| bias(pb, dout, din, init)),
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = s.param(self.w);
        let b = opt(s, self.b);
        ops::linear(s, x, &w, b.as_ref())
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub geom: Conv2dGeom,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        geom: Conv2dGeom,
        has_bias: bool,
        init: Init,
    ) -> Self {
        let fan_in = cin * k * k;
        pb.scope(name, |pb| Conv2d {
            w: weight(pb, &[cout, cin, k, k], fan_in, init),
            b: has_bias.then(|| bias(pb, cout, fan_in, init)),
            geom,
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = s.param(self.w);
        let b = opt(s, self.b);
        ops::conv2d(s, x, &w, b.as_ref(), self.geom)
    }
}

/// Depthwise `k x k` convolution with "same" padding.
#[derive(Clone, Debug)]
pub struct Depthwise {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub k: usize,
}

impl Depthwise {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, k: usize, has_bias: bool) -> Self {
        pb.scope(name, |pb| Depthwise {
            w: pb.weight("weight", &[channels, 1, k, k], k * k),
            b: has_bias.then(|| pb.bias("bias", channels, k * k)),
            k,
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = s.param(self.w);
        let b = opt(s, self.b);
        ops::depthwise_conv2d(s, x, &w, b.as_ref(), self.k / 2)
    }
}

/// Layer norm over the channel axis (axis 1) of `[N, C, ...]`.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl ChannelNorm {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Self {
        pb.scope(name, |pb| ChannelNorm {
            gamma: pb.ones("weight", &[channels], true),
            beta: pb.zeros("bias", &[channels], true),
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: &Var<T>) -> Result<Var<T>> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        ops::layer_norm(s, x, &g, &b, 1)
    }
}

pub const BN_MOMENTUM: f64 = 0.1;

/// Batch norm over `[N, C, ...]` with running statistics kept as store
/// buffers. Before any training step the running statistics are the
/// initial mean 0 / variance 1.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Self {
        pb.scope(name, |pb| BatchNorm {
            gamma: pb.ones("weight", &[channels], true),
            beta: pb.zeros("bias", &[channels], true),
            running_mean: pb.buffer("running_mean", Tensor::zeros([channels])),
            running_var: pb.buffer("running_var", Tensor::ones([channels])),
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: &Var<T>) -> Result<Var<T>> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        if !s.training() {
            let mean = s.store().buffer(self.running_mean).clone();
            let var = s.store().buffer(self.running_var).clone();
            return ops::batch_norm_eval(s, x, &g, &b, mean.data(), var.data());
        }
        let (y, stats) = ops::batch_norm_train(s, x, &g, &b)?;
        let m = T::of(BN_MOMENTUM);
        let keep = T::one() - m;
        // running variance tracks the unbiased estimate
        let bessel = if stats.count > 1 {
            T::of(stats.count as f64 / (stats.count - 1) as f64)
        } else {
            T::one()
        };
        let store = s.store_mut();
        for (r, &v) in store.buffer_mut(self.running_mean).data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * v;
        }
        for (r, &v) in store.buffer_mut(self.running_var).data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + m * v * bessel;
        }
        Ok(y)
    }
}

/// Odd-length filter shared across positions of the last axis.
#[derive(Clone, Debug)]
pub struct SharedConv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
}

impl SharedConv1d {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str, k: usize, init: Init) -> Self {
        pb.scope(name, |pb| SharedConv1d {
            w: weight(pb, &[1, 1, k], k, init),
            b: bias(pb, 1, k, init),
            k,
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = s.param(self.w);
        let b = s.param(self.b);
        ops::conv1d_shared(s, x, &w, Some(&b))
    }
}
