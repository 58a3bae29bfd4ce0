//! Multi-frequency multi-scale fusion of an encoder skip `F` with the
//! upsampled decoder feature `F~`.
//!
//! A global channel descriptor comes from projecting `F + F~` onto fixed 2D
//! cosine bases, pooling over the frequencies and running three adaptive
//! 1D convs across channels. A per-pixel descriptor comes from a pointwise
//! bottleneck with batch norm. Their sum, squashed, blends the two inputs.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autograd::{ParamBuilder, Session, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Init, Pointwise, SharedConv1d};
use crate::ops::{self, Reduce};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrequencySpec {
    /// Vertical frequency.
    pub u: usize,
    /// Horizontal frequency.
    pub v: usize,
}

/// The 16 strongest `(u, v)` pairs on a 7x7 grid, strongest first.
pub const TOP16_7X7: [FrequencySpec; 16] = {
    const U: [usize; 16] = [0, 0, 6, 0, 0, 1, 1, 4, 5, 1, 3, 0, 0, 0, 3, 2];
    const V: [usize; 16] = [0, 1, 0, 5, 2, 0, 2, 0, 0, 6, 0, 4, 6, 3, 5, 2];
    let mut out = [FrequencySpec { u: 0, v: 0 }; 16];
    let mut i = 0;
    while i < 16 {
        out[i] = FrequencySpec { u: U[i], v: V[i] };
        i += 1;
    }
    out
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfmsConfig {
    pub enabled: bool,
    pub frequencies: Vec<FrequencySpec>,
    /// Kernel-size divisor.
    pub alpha: f64,
    /// Kernel-size offset.
    pub beta: f64,
    /// Bottleneck reduction of the local branch.
    pub local_reduction: usize,
}

impl Default for MfmsConfig {
    fn default() -> Self {
        MfmsConfig {
            enabled: true,
            frequencies: TOP16_7X7.to_vec(),
            alpha: 2.0,
            beta: 1.0,
            local_reduction: 4,
        }
    }
}

impl MfmsConfig {
    /// The first `k` pairs of the default table.
    pub fn top_k(k: usize) -> Result<Self> {
        if k == 0 || k > TOP16_7X7.len() {
            return Err(Error::config(format!("frequency count must be in 1..=16, got {k}")));
        }
        Ok(MfmsConfig {
            frequencies: TOP16_7X7[..k].to_vec(),
            ..MfmsConfig::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        if self.frequencies.is_empty() {
            return Err(Error::config("at least one frequency is required"));
        }
        for (i, f) in self.frequencies.iter().enumerate() {
            if self.frequencies[..i].contains(f) {
                return Err(Error::config(format!("frequency ({}, {}) listed twice", f.u, f.v)));
            }
        }
        if !(self.alpha > 0.0) || !self.beta.is_finite() {
            return Err(Error::config(format!("kernel-size alpha must be positive, got {}", self.alpha)));
        }
        if self.local_reduction == 0 {
            return Err(Error::config("local reduction must be positive"));
        }
        Ok(())
    }

    pub fn check_channels(&self, channels: usize) -> Result<()> {
        if channels % self.local_reduction != 0 {
            return Err(Error::config(format!(
                "fusion at {channels} channels: reduction {} does not divide it",
                self.local_reduction
            )));
        }
        Ok(())
    }
}

/// `cos(pi h / H (u + 1/2)) * cos(pi w / W (v + 1/2))`, row-major `[H, W]`.
pub fn dct_basis(h: usize, w: usize, f: FrequencySpec) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        let a = (PI * r as f64 / h as f64 * (f.u as f64 + 0.5)).cos();
        for c in 0..w {
            out.push(a * (PI * c as f64 / w as f64 * (f.v as f64 + 0.5)).cos());
        }
    }
    out
}

/// All bases stacked as `[K, H * W]`.
pub fn basis_matrix<T: Element>(h: usize, w: usize, freqs: &[FrequencySpec]) -> Tensor<T> {
    let data = freqs.iter().flat_map(|&f| dct_basis(h, w, f)).map(T::of).collect();
    Tensor::from_parts(vec![freqs.len(), h * w], data)
}

/// `[N, C, H, W] -> [N, C, K]`: the projection of every channel map onto
/// each basis.
pub fn compress_frequencies<T: Element>(t: &mut Tape<T>, x: &Var<T>, freqs: &[FrequencySpec]) -> Result<Var<T>> {
    let s = x.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::shape("compress_frequencies", format!("need [N, C, H, W], got {s:?}")));
    }
    let basis = t.constant(basis_matrix(s[2], s[3], freqs));
    let flat = ops::reshape(t, x, &[s[0], s[1], s[2] * s[3]])?;
    ops::linear(t, &flat, &basis, None)
}

/// Nearest odd integer to `log2(c) / alpha + beta / alpha`, at least 1.
/// A value exactly between two odd integers goes to the smaller one.
pub fn adaptive_kernel_size(channels: usize, alpha: f64, beta: f64) -> usize {
    let lambda = (channels.max(1) as f64).log2() / alpha + beta / alpha;
    // odd numbers are 2m + 1; pick m nearest (lambda - 1) / 2, ties down
    let m = ((lambda - 1.0) / 2.0 - 0.5).ceil();
    if m < 0.0 {
        1
    } else {
        2 * m as usize + 1
    }
}

/// Frequency-domain channel attention, `[N, C, H, W] -> [N, C]`.
#[derive(Clone, Debug)]
pub struct GlobalAttention {
    pub freqs: Vec<FrequencySpec>,
    pub avg: SharedConv1d,
    pub max: SharedConv1d,
    pub min: SharedConv1d,
}

impl GlobalAttention {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, cfg: &MfmsConfig) -> Self {
        let k = adaptive_kernel_size(channels, cfg.alpha, cfg.beta);
        pb.scope(name, |pb| GlobalAttention {
            freqs: cfg.frequencies.clone(),
            avg: SharedConv1d::new(pb, "conv_avg", k, Init::Zeros),
            max: SharedConv1d::new(pb, "conv_max", k, Init::Zeros),
            min: SharedConv1d::new(pb, "conv_min", k, Init::Zeros),
        })
    }

    pub fn kernel(&self) -> usize {
        self.avg.k
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: &Var<T>) -> Result<Var<T>> {
        let f = compress_frequencies(s, x, &self.freqs)?;
        let mut g: Option<Var<T>> = None;
        for (kind, conv) in [(Reduce::Mean, &self.avg), (Reduce::Max, &self.max), (Reduce::Min, &self.min)] {
            let p = ops::reduce_axis(s, &f, 2, kind)?;
            let y = conv.forward(s, &p)?;
            g = Some(match g {
                None => y,
                Some(acc) => ops::add(s, &acc, &y)?,
            });
        }
        Ok(g.expect("three pooled branches"))
    }
}

/// `BN(pw2(relu(BN(pw1 x))))`, shape preserving.
#[derive(Clone, Debug)]
pub struct LocalAttention {
    pub pw1: Pointwise,
    pub bn1: BatchNorm,
    pub pw2: Pointwise,
    pub bn2: BatchNorm,
}

impl LocalAttention {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, reduction: usize) -> Self {
        let hidden = channels / reduction;
        pb.scope(name, |pb| LocalAttention {
            pw1: Pointwise::new(pb, "pw1", channels, hidden, true, Init::Uniform),
            bn1: BatchNorm::new(pb, "bn1", hidden),
            pw2: Pointwise::new(pb, "pw2", hidden, channels, true, Init::Zeros),
            bn2: BatchNorm::new(pb, "bn2", channels),
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: &Var<T>) -> Result<Var<T>> {
        let h = self.pw1.forward(s, x)?;
        let h = self.bn1.forward(s, &h)?;
        let h = ops::relu(s, &h);
        let h = self.pw2.forward(s, &h)?;
        self.bn2.forward(s, &h)
    }
}

#[derive(Clone, Debug)]
pub struct Mfms {
    pub global: GlobalAttention,
    pub local: LocalAttention,
    pub channels: usize,
}

impl Mfms {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, cfg: &MfmsConfig) -> Result<Self> {
        cfg.validate()?;
        cfg.check_channels(channels)?;
        Ok(pb.scope(name, |pb| Mfms {
            global: GlobalAttention::new(pb, "global", channels, cfg),
            local: LocalAttention::new(pb, "local", channels, cfg.local_reduction),
            channels,
        }))
    }

    /// Blend weight `sigmoid(G + L)` computed from `F + F~`.
    pub fn weights<T: Element>(&self, s: &mut Session<T>, f: &Var<T>, ft: &Var<T>) -> Result<Var<T>> {
        if f.shape() != ft.shape() || f.shape().len() != 4 || f.shape()[1] != self.channels {
            return Err(Error::shape(
                "mfms",
                format!("skip {:?} and upsampled {:?} with {} channels", f.shape(), ft.shape(), self.channels),
            ));
        }
        let x = ops::add(s, f, ft)?;
        let g = self.global.forward(s, &x)?;
        let g = ops::reshape(s, &g, &[x.shape()[0], self.channels, 1, 1])?;
        let l = self.local.forward(s, &x)?;
        let z = ops::add(s, &l, &g)?;
        Ok(ops::sigmoid(s, &z))
    }

    /// `w * F + (1 - w) * F~`.
    pub fn forward<T: Element>(&self, s: &mut Session<T>, f: &Var<T>, ft: &Var<T>) -> Result<Var<T>> {
        let w = self.weights(s, f, ft)?;
        ops::blend(s, f, ft, &w)
    }
}
