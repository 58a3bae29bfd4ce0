//! The CVSS block: a cross-scan SSM branch with channel attention, a
//! depthwise-conv branch with spatial attention, a fusion residual and an
//! expand-project feed-forward residual.

use serde::{Deserialize, Serialize};

use crate::autograd::{ParamBuilder, Session, Var};
use crate::error::{Error, Result};
use crate::nn::{ChannelNorm, Conv2d, Depthwise, Init, Linear, Pointwise};
use crate::ops::{self, Conv2dGeom, Reduce};
use crate::scan::ScanMode;
use crate::ssm::{DirectionalSsm, ScanKernel};
use crate::tensor::Element;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvssConfig {
    pub dim: usize,
    /// Inner width of the scan branch is `dim * ssm_expand`.
    pub ssm_expand: usize,
    pub state: usize,
    pub scan_mode: ScanMode,
    pub kernel: ScanKernel,
    pub ca_reduction: usize,
    pub effn_ratio: usize,
}

impl Default for CvssConfig {
    fn default() -> Self {
        CvssConfig {
            dim: 96,
            ssm_expand: 1,
            state: 16,
            scan_mode: ScanMode::Cs2d,
            kernel: ScanKernel::Sequential,
            ca_reduction: 4,
            effn_ratio: 2,
        }
    }
}

impl CvssConfig {
    pub fn with_dim(&self, dim: usize) -> Self {
        CvssConfig { dim, ..self.clone() }
    }

    pub fn inner(&self) -> usize {
        self.dim * self.ssm_expand
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.ssm_expand == 0 || self.state == 0 || self.effn_ratio == 0 || self.ca_reduction == 0 {
            return Err(Error::config(format!("block sizes must be positive: {self:?}")));
        }
        if self.dim % self.ca_reduction != 0 {
            return Err(Error::config(format!(
                "channel-attention reduction {} does not divide {} channels",
                self.ca_reduction, self.dim
            )));
        }
        if let ScanKernel::Blocked(0) = self.kernel {
            return Err(Error::config("blocked scan needs a block length of at least 1"));
        }
        Ok(())
    }
}

/// `x + out_proj(norm(ssm(silu(dw(in_main(ln x))))) * silu(in_gate(ln x)))`.
#[derive(Clone, Debug)]
pub struct CrossScan {
    pub norm: ChannelNorm,
    pub in_main: Pointwise,
    pub in_gate: Pointwise,
    pub dw: Depthwise,
    pub ssm: DirectionalSsm,
    pub out_norm: ChannelNorm,
    pub out_proj: Pointwise,
}

impl CrossScan {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str, cfg: &CvssConfig) -> Self {
        let (c, d) = (cfg.dim, cfg.inner());
        pb.scope(name, |pb| CrossScan {
            norm: ChannelNorm::new(pb, "norm", c),
            in_main: Pointwise::new(pb, "in_main", c, d, false, Init::Uniform),
            in_gate: Pointwise::new(pb, "in_gate", c, d, false, Init::Uniform),
            dw: Depthwise::new(pb, "dw", d, 3, true),
            ssm: DirectionalSsm::new(pb, "ssm", d, cfg.state, cfg.scan_mode, cfg.kernel),
            out_norm: ChannelNorm::new(pb, "out_norm", d),
            out_proj: Pointwise::new(pb, "out_proj", d, c, false, Init::Zeros),
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: &Var<T>) -> Result<Var<T>> {
        let xh = self.norm.forward(s, x)?;
        let m = self.in_main.forward(s, &xh)?;
        let m = self.dw.forward(s, &m)?;
        let m = ops::silu(s, &m);
        let m = self.ssm.forward(s, &m)?;
        let m = self.out_norm.forward(s, &m)?;
        let g = self.in_gate.forward(s, &xh)?;
        let g = ops::silu(s, &g);
        let y = ops::mul(s, &m, &g)?;
        let y = self.out_proj.forward(s, &y)?;
        ops::add(s, x, &y)
    }
}

/// Per-channel gate from average and max pooling through a shared
/// bottleneck MLP.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ChannelAttention {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction).max(1);
        pb.scope(name, |pb| ChannelAttention {
            fc1: Linear::new(pb, "fc1", channels, hidden, false, Init::Uniform),
            fc2: Linear::new(pb, "fc2", hidden, channels, false, Init::Uniform),
        })
    }

    fn mlp<T: Element>(&self, s: &mut Session<T>, v: &Var<T>) -> Result<Var<T>> {
        let h = self.fc1.forward(s, v)?;
        let h = ops::relu(s, &h);
        self.fc2.forward(s, &h)
    }

    /// The `[N, C, 1, 1]` gate.
    pub fn weights<T: Element>(&self, s: &mut Session<T>, x: &Var<T>) -> Result<Var<T>> {
        let sh = x.shape().to_vec();
        let [avg, max, _] = ops::global_pools(s, x)?;
        let a = self.mlp(s, &avg)?;
        let m = self.mlp(s, &max)?;
        let z = ops::add(s, &a, &m)?;
        let w = ops::sigmoid(s, &z);
        ops::reshape(s, &w, &[sh[0], sh[1], 1, 1])
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = self.weights(s, x)?;
        ops::mul(s, x, &w)
    }
}

/// Per-pixel gate from a 7x7 conv over the channel mean and max.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub conv: Conv2d,
}

impl SpatialAttention {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str) -> Self {
        SpatialAttention {
            conv: Conv2d::new(pb, &format!("{name}.conv"), 2, 1, 7, Conv2dGeom::same(7), false, Init::Uniform),
        }
    }

    /// The `[N, 1, H, W]` gate.
    pub fn weights<T: Element>(&self, s: &mut Session<T>, x: &Var<T>) -> Result<Var<T>> {
        let sh = x.shape().to_vec();
        if sh.len() != 4 {
            return Err(Error::shape("spatial_attention", format!("need [N, C, H, W], got {sh:?}")));
        }
        let one = [sh[0], 1, sh[2], sh[3]];
        let mean = ops::reduce_axis(s, x, 1, Reduce::Mean)?;
        let mean = ops::reshape(s, &mean, &one)?;
        let max = ops::reduce_axis(s, x, 1, Reduce::Max)?;
        let max = ops::reshape(s, &max, &one)?;
        let both = ops::concat(s, &[&mean, &max], 1)?;
        let z = self.conv.forward(s, &both)?;
        Ok(ops::sigmoid(s, &z))
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = self.weights(s, x)?;
        ops::mul(s, x, &w)
    }
}

/// `pw(rC -> C)(gelu(dw3x3(pw(C -> rC)(ln x))))`; the caller adds the residual.
#[derive(Clone, Debug)]
pub struct Effn {
    pub norm: ChannelNorm,
    pub expand: Pointwise,
    pub dw: Depthwise,
    pub project: Pointwise,
}

impl Effn {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize, ratio: usize) -> Self {
        let hidden = dim * ratio;
        pb.scope(name, |pb| Effn {
            norm: ChannelNorm::new(pb, "norm", dim),
            expand: Pointwise::new(pb, "expand", dim, hidden, true, Init::Uniform),
            dw: Depthwise::new(pb, "dw", hidden, 3, true),
            project: Pointwise::new(pb, "project", hidden, dim, true, Init::Zeros),
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: &Var<T>) -> Result<Var<T>> {
        let h = self.norm.forward(s, x)?;
        let h = self.expand.forward(s, &h)?;
        let h = self.dw.forward(s, &h)?;
        let h = ops::gelu(s, &h);
        self.project.forward(s, &h)
    }
}

#[derive(Clone, Debug)]
pub struct CvssBlock {
    pub cs: CrossScan,
    pub ca: ChannelAttention,
    pub local: Depthwise,
    pub sa: SpatialAttention,
    pub fuse_dw: Depthwise,
    pub fuse_norm: ChannelNorm,
    pub fuse_proj: Pointwise,
    pub effn: Effn,
}

impl CvssBlock {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str, cfg: &CvssConfig) -> Self {
        let c = cfg.dim;
        pb.scope(name, |pb| CvssBlock {
            cs: CrossScan::new(pb, "cs", cfg),
            ca: ChannelAttention::new(pb, "ca", c, cfg.ca_reduction),
            local: Depthwise::new(pb, "local", c, 3, true),
            sa: SpatialAttention::new(pb, "sa"),
            fuse_dw: Depthwise::new(pb, "fuse_dw", c, 3, true),
            fuse_norm: ChannelNorm::new(pb, "fuse_norm", c),
            fuse_proj: Pointwise::new(pb, "fuse_proj", c, c, true, Init::Zeros),
            effn: Effn::new(pb, "effn", c, cfg.effn_ratio),
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: &Var<T>) -> Result<Var<T>> {
        let g = self.cs.forward(s, x)?;
        let g = self.ca.forward(s, &g)?;
        let l = self.local.forward(s, x)?;
        let l = self.sa.forward(s, &l)?;
        let f = ops::add(s, &g, &l)?;
        let f = self.fuse_dw.forward(s, &f)?;
        let f = self.fuse_norm.forward(s, &f)?;
        let f = self.fuse_proj.forward(s, &f)?;
        let u = ops::add(s, x, &f)?;
        let e = self.effn.forward(s, &u)?;
        ops::add(s, &u, &e)
    }
}

/// A run of blocks applied two at a time as `x + b(a(x))`; an odd last
/// block is applied on its own.
#[derive(Clone, Debug)]
pub struct CvssStage {
    pub blocks: Vec<CvssBlock>,
}

impl CvssStage {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str, cfg: &CvssConfig, depth: usize) -> Self {
        pb.scope(name, |pb| CvssStage {
            blocks: (0..depth).map(|i| CvssBlock::new(pb, &format!("block{i}"), cfg)).collect(),
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: &Var<T>) -> Result<Var<T>> {
        let mut x = x.clone();
        for pair in self.blocks.chunks(2) {
            x = match pair {
                [a, b] => {
                    let y = a.forward(s, &x)?;
                    let y = b.forward(s, &y)?;
                    ops::add(s, &x, &y)?
                }
                [a] => a.forward(s, &x)?,
                _ => unreachable!(),
            };
        }
        Ok(x)
    }
}
