//! The full U-shaped segmentation network.
//!
//! ```text
//! image -> embed(4x4/4) -> enc0 (C) -> merge -> enc1 (2C) -> merge -> enc2 (4C) -> merge -> enc3 (8C)
//!                            |skip0              |skip1               |skip2                  |
//! logits <- head <- expand x2 <- dec3 (C) <- fuse <- expand <- dec2 <- fuse <- expand <- dec1 <- fuse <- expand <- dec0
//! ```

use serde::{Deserialize, Serialize};

use crate::autograd::{ParamBuilder, ParamStore, Session, Var};
use crate::cvss::{CvssConfig, CvssStage};
use crate::error::{Error, Result};
use crate::mfms::{Mfms, MfmsConfig};
use crate::nn::{ChannelNorm, Conv2d, Init, Pointwise};
use crate::ops::{self, Conv2dGeom};
use crate::scan::ScanMode;
use crate::ssm::ScanKernel;
use crate::tensor::Element;

/// Input extents must be multiples of this (4x embedding, three 2x merges).
pub const SIZE_MULTIPLE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub embed_dim: usize,
    pub enc_depths: [usize; 4],
    /// Deepest stage first; the last entry runs at the highest resolution.
    pub dec_depths: [usize; 4],
    /// Reference input size `[H, W]` used for complexity reports.
    pub input_size: [usize; 2],
    pub scan_mode: ScanMode,
    pub scan_kernel: ScanKernel,
    pub ssm_expand: usize,
    pub state: usize,
    pub ca_reduction: usize,
    pub effn_ratio: usize,
    pub mfms: MfmsConfig,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let b = CvssConfig::default();
        NetworkConfig {
            in_channels: 3,
            num_classes: 6,
            embed_dim: 96,
            enc_depths: [2, 2, 2, 2],
            dec_depths: [2, 2, 2, 1],
            input_size: [256, 256],
            scan_mode: b.scan_mode,
            scan_kernel: b.kernel,
            ssm_expand: b.ssm_expand,
            state: b.state,
            ca_reduction: b.ca_reduction,
            effn_ratio: b.effn_ratio,
            mfms: MfmsConfig::default(),
        }
    }
}

impl NetworkConfig {
    /// A small model for tests and desk-scale runs.
    pub fn tiny(embed_dim: usize, num_classes: usize) -> Self {
        NetworkConfig {
            embed_dim,
            num_classes,
            input_size: [64, 64],
            ..NetworkConfig::default()
        }
    }

    pub fn block(&self, dim: usize) -> CvssConfig {
        CvssConfig {
            dim,
            ssm_expand: self.ssm_expand,
            state: self.state,
            scan_mode: self.scan_mode,
            kernel: self.scan_kernel,
            ca_reduction: self.ca_reduction,
            effn_ratio: self.effn_ratio,
        }
    }

    /// Channel width of encoder stage `i`.
    pub fn stage_dim(&self, i: usize) -> usize {
        self.embed_dim << i
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.num_classes == 0 {
            return Err(Error::config("input channels and class count must be positive"));
        }
        if self.embed_dim == 0 || self.embed_dim % 4 != 0 {
            return Err(Error::config(format!(
                "embed_dim must be a positive multiple of 4 (the output head halves it twice), got {}",
                self.embed_dim
            )));
        }
        for i in 0..4 {
            self.block(self.stage_dim(i)).validate()?;
        }
        if self.mfms.enabled {
            self.mfms.validate()?;
            for i in 0..3 {
                self.mfms.check_channels(self.stage_dim(i))?;
            }
        }
        check_extent(self.input_size[0], self.input_size[1])
    }

    /// `(channels, height, width)` at every encoder stage for an `h x w` input.
    pub fn stage_plan(&self, h: usize, w: usize) -> [(usize, usize, usize); 4] {
        std::array::from_fn(|i| (self.stage_dim(i), (h / 4) >> i, (w / 4) >> i))
    }
}

fn check_extent(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
        return Err(Error::config(format!("input {h}x{w} must be non-empty multiples of {SIZE_MULTIPLE}")));
    }
    Ok(())
}

/// 4x4 stride-4 convolution then channel layer norm.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub conv: Conv2d,
    pub norm: ChannelNorm,
}

impl PatchEmbed {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, dim: usize) -> Self {
        pb.scope(name, |pb| PatchEmbed {
            conv: Conv2d::new(pb, "conv", cin, dim, 4, Conv2dGeom { stride: 4, pad: 0 }, true, Init::Uniform),
            norm: ChannelNorm::new(pb, "norm", dim),
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: &Var<T>) -> Result<Var<T>> {
        let sh = x.shape();
        if sh.len() != 4 || sh[2] % 4 != 0 || sh[3] % 4 != 0 {
            return Err(Error::shape("patch_embed", format!("need [N, C, H, W] with H, W divisible by 4, got {sh:?}")));
        }
        let y = self.conv.forward(s, x)?;
        self.norm.forward(s, &y)
    }
}

/// `[N, D, H, W] -> [N, 2D, H/2, W/2]`: stack each 2x2 cell, norm, project.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub norm: ChannelNorm,
    pub proj: Pointwise,
}

impl PatchMerge {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize) -> Self {
        pb.scope(name, |pb| PatchMerge {
            norm: ChannelNorm::new(pb, "norm", 4 * dim),
            proj: Pointwise::new(pb, "proj", 4 * dim, 2 * dim, false, Init::Uniform),
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = ops::space_to_depth2(s, x)?;
        let y = self.norm.forward(s, &y)?;
        self.proj.forward(s, &y)
    }
}

/// `[N, D, H, W] -> [N, D/2, 2H, 2W]`: project to 2D channels, unfold them
/// into 2x2 cells, norm.
#[derive(Clone, Debug)]
pub struct PatchExpand {
    pub proj: Pointwise,
    pub norm: ChannelNorm,
}

impl PatchExpand {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize) -> Self {
        pb.scope(name, |pb| PatchExpand {
            proj: Pointwise::new(pb, "proj", dim, 2 * dim, false, Init::Uniform),
            norm: ChannelNorm::new(pb, "norm", dim / 2),
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: &Var<T>) -> Result<Var<T>> {
        if x.shape().len() != 4 || x.shape()[1] % 2 != 0 {
            return Err(Error::shape("patch_expand", format!("need an even channel count, got {:?}", x.shape())));
        }
        let y = self.proj.forward(s, x)?;
        let y = ops::depth_to_space2(s, &y)?;
        self.norm.forward(s, &y)
    }
}

#[derive(Clone, Debug)]
pub struct Cvmh {
    pub config: NetworkConfig,
    pub embed: PatchEmbed,
    pub encoder: Vec<CvssStage>,
    pub merges: Vec<PatchMerge>,
    pub decoder: Vec<CvssStage>,
    /// Upsampling into decoder stages 1..=3.
    pub expands: Vec<PatchExpand>,
    /// Skip fusion for decoder stages 1..=3; `None` adds the two inputs.
    pub fusers: Vec<Option<Mfms>>,
    pub final_expand: [PatchExpand; 2],
    pub head: Pointwise,
}

impl Cvmh {
    /// Register all parameters in `store` with seeded initial values.
    pub fn new<T: Element>(store: &mut ParamStore<T>, config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let pb = &mut ParamBuilder::new(store, seed);
        let c = config.embed_dim;
        let embed = PatchEmbed::new(pb, "embed", config.in_channels, c);
        let mut encoder = Vec::new();
        let mut merges = Vec::new();
        for i in 0..4 {
            let dim = config.stage_dim(i);
            encoder.push(CvssStage::new(pb, &format!("enc{i}"), &config.block(dim), config.enc_depths[i]));
            if i < 3 {
                merges.push(PatchMerge::new(pb, &format!("merge{i}"), dim));
            }
        }
        let mut decoder = Vec::new();
        let mut expands = Vec::new();
        let mut fusers = Vec::new();
        for j in 0..4 {
            let dim = config.stage_dim(3 - j);
            if j > 0 {
                expands.push(PatchExpand::new(pb, &format!("expand{j}"), 2 * dim));
                fusers.push(if config.mfms.enabled {
                    Some(Mfms::new(pb, &format!("fuse{j}"), dim, &config.mfms)?)
                } else {
                    None
                });
            }
            decoder.push(CvssStage::new(pb, &format!("dec{j}"), &config.block(dim), config.dec_depths[j]));
        }
        let final_expand = [PatchExpand::new(pb, "final_expand0", c), PatchExpand::new(pb, "final_expand1", c / 2)];
        let head = Pointwise::new(pb, "head", c / 4, config.num_classes, true, Init::Uniform);
        Ok(Cvmh {
            config,
            embed,
            encoder,
            merges,
            decoder,
            expands,
            fusers,
            final_expand,
            head,
        })
    }

    /// `[N, in_channels, H, W] -> [N, num_classes, H, W]` logits.
    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: &Var<T>) -> Result<Var<T>> {
        let sh = x.shape();
        if sh.len() != 4 || sh[1] != self.config.in_channels {
            return Err(Error::shape(
                "network",
                format!("expected [N, {}, H, W], got {sh:?}", self.config.in_channels),
            ));
        }
        check_extent(sh[2], sh[3])?;
        let mut h = self.embed.forward(s, x)?;
        let mut skips = Vec::with_capacity(3);
        for (i, stage) in self.encoder.iter().enumerate() {
            h = stage.forward(s, &h)?;
            if i < 3 {
                skips.push(h.clone());
                h = self.merges[i].forward(s, &h)?;
            }
        }
        for (j, stage) in self.decoder.iter().enumerate() {
            if j > 0 {
                let up = self.expands[j - 1].forward(s, &h)?;
                let skip = &skips[3 - j];
                h = match &self.fusers[j - 1] {
                    Some(m) => m.forward(s, skip, &up)?,
                    None => ops::add(s, skip, &up)?,
                };
            }
            h = stage.forward(s, &h)?;
        }
        for e in &self.final_expand {
            h = e.forward(s, &h)?;
        }
        self.head.forward(s, &h)
    }
}
