//! Closed-form parameter and multiply-accumulate counts for a
//! [`NetworkConfig`], without building the model.
//!
//! MACs cover convolutions, linear/pointwise maps, depthwise and 1D convs,
//! the cosine projections, and two per state element per scan step (decay
//! update and readout). Norms, activations and elementwise ops are free.
//! FLOPs are reported as one per MAC.

use serde::Serialize;

use crate::cvss::CvssConfig;
use crate::mfms::{adaptive_kernel_size, MfmsConfig};
use crate::network::NetworkConfig;
use crate::ssm::{dt_rank, DirectionalSsm};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Cost {
    pub params: u64,
    pub macs: u64,
}

impl std::ops::Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost {
            params: self.params + o.params,
            macs: self.macs + o.macs,
        }
    }
}

impl std::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(it: I) -> Cost {
        it.fold(Cost::default(), |a, b| a + b)
    }
}

fn c(params: usize, macs: usize) -> Cost {
    Cost {
        params: params as u64,
        macs: macs as u64,
    }
}

fn pointwise(cin: usize, cout: usize, bias: bool, hw: usize) -> Cost {
    c(cin * cout + if bias { cout } else { 0 }, hw * cin * cout)
}

fn norm(ch: usize) -> Cost {
    c(2 * ch, 0)
}

fn depthwise(ch: usize, k: usize, hw: usize) -> Cost {
    c(ch * k * k + ch, hw * ch * k * k)
}

pub fn ssm_cost(d: usize, s: usize, hw: usize) -> Cost {
    let r = dt_rank(d);
    let per_dir = c(DirectionalSsm::direction_params(d, s), 0)
        + c(0, hw * d * (r + 2 * s)) // x_proj
        + c(0, hw * r * d) // dt_proj
        + c(0, 2 * hw * d * s); // scan
    [per_dir; 4].into_iter().sum()
}

pub fn block_cost(cfg: &CvssConfig, hw: usize) -> Cost {
    let (ch, d) = (cfg.dim, cfg.inner());
    let hidden = (ch / cfg.ca_reduction).max(1);
    let cs = norm(ch)
        + pointwise(ch, d, false, hw)
        + pointwise(ch, d, false, hw)
        + depthwise(d, 3, hw)
        + ssm_cost(d, cfg.state, hw)
        + norm(d)
        + pointwise(d, ch, false, hw);
    // shared MLP runs twice (avg and max)
    let ca = c(2 * ch * hidden, 2 * 2 * ch * hidden);
    let sa = c(2 * 49, hw * 2 * 49);
    let fuse = depthwise(ch, 3, hw) + norm(ch) + pointwise(ch, ch, true, hw);
    let r = ch * cfg.effn_ratio;
    let effn = norm(ch) + pointwise(ch, r, true, hw) + depthwise(r, 3, hw) + pointwise(r, ch, true, hw);
    cs + ca + depthwise(ch, 3, hw) + sa + fuse + effn
}

pub fn mfms_cost(cfg: &MfmsConfig, ch: usize, hw: usize) -> Cost {
    let k = adaptive_kernel_size(ch, cfg.alpha, cfg.beta);
    let hidden = ch / cfg.local_reduction;
    let global = c(3 * (k + 1), ch * cfg.frequencies.len() * hw + 3 * ch * k);
    let local = pointwise(ch, hidden, true, hw) + norm(hidden) + pointwise(hidden, ch, true, hw) + norm(ch);
    global + local
}

/// Cost of one forward pass of a single `h x w` image.
pub fn network_cost(cfg: &NetworkConfig, h: usize, w: usize) -> Cost {
    let plan = cfg.stage_plan(h, w);
    let emb = cfg.embed_dim;
    let (h4, w4) = (h / 4, w / 4);
    let mut total = c(cfg.in_channels * emb * 16 + emb, h4 * w4 * emb * cfg.in_channels * 16) + norm(emb);
    for (i, &(dim, sh, sw)) in plan.iter().enumerate() {
        total = total + (0..cfg.enc_depths[i]).map(|_| block_cost(&cfg.block(dim), sh * sw)).sum();
        if i < 3 {
            let hw2 = (sh / 2) * (sw / 2);
            total = total + norm(4 * dim) + pointwise(4 * dim, 2 * dim, false, hw2);
        }
    }
    for j in 0..4 {
        let (dim, sh, sw) = plan[3 - j];
        if j > 0 {
            let (_, ih, iw) = plan[4 - j];
            total = total + expand_cost(2 * dim, ih * iw);
            if cfg.mfms.enabled {
                total = total + mfms_cost(&cfg.mfms, dim, sh * sw);
            }
        }
        total = total + (0..cfg.dec_depths[j]).map(|_| block_cost(&cfg.block(dim), sh * sw)).sum();
    }
    total = total + expand_cost(emb, h4 * w4) + expand_cost(emb / 2, 4 * h4 * w4);
    total + pointwise(emb / 4, cfg.num_classes, true, h * w)
}

fn expand_cost(dim: usize, hw_in: usize) -> Cost {
    pointwise(dim, 2 * dim, false, hw_in) + norm(dim / 2)
}

pub fn param_count(cfg: &NetworkConfig) -> u64 {
    network_cost(cfg, cfg.input_size[0], cfg.input_size[1]).params
}

/// FLOPs (one per MAC) for one image of `cfg.input_size`.
pub fn flops_count(cfg: &NetworkConfig) -> u64 {
    network_cost(cfg, cfg.input_size[0], cfg.input_size[1]).macs
}
