//! The finite-difference suite over every block type at toy shapes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_fn, check_module, randomize, CheckConfig, CheckReport};
use crate::autograd::{Mode, ParamBuilder, ParamStore, Session, Var};
use crate::cvss::{ChannelAttention, CrossScan, CvssBlock, CvssConfig, Effn, SpatialAttention};
use crate::error::Result;
use crate::mfms::{GlobalAttention, LocalAttention, Mfms, MfmsConfig};
use crate::network::{Cvmh, NetworkConfig};
use crate::nn::{BatchNorm, ChannelNorm, Conv2d, Depthwise, Init, Pointwise, SharedConv1d};
use crate::ops::{self, Conv2dGeom};
use crate::scan::ScanMode;
use crate::ssm::{selective_scan, DirectionalSsm, ScanKernel};
use crate::tensor::Tensor;

/// Names of the suite entries, in run order.
pub const SUITE: [&str; 19] = [
    "conv3x3",
    "conv4x4_stride4",
    "depthwise3x3",
    "pointwise",
    "layer_norm",
    "batch_norm",
    "conv1d",
    "losses",
    "selective_scan",
    "directional_ssm",
    "cross_scan",
    "channel_attention",
    "spatial_attention",
    "effn",
    "cvss_block",
    "mfms_global",
    "mfms_local",
    "mfms_fuse",
    "network_tiny",
];

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000)))
}

fn module<M>(
    name: &str,
    seed: u64,
    inputs: &[Tensor<f64>],
    cfg: CheckConfig,
    build: impl FnOnce(&mut ParamBuilder<'_, f64>) -> Result<M>,
    run: impl Fn(&M, &mut Session<f64>, &[Var<f64>]) -> Result<Var<f64>>,
) -> Result<CheckReport> {
    let mut store = ParamStore::new();
    let m = build(&mut ParamBuilder::new(&mut store, seed))?;
    randomize(&mut store, seed, 0.5);
    check_module(name, &mut store, inputs, Mode::Train, seed, cfg, |s, xs| run(&m, s, xs))
}

fn small_block() -> CvssConfig {
    CvssConfig {
        dim: 4,
        state: 2,
        ..CvssConfig::default()
    }
}

/// Run one suite entry for one seed.
pub fn run_check(name: &str, seed: u64) -> Result<CheckReport> {
    let c = CheckConfig::default();
    let x = randn(&[2, 3, 5, 4], seed);
    let fm = randn(&[2, 4, 3, 3], seed);
    match name {
        "conv3x3" => module(name, seed, &[x], c, |pb| Ok(Conv2d::new(pb, "c", 3, 2, 3, Conv2dGeom::same(3), true, Init::Uniform)), |m, s, x| m.forward(s, &x[0])),
        "conv4x4_stride4" => module(name, seed, &[randn(&[1, 3, 8, 8], seed)], c, |pb| Ok(Conv2d::new(pb, "c", 3, 2, 4, Conv2dGeom { stride: 4, pad: 0 }, true, Init::Uniform)), |m, s, x| m.forward(s, &x[0])),
        "depthwise3x3" => module(name, seed, &[x], c, |pb| Ok(Depthwise::new(pb, "d", 3, 3, true)), |m, s, x| m.forward(s, &x[0])),
        "pointwise" => module(name, seed, &[x], c, |pb| Ok(Pointwise::new(pb, "p", 3, 5, true, Init::Uniform)), |m, s, x| m.forward(s, &x[0])),
        "layer_norm" => module(name, seed, &[x], c, |pb| Ok(ChannelNorm::new(pb, "n", 3)), |m, s, x| m.forward(s, &x[0])),
        "batch_norm" => module(name, seed, &[x], c, |pb| Ok(BatchNorm::new(pb, "b", 3)), |m, s, x| m.forward(s, &x[0])),
        "conv1d" => module(name, seed, &[randn(&[2, 7], seed)], c, |pb| Ok(SharedConv1d::new(pb, "k", 3, Init::Uniform)), |m, s, x| m.forward(s, &x[0])),
        "losses" => {
            let labels: Vec<u32> = (0..8).map(|i| (i * 7 + seed as u32) % 4).collect();
            check_fn(name, &[randn(&[2, 4, 2, 2], seed)], seed, c, |t, x| {
                let ce = ops::cross_entropy(t, &x[0], &labels, Some(3))?;
                let d = ops::dice(t, &x[0], &labels, None, 1.0)?;
                ops::add(t, &ce, &d)
            })
        }
        "selective_scan" => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n, d, l, st) = (2, 3, 5, 2);
            let inputs = [
                Tensor::randn([n, d, l], 1.0, &mut rng),
                Tensor::uniform([n, d, l], 0.1, 1.0, &mut rng),
                Tensor::uniform([d, st], -0.5, 1.0, &mut rng),
                Tensor::randn([n, st, l], 1.0, &mut rng),
                Tensor::randn([n, st, l], 1.0, &mut rng),
                Tensor::randn([d], 1.0, &mut rng),
            ];
            let kernel = if seed % 2 == 0 { ScanKernel::Sequential } else { ScanKernel::Blocked(2) };
            check_fn(name, &inputs, seed, c, |t, x| selective_scan(t, &x[0], &x[1], &x[2], &x[3], &x[4], &x[5], kernel))
        }
        "directional_ssm" => {
            let mode = if seed % 2 == 0 { ScanMode::Cs2d } else { ScanMode::Ss2d };
            module(name, seed, &[randn(&[1, 3, 3, 4], seed)], c, |pb| Ok(DirectionalSsm::new(pb, "ssm", 3, 2, mode, ScanKernel::Sequential)), |m, s, x| m.forward(s, &x[0]))
        }
        "cross_scan" => module(name, seed, &[randn(&[1, 4, 4, 4], seed)], c, |pb| Ok(CrossScan::new(pb, "cs", &small_block())), |m, s, x| m.forward(s, &x[0])),
        "channel_attention" => module(name, seed, &[fm], c, |pb| Ok(ChannelAttention::new(pb, "ca", 4, 2)), |m, s, x| m.forward(s, &x[0])),
        "spatial_attention" => module(name, seed, &[fm], c, |pb| Ok(SpatialAttention::new(pb, "sa")), |m, s, x| m.forward(s, &x[0])),
        "effn" => module(name, seed, &[randn(&[1, 4, 3, 3], seed)], c, |pb| Ok(Effn::new(pb, "e", 4, 2)), |m, s, x| m.forward(s, &x[0])),
        "cvss_block" => module(name, seed, &[randn(&[1, 4, 4, 4], seed)], c, |pb| Ok(CvssBlock::new(pb, "b", &small_block())), |m, s, x| m.forward(s, &x[0])),
        "mfms_global" => {
            let cfg = MfmsConfig::top_k(5)?;
            module(name, seed, &[fm], c, |pb| Ok(GlobalAttention::new(pb, "g", 4, &cfg)), |m, s, x| m.forward(s, &x[0]))
        }
        "mfms_local" => module(name, seed, &[fm], c, |pb| Ok(LocalAttention::new(pb, "l", 4, 4)), |m, s, x| m.forward(s, &x[0])),
        "mfms_fuse" => {
            let cfg = MfmsConfig::top_k(5)?;
            module(name, seed, &[fm, randn(&[2, 4, 3, 3], seed + 7)], c, |pb| Mfms::new(pb, "m", 4, &cfg), |m, s, x| m.forward(s, &x[0], &x[1]))
        }
        "network_tiny" => {
            let cfg = NetworkConfig {
                embed_dim: 4,
                num_classes: 3,
                enc_depths: [1, 1, 1, 1],
                dec_depths: [1, 1, 1, 1],
                state: 2,
                mfms: MfmsConfig::top_k(3)?,
                ..NetworkConfig::default()
            };
            let mut store = ParamStore::<f64>::new();
            let net = Cvmh::new(&mut store, cfg, seed)?;
            randomize(&mut store, seed, 0.4);
            let x = Tensor::randn([2, 3, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
            let cc = CheckConfig { samples: 3, ..c };
            check_module(name, &mut store, &[x], Mode::Train, seed, cc, |s, xs| net.forward(s, &xs[0]))
        }
        other => Err(crate::error::Error::config(format!("unknown gradient check `{other}`"))),
    }
}

/// Every entry of [`SUITE`] for every seed.
pub fn run_suite(seeds: &[u64]) -> Result<Vec<CheckReport>> {
    let mut out = Vec::with_capacity(SUITE.len() * seeds.len());
    for name in SUITE {
        for &seed in seeds {
            out.push(run_check(name, seed)?);
        }
    }
    Ok(out)
}
