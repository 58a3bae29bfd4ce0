use cvmh_core::complexity::{flops_count, network_cost, param_count};
use cvmh_core::gradcheck::{check_module, randomize, CheckConfig};
use cvmh_core::mfms::MfmsConfig;
use cvmh_core::network::{Cvmh, NetworkConfig};
use cvmh_core::scan::ScanMode;
use cvmh_core::{Mode, ParamStore, Session, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tape_macs(cfg: &NetworkConfig, h: usize, w: usize) -> (u64, usize) {
    let mut store = ParamStore::<f32>::new();
    let net = Cvmh::new(&mut store, cfg.clone(), 0).unwrap();
    let scalars = store.num_scalars();
    let mut s = Session::inference(&mut store);
    let x = s.constant(Tensor::randn([1, cfg.in_channels, h, w], 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
    net.forward(&mut s, &x).unwrap();
    (s.macs(), scalars)
}

#[test]
fn analytic_counts_match_model_and_tape() {
    for (mode, mfms) in [(ScanMode::Cs2d, true), (ScanMode::Ss2d, false)] {
        let mut cfg = NetworkConfig::tiny(16, 4);
        cfg.scan_mode = mode;
        cfg.mfms.enabled = mfms;
        let (macs, scalars) = tape_macs(&cfg, 64, 96);
        let cost = network_cost(&cfg, 64, 96);
        assert_eq!(cost.params, scalars as u64);
        assert_eq!(cost.macs, macs);
    }
}

#[test]
fn scan_mode_changes_no_count() {
    let cs = NetworkConfig::default();
    let ss = NetworkConfig { scan_mode: ScanMode::Ss2d, ..cs.clone() };
    assert_eq!(param_count(&cs), param_count(&ss));
    assert_eq!(flops_count(&cs), flops_count(&ss));
}

#[test]
fn mfms_adds_a_small_positive_delta() {
    let on = NetworkConfig::default();
    let mut off = on.clone();
    off.mfms.enabled = false;
    let (a, b) = (param_count(&on), param_count(&off));
    assert!(a > b);
    let rel = (a - b) as f64 / b as f64;
    assert!(rel > 0.0 && rel < 0.05, "{rel}");
}

#[test]
fn forward_is_deterministic_and_mfms_toggle_matters() {
    let x = Tensor::<f32>::randn([2, 3, 64, 64], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
    let run = |cfg: NetworkConfig, perturb: bool| {
        let mut store = ParamStore::<f32>::new();
        let net = Cvmh::new(&mut store, cfg, 7).unwrap();
        if perturb {
            // move fusion off its 0.5 starting point so the toggle is visible
            for p in store.params().iter().map(|p| p.name.clone()).collect::<Vec<_>>() {
                if p.contains(".global.conv_") {
                    let id = store.find(&p).unwrap();
                    store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.3);
                }
            }
        }
        let mut s = Session::inference(&mut store);
        let xv = s.constant(x.clone());
        net.forward(&mut s, &xv).unwrap().into_value()
    };
    let cfg = NetworkConfig::tiny(16, 4);
    let a = run(cfg.clone(), true);
    let b = run(cfg.clone(), true);
    assert_eq!(a, b);
    let mut off = cfg;
    off.mfms.enabled = false;
    let c = run(off, false);
    assert!(a.max_abs_diff(&c) > 1e-4);
}

#[test]
fn constant_image_embeds_to_constant_map() {
    let mut store = ParamStore::<f64>::new();
    let net = Cvmh::new(&mut store, NetworkConfig::tiny(16, 4), 2).unwrap();
    let mut s = Session::inference(&mut store);
    let xv = s.constant(Tensor::full([1, 3, 32, 32], 0.4));
    let e = net.embed.forward(&mut s, &xv).unwrap();
    let m = net.merges[0].forward(&mut s, &e).unwrap();
    for y in [&e, &m] {
        let (c, hw) = (y.shape()[1], y.shape()[2] * y.shape()[3]);
        for ch in 0..c {
            let row = &y.data()[ch * hw..(ch + 1) * hw];
            assert!(row.iter().all(|v| (v - row[0]).abs() < 1e-12));
        }
    }
}

#[test]
fn expand_shapes_across_decoder() {
    let cfg = NetworkConfig::tiny(16, 4);
    let mut store = ParamStore::<f32>::new();
    let net = Cvmh::new(&mut store, cfg.clone(), 0).unwrap();
    let mut s = Session::inference(&mut store);
    for (j, e) in net.expands.iter().enumerate() {
        let (dim, h, w) = cfg.stage_plan(64, 64)[3 - j];
        let x = s.constant(Tensor::zeros([1, dim, h, w]));
        let y = e.forward(&mut s, &x).unwrap();
        assert_eq!(y.shape(), &[1, dim / 2, 2 * h, 2 * w]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn full_network_gradients() {
    let cfg = NetworkConfig {
        embed_dim: 4,
        num_classes: 3,
        enc_depths: [1, 1, 1, 1],
        dec_depths: [1, 1, 1, 1],
        state: 2,
        mfms: MfmsConfig::top_k(3).unwrap(),
        ..NetworkConfig::default()
    };
    let check = CheckConfig {
        samples: 3,
        ..CheckConfig::default()
    };
    for seed in 0..5 {
        let mut store = ParamStore::<f64>::new();
        let net = Cvmh::new(&mut store, cfg.clone(), seed).unwrap();
        randomize(&mut store, seed, 0.4);
        let x = Tensor::randn([2, 3, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let r = check_module("network", &mut store, &[x], Mode::Train, seed, check, |s, xs| net.forward(s, &xs[0])).unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
