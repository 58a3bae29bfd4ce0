//! Acceptance criteria 1-10. Runs without the libtest harness so every
//! criterion prints one line whether it passes or not; exits non-zero if
//! any fails.

use std::time::{Duration, Instant};

use cvmh_core::complexity::{flops_count, param_count};
use cvmh_core::cvss::{CvssConfig, CvssStage};
use cvmh_core::data::synth::{synth_samples, SynthConfig};
use cvmh_core::data::{AugmentConfig, Normalization, TileSpec};
use cvmh_core::gradcheck::suite::run_suite;
use cvmh_core::gradcheck::randomize;
use cvmh_core::mfms::{adaptive_kernel_size, compress_frequencies, Mfms, MfmsConfig};
use cvmh_core::network::NetworkConfig;
use cvmh_core::ops;
use cvmh_core::scan::{build_paths, ScanMode};
use cvmh_core::ssm::{scan_raw, selective_scan, ScanDims, ScanInputs, ScanKernel};
use cvmh_core::train::{evaluate, ConfusionMatrix, TrainConfig, Trainer};
use cvmh_core::{Mode, ParamBuilder, ParamStore, Session, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within_budget(start: Instant, budget: Duration) -> Result<(), String> {
    let e = start.elapsed();
    ensure(e < budget, format!("took {e:.1?}, budget {budget:?}"))
}

fn params_and_flops() -> Outcome {
    let t0 = Instant::now();
    let cfg = NetworkConfig::default();
    let p = param_count(&cfg) as f64 / 1e6;
    let f = flops_count(&cfg) as f64 / 1e9;
    ensure((p / 30.84 - 1.0).abs() <= 0.20, format!("params {p:.2} M outside 30.84 M +-20%"))?;
    ensure((f / 5.71 - 1.0).abs() <= 0.25, format!("FLOPs {f:.2} G outside 5.71 G +-25%"))?;
    within_budget(t0, Duration::from_secs(5))?;
    Ok(format!("params {p:.2} M, FLOPs {f:.2} G at 3x256x256"))
}

fn scan_parity() -> Outcome {
    let cs = NetworkConfig::default();
    let ss = NetworkConfig { scan_mode: ScanMode::Ss2d, ..cs.clone() };
    let (pc, ps) = (param_count(&cs), param_count(&ss));
    let (fc, fs) = (flops_count(&cs), flops_count(&ss));
    ensure(pc == ps && fc == fs, format!("cs2d {pc}/{fc} vs ss2d {ps}/{fs}"))?;
    Ok(format!("{pc} params, {fc} FLOPs in both modes"))
}

fn mfms_delta() -> Outcome {
    let on = NetworkConfig::default();
    let off = NetworkConfig { mfms: MfmsConfig { enabled: false, ..MfmsConfig::default() }, ..on.clone() };
    let (a, b) = (param_count(&on), param_count(&off));
    let rel = (a as f64 - b as f64) / b as f64;
    // reference ablation: +1.8%; accept the same order of magnitude
    ensure(a > b && (0.0018..0.18).contains(&rel), format!("delta {rel:.4} (on {a}, off {b})"))?;
    Ok(format!("+{} params (+{:.2}%)", a - b, 100.0 * rel))
}

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let reports = run_suite(&[0, 1, 2, 3, 4]).map_err(|e| e.to_string())?;
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed() || r.tol > 1e-4)
        .map(|r| format!("{}[seed {}] {:.2e}", r.name, r.seed, r.max_rel_err))
        .collect();
    ensure(failed.is_empty(), format!("failed: {}", failed.join(", ")))?;
    within_budget(t0, Duration::from_secs(300))?;
    Ok(format!("{} checks over 5 seeds, worst rel err {worst:.2e} < 1e-4", reports.len()))
}

fn scan_paths() -> Outcome {
    let t0 = Instant::now();
    let mut count = 0;
    for mode in [ScanMode::Ss2d, ScanMode::Cs2d] {
        for h in 1..=16 {
            for w in 1..=16 {
                let paths = build_paths(h, w, mode).map_err(|e| e.to_string())?;
                for o in paths.iter() {
                    let mut seen = vec![false; h * w];
                    for (pos, &r) in o.perm.iter().enumerate() {
                        ensure(r < h * w && !seen[r], format!("{mode} {h}x{w} {:?}: not a bijection", o.direction))?;
                        seen[r] = true;
                        ensure(o.inv[r] == pos, format!("{mode} {h}x{w} {:?}: inverse mismatch", o.direction))?;
                    }
                    ensure(o.perm.len() == h * w, "length")?;
                    count += 1;
                }
            }
        }
    }
    let p = build_paths(3, 3, ScanMode::Cs2d).map_err(|e| e.to_string())?;
    ensure(p[2].perm[..] == [0, 1, 3, 2, 4, 6, 5, 7, 8], format!("diagonal 3x3 {:?}", p[2].perm))?;
    ensure(p[3].perm[..] == [2, 1, 5, 0, 4, 8, 3, 7, 6], format!("anti-diagonal 3x3 {:?}", p[3].perm))?;
    within_budget(t0, Duration::from_secs(30))?;
    Ok(format!("{count} orders bijective with exact inverses; 3x3 diagonal tables match"))
}

fn scan_equivalence() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0f32;
    for _ in 0..100 {
        let dims = ScanDims { n: rng.gen_range(1..3), d: rng.gen_range(1..5), l: rng.gen_range(1..=96), s: rng.gen_range(1..9) };
        let ScanDims { n, d, l, s } = dims;
        let mut v = |len: usize, lo: f32, hi: f32| (0..len).map(|_| rng.gen_range(lo..hi)).collect::<Vec<f32>>();
        let (u, delta, a, b, c, dsk) = (v(n * d * l, -1.0, 1.0), v(n * d * l, 0.001, 1.0), v(d * s, -4.0, -0.05), v(n * l * s, -1.0, 1.0), v(n * l * s, -1.0, 1.0), v(d, -1.0, 1.0));
        let x = ScanInputs { u: &u, delta: &delta, a: &a, b: &b, c: &c, d_skip: &dsk };
        let block = rng.gen_range(1..=l.max(2));
        let seq = scan_raw(ScanKernel::Sequential, dims, x).map_err(|e| e.to_string())?;
        let blk = scan_raw(ScanKernel::Blocked(block), dims, x).map_err(|e| e.to_string())?;
        worst = seq.iter().zip(&blk).map(|(p, q)| (p - q).abs()).fold(worst, f32::max);
    }
    ensure(worst < 1e-5, format!("blocked vs sequential max diff {worst:.2e}"))?;

    // D = S = 1, A = -1, B = C = 1, delta = 1, no skip, input ones
    let e = (-1f64).exp();
    let want = [1.0, e + 1.0, e * (e + 1.0) + 1.0];
    let mut t = Tape::<f64>::no_grad();
    let ones = |t: &mut Tape<f64>| t.constant(Tensor::ones([1, 1, 3]));
    let (u, dl, b, c) = (ones(&mut t), ones(&mut t), ones(&mut t), ones(&mut t));
    let a_log = t.constant(Tensor::zeros([1, 1]));
    let dsk = t.constant(Tensor::zeros([1]));
    let y = selective_scan(&mut t, &u, &dl, &a_log, &b, &c, &dsk, ScanKernel::Sequential).map_err(|e| e.to_string())?;
    let hand = y.data().iter().zip(want).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    ensure(hand < 1e-12, format!("hand-traced recurrence off by {hand:.2e}"))?;
    within_budget(t0, Duration::from_secs(60))?;
    Ok(format!("100 instances max diff {worst:.2e}; hand trace diff {hand:.1e}"))
}

fn mfms_properties() -> Outcome {
    let randn = |shape: [usize; 4], seed: u64| Tensor::<f64>::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let mut worst_swap = 0f64;
    for seed in 0..20u64 {
        let mut store = ParamStore::<f64>::new();
        let m = Mfms::new(&mut ParamBuilder::new(&mut store, seed), "m", 8, &MfmsConfig::default()).map_err(|e| e.to_string())?;
        let (f, ft) = (randn([2, 8, 4, 4], seed), randn([2, 8, 4, 4], seed + 100));
        if seed == 0 {
            let mut s = Session::new(&mut store, Mode::Eval);
            let (fv, ftv) = (s.constant(f.clone()), s.constant(ft.clone()));
            let w = m.weights(&mut s, &fv, &ftv).map_err(|e| e.to_string())?;
            ensure(w.data().iter().all(|&v| v == 0.5), "w != 0.5 at zero init")?;
        }
        randomize(&mut store, seed, 0.8);
        let mut s = Session::new(&mut store, Mode::Eval);
        let (fv, ftv) = (s.constant(f.clone()), s.constant(ft.clone()));
        let z1 = m.forward(&mut s, &fv, &ftv).map_err(|e| e.to_string())?;
        let z2 = m.forward(&mut s, &ftv, &fv).map_err(|e| e.to_string())?;
        for i in 0..f.numel() {
            let (a, b) = (f.data()[i], ft.data()[i]);
            ensure(z1.data()[i] >= a.min(b) && z1.data()[i] <= a.max(b), format!("not convex at seed {seed}"))?;
            worst_swap = worst_swap.max((z1.data()[i] + z2.data()[i] - a - b).abs());
        }
    }
    ensure(worst_swap < 1e-6, format!("swap identity off by {worst_swap:.2e}"))?;

    let freqs = MfmsConfig::default().frequencies;
    let mut worst_lin = 0f64;
    for seed in 0..20u64 {
        let (x, y) = (randn([1, 3, 7, 7], seed), randn([1, 3, 7, 7], seed + 1));
        let (a, b) = (1.7 - seed as f64 * 0.3, -0.4 + seed as f64 * 0.1);
        let mix = Tensor::from_fn([1, 3, 7, 7], |i| a * x.data()[i] + b * y.data()[i]);
        let mut t = Tape::<f64>::no_grad();
        let (xv, yv, mv) = (t.constant(x), t.constant(y), t.constant(mix));
        let cx = compress_frequencies(&mut t, &xv, &freqs).map_err(|e| e.to_string())?;
        let cy = compress_frequencies(&mut t, &yv, &freqs).map_err(|e| e.to_string())?;
        let cm = compress_frequencies(&mut t, &mv, &freqs).map_err(|e| e.to_string())?;
        for i in 0..cm.value().numel() {
            worst_lin = worst_lin.max((cm.data()[i] - a * cx.data()[i] - b * cy.data()[i]).abs());
        }
    }
    ensure(worst_lin < 1e-6, format!("compress linearity off by {worst_lin:.2e}"))?;
    let phi = [96, 512, 2].map(|c| adaptive_kernel_size(c, 2.0, 1.0));
    ensure(phi == [3, 5, 1], format!("phi(96, 512, 2) = {phi:?}"))?;
    Ok(format!("convex, w = 0.5 at init, swap err {worst_swap:.1e}, linearity err {worst_lin:.1e}, phi {phi:?}"))
}

fn metrics() -> Outcome {
    let t0 = Instant::now();
    let cm = ConfusionMatrix::from_rows(&[vec![3, 1], vec![2, 4]]).map_err(|e| e.to_string())?;
    let r = cm.report(None).map_err(|e| e.to_string())?;
    ensure((r.oa - 0.7).abs() < 1e-4 && (r.miou - 0.5357).abs() < 1e-4, format!("OA {} mIoU {}", r.oa, r.miou))?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..500 {
        let k = rng.gen_range(2..7);
        let rows: Vec<Vec<u64>> = (0..k).map(|_| (0..k).map(|_| rng.gen_range(0..20)).collect()).collect();
        let Ok(rep) = ConfusionMatrix::from_rows(&rows).and_then(|m| m.report(None)) else { continue };
        for c in &rep.per_class {
            if let (Some(iou), Some(f1)) = (c.iou, c.f1) {
                ensure((0.0..=1.0).contains(&iou) && iou <= f1 + 1e-15 && f1 <= 1.0, format!("IoU {iou} > F1 {f1}"))?;
            }
        }
    }

    let mut worst = 0f64;
    for k in 2..=8usize {
        let mut t = Tape::<f64>::no_grad();
        let logits = t.constant(Tensor::zeros([2, k, 3, 3]));
        let labels: Vec<u32> = (0..18).map(|i| (i % k) as u32).collect();
        let ce = ops::cross_entropy(&mut t, &logits, &labels, None).map_err(|e| e.to_string())?;
        worst = worst.max((ce.value().item() - (k as f64).ln()).abs());
    }
    ensure(worst < 1e-6, format!("uniform CE off ln K by {worst:.2e}"))?;
    within_budget(t0, Duration::from_secs(10))?;
    Ok(format!("OA {:.4}, mIoU {:.4}; IoU <= F1 on 500 random matrices; uniform CE err {worst:.1e}", r.oa, r.miou))
}

struct RunResult {
    csv: String,
    oa: f64,
    miou: f64,
    steps: u64,
    elapsed: Duration,
}

fn train_once() -> Result<RunResult, String> {
    let synth = SynthConfig { seed: 1, images: 8, size: 64, classes: 4 };
    let samples = synth_samples(&synth).map_err(|e| e.to_string())?;
    let tile = TileSpec { size: 64, stride: 64 };
    let cfg = TrainConfig {
        batch_size: 8,
        steps: Some(500),
        seed: 3,
        augment: AugmentConfig::none(),
        tile,
        ..TrainConfig::default()
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    pool.install(|| {
        let t0 = Instant::now();
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut tr = Trainer::new(NetworkConfig::tiny(16, 4), cfg, &samples, Normalization::default()).map_err(|e| e.to_string())?;
        let summary = tr.fit(Some(dir.path()), |_| {}).map_err(|e| e.to_string())?;
        let cm = evaluate(&tr.model, &mut tr.store, &samples, &tr.norm, tile, None).map_err(|e| e.to_string())?;
        let r = cm.report(None).map_err(|e| e.to_string())?;
        let csv = std::fs::read_to_string(dir.path().join("loss.csv")).map_err(|e| e.to_string())?;
        Ok(RunResult { csv, oa: r.oa, miou: r.miou, steps: summary.steps_run, elapsed: t0.elapsed() })
    })
}

fn desk_training() -> Outcome {
    // two independent single-threaded runs, concurrently when cores allow
    let (a, b) = std::thread::scope(|s| {
        let h = s.spawn(train_once);
        let b = train_once();
        (h.join().expect("training thread panicked"), b)
    });
    let (a, b) = (a?, b?);
    ensure(a.steps <= 500, format!("{} steps", a.steps))?;
    ensure(a.oa >= 0.98 && a.miou >= 0.90, format!("pixel acc {:.4}, mIoU {:.4} after {} steps", a.oa, a.miou, a.steps))?;
    ensure(a.csv == b.csv, "loss CSVs differ between two runs with the same seed")?;
    ensure(a.elapsed < Duration::from_secs(600), format!("run took {:.1?}", a.elapsed))?;
    Ok(format!(
        "pixel acc {:.4}, mIoU {:.4} after {} steps in {:.0?}; loss CSVs identical ({} bytes)",
        a.oa,
        a.miou,
        a.steps,
        a.elapsed,
        a.csv.len()
    ))
}

fn identity_at_init() -> Outcome {
    let mut worst = (0f64, 0f64);
    for seed in 0..5u64 {
        let cfg = CvssConfig { dim: 8, state: 4, ..CvssConfig::default() };
        let mut store = ParamStore::<f64>::new();
        let stage = CvssStage::new(&mut ParamBuilder::new(&mut store, seed), "s", &cfg, 2);
        let x = Tensor::randn([2, 8, 5, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut s = Session::new(&mut store, Mode::Train);
        let xv = s.constant(x.clone());
        let one = stage.blocks[0].forward(&mut s, &xv).map_err(|e| e.to_string())?;
        let pair = stage.forward(&mut s, &xv).map_err(|e| e.to_string())?;
        worst.0 = worst.0.max(one.value().max_abs_diff(&x));
        worst.1 = worst.1.max(pair.value().max_abs_diff(&x.map(|v| 2.0 * v)));
    }
    ensure(worst == (0.0, 0.0), format!("block deviation {:e}, pair deviation {:e}", worst.0, worst.1))?;
    Ok("block is the identity and a pair doubles its input, max deviation 0".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("parameter and FLOP counts", params_and_flops),
        ("scan-strategy parity", scan_parity),
        ("fusion ablation delta", mfms_delta),
        ("gradient suite", gradient_suite),
        ("scan-path properties", scan_paths),
        ("selective-scan equivalence", scan_equivalence),
        ("fusion properties", mfms_properties),
        ("metrics correctness", metrics),
        ("desk-scale training", desk_training),
        ("identity at init", identity_at_init),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.iter().any(|s| *s == id) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail} [{:.1?}]", t0.elapsed()),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {detail} [{:.1?}]", t0.elapsed());
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
