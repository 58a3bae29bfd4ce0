use cvmh_core::gradcheck::{check_fn, check_module, randomize, CheckConfig};
use cvmh_core::scan::{build_paths, flatten_along, merge_directions, unflatten_along, Direction, ScanMode, ScanOrder};
use cvmh_core::ssm::{scan_raw, selective_scan, DirectionalSsm, ScanDims, ScanInputs, ScanKernel};
use cvmh_core::{Mode, ParamBuilder, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Straight loop over `[N, D, L]` / `[N, S, L]` operands, no shared code
/// with the library kernels.
fn naive_scan(n: usize, d: usize, l: usize, s: usize, u: &[f64], delta: &[f64], a_log: &[f64], b: &[f64], c: &[f64], dsk: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n * d * l];
    for ni in 0..n {
        for di in 0..d {
            let mut h = vec![0.0; s];
            for t in 0..l {
                let x = u[(ni * d + di) * l + t];
                let dt = delta[(ni * d + di) * l + t];
                let mut out = dsk[di] * x;
                for k in 0..s {
                    let a = -(a_log[di * s + k]).exp();
                    h[k] = (dt * a).exp() * h[k] + dt * b[(ni * s + k) * l + t] * x;
                    out += c[(ni * s + k) * l + t] * h[k];
                }
                y[(ni * d + di) * l + t] = out;
            }
        }
    }
    y
}

struct Problem {
    dims: ScanDims,
    u: Vec<f32>,
    delta: Vec<f32>,
    a: Vec<f32>,
    b: Vec<f32>,
    c: Vec<f32>,
    dsk: Vec<f32>,
}

impl Problem {
    fn random(rng: &mut ChaCha8Rng, l: usize) -> Self {
        let dims = ScanDims {
            n: rng.gen_range(1..3),
            d: rng.gen_range(1..5),
            l,
            s: rng.gen_range(1..9),
        };
        let mut v = |len: usize, lo: f32, hi: f32| (0..len).map(|_| rng.gen_range(lo..hi)).collect::<Vec<f32>>();
        let ScanDims { n, d, l, s } = dims;
        Problem {
            u: v(n * d * l, -1.0, 1.0),
            delta: v(n * d * l, 0.001, 1.0),
            a: v(d * s, -4.0, -0.05),
            b: v(n * l * s, -1.0, 1.0),
            c: v(n * l * s, -1.0, 1.0),
            dsk: v(d, -1.0, 1.0),
            dims,
        }
    }

    fn run(&self, k: ScanKernel) -> Vec<f32> {
        let x = ScanInputs {
            u: &self.u,
            delta: &self.delta,
            a: &self.a,
            b: &self.b,
            c: &self.c,
            d_skip: &self.dsk,
        };
        scan_raw(k, self.dims, x).unwrap()
    }
}

#[test]
fn blocked_matches_sequential_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0f32;
    for _ in 0..100 {
        let l = rng.gen_range(1..=64);
        let p = Problem::random(&mut rng, l);
        let seq = p.run(ScanKernel::Sequential);
        let block = rng.gen_range(1..=l.max(2));
        let blk = p.run(ScanKernel::Blocked(block));
        for (a, b) in seq.iter().zip(&blk) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst < 1e-5, "max diff {worst}");
}

#[test]
fn blocked_is_exact_for_unit_and_full_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = Problem::random(&mut rng, 33);
    let seq = p.run(ScanKernel::Sequential);
    assert_eq!(seq, p.run(ScanKernel::Blocked(1)));
    assert_eq!(seq, p.run(ScanKernel::Blocked(33)));
    assert_eq!(seq, p.run(ScanKernel::Blocked(100)));
    let b8 = p.run(ScanKernel::Blocked(8));
    assert!(seq.iter().zip(&b8).all(|(a, b)| (a - b).abs() < 1e-5));
}

#[test]
fn scalar_recurrence_by_hand() {
    // D = S = 1, A = -1, B = C = 1, delta = 1, skip 0, input [1, 1, 1]
    let e = (-1f64).exp();
    let h1 = 1.0;
    let h2 = e * h1 + 1.0;
    let h3 = e * h2 + 1.0;
    let mut t = Tape::<f64>::no_grad();
    let one = |t: &mut Tape<f64>, shape: &[usize]| t.constant(Tensor::ones(shape.to_vec()));
    let u = one(&mut t, &[1, 1, 3]);
    let delta = one(&mut t, &[1, 1, 3]);
    let a_log = t.constant(Tensor::zeros([1, 1]));
    let b = one(&mut t, &[1, 1, 3]);
    let c = one(&mut t, &[1, 1, 3]);
    let dsk = t.constant(Tensor::zeros([1]));
    let y = selective_scan(&mut t, &u, &delta, &a_log, &b, &c, &dsk, ScanKernel::Sequential).unwrap();
    for (got, want) in y.data().iter().zip([h1, h2, h3]) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn single_step_is_delta_b_c_u_plus_skip() {
    let mut t = Tape::<f64>::no_grad();
    let u = t.constant(Tensor::full([1, 1, 1], 2.0));
    let delta = t.constant(Tensor::full([1, 1, 1], 0.3));
    let a_log = t.constant(Tensor::full([1, 2], 0.7));
    let b = t.constant(Tensor::new([1, 2, 1], vec![0.5, -1.5]).unwrap());
    let c = t.constant(Tensor::new([1, 2, 1], vec![2.0, 1.0]).unwrap());
    let dsk = t.constant(Tensor::full([1], 0.25));
    let y = selective_scan(&mut t, &u, &delta, &a_log, &b, &c, &dsk, ScanKernel::Sequential).unwrap();
    let want = 0.3 * 2.0 * (0.5 * 2.0 + -1.5 * 1.0) + 0.25 * 2.0;
    assert!((y.data()[0] - want).abs() < 1e-12);
}

#[test]
fn tape_op_matches_naive_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (n, d, l, s) = (2, 3, 11, 4);
    let r = |rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64| Tensor::<f64>::uniform(shape.to_vec(), lo, hi, rng);
    let u = r(&mut rng, &[n, d, l], -1.0, 1.0);
    let delta = r(&mut rng, &[n, d, l], 0.01, 1.0);
    let a_log = r(&mut rng, &[d, s], -1.0, 1.5);
    let b = r(&mut rng, &[n, s, l], -1.0, 1.0);
    let c = r(&mut rng, &[n, s, l], -1.0, 1.0);
    let dsk = r(&mut rng, &[d], -1.0, 1.0);
    let want = naive_scan(n, d, l, s, u.data(), delta.data(), a_log.data(), b.data(), c.data(), dsk.data());
    for kernel in [ScanKernel::Sequential, ScanKernel::Blocked(4)] {
        let mut t = Tape::<f64>::no_grad();
        let vs: Vec<_> = [&u, &delta, &a_log, &b, &c, &dsk].iter().map(|x| t.constant((*x).clone())).collect();
        let y = selective_scan(&mut t, &vs[0], &vs[1], &vs[2], &vs[3], &vs[4], &vs[5], kernel).unwrap();
        let diff = y.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "{kernel:?}: {diff}");
        assert_eq!(t.macs(), 2 * (n * d * l * s) as u64);
    }
}

#[test]
fn selective_scan_gradients() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, d, l, s) = (1, 4, 2, 2);
        let inputs = vec![
            Tensor::randn([n, d, l], 1.0, &mut rng),
            Tensor::uniform([n, d, l], 0.1, 1.0, &mut rng),
            Tensor::uniform([d, s], -0.5, 1.0, &mut rng),
            Tensor::randn([n, s, l], 1.0, &mut rng),
            Tensor::randn([n, s, l], 1.0, &mut rng),
            Tensor::randn([d], 1.0, &mut rng),
        ];
        let r = check_fn("selective_scan", &inputs, seed, CheckConfig::default(), |t, x| {
            selective_scan(t, &x[0], &x[1], &x[2], &x[3], &x[4], &x[5], ScanKernel::Sequential)
        })
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }
    // a longer batched instance
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = vec![
        Tensor::randn([2, 3, 9], 1.0, &mut rng),
        Tensor::uniform([2, 3, 9], 0.05, 0.8, &mut rng),
        Tensor::uniform([3, 4], -0.5, 1.0, &mut rng),
        Tensor::randn([2, 4, 9], 1.0, &mut rng),
        Tensor::randn([2, 4, 9], 1.0, &mut rng),
        Tensor::randn([3], 1.0, &mut rng),
    ];
    let r = check_fn("selective_scan_batched", &inputs, 11, CheckConfig::default(), |t, x| {
        selective_scan(t, &x[0], &x[1], &x[2], &x[3], &x[4], &x[5], ScanKernel::Blocked(4))
    })
    .unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn directional_ssm_gradients() {
    for (seed, mode) in (0..5).zip([ScanMode::Cs2d, ScanMode::Ss2d, ScanMode::Cs2d, ScanMode::Ss2d, ScanMode::Cs2d]) {
        let mut store = ParamStore::<f64>::new();
        let ssm = DirectionalSsm::new(&mut ParamBuilder::new(&mut store, seed), "ssm", 3, 2, mode, ScanKernel::Sequential);
        randomize(&mut store, seed, 0.5);
        let x = Tensor::randn([1, 3, 2, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let r = check_module("directional_ssm", &mut store, &[x], Mode::Train, seed, CheckConfig::default(), |s, xs| ssm.forward(s, &xs[0])).unwrap();
        assert!(r.passed(), "{r:?}");
    }
}

#[test]
fn merge_gradients() {
    let paths = build_paths(3, 2, ScanMode::Cs2d).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xs: Vec<_> = (0..4).map(|_| Tensor::randn([1, 2, 6], 1.0, &mut rng)).collect();
    let r = check_fn("merge_directions", &xs, 1, CheckConfig::default(), |t, v| merge_directions(t, v, &paths[..])).unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn single_pixel_directions_agree() {
    for mode in [ScanMode::Ss2d, ScanMode::Cs2d] {
        let p = build_paths(1, 1, mode).unwrap();
        assert!(p.iter().all(|o| o.perm[..] == [0]));
    }
}

#[test]
fn zero_state_input_is_non_expanding() {
    // seed a state with one input, then feed zeros
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = 6;
    let l = 40;
    let a: Vec<f64> = (0..s).map(|_| -rng.gen_range(0.01..3.0)).collect();
    let mut h: Vec<f64> = (0..s).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let mut prev = h.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for _ in 0..l {
        let dt = rng.gen_range(0.001..2.0);
        for k in 0..s {
            let (da, db) = cvmh_core::ssm::discretize(dt, a[k], 0.0);
            h[k] = da * h[k] + db;
        }
        let cur = h.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(cur <= prev);
        prev = cur;
    }
}

fn median_secs(mut f: impl FnMut()) -> f64 {
    let mut v: Vec<f64> = (0..5)
        .map(|_| {
            let t0 = std::time::Instant::now();
            f();
            t0.elapsed().as_secs_f64()
        })
        .collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[2]
}

#[test]
fn scan_time_is_linear_in_length() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mk = |rng: &mut ChaCha8Rng, l| {
        let mut p = Problem::random(rng, l);
        p.dims.n = 1;
        p.dims.d = 16;
        p.dims.s = 16;
        let ScanDims { n, d, l, s } = p.dims;
        p.u = vec![0.5; n * d * l];
        p.delta = vec![0.1; n * d * l];
        p.a = vec![-1.0; d * s];
        p.b = vec![0.3; n * l * s];
        p.c = vec![0.2; n * l * s];
        p.dsk = vec![1.0; d];
        p
    };
    let short = mk(&mut rng, 2048);
    let long = mk(&mut rng, 4096);
    short.run(ScanKernel::Sequential);
    let t1 = median_secs(|| {
        std::hint::black_box(short.run(ScanKernel::Sequential));
    });
    let t2 = median_secs(|| {
        std::hint::black_box(long.run(ScanKernel::Sequential));
    });
    assert!(t2 / t1 < 2.5, "doubling L took {:.2}x", t2 / t1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn orders_are_permutations_with_inverse(h in 1usize..9, w in 1usize..9) {
        for mode in [ScanMode::Ss2d, ScanMode::Cs2d] {
            for o in build_paths(h, w, mode).unwrap().iter() {
                let mut seen = o.perm.to_vec();
                seen.sort_unstable();
                prop_assert_eq!(seen, (0..h * w).collect::<Vec<_>>());
                for (t, &p) in o.perm.iter().enumerate() {
                    prop_assert_eq!(o.inv[p], t);
                }
            }
        }
    }

    #[test]
    fn diagonal_bands_are_monotone(h in 1usize..9, w in 1usize..9) {
        for (dir, band) in [
            (Direction::Diagonal, Box::new(move |r: usize, c: usize| r + c) as Box<dyn Fn(usize, usize) -> usize>),
            (Direction::AntiDiagonal, Box::new(move |r: usize, c: usize| r + (w - 1 - c))),
        ] {
            let o = ScanOrder::new(dir, h, w).unwrap();
            let cells: Vec<_> = o.coords().map(|(_, r, c)| (band(r, c), r)).collect();
            for pair in cells.windows(2) {
                prop_assert!(pair[0] < pair[1]);
            }
        }
    }

    #[test]
    fn flatten_then_unflatten_is_identity(h in 1usize..6, w in 1usize..6, seed in 0u64..1000) {
        let x = Tensor::<f64>::randn([2, 3, h, w], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut t = Tape::<f64>::no_grad();
        let xv = t.constant(x.clone());
        for o in build_paths(h, w, ScanMode::Cs2d).unwrap().iter() {
            let seq = flatten_along(&mut t, &xv, o).unwrap();
            let back = unflatten_along(&mut t, &seq, o).unwrap();
            prop_assert_eq!(back.value(), &x);
        }
    }

    #[test]
    fn merging_identical_flattenings_gives_four_times(h in 1usize..6, w in 1usize..6, seed in 0u64..1000) {
        let x = Tensor::<f64>::randn([1, 2, h, w], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut t = Tape::<f64>::no_grad();
        let xv = t.constant(x.clone());
        let paths = build_paths(h, w, ScanMode::Ss2d).unwrap();
        let seqs: Vec<_> = paths.iter().map(|o| flatten_along(&mut t, &xv, o).unwrap()).collect();
        let m = merge_directions(&mut t, &seqs, &paths[..]).unwrap();
        prop_assert!(m.value().max_abs_diff(&x.map(|v| 4.0 * v)) < 1e-12);
    }
}
