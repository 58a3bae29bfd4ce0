use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use cvmh_bench::{randn, ScanProblem};
use cvmh_core::scan::{build_paths, ScanMode};
use cvmh_core::ssm::{scan_raw, selective_scan, ScanDims, ScanKernel};
use cvmh_core::{Tape, Tensor};

fn kernels(c: &mut Criterion) {
    let mut g = c.benchmark_group("scan_raw");
    for l in [256usize, 1024, 4096] {
        let p = ScanProblem::random(ScanDims { n: 1, d: 64, l, s: 16 }, 0);
        g.throughput(Throughput::Elements((64 * l) as u64));
        g.bench_with_input(BenchmarkId::new("sequential", l), &p, |b, p| {
            b.iter(|| scan_raw(ScanKernel::Sequential, p.dims, p.inputs()).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("blocked64", l), &p, |b, p| {
            b.iter(|| scan_raw(ScanKernel::Blocked(64), p.dims, p.inputs()).unwrap())
        });
    }
    g.finish();
}

fn forward_backward(c: &mut Criterion) {
    let (n, d, l, s) = (2, 32, 1024, 16);
    let u = randn(&[n, d, l], 1);
    let delta = randn(&[n, d, l], 2).map(|v| 0.05 + 0.01 * v.abs());
    let a_log = Tensor::full([d, s], 0.5f32);
    let (bm, cm) = (randn(&[n, s, l], 3), randn(&[n, s, l], 4));
    let dsk = Tensor::ones([d]);
    c.bench_function("selective_scan_fwd_bwd", |b| {
        b.iter(|| {
            let mut t = Tape::<f32>::new();
            let vars: Vec<_> = [&u, &delta, &a_log, &bm, &cm, &dsk].map(|x| t.input(x.clone())).into();
            let y = selective_scan(&mut t, &vars[0], &vars[1], &vars[2], &vars[3], &vars[4], &vars[5], ScanKernel::Sequential)
                .unwrap();
            let loss = cvmh_core::ops::sum_all(&mut t, &y);
            t.backward(&loss).unwrap()
        })
    });
}

fn paths(c: &mut Criterion) {
    let mut g = c.benchmark_group("build_paths_64x64");
    for mode in [ScanMode::Ss2d, ScanMode::Cs2d] {
        g.bench_function(mode.to_string(), |b| b.iter(|| build_paths(64, 64, mode).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, kernels, forward_backward, paths);
criterion_main!(benches);
