use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use num_complex::Complex64;
use oodno_core::constraint::{build_constraint_all, probconserv_field};
use oodno_core::fno::{forward, FnoConfig, FnoModel};
use oodno_core::numerics::fft::{fft_in_place, rfft2};
use oodno_core::numerics::{Tape, Tensor};
use oodno_core::pde_suite::{PdeFamily, PdeTask};
use std::hint::black_box;

fn fft(c: &mut Criterion) {
    let mut g = c.benchmark_group("fft");
    for n in [64, 256, 1024] {
        let buf: Vec<Complex64> = (0..n)
            .map(|k| Complex64::new((k as f64).sin(), 0.0))
            .collect();
        g.bench_with_input(BenchmarkId::new("c2c", n), &buf, |b, buf| {
            b.iter(|| {
                let mut v = buf.clone();
                fft_in_place(&mut v, false).unwrap();
                black_box(v)
            })
        });
    }
    let x = Tensor::from_fn(&[8, 16, 64, 64], |k| (k as f64 * 0.01).cos());
    g.bench_function("rfft2_8x16x64x64", |b| {
        b.iter(|| black_box(rfft2(&x).unwrap()))
    });
    g.finish();
}

fn fno_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("fno_forward_backward");
    g.sample_size(10);
    for (n, width, heads) in [(16, 16, 1), (16, 16, 10), (32, 32, 1)] {
        let cfg = FnoConfig {
            width,
            hidden: 2 * width,
            n_heads: heads,
            nt: n,
            nx: n,
            modes_t: n / 3,
            modes_x: n / 3,
            ..FnoConfig::default()
        };
        let model = FnoModel::new(cfg, 0).unwrap();
        let x = Tensor::from_fn(&[5, 3, n, n], |k| (k as f64 * 0.01).sin());
        let id = format!("{n}x{n}_w{width}_h{heads}");
        g.bench_function(id, |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let p = model.params.bind(&mut tape, true);
                let xv = tape.constant(x.clone());
                let f = forward(&mut tape, &cfg, &p, xv, None).unwrap();
                let sq = tape.square(f.output);
                let l = tape.mean(sq);
                black_box(tape.backward(l).unwrap())
            })
        });
    }
    g.finish();
}

fn probconserv(c: &mut Criterion) {
    let task = PdeTask::new(PdeFamily::Heat);
    let cs = build_constraint_all(&task, 2.0).unwrap();
    let n = cs.n_points();
    let mean: Vec<f64> = (0..n).map(|k| (k as f64 * 0.1).sin()).collect();
    let std: Vec<f64> = (0..n).map(|k| 0.1 + (k % 7) as f64 * 0.01).collect();
    c.bench_function("probconserv_64x64", |b| {
        b.iter(|| black_box(probconserv_field(&mean, &std, &cs).unwrap()))
    });
}

criterion_group!(benches, fft, fno_step, probconserv);
criterion_main!(benches);
