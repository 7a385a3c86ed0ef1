use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use glassfuse::data::{synth_scene, Difficulty, SceneRecipe};
use glassfuse::{metrics, ops, wff};
use glassfuse_bench::{conv_case, mask_pair, wave, wff_case};
use std::hint::black_box;

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    for (cin, cout, size) in [(3, 16, 64), (16, 64, 32)] {
        let (x, k, b) = conv_case(8, cin, cout, size);
        let id = format!("{cin}->{cout} at {size}");
        group.bench_with_input(BenchmarkId::new("forward", &id), &(), |bench, _| {
            bench.iter(|| ops::conv2d(black_box(&x), &k, &b, 1, 1).unwrap())
        });
        let grad = wave(&[8, cout, size, size], 3.0);
        group.bench_with_input(BenchmarkId::new("backward", &id), &(), |bench, _| {
            bench.iter(|| ops::conv2d_backward(black_box(&x), &k, &b, 1, 1, &grad).unwrap())
        });
    }
    group.finish();
}

fn fusion(c: &mut Criterion) {
    let (r, d, params) = wff_case(8, 64, 16);
    c.bench_function("wff_forward 8x64x16x16", |bench| {
        bench.iter(|| wff::wff_forward(black_box(&r), &d, &params).unwrap())
    });
}

fn boundary(c: &mut Criterion) {
    let (pred, gt) = mask_pair(128);
    c.bench_function("biou 128x128", |bench| {
        bench.iter(|| metrics::biou(black_box(&pred), &gt, 5).unwrap())
    });
}

fn scenes(c: &mut Criterion) {
    let recipe = SceneRecipe::random(7, 64, 64, Difficulty::Cluttered);
    c.bench_function("synth_scene 64x64", |bench| bench.iter(|| synth_scene(black_box(&recipe)).unwrap()));
}

criterion_group!(benches, conv, fusion, boundary, scenes);
criterion_main!(benches);
