use criterion::{criterion_group, criterion_main, Criterion};
use pglr::gmm::{train_em, TrainOptions};
use pglr::lowrank::{gnnm_shrink, svd};
use pglr::patches::{assign_classes, extract_patches};
use pglr::pipeline::{denoise_iteration, PipelineConfig};
use pglr::preprocess::{local_denoise, PreprocessConfig};
use pglr_bench::{matrix, mixture, noisy_card};
use std::hint::black_box;

fn lowrank(c: &mut Criterion) {
    let stack = matrix(256, 64, 1);
    c.bench_function("svd 256x64", |b| b.iter(|| svd(black_box(&stack)).unwrap()));
    c.bench_function("gnnm 256x64", |b| b.iter(|| gnnm_shrink(black_box(&stack), 40.0).unwrap()));
    let matched = matrix(32, 64, 2);
    c.bench_function("gnnm 32x64", |b| b.iter(|| gnnm_shrink(black_box(&matched), 4.0).unwrap()));
}

fn mixture_kernels(c: &mut Criterion) {
    let model = mixture(32, 64);
    let grid = extract_patches(&noisy_card(64, 64, 25.0), 8, 2).unwrap();
    c.bench_function("assign 841 patches k=32", |b| {
        b.iter(|| assign_classes(black_box(&model), &grid, 25.0).unwrap())
    });
    let opts = TrainOptions { k: 4, max_iters: 3, ..Default::default() };
    c.bench_function("em k=4 841 patches", |b| {
        b.iter(|| train_em(black_box(grid.vectors()), &opts).unwrap())
    });
}

fn stages(c: &mut Criterion) {
    let noisy = noisy_card(64, 64, 25.0);
    let mut group = c.benchmark_group("stages");
    group.sample_size(10);
    group.bench_function("local_denoise 64x64", |b| {
        b.iter(|| local_denoise(black_box(&noisy), 25.0, &PreprocessConfig::default()).unwrap())
    });
    let model = mixture(16, 64);
    let cfg = PipelineConfig { k_components: 16, ..Default::default() };
    group.bench_function("denoise_iteration 64x64", |b| {
        b.iter(|| denoise_iteration(black_box(&noisy), &noisy, 25.0, &model, &cfg).unwrap())
    });
    group.finish();
}

criterion_group!(benches, lowrank, mixture_kernels, stages);
criterion_main!(benches);
