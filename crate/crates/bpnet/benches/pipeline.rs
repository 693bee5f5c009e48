//! Criterion benches over the hot paths. Run with the default (parallel)
//! feature set and again with `--no-default-features` to compare the
//! sequential fallback; results are bitwise identical either way.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use bpnet::autodiff::params::Ctx;
use bpnet::pipeline::{BpNet, InitMode, PipelineConfig};
use bpnet::refine::{cspn_step, normalize_affinity};
use bpnet::sparse::{knn, sample_sparse};
use bpnet::synthetic::generate_scene;

fn desk(steps: usize) -> PipelineConfig {
    PipelineConfig {
        steps,
        ..PipelineConfig::default()
    }
}

fn bench_forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("forward");
    for &side in &[16usize, 32] {
        let cfg = desk(1);
        let model = BpNet::new(cfg.clone(), InitMode::Identity).unwrap();
        let scene = generate_scene(side, side, 1);
        let map = sample_sparse(&scene.depth, side, side, side * side / 4, 2).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(side), &side, |b, _| {
            b.iter(|| {
                let ctx = Ctx::new(&model.params, false);
                model
                    .forward(&ctx, &scene.image, &map, &scene.intrinsics)
                    .unwrap()
                    .depths[0]
                    .value()
            })
        });
    }
    g.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let scene = generate_scene(32, 32, 1);
    c.bench_function("train_step_32", |b| {
        b.iter_batched(
            || BpNet::new(desk(1), InitMode::Identity).unwrap(),
            |mut m| m.train(&scene).unwrap(),
            criterion::BatchSize::LargeInput,
        )
    });
}

fn bench_knn(c: &mut Criterion) {
    let scene = generate_scene(64, 64, 3);
    let map = sample_sparse(&scene.depth, 64, 64, 500, 4).unwrap();
    c.bench_function("knn_64_500pts", |b| b.iter(|| knn(&map, 4).unwrap()));
}

fn bench_cspn(c: &mut Criterion) {
    use bpnet::autodiff::Tape;
    let (h, w, k) = (64usize, 64usize, 7usize);
    let tape = Tape::new();
    let state = tape
        .leaf((0..h * w).map(|i| (i % 9) as f64).collect(), vec![h, w], false)
        .unwrap();
    let raw = tape
        .leaf(
            (0..(k * k - 1) * h * w).map(|i| ((i % 13) as f64 - 6.0) * 0.1).collect(),
            vec![k * k - 1, h, w],
            false,
        )
        .unwrap();
    let kappa = normalize_affinity(&raw).unwrap();
    c.bench_function("cspn_step_64_k7", |b| {
        b.iter(|| cspn_step(&state, &kappa, k).unwrap().value())
    });
}

criterion_group!(benches, bench_forward, bench_train_step, bench_knn, bench_cspn);
criterion_main!(benches);
