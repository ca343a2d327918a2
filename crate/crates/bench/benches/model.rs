use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use pvnet_bench::{desk_model, labels, params, rng, volume};
use pvnet_core::losses::LossWeights;
use pvnet_core::model::{forward_infer, InferMode, ModelConfig};
use pvnet_core::train::{train_step, AdamState};

fn small_model() -> ModelConfig {
    ModelConfig {
        input_size: 16,
        num_classes: 3,
        latent_dim: 8,
        base_width: 4,
    }
}

fn training_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for (name, cfg, batch) in [
        ("16^3 w4 b2", small_model(), 2),
        ("32^3 w8 b4", desk_model(), 4),
    ] {
        let mut p = params(cfg);
        let mut adam = AdamState::new(p.tensors()).unwrap();
        let x = volume(batch, 1, cfg.input_size);
        let y = labels(batch, cfg.input_size, cfg.num_classes);
        let w = LossWeights::default();
        let mut r = rng(5);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                train_step(&mut p, &mut adam, black_box(&x), &y, &w, 1e-4, 1e-8, &mut r).unwrap()
            })
        });
    }
    group.finish();
}

fn inference(c: &mut Criterion) {
    let mut group = c.benchmark_group("inference");
    group.sample_size(10);
    for (name, cfg) in [("16^3 w4", small_model()), ("32^3 w8", desk_model())] {
        let mut p = params(cfg);
        let x = volume(1, 1, cfg.input_size);
        for (mode_name, mode) in [
            ("prior_mean", InferMode::PriorMean),
            ("prior_sample", InferMode::PriorSample(3)),
        ] {
            group.bench_function(BenchmarkId::new(mode_name, name), |b| {
                b.iter(|| forward_infer(&mut p, black_box(&x), mode).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, training_step, inference);
criterion_main!(benches);
