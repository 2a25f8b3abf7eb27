use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use spen_bench::{denoise, tagging};
use spen_core::{backprop_unroll, BackpropConfig, MemoryMode};

fn energy_gradient(c: &mut Criterion) {
    let mut group = c.benchmark_group("energy_grad_y");
    for preset in ["FOE-3", "DP-3"] {
        let f = denoise(preset, 32).unwrap();
        group.bench_function(BenchmarkId::from_parameter(preset), |b| {
            b.iter(|| {
                f.spen
                    .energy
                    .energy_grad_y(&f.params, &f.input, &f.input)
                    .unwrap()
            })
        });
    }
    group.finish();
}

fn unrolled_backprop(c: &mut Criterion) {
    let mut group = c.benchmark_group("backprop_unroll");
    group.sample_size(10);
    for memory in [MemoryMode::Checkpointed, MemoryMode::Naive] {
        let cfg = BackpropConfig {
            memory,
            ..BackpropConfig::default()
        };
        let f = denoise("FOE-3", 32).unwrap();
        group.bench_function(BenchmarkId::new("FOE-3", memory), |b| {
            b.iter(|| {
                backprop_unroll(&f.spen, &f.params, &f.input, &f.target, &f.loss, &cfg).unwrap()
            })
        });
    }
    let f = tagging("TAG-LOGIT").unwrap();
    group.bench_function("TAG-LOGIT", |b| {
        b.iter(|| {
            backprop_unroll(
                &f.spen,
                &f.params,
                &f.input,
                &f.target,
                &f.loss,
                &BackpropConfig::default(),
            )
            .unwrap()
        })
    });
    group.finish();
}

fn inference(c: &mut Criterion) {
    let mut group = c.benchmark_group("predict");
    group.sample_size(10);
    for preset in ["FOE-20", "DP-20"] {
        let f = denoise(preset, 32).unwrap();
        group.bench_function(BenchmarkId::from_parameter(preset), |b| {
            b.iter(|| f.spen.predict(&f.params, &f.input).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, energy_gradient, unrolled_backprop, inference);
criterion_main!(benches);
