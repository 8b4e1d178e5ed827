use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use dra_bench::{bench_classifier, bench_dataset, bench_diffusion};
use dra_core::analysis::{cknna, uniformity_metric};
use dra_core::attacks::{pgd_attack, AttackConfig};
use dra_core::repr::{Condition, NoiseMode, RepresentationSource};
use dra_core::robust::ClassifierTarget;
use dra_core::rng::{normal_array, substream};

fn attack_bench(c: &mut Criterion) {
    let ds = bench_dataset();
    let model = bench_classifier();
    let batch = ds.data.select(&(0..32).collect::<Vec<_>>());
    let config = AttackConfig {
        steps: 10,
        ..Default::default()
    };
    c.bench_function("pgd10_conv_batch32", |b| {
        b.iter(|| {
            let target = ClassifierTarget { model: &model };
            black_box(pgd_attack(&target, &batch.images, &batch.labels, &config).unwrap())
        })
    });
}

fn extraction_bench(c: &mut Criterion) {
    let ds = bench_dataset();
    let model = bench_diffusion();
    let batch = ds.data.select(&(0..32).collect::<Vec<_>>());
    c.bench_function("diffusion_extract_batch32", |b| {
        b.iter(|| {
            black_box(
                model
                    .extract(
                        &batch.images,
                        Condition::Unconditional,
                        0.1,
                        NoiseMode::Seeded(0),
                    )
                    .unwrap(),
            )
        })
    });
}

fn metric_bench(c: &mut Criterion) {
    let mut rng = substream(0, "bench-metrics", 0);
    let a: ndarray::Array2<f64> = normal_array(&mut rng, (256, 32));
    let b: ndarray::Array2<f64> = normal_array(&mut rng, (256, 32));
    c.bench_function("cknna_n256_k10", |bch| {
        bch.iter(|| black_box(cknna(&a, &b, 10).unwrap()))
    });
    c.bench_function("uniformity_n256", |bch| {
        bch.iter(|| black_box(uniformity_metric(&a, 2.0).unwrap()))
    });
}

criterion_group!(benches, attack_bench, extraction_bench, metric_bench);
criterion_main!(benches);
