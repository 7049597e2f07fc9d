use std::hint::black_box;

use cardioprior::losses::{gradcheck_instance, total_loss, LossConfig};
use cardioprior::metrics::{distance_map, evaluate_case, surface_voxels};
use cardioprior::phantom::{generate, PhantomSpec};
use cardioprior::trainer::featurize;
use cardioprior::ClassId;
use criterion::{criterion_group, criterion_main, Criterion};

fn metrics(c: &mut Criterion) {
    let spec = PhantomSpec::default();
    let (_, a) = generate(&spec, 0).unwrap();
    let (_, b) = generate(&spec, 1).unwrap();
    let surface = surface_voxels(&a, ClassId::LeftVentricle);
    c.bench_function("distance_map 48^3", |bench| {
        bench.iter(|| distance_map(a.grid(), black_box(&surface)))
    });
    c.bench_function("evaluate_case 48^3", |bench| {
        bench.iter(|| evaluate_case("b", black_box(&a), black_box(&b)).unwrap())
    });
}

fn losses(c: &mut Criterion) {
    let inst = gradcheck_instance(16, 0);
    let cfg = LossConfig::default();
    c.bench_function("total_loss 16^3", |bench| {
        bench.iter(|| total_loss(black_box(&inst.logits), &inst.truth, &cfg, Some(&inst.stats)).unwrap())
    });
}

fn features(c: &mut Criterion) {
    let (image, _) = generate(&PhantomSpec::default(), 0).unwrap();
    let image = image.map(|v| v as f64).unwrap();
    c.bench_function("featurize 48^3", |bench| bench.iter(|| featurize(black_box(&image), None).unwrap()));
}

criterion_group!(benches, metrics, losses, features);
criterion_main!(benches);
