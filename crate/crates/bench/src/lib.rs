//! Criterion benchmarks for the loss kernels, the generator and the toy models.

use afdcd_core::harness::{ArchSpec, ToyModel};
use afdcd_core::masking::{generator_backward, generator_forward, generator_init};
use afdcd_core::{loss_cc, loss_oc, loss_sc, pair_count_model, ContrastConfig, DistanceKind, FeatureMap, FlopsQuery, PatchExtent, Rng};
use criterion::{BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

fn pair(h: usize, c: usize, seed: u64) -> (FeatureMap, FeatureMap) {
    let mut rng = Rng::new(seed);
    let s = FeatureMap::random_normal(h, h, c, 1.0, &mut rng);
    let t = FeatureMap::random_normal(h, h, c, 1.0, &mut rng);
    (s, t)
}

pub fn contrastive(c: &mut Criterion) {
    let (s, t) = pair(32, 32, 1);
    let mut g = c.benchmark_group("contrastive");
    g.sample_size(20);
    g.bench_function("sc_32x32x32", |b| b.iter(|| loss_sc(black_box(&s), &t, 0.07, DistanceKind::L2Squared).unwrap()));
    g.bench_function("cc_32x32x32_m16", |b| b.iter(|| loss_cc(black_box(&s), &t, 16, 0.07, DistanceKind::L2Squared).unwrap()));
    for patch in [2, 4, 8] {
        for pool in [1, 4] {
            let cfg = ContrastConfig {
                patch_side: patch,
                pool_factor: pool,
                ..ContrastConfig::default()
            };
            g.bench_with_input(BenchmarkId::new("oc", format!("n{patch}_q{pool}")), &cfg, |b, cfg| {
                b.iter(|| loss_oc(black_box(&s), &t, cfg).unwrap())
            });
        }
    }
    g.finish();
}

pub fn distances(c: &mut Criterion) {
    let (s, t) = pair(32, 32, 2);
    let mut g = c.benchmark_group("distance_kind");
    g.sample_size(20);
    for kind in [DistanceKind::L2Squared, DistanceKind::L1, DistanceKind::CosineDistance] {
        let cfg = ContrastConfig {
            distance: kind,
            ..ContrastConfig::default()
        };
        g.bench_function(format!("{kind:?}"), |b| b.iter(|| loss_oc(black_box(&s), &t, &cfg).unwrap()));
    }
    g.finish();
}

pub fn generator(c: &mut Criterion) {
    let mut rng = Rng::new(3);
    let params = generator_init(8, 32, &mut rng).unwrap();
    let x = FeatureMap::random_normal(32, 32, 8, 1.0, &mut rng);
    let up = FeatureMap::random_normal(32, 32, 32, 1.0, &mut rng);
    let (_, cache) = generator_forward(&x, &params).unwrap();
    let mut g = c.benchmark_group("generator");
    g.throughput(Throughput::Elements(32 * 32));
    g.bench_function("forward", |b| b.iter(|| generator_forward(black_box(&x), &params).unwrap()));
    g.bench_function("backward", |b| b.iter(|| generator_backward(&cache, &params, black_box(&up)).unwrap()));
    g.finish();
}

pub fn models(c: &mut Criterion) {
    let mut rng = Rng::new(4);
    let image = FeatureMap::random_normal(32, 32, 3, 1.0, &mut rng);
    let mut g = c.benchmark_group("model_forward");
    for (name, channels, layers) in [("teacher", 32, 4), ("student", 8, 2)] {
        let model = ToyModel::init(3, ArchSpec { channels, layers }, 4, &mut rng).unwrap();
        g.bench_function(name, |b| b.iter(|| model.forward(black_box(&image)).unwrap()));
    }
    g.finish();
}

pub fn cost_model(c: &mut Criterion) {
    let q = FlopsQuery {
        height: 64,
        width: 64,
        channels: 512,
        groups: 16,
        patch: PatchExtent::Side(4),
        pool: 1,
        ops_per_element: 3,
    };
    c.bench_function("pair_count_model", |b| b.iter(|| pair_count_model(black_box(&q)).unwrap()));
}

pub fn benchmarks(c: &mut Criterion) {
    contrastive(c);
    distances(c);
    generator(c);
    models(c);
    cost_model(c);
}
