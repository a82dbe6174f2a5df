use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use kreuse_core::kernelreuse::{compound_conv, UnifiedKernel, ALL_CANDIDATES};
use kreuse_core::ops::{conv2d, ConvGeom};
use kreuse_core::supernet::{ForwardMode, Level, SearchSpaceSpec, SuperNet};
use kreuse_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn bench_conv2d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("conv2d");
    for &(ch, hw, k) in &[(16, 32, 3), (32, 16, 3), (32, 16, 5)] {
        let x = random(&mut rng, [4, ch, hw, hw]);
        let w = random(&mut rng, [ch, ch, k, k]);
        let geom = ConvGeom::new(1, k / 2, 1);
        group.bench_with_input(BenchmarkId::from_parameter(format!("c{}_hw{}_k{}", ch, hw, k)), &(), |b, _| {
            b.iter(|| conv2d(black_box(&x), black_box(&w), None, geom).unwrap())
        });
    }
    group.finish();
}

fn bench_compound_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("compound_conv");
    for &(ch, hw) in &[(16, 32), (32, 16)] {
        let x = random(&mut rng, [4, ch, hw, hw]);
        let theta = random(&mut rng, [ch, ch, 5, 5]);
        let uk = UnifiedKernel::new(theta, None, ALL_CANDIDATES.iter().map(|k| k.op()).collect()).unwrap();
        let alpha = [0.1f32, 0.4, 0.3, 0.2];
        group.bench_with_input(BenchmarkId::from_parameter(format!("c{}_hw{}", ch, hw)), &(), |b, _| {
            b.iter(|| compound_conv(black_box(&x), &uk, &alpha, 1).unwrap())
        });
    }
    group.finish();
}

fn bench_supernet(c: &mut Criterion) {
    let spec = SearchSpaceSpec::preset(Level::SMini).with_classes(3);
    let net = SuperNet::<f32>::new(&spec, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, [8, 3, 64, 64]);
    let mut group = c.benchmark_group("supernet_forward");
    group.sample_size(10);
    group.bench_function("s-mini_b8_64", |b| b.iter(|| net.predict(black_box(&x), ForwardMode::Deterministic).unwrap()));
    group.bench_function("s-mini_b8_64_sampled", |b| {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        b.iter(|| net.predict(black_box(&x), ForwardMode::Search { rng: &mut r, tau: 1.0 }).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_conv2d, bench_compound_conv, bench_supernet);
criterion_main!(benches);
