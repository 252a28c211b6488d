use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use nodebnn::autodiff::{Graph, Padding};
use nodebnn::data::{apply_corruption, CorruptionKind, CorruptionSpec};
use nodebnn::metrics::{ece, pca_project};
use nodebnn::{LatentLayout, LatentStructure, MoGPosterior, Tensor};
use nodebnn_bench::{digits, random, rng};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64, 256] {
        let (a, b) = (random(&[128, n], 1), random(&[n, n], 2));
        group.bench_with_input(BenchmarkId::new("forward_backward", n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let x = g.input("a", a.clone()).unwrap();
                let w = g.input("b", b.clone()).unwrap();
                let y = g.matmul(x, w).unwrap();
                let s = g.sum(y).unwrap();
                black_box(g.backward(s).unwrap());
            })
        });
    }
    group.finish();
}

fn conv(c: &mut Criterion) {
    let x = random(&[16, 3, 32, 32], 3);
    let k = random(&[16, 3, 3, 3], 4);
    c.bench_function("conv2d_same_forward_backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let xi = g.input("x", x.clone()).unwrap();
            let ki = g.input("k", k.clone()).unwrap();
            let y = g.conv2d(xi, ki, 1, Padding::Same).unwrap();
            let s = g.sum(y).unwrap();
            black_box(g.backward(s).unwrap());
        })
    });
}

fn entropy(c: &mut Criterion) {
    let mut group = c.benchmark_group("entropy_lower_bound");
    for k in [1, 4, 8] {
        let layout = LatentLayout::new(LatentStructure::Out, &[(784, 256), (256, 256), (256, 10)]);
        let q = MoGPosterior::init(layout, k, 0.3, 0.02, &mut rng(5)).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(k), &k, |bench, _| {
            bench.iter(|| black_box(q.entropy_lower_bound()))
        });
    }
    group.finish();
}

fn corruptions(c: &mut Criterion) {
    let img = digits(1).image(0);
    let mut group = c.benchmark_group("corruption");
    for kind in CorruptionKind::ALL {
        let spec = CorruptionSpec::new(kind, 5, 1).unwrap();
        group.bench_function(kind.to_string(), |bench| bench.iter(|| black_box(apply_corruption(&img, &spec, 0).unwrap())));
    }
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let logits = random(&[1000, 10], 6);
    let probs: Vec<f64> = logits
        .data()
        .chunks(10)
        .flat_map(|row| {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            row.iter().map(move |v| v.exp() / z).collect::<Vec<_>>()
        })
        .collect();
    let probs = Tensor::new(vec![1000, 10], probs).unwrap();
    let labels: Vec<usize> = (0..1000).map(|i| i % 10).collect();
    c.bench_function("ece_1000x10", |bench| bench.iter(|| black_box(ece(&probs, &labels, 15).unwrap())));
    let pts = random(&[500, 256], 7);
    c.bench_function("pca_500x256", |bench| bench.iter(|| black_box(pca_project(&pts, 2).unwrap())));
}

criterion_group!(benches, matmul, conv, entropy, corruptions, metrics);
criterion_main!(benches);
