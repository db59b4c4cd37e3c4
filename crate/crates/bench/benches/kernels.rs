use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use xens_bench::{desk_classifier, input, predictions};
use xens_core::evaluation::student_t_sf;
use xens_core::nn::gemm;
use xens_core::sampling::{epoch_batches, oversample_weights};
use xens_core::training::weighted_cross_entropy_grad;
use xens_core::{classification_metrics, confusion_matrix, ClassWeights, Network, TrainableScope};

fn bench_gemm(c: &mut Criterion) {
    let mut group = c.benchmark_group("gemm");
    for n in [64usize, 256] {
        let a = vec![0.5f32; n * n];
        let b = vec![0.25f32; n * n];
        let mut out = vec![0.0f32; n * n];
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, &n| {
            bench.iter(|| gemm(n, n, n, black_box(&a), false, black_box(&b), false, &mut out, false))
        });
    }
    group.finish();
}

fn bench_tiny(c: &mut Criterion) {
    let x = input(16, 32, 3);
    let labels: Vec<usize> = (0..16).map(|i| i % 3).collect();
    let weights = ClassWeights::uniform(3);
    let mut model = desk_classifier(3);
    c.bench_function("tiny_forward_b16_32px", |b| b.iter(|| model.logits(black_box(&x)).unwrap()));
    c.bench_function("tiny_train_step_b16_32px", |b| {
        b.iter(|| {
            model.zero_grad();
            let (logits, state) = model.forward_train(&x, TrainableScope::All).unwrap();
            let (_, d, _) = weighted_cross_entropy_grad(&logits, &labels, &weights).unwrap();
            model.backward(state, &d);
        })
    });
}

fn bench_statistics(c: &mut Criterion) {
    c.bench_function("student_t_sf_df1200", |b| b.iter(|| student_t_sf(black_box(4.442), black_box(1200.0))));
    let (pred, truth) = predictions(601, 3, 0.9, 4);
    c.bench_function("metrics_601", |b| {
        b.iter(|| classification_metrics(&confusion_matrix(black_box(&pred), &truth, 3).unwrap()).unwrap())
    });
    let labels: Vec<usize> = (0..6008).map(|i| usize::from(i % 10 == 0)).collect();
    let plan = oversample_weights(&labels, 2).unwrap();
    c.bench_function("oversampled_epoch_6008", |b| b.iter(|| epoch_batches(black_box(&plan), 32, 7).unwrap()));
}

criterion_group!(benches, bench_gemm, bench_tiny, bench_statistics);
criterion_main!(benches);
