use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use plrn_bench::model_fixture;
use plrn_core::autodiff::Tape;
use plrn_core::config::TrainConfig;
use plrn_core::eval::tiou;
use plrn_core::params::Adam;
use plrn_core::tensor::Tensor;
use plrn_core::train::train_step;
use std::hint::black_box;

fn forward_backward(c: &mut Criterion) {
    let cfg = TrainConfig::desk();
    let (model, store, xs) = model_fixture(&cfg, 4);
    let mut g = c.benchmark_group("desk");
    g.bench_function("forward", |b| {
        b.iter(|| model.predict(&store, black_box(&xs[0])).unwrap())
    });
    g.bench_function("forward_backward", |b| {
        b.iter(|| model.sample_gradients(&store, black_box(&xs[0]), 1.0).unwrap())
    });
    let adam = Adam::new(cfg.learning_rate);
    let batch: Vec<_> = xs.iter().collect();
    g.bench_function("train_step_batch4", |b| {
        b.iter_batched_ref(
            || store.clone(),
            |s| train_step(&model, s, &adam, &batch, 1).unwrap(),
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

fn conv1d(c: &mut Criterion) {
    let (d, t, k) = (64, 32, 15);
    let x = Tensor::new(vec![d, t], (0..d * t).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let w = Tensor::new(vec![d, d, k], (0..d * d * k).map(|i| (i as f64 * 0.11).cos() * 0.05).collect()).unwrap();
    c.bench_function("conv1d_same_64x32_k15_backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.input(x.clone(), true);
            let wv = tape.input(w.clone(), true);
            let y = tape.conv1d_same(xv, wv).unwrap();
            let s = tape.sum(y);
            tape.backward(s).unwrap()
        })
    });
}

fn metrics(c: &mut Criterion) {
    let pairs: Vec<((f64, f64), (f64, f64))> = (0..1000)
        .map(|i| {
            let f = |k: f64| ((i as f64 * k).sin() * 0.5 + 0.5).clamp(0.0, 1.0);
            let (a, b) = (f(0.7), f(1.3));
            let (p, q) = (f(2.1), f(0.3));
            ((a.min(b), a.max(b) + 1e-6), (p.min(q), p.max(q) + 1e-6))
        })
        .collect();
    c.bench_function("tiou_1000_pairs", |b| {
        b.iter(|| pairs.iter().map(|&(g, p)| tiou(g, p).unwrap()).sum::<f64>())
    });
}

criterion_group!(benches, forward_backward, conv1d, metrics);
criterion_main!(benches);
