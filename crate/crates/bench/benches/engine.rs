use std::sync::Arc;

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use facestream::config::RuntimeConfig;
use facestream::diffusion::ddim_sample;
use facestream::runtime::open_stream;
use facestream::tensor::{attention, Mask};
use facestream_bench::{bench_model, random_audio, random_tensor};

fn attention_bench(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention");
    for len in [16, 64, 256] {
        let (q, k, v) = (random_tensor(len, 32, 1), random_tensor(len, 32, 2), random_tensor(len, 32, 3));
        let mask = Mask::causal(len);
        group.bench_with_input(BenchmarkId::from_parameter(len), &len, |b, _| {
            b.iter(|| attention(black_box(&q), &k, &v, None, Some(&mask)).unwrap())
        });
    }
    group.finish();
}

fn ddim_bench(c: &mut Criterion) {
    let model = bench_model(0);
    let cond = vec![0.1; model.config.predictor.hidden];
    let head = model.head.bind(&model.store);
    let mut group = c.benchmark_group("ddim_sample");
    for steps in [1, 10, 50] {
        group.bench_with_input(BenchmarkId::from_parameter(steps), &steps, |b, &steps| {
            b.iter(|| ddim_sample(&head, &model.schedule, black_box(&cond), model.config.unit_dim(), steps, 7).unwrap())
        });
    }
    group.finish();
}

/// One autoregressive unit with a full history window.
fn stream_unit_bench(c: &mut Criterion) {
    let model = bench_model(0);
    let h = model.config.codec.components;
    let warm = model.config.history_units() * h;
    let audio = random_audio(&model, warm + h, 5);
    let mut session = open_stream(Arc::clone(&model), 0, 11, model.config.fps, &RuntimeConfig::default()).unwrap();
    session.push_audio(&audio.slice(0, warm).unwrap()).unwrap();
    let unit = audio.slice(warm, warm + h).unwrap();
    c.bench_function("stream_unit_step", |b| {
        b.iter(|| {
            let frames = session.push_audio(black_box(&unit)).unwrap();
            assert_eq!(frames.len(), h);
        })
    });
}

criterion_group!(benches, attention_bench, ddim_bench, stream_unit_bench);
criterion_main!(benches);
