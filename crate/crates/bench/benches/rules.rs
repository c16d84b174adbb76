use std::collections::BTreeMap;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use gesture_bench::{flexion_samples, hands};
use gesture_core::encoder::encode_stream;
use gesture_core::rules::encode_pose_vector;
use gesture_core::synth::raise_stream;
use gesture_core::tuner::{grid_search, tune, ParamGroup};
use gesture_core::{GridSpec, LossWeights, RuleThresholds, SegmentationConfig};

fn pose_vectors(c: &mut Criterion) {
    let frames = hands(1000, 1);
    let th = RuleThresholds::default();
    c.bench_function("encode_pose_vector x1000", |b| {
        b.iter(|| frames.iter().map(|f| encode_pose_vector(black_box(f), &th).0[0] as i64).sum::<i64>())
    });
}

fn streams(c: &mut Criterion) {
    // 10 s at 30 fps with three raises
    let stream = raise_stream(30.0, 10.0, &[(1.0, 3.0), (4.5, 6.0), (7.5, 9.5)], 0.8, 0.4);
    let (cfg, th) = (SegmentationConfig::default(), RuleThresholds::default());
    c.bench_function("encode_stream 10s", |b| b.iter(|| encode_stream(black_box(&stream), &cfg, &th).unwrap()));
}

fn tuning(c: &mut Criterion) {
    let samples = flexion_samples(2000, 2);
    let (grid, weights, base) = (GridSpec::default(), LossWeights::default(), RuleThresholds::default());
    c.bench_function("grid_search flexion_finger n=2000", |b| {
        b.iter(|| grid_search(black_box(&samples), ParamGroup::FlexionFinger, &grid, &weights, &base).unwrap())
    });
    let datasets = BTreeMap::from([(ParamGroup::FlexionFinger, samples)]);
    c.bench_function("tune one group n=2000", |b| {
        b.iter(|| tune(black_box(&datasets), &grid, &weights, &base, 0).unwrap())
    });
}

criterion_group!(benches, pose_vectors, streams, tuning);
criterion_main!(benches);
