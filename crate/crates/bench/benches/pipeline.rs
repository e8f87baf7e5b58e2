use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use gazechair_core::cnn::{Architecture, Network, Sample};
use gazechair_core::corpus::{generate_user_corpus, GazeClass};
use gazechair_core::matchers::{correlate_at, lbp_transform, locate_pupil, PupilMatcher, WholeImageMatcher};
use gazechair_core::preprocess::{prepare_cnn_input, to_grayscale};
use gazechair_core::GazeClassifier;

fn frames() -> Vec<gazechair_core::EyeFrame> {
    generate_user_corpus(1, 8).items.into_iter().map(|i| i.frame).collect()
}

fn cnn(c: &mut Criterion) {
    let net = Network::random(Architecture::standard(), 7, 0.1).unwrap();
    let frames = frames();
    let input = prepare_cnn_input(&frames[0]);
    c.bench_function("cnn_forward", |b| b.iter(|| net.forward(black_box(&input)).unwrap()));
    c.bench_function("cnn_predict_with_preprocess", |b| b.iter(|| net.predict(black_box(&frames[3])).unwrap()));
    let samples: Vec<Sample> = frames
        .iter()
        .take(8)
        .enumerate()
        .map(|(i, f)| Sample::from_frame(f, GazeClass::ALL[i % 4], &net.arch))
        .collect();
    let refs: Vec<&Sample> = samples.iter().collect();
    c.bench_function("cnn_gradient_8_items", |b| b.iter(|| net.batch_gradient(black_box(&refs))));
}

fn matchers(c: &mut Criterion) {
    let frames = frames();
    let gray: Vec<_> = frames.iter().map(to_grayscale).collect();
    c.bench_function("correlate_full_overlap", |b| b.iter(|| correlate_at(black_box(&gray[0]), black_box(&gray[1]), 0, 0).unwrap()));
    let whole = WholeImageMatcher::new([gray[0].clone(), gray[2].clone(), gray[4].clone(), gray[6].clone()]).unwrap();
    c.bench_function("whole_image_classify", |b| b.iter(|| whole.classify(black_box(&frames[5])).unwrap()));
    let pupil = PupilMatcher::from_forward_frame(&gray[2]).unwrap();
    c.bench_function("locate_pupil", |b| b.iter(|| locate_pupil(black_box(&pupil.patch), black_box(&gray[1])).unwrap()));
    c.bench_function("lbp_transform", |b| b.iter(|| lbp_transform(black_box(&gray[0])).unwrap()));
}

criterion_group!(benches, cnn, matchers);
criterion_main!(benches);
