use std::hint::black_box;

use biqa_core::dataset::Patch;
use biqa_core::metrics::{fit_logistic, srcc};
use biqa_core::pseudolabel::sample_pair_indices;
use biqa_core::rng::rng_from_seed;
use biqa_core::scorer::{backward, forward, init_params, ScorerConfig};
use biqa_core::synthbench::gen_base_image;
use criterion::{criterion_group, criterion_main, Criterion};
use rand::Rng;

fn scorer(c: &mut Criterion) {
    let config = ScorerConfig::default();
    let params = init_params(&config, 1).unwrap();
    let image = gen_base_image(48, 7).unwrap();
    let patch = Patch::crop(&image, 8, 8, config.patch_size, false);

    c.bench_function("forward_32px", |b| {
        b.iter(|| forward(&params, black_box(&patch)).unwrap().0)
    });
    c.bench_function("forward_backward_32px", |b| {
        b.iter(|| {
            let (_, trace) = forward(&params, black_box(&patch)).unwrap();
            backward(&trace, &params, 1.0).unwrap()
        })
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = rng_from_seed(3);
    let x: Vec<f64> = (0..1000).map(|_| rng.random()).collect();
    let y: Vec<f64> = x.iter().map(|v| v + 0.1 * rng.random::<f64>()).collect();
    c.bench_function("srcc_1000", |b| {
        b.iter(|| srcc(black_box(&x), black_box(&y)).unwrap())
    });

    let preds: Vec<f64> = (0..200).map(|i| -2.0 + 4.0 * i as f64 / 199.0).collect();
    let mos: Vec<f64> = preds
        .iter()
        .map(|s| 1.0 * (0.5 - 1.0 / (1.0 + (4.0 * (s - 0.5)).exp())) + 0.1 * s + 0.2)
        .collect();
    c.bench_function("fit_logistic_200", |b| {
        b.iter(|| fit_logistic(black_box(&preds), black_box(&mos)).unwrap())
    });
}

fn pairs(c: &mut Criterion) {
    c.bench_function("sample_5000_pairs_of_1000", |b| {
        b.iter(|| sample_pair_indices(1000, black_box(5000), 42).unwrap())
    });
}

criterion_group!(benches, scorer, metrics, pairs);
criterion_main!(benches);
