//! Criterion benchmarks over the hot paths: the contrastive loss with a
//! full-size queue, queue writes, augmentation bundles, the toy encoder
//! forward pass and attention-map reduction.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use detco_core::augment::{make_bundle, AugmentConfig};
use detco_core::contrast::{info_nce, info_nce_with_grad};
use detco_core::image_ops::SourceImage;
use detco_core::memory::FeatureQueue;
use detco_core::model::{DetcoModel, EncoderConfig};
use detco_core::rng::stream;
use detco_core::viz::attention_map;
use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((n, d));
    for mut row in m.rows_mut() {
        for v in row.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let norm = row.dot(&row).sqrt().max(1e-9);
        row.mapv_inplace(|v| v / norm);
    }
    m
}

fn bench_info_nce(c: &mut Criterion) {
    let mut rng = stream(1, 0);
    let q = unit_rows(&mut rng, 32, 128);
    let k = unit_rows(&mut rng, 32, 128);
    let negs = unit_rows(&mut rng, 4096, 128);
    c.bench_function("info_nce_b32_k4096_d128", |b| {
        b.iter(|| info_nce(q.view(), k.view(), negs.view(), 0.2).unwrap())
    });
    c.bench_function("info_nce_grad_b32_k4096_d128", |b| {
        b.iter(|| info_nce_with_grad(q.view(), k.view(), negs.view(), 0.2).unwrap())
    });
}

fn bench_queue(c: &mut Criterion) {
    let mut rng = stream(2, 0);
    let keys = unit_rows(&mut rng, 32, 128);
    c.bench_function("enqueue_b32_k4096", |b| {
        b.iter_batched(
            || FeatureQueue::warm_start(4096, 128, 3).unwrap(),
            |mut q| q.enqueue(keys.view()).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn bench_augment(c: &mut Criterion) {
    let mut rng = stream(3, 0);
    let px = Array3::from_shape_fn((96, 96, 3), |_| rng.gen_range(0.0..1.0));
    let img = SourceImage::new(px).unwrap();
    let cfg = AugmentConfig::desk();
    let mut seed = 0u64;
    c.bench_function("make_bundle_desk_96px", |b| {
        b.iter(|| {
            seed += 1;
            make_bundle(&img, seed, &cfg)
        })
    });
}

fn bench_encoder(c: &mut Criterion) {
    let cfg = EncoderConfig::toy_desk();
    let model = DetcoModel::new(&cfg, 0).unwrap();
    let mut rng = stream(4, 0);
    let batch = Array4::from_shape_fn((8, 3, 64, 64), |_| rng.gen_range(0.0..1.0));
    c.bench_function("toy_encoder_forward_b8_64px", |b| {
        b.iter(|| model.encode_stages(&batch).unwrap())
    });
}

fn bench_attention(c: &mut Criterion) {
    let mut rng = stream(5, 0);
    let f5 = Array3::from_shape_fn((2048, 14, 14), |_| rng.gen_range(-1.0..1.0));
    c.bench_function("attention_map_2048x14x14", |b| {
        b.iter(|| attention_map(&f5).unwrap())
    });
}

criterion_group!(
    benches,
    bench_info_nce,
    bench_queue,
    bench_augment,
    bench_encoder,
    bench_attention
);
criterion_main!(benches);
