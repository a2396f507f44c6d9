use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fslab_core::config::ModelConfig;
use fslab_core::losses::{self, LossSpec, LossWeights};
use fslab_core::models::{self, Batch, ModelDims, Trainable};
use fslab_core::spectral;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn signal(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || r.random_range(-1.0..1.0))
}

fn dft(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let mut g = c.benchmark_group("dft");
    for n in [96, 1024, 9600] {
        let x = signal(&mut r, n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &x, |b, x| {
            b.iter(|| spectral::dft(black_box(x)).unwrap())
        });
    }
    g.finish();
}

fn pooling(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let mut g = c.benchmark_group("adaptive_max_pool");
    for (v, l) in [(768, 96), (15_000, 9600)] {
        let x = signal(&mut r, v);
        g.bench_with_input(BenchmarkId::new(format!("{v}"), l), &x, |b, x| {
            b.iter(|| spectral::adaptive_max_pool(black_box(x), l).unwrap())
        });
    }
    g.finish();
}

fn fourier_loss(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let (a, b) = (signal(&mut r, 96), signal(&mut r, 96));
    c.bench_function("l_amp_grad/96", |bch| {
        bch.iter(|| losses::l_amp_grad(black_box(&a), &b).unwrap())
    });
    c.bench_function("l_pha_grad/96", |bch| {
        bch.iter(|| losses::l_pha_grad(black_box(&a), &b, false).unwrap())
    });
}

fn softclip(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let mut g = c.benchmark_group("softclip_grad");
    for (n, d) in [(32, 48), (64, 768)] {
        let (eb, ei) = (matrix(&mut r, n, d), matrix(&mut r, n, d));
        g.bench_function(format!("{n}x{d}"), |b| {
            b.iter(|| losses::softclip_grad(black_box(eb.view()), ei.view(), 0.1, false).unwrap())
        });
    }
    g.finish();
}

fn encoder(c: &mut Criterion) {
    let model = ModelConfig::default();
    let dims = ModelDims::new(&model, 96, 48);
    let (adapter, enc) = models::init_params(0, &dims).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let batch = Batch {
        inputs: matrix(&mut r, 32, 96),
        targets: matrix(&mut r, 32, 48),
        partners: Some(matrix(&mut r, 32, 96)),
    };
    let spec = LossSpec::semantic(0.1, LossWeights::default());
    let fourier = spec
        .clone()
        .with_supervision(fslab_core::config::Supervision::Fourier);

    c.bench_function("encoder_forward/32", |b| {
        b.iter(|| enc.forward(black_box(batch.inputs.view())).unwrap())
    });
    c.bench_function("grad/pretrain/32", |b| {
        b.iter(|| {
            models::grad(
                None,
                &enc,
                black_box(&Batch {
                    partners: None,
                    ..batch.clone()
                }),
                &spec,
                Trainable::ENCODER,
            )
            .unwrap()
        })
    });
    c.bench_function("grad/adapt_fourier/32", |b| {
        b.iter(|| {
            models::grad(
                Some(&adapter),
                &enc,
                black_box(&batch),
                &fourier,
                Trainable::ADAPTER,
            )
            .unwrap()
        })
    });
}

criterion_group!(benches, dft, pooling, fourier_loss, softclip, encoder);
criterion_main!(benches);
