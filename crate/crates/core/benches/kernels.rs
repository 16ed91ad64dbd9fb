//! Parallel vs sequential throughput of the hot kernels.
//!
//! Each benchmark runs twice, once with the rayon pool enabled and once
//! with `parallel::set_enabled(false)`. Results are bit-identical in both
//! modes; only wall time differs. Build with `--no-default-features` to
//! measure the sequential-only crate.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;

use pairseq::model::{encoder_forward, ModelConfig, ModelParams};
use pairseq::numerics::{kernels, Tensor};
use pairseq::{parallel, rng};

fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut r = rng::stream(seed, &[]);
    let n = shape.iter().product();
    let data = (0..n).map(|_| r.gen_range(-1.0f32..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

const MODES: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn bench_matmul(c: &mut Criterion) {
    // One encoder projection for a batch of 32 paired inputs.
    let a = random(&[32 * 12, 420], 1);
    let b = random(&[420, 420], 2);
    let mut g = c.benchmark_group("matmul_384x420x420");
    for (name, on) in MODES {
        parallel::set_enabled(on);
        g.bench_function(BenchmarkId::from_parameter(name), |bch| {
            bch.iter(|| kernels::matmul(black_box(&a), black_box(&b)).unwrap())
        });
    }
    g.finish();
    parallel::set_enabled(true);
}

fn bench_softmax(c: &mut Criterion) {
    let x = random(&[32 * 2 * 12, 12], 3);
    let mut g = c.benchmark_group("softmax_rows");
    for (name, on) in MODES {
        parallel::set_enabled(on);
        g.bench_function(BenchmarkId::from_parameter(name), |bch| {
            bch.iter(|| kernels::softmax_rows(black_box(&x)).unwrap())
        });
    }
    g.finish();
    parallel::set_enabled(true);
}

fn bench_encoder(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let params: ModelParams<f32> = ModelParams::init(&cfg, 7).unwrap();
    let batch = 16;
    let x = random(&[batch * cfg.positions(), cfg.d_model], 4);
    let mut g = c.benchmark_group("encoder_forward_b16");
    g.sample_size(10);
    for (name, on) in MODES {
        parallel::set_enabled(on);
        g.bench_function(BenchmarkId::from_parameter(name), |bch| {
            bch.iter(|| encoder_forward(&params, black_box(x.clone()), batch, None).unwrap())
        });
    }
    g.finish();
    parallel::set_enabled(true);
}

criterion_group!(benches, bench_matmul, bench_softmax, bench_encoder);
criterion_main!(benches);
