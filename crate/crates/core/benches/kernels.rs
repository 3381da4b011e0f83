//! Parallel against sequential execution of the same kernels: each case
//! runs once on rayon's global pool and once inside a one-thread pool.
//! Build with `--no-default-features` for the fully sequential fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use c2f_core::kernels::conv::conv2d;
use c2f_core::kernels::norm::batch_norm_train;
use c2f_core::kernels::ConvSpec;
use c2f_core::model::{C2FNet, ModelConfig, Width};
use c2f_core::Tensor;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn pools() -> Vec<(&'static str, Option<rayon::ThreadPool>)> {
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("thread pool");
    vec![("parallel", None), ("sequential", Some(single))]
}

fn run_in<R: Send>(pool: &Option<rayon::ThreadPool>, f: impl FnOnce() -> R + Send) -> R {
    match pool {
        Some(p) => p.install(f),
        None => f(),
    }
}

fn bench_kernels(c: &mut Criterion) {
    let x = random(&[4, 32, 64, 64], 1);
    let w = random(&[32, 32, 3, 3], 2);
    let gamma = Tensor::full(&[32], 1.0);
    let beta = Tensor::zeros(&[32]);
    let mut group = c.benchmark_group("kernels");
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new("conv3x3", name), |b| {
            b.iter(|| run_in(&pool, || conv2d(&x, &w, None, ConvSpec::same(3))))
        });
        group.bench_function(BenchmarkId::new("batch_norm", name), |b| {
            b.iter(|| run_in(&pool, || batch_norm_train(&x, &gamma, &beta)))
        });
    }
    group.finish();
}

fn bench_forward(c: &mut Criterion) {
    let net = C2FNet::new(ModelConfig::for_width(Width::new(1, 4).expect("width"))).expect("network");
    let params = net.init_params(0).expect("params");
    let t1 = random(&[4, 3, 64, 64], 3).map(|v| 0.5 + 0.5 * v);
    let t2 = random(&[4, 3, 64, 64], 4).map(|v| 0.5 + 0.5 * v);
    let mut group = c.benchmark_group("forward");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new("c2fnet_w1_4_64px", name), |b| {
            b.iter(|| run_in(&pool, || net.predict(&params, &t1, &t2).expect("forward")))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_kernels, bench_forward);
criterion_main!(benches);
