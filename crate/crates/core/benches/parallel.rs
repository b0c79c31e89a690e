//! Single-thread pool against the default pool on the data-parallel kernels.
//! Build with `--no-default-features` to measure the sequential fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use metal_al::baselines::kmeans;
use metal_al::graph::{generate_sbm, FeatureModel, SbmConfig};
use metal_al::models::{mc_dropout_posterior, GraphInputs, Model, ModelConfig, ModelKind};
use metal_al::par;
use metal_al::tensor::{matmul, DenseMatrix};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn pools() -> Vec<(&'static str, usize)> {
    let all = par::current_threads();
    let mut out = vec![("1-thread", 1)];
    if all > 1 {
        out.push(("default", all));
    }
    out
}

fn dense(rows: usize, cols: usize, salt: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |i, j| ((i * 31 + j * 17 + salt) % 97) as f64 / 97.0 - 0.5)
}

fn bench_matmul(c: &mut Criterion) {
    let a = dense(2000, 256, 1);
    let b = dense(256, 64, 2);
    let mut group = c.benchmark_group("matmul_2000x256x64");
    for (name, threads) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            par::with_threads(threads, || bench.iter(|| matmul(&a, &b).unwrap()))
        });
    }
    group.finish();
}

fn bench_mc_dropout(c: &mut Criterion) {
    let mut config = SbmConfig::uniform(6, 300, 0.01, 0.0005, 1000, 0.0, 0);
    config.features = FeatureModel::BagOfWords { words_per_node: 30, topic_fraction: 0.2 };
    let data = generate_sbm(&config).unwrap();
    let inputs = GraphInputs::new(&data);
    let model = Model::init(ModelKind::Gcn, &ModelConfig::default(), data.num_features(), data.num_classes(), 0);
    let mut group = c.benchmark_group("mc_dropout_20_passes");
    group.sample_size(10);
    for (name, threads) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            par::with_threads(threads, || bench.iter(|| mc_dropout_posterior(&model, &inputs, 20, 0.5, 1).unwrap()))
        });
    }
    group.finish();
}

fn bench_kmeans(c: &mut Criterion) {
    let points = dense(2000, 64, 3);
    let mut group = c.benchmark_group("kmeans_2000x64_k6");
    group.sample_size(10);
    for (name, threads) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            par::with_threads(threads, || bench.iter(|| kmeans(&points, 6, 4, 50, 0).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_mc_dropout, bench_kmeans);
criterion_main!(benches);
