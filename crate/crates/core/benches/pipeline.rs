//! Sequential vs data-parallel throughput of the hot paths. Each group runs
//! the same work inside a one-thread rayon pool and a pool sized to the
//! machine. Build with `--no-default-features` to measure the plain-iterator
//! fallback instead.

use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use csaw::backbone::{self, Backbone, StandinBackbone};
use csaw::imageops::{derive_seed, sample_permutation, ImageTensor};
use csaw::losses::LossWeights;
use csaw::model::{CsawModel, ModelSpec, ReconTarget};
use csaw::parallel;
use csaw::sslhead;
use csaw::trainer::{TrainConfig, Trainer};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BATCH: usize = 8;

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let wide = std::thread::available_parallelism().map_or(1, |n| n.get()).max(2);
    [1, wide]
        .into_iter()
        .map(|n| {
            let name = if n == 1 { "sequential".to_string() } else { format!("rayon-{n}") };
            (name, rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap())
        })
        .collect()
}

fn images(n: usize) -> Vec<ImageTensor> {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    (0..n)
        .map(|_| ImageTensor::new(Array3::from_shape_fn((3, 224, 224), |_| r.random_range(-1.5..1.5))).unwrap())
        .collect()
}

fn model(bb: Arc<dyn Backbone>) -> CsawModel {
    let spec = ModelSpec::resolve(bb.as_ref(), 4, "a photo of a", 4, None, None, ReconTarget::Clean).unwrap();
    CsawModel::new(bb, spec, 0).unwrap()
}

fn pipeline(c: &mut Criterion) {
    let bb: Arc<dyn Backbone> = Arc::new(StandinBackbone::new(0));
    let m = model(bb.clone());
    let xs = images(BATCH);
    let taps = m.spec.tap_layers.clone();
    let embeddings: Vec<_> = backbone::encode_images(bb.as_ref(), &xs, &[]).unwrap().into_iter().map(|o| o.embedding).collect();
    let labels: Vec<usize> = (0..BATCH).map(|i| i % 3).collect();
    let perms: Vec<_> = (0..BATCH).map(|i| sample_permutation(4, derive_seed(&[5, i as u64])).unwrap()).collect();

    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_with_input(BenchmarkId::new("encode_images", &name), &xs, |b, xs| {
            b.iter(|| pool.install(|| backbone::encode_images(bb.as_ref(), black_box(xs), &taps).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("reconstruct", &name), &embeddings, |b, es| {
            b.iter(|| pool.install(|| parallel::map(black_box(es), |e| sslhead::reconstruct(&m.params.recon, e.view()).unwrap())))
        });
        let bank = m.prompt_bank(&["river".into(), "desert".into(), "forest".into()]).unwrap();
        let mut trainer = Trainer::new(model(bb.clone()), bank, LossWeights::default(), TrainConfig::default()).unwrap();
        group.bench_function(BenchmarkId::new("train_step", &name), |b| {
            b.iter(|| pool.install(|| trainer.train_step(&xs, &labels, &perms, 1e-3).unwrap().report.total))
        });
    }
    group.finish();
}

criterion_group!(benches, pipeline);
criterion_main!(benches);
