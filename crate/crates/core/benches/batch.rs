//! Sequential vs rayon-parallel per-sample work on one PK batch.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use triplet_distill::data::{generate_hierarchical, sample_pk_batch, HierarchySpec};
use triplet_distill::numerics::Rng;
use triplet_distill::par;
use triplet_distill::trainer::MlpArch;

fn forward_backward(c: &mut Criterion) {
    let ds = generate_hierarchical(&HierarchySpec::default()).unwrap();
    let model = MlpArch::teacher_default().init(ds.input_dim(), &mut Rng::new(0)).unwrap();
    let batch = sample_pk_batch(&ds, 10, 18, &mut Rng::new(1)).unwrap();
    let grad = vec![0.1; model.output_dim()];
    let step = |e: &triplet_distill::data::BatchEntry| {
        let (_, cache) = model.forward(&ds.sample(e.index).x).unwrap();
        model.backward(&cache, &grad).unwrap()
    };

    let mut g = c.benchmark_group("teacher_forward_backward_180");
    g.bench_function("sequential", |b| b.iter(|| black_box(par::map_sequential(&batch.entries, step))));
    #[cfg(feature = "parallel")]
    g.bench_function("parallel", |b| b.iter(|| black_box(par::map_parallel(&batch.entries, step))));
    g.finish();
}

fn embed_dataset(c: &mut Criterion) {
    let ds = generate_hierarchical(&HierarchySpec::default()).unwrap();
    let model = MlpArch::student_default().init(ds.input_dim(), &mut Rng::new(0)).unwrap();
    let embed = |s: &triplet_distill::data::Sample| model.forward(&s.x).unwrap().0;

    let mut g = c.benchmark_group("student_embed_dataset");
    g.bench_function("sequential", |b| b.iter(|| black_box(par::map_sequential(ds.samples(), embed))));
    #[cfg(feature = "parallel")]
    g.bench_function("parallel", |b| b.iter(|| black_box(par::map_parallel(ds.samples(), embed))));
    g.finish();
}

criterion_group!(benches, forward_backward, embed_dataset);
criterion_main!(benches);
