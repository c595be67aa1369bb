//! Sequential against rayon execution for the crate's parallel loops. Build
//! with `--no-default-features` to see the fallback, where both arms run
//! sequentially.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use samlab::models::{Activation, MlpSpec, ModelSpec, TransformerSpec};
use samlab::objective::{fd_gradient, OnBatch};
use samlab::rng::Stream;
use samlab::sam::{sam_gradient, SamConfig, ASCENT_STREAM};
use samlab::sharpness::{loss_surface_slice, random_direction, sharpness_probe};
use samlab::tasks::{gen_seq_lookup, gen_spirals};
use samlab::{Exec, LossFn};

const MODES: [(&str, Exec); 2] = [
    ("sequential", Exec::Sequential),
    ("parallel", Exec::Parallel),
];

fn transformer() -> ModelSpec {
    ModelSpec::Transformer(TransformerSpec {
        vocab_size: 16,
        model_dim: 32,
        num_heads: 2,
        ff_dim: 64,
        max_seq_len: 5,
        num_layers: 2,
        init_seed: 0,
    })
}

fn spirals_mlp() -> ModelSpec {
    ModelSpec::Mlp(MlpSpec::new(vec![2, 16, 16, 2], Activation::Relu, 0))
}

fn m_sharpness(c: &mut Criterion) {
    let model = transformer();
    let params = model.init().unwrap();
    let batch = gen_seq_lookup(128, 16, 5, 1).unwrap().as_batch();
    let mut group = c.benchmark_group("sam_gradient_m4");
    for (name, exec) in MODES {
        let cfg = SamConfig {
            m: 4,
            ..SamConfig::default()
        };
        group.bench_function(name, |b| {
            b.iter(|| {
                let mut rng = Stream::new(0, 1, ASCENT_STREAM);
                sam_gradient(&model, &params, &batch, &cfg, &mut rng, exec).unwrap()
            })
        });
    }
    group.finish();
}

fn finite_differences(c: &mut Criterion) {
    let model = spirals_mlp();
    let params = model.init().unwrap();
    let batch = gen_spirals(64, 0.05, 3).unwrap().as_batch();
    let loss = OnBatch::new(&model, &batch);
    let mut group = c.benchmark_group("fd_gradient");
    for (name, exec) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| fd_gradient(|p| loss.loss(p), &params, 1e-5, exec).unwrap())
        });
    }
    group.finish();
}

fn probes_and_slices(c: &mut Criterion) {
    let model = spirals_mlp();
    let params = model.init().unwrap();
    let batch = gen_spirals(200, 0.05, 3).unwrap().as_batch();
    let loss = OnBatch::new(&model, &batch);
    let u = random_direction(&params, 0, 0);
    let v = random_direction(&params, 0, 1);
    let mut probe = c.benchmark_group("sharpness_probe_8_restarts");
    for (name, exec) in MODES {
        probe.bench_function(name, |b| {
            b.iter(|| sharpness_probe(&loss, &params, 0.15, 10, 8, 0, exec).unwrap())
        });
    }
    probe.finish();
    let mut slice = c.benchmark_group("loss_surface_slice");
    for (name, exec) in MODES {
        slice.bench_with_input(BenchmarkId::new(name, 15), &15, |b, &n| {
            b.iter(|| loss_surface_slice(&loss, &params, &u, &v, 1.0, n, exec).unwrap())
        });
    }
    slice.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = m_sharpness, finite_differences, probes_and_slices
}
criterion_main!(benches);
