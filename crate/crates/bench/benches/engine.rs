use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use semformer_bench::{desk_fixture, random_tensor};
use semformer_core::objectives::ObjectiveKind;
use semformer_core::pathstar::PathSolver;
use semformer_core::{Graph, ParamStore, Tensor};

fn matmul(c: &mut Criterion) {
    let a = random_tensor(&[1440, 256], 1);
    let b = random_tensor(&[256, 1024], 2);
    c.bench_function("matmul 1440x256x1024", |bch| bch.iter(|| black_box(a.matmul(&b).unwrap())));
}

fn attention(c: &mut Criterion) {
    let store = ParamStore::new();
    let q = random_tensor(&[32 * 45, 256], 3);
    let k = random_tensor(&[32 * 45, 256], 4);
    let v = random_tensor(&[32 * 45, 256], 5);
    c.bench_function("attention fwd+bwd 32x45 8 heads", |bch| {
        bch.iter(|| {
            let mut g = Graph::new(&store);
            let (q, k, v) = (g.variable(q.clone()), g.variable(k.clone()), g.variable(v.clone()));
            let out = g.attention_batched(q, k, v, 8, true, 32).unwrap();
            let zero = g.constant(Tensor::zeros(&[32 * 45, 256]));
            let loss = g.l2_distance_sq(out, zero).unwrap();
            black_box(g.backward(loss).unwrap())
        })
    });
}

fn training_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("loss fwd+bwd batch 8");
    group.sample_size(10);
    for kind in [ObjectiveKind::Standard, ObjectiveKind::Semformer] {
        let (model, samples) = desk_fixture(kind, 8);
        let batch: Vec<_> = samples.iter().map(|s| (s.prefix.as_slice(), s.answer.as_slice())).collect();
        group.bench_function(kind.name(), |bch| {
            bch.iter_batched(
                || Graph::new(&model.store),
                |mut g| {
                    let nodes = model.batch_loss(&mut g, &batch, None).unwrap();
                    black_box(g.backward(nodes.total).unwrap())
                },
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

fn decoding(c: &mut Criterion) {
    let (model, samples) = desk_fixture(ObjectiveKind::Standard, 1);
    let s = &samples[0];
    c.bench_function("greedy decode G(2,5)", |bch| {
        bch.iter(|| black_box(model.solve(&s.prefix, &[], s.answer.len()).unwrap()))
    });
}

criterion_group!(benches, matmul, attention, training_step, decoding);
criterion_main!(benches);
