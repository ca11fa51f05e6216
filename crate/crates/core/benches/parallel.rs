//! Sequential versus rayon execution of the data-parallel hot paths:
//! pseudo-labeling a pool with greedy decoding and scoring a corpus.

use std::hint::black_box;

use cqr_core::cotrain::build_vocab;
use cqr_core::domain::{DataPool, PoolItem};
use cqr_core::exec;
use cqr_core::genmodel::{GeneratorModel, ModelConfig, TinySeq2Seq};
use cqr_core::metrics::evaluate_corpus;
use cqr_core::weaklabel::synth_generate;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn pseudo_labeling(c: &mut Criterion) {
    let data = synth_generate(20, 3, 1).unwrap();
    let vocab = build_vocab(&data.labeled_examples(), &[&data.pool_s, &data.pool_r]);
    let model = TinySeq2Seq::new(
        vocab,
        ModelConfig {
            d_model: 32,
            ffn_dim: 64,
            ..Default::default()
        },
    )
    .unwrap();
    let items = DataPool::new(data.pool_r).unwrap().pending();
    let label = |item: &PoolItem| {
        model
            .generate(&item.history, &item.query, 16)
            .unwrap()
            .confidence
    };

    let mut group = c.benchmark_group("pseudo_label");
    group.sample_size(10);
    group.bench_with_input(
        BenchmarkId::new("sequential", items.len()),
        &items,
        |b, items| b.iter(|| black_box(exec::map_seq(items, label))),
    );
    #[cfg(feature = "parallel")]
    group.bench_with_input(
        BenchmarkId::new("rayon", items.len()),
        &items,
        |b, items| b.iter(|| black_box(exec::map_par(items, label))),
    );
    group.finish();
}

fn corpus_scoring(c: &mut Criterion) {
    let pairs: Vec<(String, String)> = synth_generate(1, 3, 2)
        .unwrap()
        .test_examples()
        .into_iter()
        .map(|e| (e.source, e.target))
        .collect();
    let chunks: Vec<&[(String, String)]> = pairs.chunks(8).collect();
    let score = |chunk: &&[(String, String)]| evaluate_corpus(chunk).unwrap().bleu4;

    let mut group = c.benchmark_group("evaluate_corpus");
    group.bench_function(BenchmarkId::new("sequential", pairs.len()), |b| {
        b.iter(|| black_box(exec::map_seq(&chunks, score)))
    });
    #[cfg(feature = "parallel")]
    group.bench_function(BenchmarkId::new("rayon", pairs.len()), |b| {
        b.iter(|| black_box(exec::map_par(&chunks, score)))
    });
    group.finish();
}

criterion_group!(benches, pseudo_labeling, corpus_scoring);
criterion_main!(benches);
