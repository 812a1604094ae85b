use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lpbert_core::eval::{evaluate_scores, split_queries};
use lpbert_core::kg::{augment_inverse, build_filter_index, FilterScope, KnowledgeGraph, Split, Triple};
use lpbert_core::model::{EncoderConfig, Model, TokenBatch};
use lpbert_core::sampler::{build_epoch, PretrainMode};
use lpbert_core::text::{build_vocab, TokenizedKg};
use lpbert_core::Exec;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: [&str; 12] = [
    "acid", "cell", "gene", "organ", "tissue", "protein", "drug", "sign", "fluid", "body", "agent", "process",
];

fn graph(entities: usize, triples: usize) -> KnowledgeGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rows = Vec::new();
    for i in 0..triples {
        let h = rng.random_range(0..entities);
        let t = rng.random_range(0..entities);
        rows.push((format!("e{h}"), format!("r{}", i % 8), format!("e{t}")));
    }
    rows.sort();
    rows.dedup();
    let test = rows.split_off(rows.len() * 9 / 10);
    let mut kg = KnowledgeGraph::from_raw(&rows, &test[..1], &test);
    for e in 0..entities {
        let desc: Vec<&str> = (0..12).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
        kg.set_entity_text(&format!("e{e}"), WORDS[e % WORDS.len()], &desc.join(" "));
    }
    augment_inverse(kg).unwrap()
}

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn sampler(c: &mut Criterion) {
    let kg = graph(500, 5000);
    let vocab = build_vocab(&kg, 1).unwrap();
    let texts = TokenizedKg::new(&kg, &vocab);
    let train: Vec<Triple> = kg.base_triples(Split::Train).copied().collect();
    let mut g = c.benchmark_group("build_epoch");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| build_epoch(&train, &texts, vocab.len(), 64, PretrainMode::Multitask, 1, 0, black_box(exec)))
        });
    }
    g.finish();
}

fn encoder(c: &mut Criterion) {
    let kg = graph(200, 1000);
    let vocab = build_vocab(&kg, 1).unwrap();
    let texts = TokenizedKg::new(&kg, &vocab);
    let layouts: Vec<_> = (0..64)
        .map(|e| texts.entity_sequence(lpbert_core::kg::EntityId(e), 32))
        .collect();
    let batch = TokenBatch::from_layouts(&layouts);
    let mut g = c.benchmark_group("encoder_forward");
    g.sample_size(20);
    for (name, exec) in MODES {
        let model = Model::<f32>::init(EncoderConfig::compact(vocab.len()), 0).unwrap().with_exec(exec);
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| model.encode_pooled(black_box(&batch)).unwrap())
        });
    }
    g.finish();
}

fn ranking(c: &mut Criterion) {
    let kg = graph(2000, 20000);
    let queries = split_queries(&kg, Split::Test).unwrap();
    let filter = build_filter_index(&kg, FilterScope::All);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scores = Array2::from_shape_fn((queries.len(), kg.entities.len()), |_| rng.random::<f64>());
    let mut g = c.benchmark_group("rank_queries");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate_scores("test", &queries, scores.view(), &filter, black_box(exec)).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, sampler, encoder, ranking);
criterion_main!(benches);
