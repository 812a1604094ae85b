use std::collections::{HashMap, HashSet};

use lpbert_core::eval::{
    cosine_matrix, evaluate, evaluate_scores, rank_query, split_queries, EncodeConfig, RankingReport,
};
use lpbert_core::kg::{augment_inverse, build_filter_index, FilterScope, KnowledgeGraph, Split};
use lpbert_core::model::{EncoderConfig, Model, Params};
use lpbert_core::text::{build_vocab, TokenizedKg};
use lpbert_core::Exec;
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Raw = (String, String, String);

fn random_kg(rng: &mut ChaCha8Rng) -> KnowledgeGraph {
    let n_ent = rng.random_range(2..=50);
    let n_rel = rng.random_range(1..=5);
    let n_triples = rng.random_range(3..=120);
    let mut seen = HashSet::new();
    let mut splits: [Vec<Raw>; 3] = Default::default();
    for _ in 0..n_triples {
        let t = (
            format!("e{:02}", rng.random_range(0..n_ent)),
            format!("r{}", rng.random_range(0..n_rel)),
            format!("e{:02}", rng.random_range(0..n_ent)),
        );
        if !seen.insert(t.clone()) {
            continue;
        }
        // every split gets at least one triple
        let k = seen.len() - 1;
        let s = if k < 3 { k } else { [0, 0, 0, 1, 2][rng.random_range(0..5)] };
        splits[s].push(t);
    }
    augment_inverse(KnowledgeGraph::from_raw(&splits[0], &splits[1], &splits[2])).unwrap()
}

/// Full score list, explicit filtering from a scan over all triples, stable sort.
fn naive_rank(kg: &KnowledgeGraph, entity: u32, relation: u32, gold: u32, scores: &[f64]) -> usize {
    let known: HashSet<u32> = kg
        .all_triples()
        .filter(|t| t.head.0 == entity && t.relation.0 == relation && t.tail.0 != gold)
        .map(|t| t.tail.0)
        .collect();
    let mut cands: Vec<(u32, f64)> = (0..scores.len() as u32)
        .filter(|e| !known.contains(e))
        .map(|e| (e, scores[e as usize]))
        .collect();
    cands.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    let g = scores[gold as usize];
    let first = cands.iter().position(|c| c.1 == g).unwrap();
    let group = cands.iter().filter(|c| c.1 == g).count();
    first + 1 + (group - 1).div_ceil(2)
}

fn naive_metrics(ranks: &[usize]) -> (f64, f64, f64, f64, f64) {
    let n = ranks.len() as f64;
    let hits = |k| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    let mr = ranks.iter().map(|&r| r as f64).sum::<f64>() / n;
    let mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
    (hits(1), hits(3), hits(10), mr, mrr)
}

fn metrics(r: &RankingReport) -> (f64, f64, f64, f64, f64) {
    (r.hits1, r.hits3, r.hits10, r.mr, r.mrr)
}

#[test]
fn evaluator_matches_brute_force_on_random_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for round in 0..150 {
        let kg = random_kg(&mut rng);
        let filter = build_filter_index(&kg, FilterScope::All);
        for split in [Split::Valid, Split::Test] {
            let queries = split_queries(&kg, split).unwrap();
            let n_ent = kg.entities.len();
            // coarse levels force ties
            let scores =
                Array2::from_shape_fn((queries.len(), n_ent), |_| rng.random_range(0..5) as f64 / 4.0);
            let report = evaluate_scores("x", &queries, scores.view(), &filter, Exec::Sequential).unwrap();
            let naive: Vec<usize> = queries
                .iter()
                .enumerate()
                .map(|(i, q)| {
                    naive_rank(&kg, q.key.entity.0, q.key.relation.0, q.gold.0, scores.row(i).as_slice().unwrap())
                })
                .collect();
            let ours: Vec<usize> = report.per_query.iter().map(|q| q.rank).collect();
            assert_eq!(ours, naive, "round {round}");
            assert_eq!(metrics(&report), naive_metrics(&naive), "round {round}");
            let par = evaluate_scores("x", &queries, scores.view(), &filter, Exec::Parallel).unwrap();
            assert_eq!(par, report);
        }
    }
}

#[test]
fn label_and_filter_indices_match_dictionary_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let kg = random_kg(&mut rng);
        for scope in [FilterScope::All, FilterScope::TrainOnly] {
            let filter = build_filter_index(&kg, scope);
            let triples: Vec<_> = match scope {
                FilterScope::All => kg.all_triples().copied().collect(),
                FilterScope::TrainOnly => kg.train.clone(),
            };
            let mut dict: HashMap<(u32, u32), HashSet<u32>> = HashMap::new();
            for t in &triples {
                dict.entry((t.head.0, t.relation.0)).or_default().insert(t.tail.0);
            }
            let n = rng.random_range(1..=kg.train.len().min(16));
            let batch: Vec<_> = (0..n).map(|_| kg.train[rng.random_range(0..kg.train.len())]).collect();
            let y = lpbert_core::finetune::build_label_matrix(&batch, &filter);
            for i in 0..n {
                for j in 0..n {
                    let q = batch[i];
                    let expected = i == j
                        || dict
                            .get(&(q.head.0, q.relation.0))
                            .is_some_and(|s| s.contains(&batch[j].tail.0));
                    assert_eq!(y[[i, j]], expected as i8);
                }
            }
        }
    }
}

fn toy() -> KnowledgeGraph {
    let t = |h: &str, t: &str| (h.to_string(), "r".to_string(), t.to_string());
    let test = vec![t("a", "b"), t("a", "c"), t("b", "c")];
    augment_inverse(KnowledgeGraph::from_raw(&[], &[], &test)).unwrap()
}

#[test]
fn three_triple_graph_with_hand_set_embeddings() {
    let kg = toy();
    let filter = build_filter_index(&kg, FilterScope::All);
    let queries = split_queries(&kg, Split::Test).unwrap();
    // entities a, b, c on the axes; a query vector's components are its cosine scores up to scale
    let entities = Array2::<f64>::eye(3);
    let pairs = array![
        [3.0, 2.0, 1.0], // (a, r) -> b: a higher, c filtered
        [1.0, 1.0, 1.0], // (b, r_rev) -> a: two ties
        [1.0, 2.0, 3.0], // (a, r) -> c: top
        [0.0, 3.0, 1.0], // (c, r_rev) -> a: b filtered, c higher
        [3.0, 2.0, 1.0], // (b, r) -> c: last
        [2.0, 1.0, 0.0], // (c, r_rev) -> b: a filtered
    ];
    let scores = cosine_matrix(pairs.view(), entities.view());
    let r = evaluate_scores("test", &queries, scores.view(), &filter, Exec::Sequential).unwrap();
    let ranks: Vec<usize> = r.per_query.iter().map(|q| q.rank).collect();
    assert_eq!(ranks, [2, 2, 1, 2, 3, 1]);
    let close = |a: f64, b: f64| assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    close(r.hits1, 2.0 / 6.0);
    close(r.hits3, 1.0);
    close(r.hits10, 1.0);
    close(r.mr, 11.0 / 6.0);
    close(r.mrr, 23.0 / 36.0);
}

#[test]
fn filtering_lowers_rank_of_query_with_known_competitor() {
    let kg = toy();
    let filter = build_filter_index(&kg, FilterScope::All);
    let q = split_queries(&kg, Split::Test).unwrap()[3];
    let s = array![0.0, 3.0, 1.0];
    let filtered = rank_query(s.view(), q.gold, filter.get(q.key.entity, q.key.relation)).unwrap();
    let raw = rank_query(s.view(), q.gold, &[]).unwrap();
    assert_eq!((filtered, raw), (2, 3));
}

#[test]
fn query_count_is_twice_the_split() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let kg = random_kg(&mut rng);
        for split in Split::ALL {
            let base = kg.base_triples(split).count();
            assert_eq!(split_queries(&kg, split).unwrap().len(), 2 * base);
        }
    }
}

#[test]
fn unaugmented_graph_is_rejected() {
    let t = vec![("a".to_string(), "r".to_string(), "b".to_string())];
    let kg = KnowledgeGraph::from_raw(&t, &t, &t);
    assert!(split_queries(&kg, Split::Test).is_err());
}

fn tiny_config(vocab: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size: vocab,
        hidden: 8,
        layers: 1,
        heads: 2,
        ff: 16,
        max_len: 32,
        dropout: 0.1,
    }
}

#[test]
fn constant_embedding_model_hits_mid_rank_for_every_query() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let kg = random_kg(&mut rng);
    let vocab = build_vocab(&kg, 1).unwrap();
    let texts = TokenizedKg::new(&kg, &vocab);
    let cfg = tiny_config(vocab.len());
    let params: Params<f64> = Model::<f64>::init(cfg.clone(), 1).unwrap().params.zeros_like();
    // all-zero parameters give zero vectors, so every cosine is 0
    let model = Model::from_params(cfg, params);
    let filter = build_filter_index(&kg, FilterScope::All);
    let enc = EncodeConfig { pair_max_len: 32, entity_max_len: 16, batch_size: 7 };
    let r = evaluate(&model, &kg, &texts, Split::Test, &filter, &enc).unwrap();
    let n = kg.entities.len();
    for q in &r.per_query {
        let known = filter.get(q.query.entity, q.query.relation);
        let others = n - known.iter().filter(|&&e| e != q.gold).count() - 1;
        assert_eq!(q.rank, 1 + others.div_ceil(2));
    }
    assert!(r.hits1 <= r.hits3 && r.hits3 <= r.hits10);
    assert!(r.mrr >= 1.0 / r.mr);
}

#[test]
fn evaluation_is_deterministic_and_exec_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let kg = random_kg(&mut rng);
    let vocab = build_vocab(&kg, 1).unwrap();
    let texts = TokenizedKg::new(&kg, &vocab);
    let model = Model::<f64>::init(tiny_config(vocab.len()), 2).unwrap();
    let filter = build_filter_index(&kg, FilterScope::All);
    let enc = EncodeConfig { pair_max_len: 32, entity_max_len: 16, batch_size: 5 };
    let a = evaluate(&model, &kg, &texts, Split::Valid, &filter, &enc).unwrap();
    let b = evaluate(&model.clone().with_exec(Exec::Sequential), &kg, &texts, Split::Valid, &filter, &enc).unwrap();
    assert_eq!(a, b);
    let table = lpbert_core::eval::entity_table(&model, &texts, &enc).unwrap();
    assert_eq!(table.nrows(), kg.entities.len());
    assert!(table.iter().all(|x| x.is_finite()));
}

proptest! {
    #[test]
    fn report_metrics_are_ordered(ranks in prop::collection::vec(1usize..200, 1..300)) {
        let per_query = ranks.iter().map(|&rank| lpbert_core::eval::QueryRank {
            query: lpbert_core::eval::QueryKey {
                entity: lpbert_core::kg::EntityId(0),
                relation: lpbert_core::kg::RelationId(0),
            },
            gold: lpbert_core::kg::EntityId(0),
            rank,
        }).collect();
        let r = RankingReport::from_ranks("p", per_query);
        prop_assert!(r.hits1 <= r.hits3 && r.hits3 <= r.hits10);
        prop_assert!(r.mr >= 1.0);
        prop_assert!(r.mrr > 0.0 && r.mrr <= 1.0);
        prop_assert!(r.mrr >= 1.0 / r.mr - 1e-12);
    }
}
