use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EntityId, KnowledgeGraph, Triple};
use crate::{Error, Result};

/// Result of [`resplit_unseen`]: the re-partitioned graph and the entities held out.
#[derive(Debug, Clone)]
pub struct UnseenSplit {
    pub graph: KnowledgeGraph,
    pub valid_entities: Vec<EntityId>,
    pub test_entities: Vec<EntityId>,
}

/// Re-partitions all triples so that held-out entities never occur in training.
///
/// `⌊ratio·|E|⌋` entities are drawn for test and as many again for validation. Every
/// triple touching a test entity goes to test; otherwise, touching a validation entity
/// sends it to validation; all remaining triples are training triples.
pub fn resplit_unseen(kg: &KnowledgeGraph, ratio: f64, seed: u64) -> Result<UnseenSplit> {
    if !(ratio > 0.0 && ratio < 0.5) {
        return Err(Error::InvalidRatio(ratio));
    }
    if kg.is_augmented() {
        return Err(Error::Config(
            "resplit before inverse augmentation".to_string(),
        ));
    }
    let n = kg.entities.len();
    let held = (ratio * n as f64).floor() as usize;

    let mut order: Vec<EntityId> = (0..n as u32).map(EntityId).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test_entities = order[..held].to_vec();
    let mut valid_entities = order[held..2 * held].to_vec();
    test_entities.sort_unstable();
    valid_entities.sort_unstable();

    let test_set: HashSet<EntityId> = test_entities.iter().copied().collect();
    let valid_set: HashSet<EntityId> = valid_entities.iter().copied().collect();
    let touches = |t: &Triple, s: &HashSet<EntityId>| s.contains(&t.head) || s.contains(&t.tail);

    let mut graph = kg.clone();
    graph.train.clear();
    graph.valid.clear();
    graph.test.clear();
    let mut seen = HashSet::new();
    for t in kg.all_triples() {
        if !seen.insert(*t) {
            continue;
        }
        if touches(t, &test_set) {
            graph.test.push(*t);
        } else if touches(t, &valid_set) {
            graph.valid.push(*t);
        } else {
            graph.train.push(*t);
        }
    }

    Ok(UnseenSplit {
        graph,
        valid_entities,
        test_entities,
    })
}
