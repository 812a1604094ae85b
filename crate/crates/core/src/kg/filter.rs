use std::collections::HashMap;

use super::{EntityId, KnowledgeGraph, RelationId, Split};

/// Which splits contribute known-true completions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FilterScope {
    /// train ∪ valid ∪ test, the filtered ranking protocol.
    #[default]
    All,
    /// Training triples only, for building training-time labels without test leakage.
    TrainOnly,
}

/// All entities completing a true triple for a `(entity, relation)` query key.
///
/// Tail queries use `(h, r)`; head queries are `(t, r_rev)` once the graph carries
/// inverse relations.
#[derive(Debug, Clone, Default)]
pub struct FilterIndex {
    map: HashMap<(EntityId, RelationId), Vec<EntityId>>,
}

impl FilterIndex {
    /// Sorted completions; empty for keys absent from the graph.
    pub fn get(&self, entity: EntityId, relation: RelationId) -> &[EntityId] {
        self.map
            .get(&(entity, relation))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn contains(&self, entity: EntityId, relation: RelationId, candidate: EntityId) -> bool {
        self.get(entity, relation).binary_search(&candidate).is_ok()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, entity: EntityId, relation: RelationId, tail: EntityId) {
        let v = self.map.entry((entity, relation)).or_default();
        if let Err(pos) = v.binary_search(&tail) {
            v.insert(pos, tail);
        }
    }
}

/// Indexes every triple in scope. Head-query entries exist exactly when the graph
/// has been augmented, since they come from the mirrored triples.
pub fn build_filter_index(kg: &KnowledgeGraph, scope: FilterScope) -> FilterIndex {
    let mut map: HashMap<(EntityId, RelationId), Vec<EntityId>> = HashMap::new();
    let splits: &[Split] = match scope {
        FilterScope::All => &Split::ALL,
        FilterScope::TrainOnly => &[Split::Train],
    };
    for &split in splits {
        for t in kg.split(split) {
            map.entry((t.head, t.relation)).or_default().push(t.tail);
        }
    }
    for v in map.values_mut() {
        v.sort_unstable();
        v.dedup();
    }
    FilterIndex { map }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::augment_inverse;

    fn e(i: u32) -> EntityId {
        EntityId(i)
    }

    #[test]
    fn tail_sets_by_hand() {
        // A=0, B=1, C=2; r=0
        let kg = KnowledgeGraph::from_raw(&[("A", "r", "B"), ("A", "r", "C")], &[], &[]);
        let idx = build_filter_index(&kg, FilterScope::All);
        assert_eq!(idx.get(e(0), RelationId(0)), &[e(1), e(2)]);
        assert!(idx.get(e(1), RelationId(0)).is_empty());
    }

    #[test]
    fn augmented_three_triple_graph_enumerated() {
        // A=0 B=1 C=2; r=0 s=1; inverses r_rev=2 s_rev=3
        let kg = KnowledgeGraph::from_raw(
            &[("A", "r", "B"), ("A", "r", "C")],
            &[("B", "s", "C")],
            &[],
        );
        let kg = augment_inverse(kg).unwrap();
        let idx = build_filter_index(&kg, FilterScope::All);
        let r = RelationId(0);
        let s = RelationId(1);
        let r_rev = RelationId(2);
        let s_rev = RelationId(3);
        assert_eq!(idx.get(e(0), r), &[e(1), e(2)]);
        assert_eq!(idx.get(e(1), s), &[e(2)]);
        assert_eq!(idx.get(e(1), r_rev), &[e(0)]);
        assert_eq!(idx.get(e(2), r_rev), &[e(0)]);
        assert_eq!(idx.get(e(2), s_rev), &[e(1)]);
        assert_eq!(idx.len(), 5);

        let train_only = build_filter_index(&kg, FilterScope::TrainOnly);
        assert!(train_only.get(e(1), s).is_empty());
        assert_eq!(train_only.len(), 3);
    }

    #[test]
    fn every_gold_is_indexed() {
        let kg = KnowledgeGraph::from_raw(
            &[("A", "r", "B"), ("B", "r", "C"), ("C", "q", "A")],
            &[("A", "q", "C")],
            &[("B", "q", "B")],
        );
        let kg = augment_inverse(kg).unwrap();
        let idx = build_filter_index(&kg, FilterScope::All);
        for t in kg.all_triples() {
            assert!(idx.contains(t.head, t.relation, t.tail));
            let inv = kg.inverse(t.relation).unwrap();
            assert!(idx.contains(t.tail, inv, t.head));
        }
    }
}
