use super::{KnowledgeGraph, Relation, RelationId, Split, Triple};
use crate::{Error, Result};

/// Word prepended to a base relation's text to form its inverse's text.
pub const INVERSE_MARKER: &str = "reverse";

/// Doubles the relation catalog with inverse relations and mirrors every triple
/// `(h, r, t)` of every split as `(t, r_rev, h)` in the same split.
///
/// Relation `r` gets the inverse `r + R` where `R` is the base relation count, so a
/// head query `(?, r, t)` can be asked as the tail query `(t, r_rev, ?)`.
pub fn augment_inverse(mut kg: KnowledgeGraph) -> Result<KnowledgeGraph> {
    if kg.is_augmented() {
        return Err(Error::AlreadyAugmented);
    }
    let base = kg.base_relations as u32;
    let inverses: Vec<Relation> = kg
        .relations
        .iter()
        .enumerate()
        .map(|(i, r)| Relation {
            raw: format!("{}_{INVERSE_MARKER}", r.raw),
            text: format!("{INVERSE_MARKER} {}", r.text),
            inverse_of: Some(RelationId(i as u32)),
        })
        .collect();
    kg.relations.extend(inverses);

    for split in Split::ALL {
        let triples = kg.split_mut(split);
        let mirrored: Vec<Triple> = triples
            .iter()
            .map(|t| Triple {
                head: t.tail,
                relation: RelationId(t.relation.0 + base),
                tail: t.head,
            })
            .collect();
        triples.extend(mirrored);
    }
    Ok(kg)
}
