use std::ops::Range;

use super::vocab::{TokenId, Vocabulary, CLS, PAD, SEP};
use crate::kg::{EntityId, KnowledgeGraph, RelationId};

/// Regions of a triple sequence, in sequence order:
/// `[CLS] head head-desc [SEP] relation [SEP] tail tail-desc [SEP]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    Cls,
    Head,
    HeadDesc,
    Sep1,
    Relation,
    Sep2,
    Tail,
    TailDesc,
    Sep3,
}

impl Region {
    pub const ALL: [Region; 9] = [
        Region::Cls,
        Region::Head,
        Region::HeadDesc,
        Region::Sep1,
        Region::Relation,
        Region::Sep2,
        Region::Tail,
        Region::TailDesc,
        Region::Sep3,
    ];

    fn slot(self) -> usize {
        self as usize
    }

    pub fn is_separator(self) -> bool {
        matches!(
            self,
            Region::Cls | Region::Sep1 | Region::Sep2 | Region::Sep3
        )
    }

    /// Lower classes are truncated first: descriptions, then entity names, then the
    /// relation. Separators are never truncated.
    fn truncation_class(self) -> Option<usize> {
        match self {
            Region::HeadDesc | Region::TailDesc => Some(0),
            Region::Head | Region::Tail => Some(1),
            Region::Relation => Some(2),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

/// A padded token sequence together with the span of every region.
///
/// Regions absent from a layout (the tail regions of a query pair, say) have empty
/// spans. Content always occupies a prefix; the rest is `PAD`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    pub tokens: Vec<TokenId>,
    spans: [Span; 9],
    len: usize,
}

impl SequenceLayout {
    pub fn span(&self, region: Region) -> Span {
        self.spans[region.slot()]
    }

    pub fn region_tokens(&self, region: Region) -> &[TokenId] {
        &self.tokens[self.span(region).range()]
    }

    /// Length of the non-`PAD` prefix.
    pub fn content_len(&self) -> usize {
        self.len
    }

    pub fn max_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn attention_mask(&self) -> Vec<bool> {
        (0..self.tokens.len()).map(|i| i < self.len).collect()
    }

    pub fn content(&self) -> &[TokenId] {
        &self.tokens[..self.len]
    }
}

/// Lays out `parts` in order, truncating content regions to fit `max_len`.
///
/// When over budget, descriptions shrink first in proportion to their lengths, then
/// entity names, and the relation only if nothing else is left. Each region keeps a
/// prefix of its tokens.
pub fn assemble(parts: &[(Region, &[TokenId])], max_len: usize) -> SequenceLayout {
    let separators = parts.iter().filter(|(r, _)| r.is_separator()).count();
    assert!(
        max_len >= separators,
        "max_len {max_len} cannot hold {separators} separators"
    );
    let mut lens: Vec<usize> = parts.iter().map(|(_, t)| t.len()).collect();
    let total: usize = lens.iter().sum();
    let mut excess = total.saturating_sub(max_len);
    for class in 0..3 {
        if excess == 0 {
            break;
        }
        let members: Vec<usize> = (0..parts.len())
            .filter(|&i| parts[i].0.truncation_class() == Some(class))
            .collect();
        let class_total: usize = members.iter().map(|&i| lens[i]).sum();
        let cut = excess.min(class_total);
        let mut sub: Vec<usize> = members.iter().map(|&i| lens[i]).collect();
        shrink_proportionally(&mut sub, class_total - cut);
        for (k, &i) in members.iter().enumerate() {
            lens[i] = sub[k];
        }
        excess -= cut;
    }

    let mut tokens = Vec::with_capacity(max_len);
    let mut spans = [Span::default(); 9];
    let mut present = [false; 9];
    for ((region, toks), &keep) in parts.iter().zip(&lens) {
        let start = tokens.len();
        tokens.extend_from_slice(&toks[..keep]);
        spans[region.slot()] = Span {
            start,
            end: tokens.len(),
        };
        present[region.slot()] = true;
    }
    // absent regions get an empty span where they would have started
    let mut cursor = 0;
    for region in Region::ALL {
        if present[region.slot()] {
            cursor = spans[region.slot()].end;
        } else {
            spans[region.slot()] = Span {
                start: cursor,
                end: cursor,
            };
        }
    }
    let len = tokens.len();
    tokens.resize(max_len, PAD);
    SequenceLayout { tokens, spans, len }
}

/// Scales `lens` down to sum to `target` (≤ current sum): floors of the proportional
/// shares, with the remainder going to the largest fractional parts, earlier first.
fn shrink_proportionally(lens: &mut [usize], target: usize) {
    let total: usize = lens.iter().sum();
    if total <= target {
        return;
    }
    if total == 0 {
        return;
    }
    let mut shares: Vec<(usize, usize, usize)> = lens
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let num = l * target;
            (i, num / total, num % total)
        })
        .collect();
    let assigned: usize = shares.iter().map(|s| s.1).sum();
    let mut rest = target - assigned;
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| shares[b].2.cmp(&shares[a].2).then(a.cmp(&b)));
    for i in order {
        if rest == 0 {
            break;
        }
        if shares[i].1 < lens[shares[i].0] {
            shares[i].1 += 1;
            rest -= 1;
        }
    }
    for (i, keep, _) in shares {
        lens[i] = keep;
    }
}

/// Pre-tokenized entity and relation texts of a graph.
#[derive(Debug, Clone)]
pub struct TokenizedKg {
    pub names: Vec<Vec<TokenId>>,
    pub descriptions: Vec<Vec<TokenId>>,
    pub relations: Vec<Vec<TokenId>>,
}

impl TokenizedKg {
    pub fn new(kg: &KnowledgeGraph, vocab: &Vocabulary) -> Self {
        TokenizedKg {
            names: kg.entities.iter().map(|e| vocab.tokenize(&e.name)).collect(),
            descriptions: kg
                .entities
                .iter()
                .map(|e| vocab.tokenize(&e.description))
                .collect(),
            relations: kg.relations.iter().map(|r| vocab.tokenize(&r.text)).collect(),
        }
    }

    pub fn num_entities(&self) -> usize {
        self.names.len()
    }

    /// `[CLS] E_h D_h [SEP] R [SEP] E_t D_t [SEP]`
    pub fn triple_sequence(
        &self,
        head: EntityId,
        relation: RelationId,
        tail: EntityId,
        max_len: usize,
    ) -> SequenceLayout {
        assemble(
            &[
                (Region::Cls, &[CLS]),
                (Region::Head, &self.names[head.index()]),
                (Region::HeadDesc, &self.descriptions[head.index()]),
                (Region::Sep1, &[SEP]),
                (Region::Relation, &self.relations[relation.index()]),
                (Region::Sep2, &[SEP]),
                (Region::Tail, &self.names[tail.index()]),
                (Region::TailDesc, &self.descriptions[tail.index()]),
                (Region::Sep3, &[SEP]),
            ],
            max_len,
        )
    }

    /// `[CLS] E_h D_h [SEP] R [SEP]`
    pub fn pair_sequence(
        &self,
        head: EntityId,
        relation: RelationId,
        max_len: usize,
    ) -> SequenceLayout {
        pair_from_tokens(
            &self.names[head.index()],
            &self.descriptions[head.index()],
            &self.relations[relation.index()],
            max_len,
        )
    }

    /// `[CLS] E D [SEP]`
    pub fn entity_sequence(&self, entity: EntityId, max_len: usize) -> SequenceLayout {
        assemble(
            &[
                (Region::Cls, &[CLS]),
                (Region::Tail, &self.names[entity.index()]),
                (Region::TailDesc, &self.descriptions[entity.index()]),
                (Region::Sep3, &[SEP]),
            ],
            max_len,
        )
    }
}

/// Query-pair layout from already tokenized texts (used for free-text heads).
pub fn pair_from_tokens(
    name: &[TokenId],
    description: &[TokenId],
    relation: &[TokenId],
    max_len: usize,
) -> SequenceLayout {
    assemble(
        &[
            (Region::Cls, &[CLS]),
            (Region::Head, name),
            (Region::HeadDesc, description),
            (Region::Sep1, &[SEP]),
            (Region::Relation, relation),
            (Region::Sep2, &[SEP]),
        ],
        max_len,
    )
}
