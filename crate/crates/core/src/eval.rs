//! Filtered ranking evaluation.
//!
//! Every triple `(h, r, t)` yields a tail query `(h, r) -> t` and a head query
//! `(t, r_rev) -> h`. All entities are scored by cosine similarity against the
//! encoded query pair; known-true completions other than the gold are removed, and
//! ties with the gold count half (rounded up).

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::kg::{EntityId, FilterIndex, KnowledgeGraph, RelationId, Split};
use crate::model::{Float, Model, TokenBatch};
use crate::text::TokenizedKg;
use crate::{Error, Exec, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QueryKey {
    pub entity: EntityId,
    pub relation: RelationId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingQuery {
    pub key: QueryKey,
    pub gold: EntityId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRank {
    pub query: QueryKey,
    pub gold: EntityId,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub split: String,
    pub n_queries: usize,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub mr: f64,
    pub mrr: f64,
    pub per_query: Vec<QueryRank>,
}

impl RankingReport {
    /// Aggregates ranks in order.
    pub fn from_ranks(split: &str, per_query: Vec<QueryRank>) -> Self {
        let n = per_query.len();
        let mut hits = [0usize; 3];
        let mut sum_rank = 0.0;
        let mut sum_rr = 0.0;
        for q in &per_query {
            for (h, k) in hits.iter_mut().zip([1, 3, 10]) {
                if q.rank <= k {
                    *h += 1;
                }
            }
            sum_rank += q.rank as f64;
            sum_rr += 1.0 / q.rank as f64;
        }
        let denom = n.max(1) as f64;
        RankingReport {
            split: split.to_string(),
            n_queries: n,
            hits1: hits[0] as f64 / denom,
            hits3: hits[1] as f64 / denom,
            hits10: hits[2] as f64 / denom,
            mr: if n == 0 { 0.0 } else { sum_rank / denom },
            mrr: sum_rr / denom,
            per_query,
        }
    }
}

/// Both queries of every triple in `split`; the graph must carry inverse relations.
pub fn split_queries(kg: &KnowledgeGraph, split: Split) -> Result<Vec<RankingQuery>> {
    if !kg.is_augmented() {
        return Err(Error::Config(
            "ranking needs a graph with inverse relations for head queries".into(),
        ));
    }
    let mut out = Vec::new();
    for t in kg.base_triples(split) {
        let inv = kg.inverse(t.relation).expect("augmented graph");
        out.push(RankingQuery {
            key: QueryKey {
                entity: t.head,
                relation: t.relation,
            },
            gold: t.tail,
        });
        out.push(RankingQuery {
            key: QueryKey {
                entity: t.tail,
                relation: inv,
            },
            gold: t.head,
        });
    }
    Ok(out)
}

/// Filtered mid-rank of `gold` among `scores`; `known` is the sorted set of
/// known-true completions to discard (the gold itself is kept).
pub fn rank_query(scores: ArrayView1<f64>, gold: EntityId, known: &[EntityId]) -> Result<usize> {
    let g = gold.index();
    if g >= scores.len() {
        return Err(Error::UnknownEntity(format!(
            "{gold} (catalog has {} entities)",
            scores.len()
        )));
    }
    let target = scores[g];
    let mut greater = 0usize;
    let mut ties = 0usize;
    for (j, &s) in scores.iter().enumerate() {
        if j == g || known.binary_search(&EntityId(j as u32)).is_ok() {
            continue;
        }
        if s > target {
            greater += 1;
        } else if s == target {
            ties += 1;
        }
    }
    Ok(1 + greater + ties.div_ceil(2))
}

/// Ranks every query given its row of candidate scores `[queries, entities]`.
pub fn evaluate_scores(
    split: &str,
    queries: &[RankingQuery],
    scores: ArrayView2<f64>,
    filter: &FilterIndex,
    exec: Exec,
) -> Result<RankingReport> {
    let ranks = exec.map(queries.len(), |i| {
        let q = queries[i];
        let known = filter.get(q.key.entity, q.key.relation);
        rank_query(scores.row(i), q.gold, known).map(|rank| QueryRank {
            query: q.key,
            gold: q.gold,
            rank,
        })
    });
    let per_query = ranks.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(RankingReport::from_ranks(split, per_query))
}

/// Row-wise cosine similarity `a_i · b_j / (|a_i| |b_j|)`; zero-norm rows score 0.
pub fn cosine_matrix<A: Float>(a: ArrayView2<A>, b: ArrayView2<A>) -> Array2<f64> {
    let unit = |m: ArrayView2<A>| {
        let mut out = m.mapv(|x| x.to_f64().unwrap());
        for mut row in out.outer_iter_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row.mapv_inplace(|x| x / n);
            }
        }
        out
    };
    unit(a).dot(&unit(b).t())
}

/// Lengths and batch size for encoding queries and entities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncodeConfig {
    pub pair_max_len: usize,
    pub entity_max_len: usize,
    pub batch_size: usize,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        EncodeConfig {
            pair_max_len: 96,
            entity_max_len: 32,
            batch_size: 256,
        }
    }
}

/// Pooled vectors of every catalog entity, in catalog order.
pub fn entity_table<A: Float>(
    model: &Model<A>,
    texts: &TokenizedKg,
    cfg: &EncodeConfig,
) -> Result<Array2<A>> {
    let layouts: Vec<_> = (0..texts.num_entities())
        .map(|e| texts.entity_sequence(EntityId(e as u32), cfg.entity_max_len))
        .collect();
    encode_layouts(model, &layouts, cfg.batch_size)
}

/// Pooled vectors of `(entity, relation)` query pairs.
pub fn encode_pairs<A: Float>(
    model: &Model<A>,
    texts: &TokenizedKg,
    keys: &[QueryKey],
    cfg: &EncodeConfig,
) -> Result<Array2<A>> {
    let layouts: Vec<_> = keys
        .iter()
        .map(|k| texts.pair_sequence(k.entity, k.relation, cfg.pair_max_len))
        .collect();
    encode_layouts(model, &layouts, cfg.batch_size)
}

pub fn encode_layouts<A: Float>(
    model: &Model<A>,
    layouts: &[crate::text::SequenceLayout],
    batch_size: usize,
) -> Result<Array2<A>> {
    let mut parts = Vec::new();
    for chunk in layouts.chunks(batch_size.max(1)) {
        parts.push(model.encode_pooled(&TokenBatch::from_layouts(chunk))?);
    }
    if parts.is_empty() {
        return Ok(Array2::zeros((0, model.config.hidden)));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("equal widths"))
}

/// Encodes every query of `split` and ranks all catalog entities.
pub fn evaluate<A: Float>(
    model: &Model<A>,
    kg: &KnowledgeGraph,
    texts: &TokenizedKg,
    split: Split,
    filter: &FilterIndex,
    cfg: &EncodeConfig,
) -> Result<RankingReport> {
    let queries = split_queries(kg, split)?;
    evaluate_queries(model, texts, split.name(), &queries, filter, cfg)
}

pub fn evaluate_queries<A: Float>(
    model: &Model<A>,
    texts: &TokenizedKg,
    split: &str,
    queries: &[RankingQuery],
    filter: &FilterIndex,
    cfg: &EncodeConfig,
) -> Result<RankingReport> {
    let table = entity_table(model, texts, cfg)?;
    let keys: Vec<QueryKey> = queries.iter().map(|q| q.key).collect();
    let pairs = encode_pairs(model, texts, &keys, cfg)?;
    let scores = cosine_matrix(pairs.view(), table.view());
    evaluate_scores(split, queries, scores.view(), filter, model.exec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn e(i: u32) -> EntityId {
        EntityId(i)
    }

    #[test]
    fn strict_best_is_rank_one() {
        let s = array![0.1, 0.9, 0.3];
        assert_eq!(rank_query(s.view(), e(1), &[]).unwrap(), 1);
    }

    #[test]
    fn ties_take_the_rounded_up_middle() {
        let s = array![0.5, 0.5, 0.5, 0.5, 0.9];
        // one strictly greater, three ties besides the gold
        assert_eq!(rank_query(s.view(), e(0), &[]).unwrap(), 1 + 1 + 2);
    }

    #[test]
    fn filtering_removes_known_completions_but_not_gold() {
        let s = array![0.9, 0.8, 0.1];
        assert_eq!(rank_query(s.view(), e(1), &[]).unwrap(), 2);
        assert_eq!(rank_query(s.view(), e(1), &[e(0), e(1)]).unwrap(), 1);
    }

    #[test]
    fn gold_outside_catalog_is_an_error() {
        let s = array![0.9, 0.8];
        assert!(rank_query(s.view(), e(5), &[]).is_err());
    }

    #[test]
    fn perfect_ranking_report() {
        let ranks = (0..4)
            .map(|i| QueryRank {
                query: QueryKey {
                    entity: e(i),
                    relation: RelationId(0),
                },
                gold: e(i),
                rank: 1,
            })
            .collect();
        let r = RankingReport::from_ranks("test", ranks);
        assert_eq!((r.hits1, r.hits10, r.mr, r.mrr), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn cosine_of_zero_rows_is_zero() {
        let a = array![[0.0, 0.0], [1.0, 0.0]];
        let b = array![[2.0, 0.0], [0.0, 3.0]];
        let c = cosine_matrix(a.view(), b.view());
        assert_eq!(c, array![[0.0, 0.0], [1.0, 0.0]]);
    }
}
