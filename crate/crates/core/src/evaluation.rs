//! Two-stage counterpart ranking, Hits@k and degree-gap bucketed accuracy.

use std::collections::BTreeMap;

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{NmnError, Result};
use crate::kg::{EntityId, KnowledgeGraph, MergedGraph};
use crate::matching::PairScorer;
use crate::neighborhood::l1_distance;

/// Ranked counterpart lists keyed by G1 entity id.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentRanking {
    pub rankings: BTreeMap<EntityId, Vec<(EntityId, f64)>>,
    pub rescreen_width: usize,
}

fn by_distance_then_id(a: &(usize, f64), b: &(usize, f64)) -> std::cmp::Ordering {
    a.1.total_cmp(&b.1).then(a.0.cmp(&b.0))
}

/// Stage-1 ranking of `pool` by L1 distance of encoder embeddings.
pub fn embedding_ranking(source: usize, embeddings: ArrayView2<f64>, pool: &[usize]) -> Vec<(usize, f64)> {
    let src = embeddings.row(source);
    let mut out: Vec<(usize, f64)> = pool.iter().map(|&c| (c, l1_distance(src, embeddings.row(c)))).collect();
    out.sort_by(by_distance_then_id);
    out
}

/// Ranks every node in `pool` for `source`: the `rescreen_width` closest by
/// embedding distance are re-ranked by matching distance, the rest keep
/// their embedding order behind them.
pub fn rank_counterparts(
    source: usize,
    scorer: &PairScorer<'_>,
    subgraphs: &[Vec<usize>],
    pool: &[usize],
    rescreen_width: usize,
) -> Vec<(usize, f64)> {
    let mut stage1 = embedding_ranking(source, scorer.embeddings(), pool);
    let c = rescreen_width.max(1).min(stage1.len());
    let tail = stage1.split_off(c);
    let mut head: Vec<(usize, f64)> = stage1
        .into_iter()
        .map(|(cand, _)| (cand, scorer.distance(source, &subgraphs[source], cand, &subgraphs[cand])))
        .collect();
    head.sort_by(by_distance_then_id);
    head.extend(tail);
    head
}

/// Ranks all `sources` in parallel; output order follows `sources`.
pub fn rank_all(
    sources: &[usize],
    scorer: &PairScorer<'_>,
    subgraphs: &[Vec<usize>],
    pool: &[usize],
    rescreen_width: usize,
) -> Vec<Vec<(usize, f64)>> {
    sources
        .par_iter()
        .map(|&s| rank_counterparts(s, scorer, subgraphs, pool, rescreen_width))
        .collect()
}

/// Converts node-level rankings into entity-id rankings.
pub fn to_alignment_ranking(
    merged: &MergedGraph,
    sources: &[usize],
    ranked: Vec<Vec<(usize, f64)>>,
    rescreen_width: usize,
) -> AlignmentRanking {
    let rankings = sources
        .iter()
        .zip(ranked)
        .map(|(&s, list)| {
            let ids = list.into_iter().map(|(n, d)| (merged.entity(n).1, d)).collect();
            (merged.entity(s).1, ids)
        })
        .collect();
    AlignmentRanking {
        rankings,
        rescreen_width,
    }
}

/// 1-based rank of `gold` in a node ranking.
pub fn rank_of(ranked: &[(usize, f64)], gold: usize) -> Option<usize> {
    ranked.iter().position(|&(n, _)| n == gold).map(|p| p + 1)
}

/// Rank of each gold counterpart, in `gold` order.
pub fn gold_ranks(ranking: &AlignmentRanking, gold: &[(EntityId, EntityId)]) -> Result<Vec<usize>> {
    gold.iter()
        .map(|&(s, t)| {
            let list = ranking
                .rankings
                .get(&s)
                .ok_or_else(|| NmnError::Integrity(format!("no ranking for source entity {s}")))?;
            Ok(list.iter().position(|&(c, _)| c == t).map_or(usize::MAX, |p| p + 1))
        })
        .collect()
}

/// Fraction of sources whose gold counterpart ranks within the top `k`.
pub fn hits_at_k(ranking: &AlignmentRanking, gold: &[(EntityId, EntityId)], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(NmnError::InvalidInput("k must be at least 1".into()));
    }
    if gold.is_empty() {
        return Ok(0.0);
    }
    let ranks = gold_ranks(ranking, gold)?;
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / gold.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketHits {
    pub lo: usize,
    /// Exclusive upper edge; `None` for the open last bucket.
    pub hi: Option<usize>,
    pub count: usize,
    /// `None` when the bucket is empty.
    pub hits1: Option<f64>,
}

/// Index of the half-open bucket `[edges[i], edges[i+1])` holding `value`.
pub fn bucket_index(edges: &[usize], value: usize) -> usize {
    edges.iter().rposition(|&e| e <= value).unwrap_or(0)
}

pub fn validate_edges(edges: &[usize]) -> Result<()> {
    if edges.is_empty() || edges[0] != 0 {
        return Err(NmnError::InvalidInput("bucket edges must start at 0".into()));
    }
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(NmnError::InvalidInput("bucket edges must be strictly increasing".into()));
    }
    Ok(())
}

pub(crate) fn degree_gap(g1: &KnowledgeGraph, g2: &KnowledgeGraph, pair: (EntityId, EntityId)) -> Result<usize> {
    let d1 = g1.degree(pair.0).ok_or(NmnError::Lookup(pair.0))?;
    let d2 = g2.degree(pair.1).ok_or(NmnError::Lookup(pair.1))?;
    Ok(d1.abs_diff(d2))
}

/// Hits@1 per bucket of `|deg_G1(e1) − deg_G2(e2)|`.
pub fn bucketed_hits(
    ranking: &AlignmentRanking,
    gold: &[(EntityId, EntityId)],
    g1: &KnowledgeGraph,
    g2: &KnowledgeGraph,
    bucket_edges: &[usize],
) -> Result<Vec<BucketHits>> {
    validate_edges(bucket_edges)?;
    let ranks = gold_ranks(ranking, gold)?;
    let mut counts = vec![0usize; bucket_edges.len()];
    let mut hits = vec![0usize; bucket_edges.len()];
    for (&pair, &rank) in gold.iter().zip(&ranks) {
        let b = bucket_index(bucket_edges, degree_gap(g1, g2, pair)?);
        counts[b] += 1;
        if rank == 1 {
            hits[b] += 1;
        }
    }
    Ok((0..bucket_edges.len())
        .map(|i| BucketHits {
            lo: bucket_edges[i],
            hi: bucket_edges.get(i + 1).copied(),
            count: counts[i],
            hits1: (counts[i] > 0).then(|| hits[i] as f64 / counts[i] as f64),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::Triple;

    fn ranking(lists: &[(u32, &[u32])]) -> AlignmentRanking {
        AlignmentRanking {
            rankings: lists
                .iter()
                .map(|(s, l)| (*s, l.iter().enumerate().map(|(i, &c)| (c, i as f64)).collect()))
                .collect(),
            rescreen_width: 10,
        }
    }

    #[test]
    fn hits_examples() {
        let perfect = ranking(&[(0, &[10, 11]), (1, &[11, 10])]);
        let gold = [(0, 10), (1, 11)];
        assert_eq!(hits_at_k(&perfect, &gold, 1).unwrap(), 1.0);
        let second = ranking(&[(0, &[11, 10]), (1, &[10, 11])]);
        assert_eq!(hits_at_k(&second, &gold, 1).unwrap(), 0.0);
        assert_eq!(hits_at_k(&second, &gold, 10).unwrap(), 1.0);
        assert!(hits_at_k(&perfect, &[(5, 10)], 1).is_err());
    }

    #[test]
    fn hits_fraction_format() {
        // 733 of 1000 correct at rank 1
        let mut rankings = BTreeMap::new();
        let mut gold = Vec::new();
        for s in 0..1000u32 {
            let list = if s < 733 { vec![(s, 0.0), (s + 5000, 1.0)] } else { vec![(s + 5000, 0.0), (s, 1.0)] };
            rankings.insert(s, list);
            gold.push((s, s));
        }
        let r = AlignmentRanking { rankings, rescreen_width: 2 };
        let h = hits_at_k(&r, &gold, 1).unwrap();
        assert!((h - 0.733).abs() < 1e-12);
        assert_eq!(format!("{:.1}", h * 100.0), "73.3");
    }

    fn kg_with_degrees(degs: &[usize]) -> KnowledgeGraph {
        // entity i gets degs[i] leaf neighbors with ids above 1000
        let mut ents: Vec<(u32, String)> = (0..degs.len() as u32).map(|i| (i, format!("e{i}"))).collect();
        let mut triples = Vec::new();
        let mut next = 1000;
        for (i, &d) in degs.iter().enumerate() {
            for _ in 0..d {
                ents.push((next, String::new()));
                triples.push(Triple { head: i as u32, relation: 0, tail: next });
                next += 1;
            }
        }
        KnowledgeGraph::new(ents, triples).unwrap()
    }

    #[test]
    fn buckets_by_hand() {
        let g1 = kg_with_degrees(&[5, 2, 40, 12, 3]);
        let g2 = kg_with_degrees(&[2, 2, 1, 30, 3]);
        // gaps: 3, 0, 39, 18, 0
        let gold = [(0, 0), (1, 1), (2, 2), (3, 3), (4, 4)];
        let r = ranking(&[(0, &[0]), (1, &[0, 1]), (2, &[2]), (3, &[3]), (4, &[4])]);
        let b = bucketed_hits(&r, &gold, &g1, &g2, &[0, 10, 20, 30]).unwrap();
        let counts: Vec<usize> = b.iter().map(|x| x.count).collect();
        assert_eq!(counts, vec![3, 1, 0, 1]);
        assert_eq!(b[0].hits1, Some(2.0 / 3.0));
        assert_eq!(b[2].hits1, None);
        assert_eq!(b[3].hi, None);

        let single = bucketed_hits(&r, &gold, &g1, &g2, &[0]).unwrap();
        assert_eq!(single[0].hits1.unwrap(), hits_at_k(&r, &gold, 1).unwrap());
        assert!(bucketed_hits(&r, &gold, &g1, &g2, &[0, 10, 10]).is_err());
    }
}
