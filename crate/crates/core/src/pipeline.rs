//! End-to-end runs over a [`Dataset`]: split, train, rank, report.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::datatools::Dataset;
use crate::error::{NmnError, Result};
use crate::evaluation::{bucketed_hits, gold_ranks, hits_at_k, rank_all, to_alignment_ranking, AlignmentRanking, BucketHits};
use crate::kg::{EntityId, MergedGraph, SeedAlignments, Side};
use crate::matching::cross_match_embeddings;
use crate::model::{ModelParams, SamplingStrategy, Snapshot};
use crate::training::{run_training, TrainConfig, TrainOutcome};

/// Merged input graph plus the seeded train/test split.
pub struct Prepared {
    pub merged: MergedGraph,
    pub split: SeedAlignments,
    pub train_nodes: Vec<(usize, usize)>,
    pub test_nodes: Vec<(usize, usize)>,
}

pub fn prepare(dataset: &Dataset, config: &TrainConfig) -> Result<Prepared> {
    let merged = dataset.merged()?;
    let split = SeedAlignments::split(&dataset.gold, config.split_fraction, config.seed)?;
    let train_nodes = merged.node_pairs(&split.train_pairs)?;
    let test_nodes = merged.node_pairs(&split.test_pairs)?;
    Ok(Prepared {
        merged,
        split,
        train_nodes,
        test_nodes,
    })
}

pub fn train(prepared: &Prepared, config: &TrainConfig) -> Result<TrainOutcome> {
    run_training(config, &prepared.merged, &prepared.train_nodes)
}

/// Two-stage ranking of every test source against the configured pool.
pub fn rank_test(prepared: &Prepared, params: &ModelParams, config: &TrainConfig) -> Result<AlignmentRanking> {
    let snap = Snapshot::take(&prepared.merged, params, &config.match_settings())?;
    let scorer = snap.scorer(&params.matching, config.aggregation)?;
    let pool = config.rank_pool_nodes(&prepared.merged, &prepared.test_nodes);
    let width = config.rescreen_for(pool.len());
    let sources: Vec<usize> = prepared.test_nodes.iter().map(|p| p.0).collect();
    let ranked = rank_all(&sources, &scorer, &snap.subgraphs, &pool, width);
    Ok(to_alignment_ranking(&prepared.merged, &sources, ranked, width))
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub hits: BTreeMap<String, f64>,
    pub buckets: Vec<BucketHits>,
}

/// Hits@k for each `k`, bucketed Hits@1 and per-pair gold ranks.
pub fn evaluate(
    dataset: &Dataset,
    prepared: &Prepared,
    params: &ModelParams,
    config: &TrainConfig,
    ks: &[usize],
    bucket_edges: &[usize],
) -> Result<(EvalReport, Vec<(EntityId, EntityId, usize)>)> {
    let ranking = rank_test(prepared, params, config)?;
    let gold = &prepared.split.test_pairs;
    let mut hits = BTreeMap::new();
    for &k in ks {
        hits.insert(k.to_string(), hits_at_k(&ranking, gold, k)?);
    }
    let buckets = bucketed_hits(&ranking, gold, &dataset.g1, &dataset.g2, bucket_edges)?;
    let ranks = gold_ranks(&ranking, gold)?;
    let rows = gold.iter().zip(ranks).map(|(&(a, b), r)| (a, b, r)).collect();
    Ok((EvalReport { hits, buckets }, rows))
}

pub fn ranks_csv(rows: &[(EntityId, EntityId, usize)]) -> String {
    let mut s = String::from("source_id,gold_id,rank\n");
    for (a, b, r) in rows {
        s.push_str(&format!("{a},{b},{r}\n"));
    }
    s
}

/// Cross-graph attention between the sampled neighborhoods of a G1 entity
/// and a G2 entity, as `(left name, right name, weight)` rows.
pub fn attention_rows(
    dataset: &Dataset,
    merged: &MergedGraph,
    params: &ModelParams,
    config: &TrainConfig,
    pair: (EntityId, EntityId),
) -> Result<Vec<(String, String, f64)>> {
    let a = merged.node(Side::First, pair.0).ok_or(NmnError::Lookup(pair.0))?;
    let b = merged.node(Side::Second, pair.1).ok_or(NmnError::Lookup(pair.1))?;
    let snap = Snapshot::take(merged, params, &config.match_settings())?;
    let (sa, sb) = (&snap.subgraphs[a], &snap.subgraphs[b]);
    if sa.is_empty() || sb.is_empty() {
        return Ok(Vec::new());
    }
    let left = crate::model::rows(snap.embeddings.view(), sa);
    let right = crate::model::rows(snap.embeddings.view(), sb);
    let cross = cross_match_embeddings(left.view(), right.view())?;
    let name = |node: usize| {
        let (side, id) = merged.entity(node);
        let kg = if side == Side::First { &dataset.g1 } else { &dataset.g2 };
        kg.entity_names.get(&id).cloned().unwrap_or_default()
    };
    let mut out = Vec::new();
    for (p, &np) in sa.iter().enumerate() {
        for (q, &nq) in sb.iter().enumerate() {
            out.push((name(np), name(nq), cross.attention_left_to_right[[p, q]]));
        }
    }
    Ok(out)
}

pub fn attention_csv(rows: &[(String, String, f64)]) -> String {
    let mut s = String::from("left_neighbor_name,right_neighbor_name,a_pq\n");
    for (l, r, a) in rows {
        s.push_str(&format!("{},{},{a}\n", csv_field(l), csv_field(r)));
    }
    s
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplingRow {
    pub entity_id: EntityId,
    pub mode: &'static str,
    pub k: usize,
    pub hits1_contribution: f64,
}

/// Trains once per sampling strategy and `K`, recording each test
/// source's share of Hits@1 (`1/|test|` when correct, else 0).
pub fn compare_sampling(dataset: &Dataset, config: &TrainConfig, ks: &[usize]) -> Result<Vec<SamplingRow>> {
    let mut rows = Vec::new();
    for &k in ks {
        for (strategy, mode) in [(SamplingStrategy::Learned, "learned"), (SamplingStrategy::Random, "random")] {
            let mut cfg = config.clone();
            cfg.k = k;
            cfg.sampling = strategy;
            cfg.validate()?;
            let prepared = prepare(dataset, &cfg)?;
            let outcome = train(&prepared, &cfg)?;
            let ranking = rank_test(&prepared, &outcome.params, &cfg)?;
            let gold = &prepared.split.test_pairs;
            let share = 1.0 / gold.len().max(1) as f64;
            for (&(s, _), r) in gold.iter().zip(gold_ranks(&ranking, gold)?) {
                rows.push(SamplingRow {
                    entity_id: s,
                    mode,
                    k,
                    hits1_contribution: if r == 1 { share } else { 0.0 },
                });
            }
        }
    }
    Ok(rows)
}

pub fn sampling_csv(rows: &[SamplingRow]) -> String {
    let mut s = String::from("entity_id,mode,K,hits1_contribution\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.entity_id, r.mode, r.k, r.hits1_contribution));
    }
    s
}
