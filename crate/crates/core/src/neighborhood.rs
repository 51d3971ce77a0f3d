//! Informative-neighbor sampling and candidate pre-screening.

use std::cmp::Ordering;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NmnError, Result};
use crate::kg::MergedGraph;

/// Shared bilinear weight `W_s` of the neighbor-sampling distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerParams {
    pub w_s: Array2<f64>,
}

impl SamplerParams {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.w_s.dim() != (dim, dim) {
            return Err(NmnError::dim("W_s", format!("{dim}x{dim}"), format!("{:?}", self.w_s.dim())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    /// Top-K by probability, ties to the smaller node index.
    Deterministic,
    /// K draws without replacement proportional to probability.
    Stochastic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodSubgraph {
    pub center: usize,
    pub neighbor_ids: Vec<usize>,
    pub neighbor_embeddings: Array2<f64>,
    /// Probability of each kept neighbor under the distribution over the
    /// full neighborhood.
    pub sample_probs: Vec<f64>,
}

impl NeighborhoodSubgraph {
    pub fn is_empty(&self) -> bool {
        self.neighbor_ids.is_empty()
    }

    pub fn len(&self) -> usize {
        self.neighbor_ids.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub source: usize,
    pub candidates: Vec<usize>,
    pub distances: Vec<f64>,
}

pub fn l1_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum()
}

/// `softmax_j(h_c W_s h_jᵀ)` over the given neighbor rows.
pub fn neighbor_sampling_probs(
    h_center: ArrayView1<f64>,
    neighbor_embs: ArrayView2<f64>,
    w_s: ArrayView2<f64>,
) -> Result<Vec<f64>> {
    if neighbor_embs.nrows() == 0 {
        return Err(NmnError::EmptyNeighborhood);
    }
    let d = h_center.len();
    if w_s.dim() != (d, d) || neighbor_embs.ncols() != d {
        return Err(NmnError::dim("neighbor_sampling_probs", d, neighbor_embs.ncols()));
    }
    let projected = h_center.dot(&w_s);
    let logits: Vec<f64> = neighbor_embs.rows().into_iter().map(|r| projected.dot(&r)).collect();
    Ok(softmax(&logits))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn check_center(center: usize, graph: &MergedGraph, embeddings: ArrayView2<f64>) -> Result<()> {
    if center >= graph.num_nodes {
        return Err(NmnError::Lookup(center as u32));
    }
    if embeddings.nrows() != graph.num_nodes {
        return Err(NmnError::dim("embedding rows", graph.num_nodes, embeddings.nrows()));
    }
    Ok(())
}

/// Per-entity seed so parallel and serial sampling agree.
pub fn entity_seed(base_seed: u64, center: usize) -> u64 {
    base_seed ^ center as u64
}

/// Samples at most `k` one-hop neighbors of `center` from the distribution
/// induced by `W_s`. Neighborhoods no larger than `k` are taken whole.
pub fn sample_neighborhood(
    center: usize,
    graph: &MergedGraph,
    embeddings: ArrayView2<f64>,
    w_s: ArrayView2<f64>,
    k: usize,
    mode: SamplingMode,
    rng_seed: u64,
) -> Result<NeighborhoodSubgraph> {
    if k == 0 {
        return Err(NmnError::InvalidInput("sample size K must be at least 1".into()));
    }
    check_center(center, graph, embeddings)?;
    let neighbors = graph.neighbors(center);
    if neighbors.is_empty() {
        return Ok(empty_subgraph(center, embeddings.ncols()));
    }
    let nb_embs = embeddings.select(Axis(0), neighbors);
    let probs = neighbor_sampling_probs(embeddings.row(center), nb_embs.view(), w_s)?;

    let picked: Vec<usize> = if neighbors.len() <= k || mode == SamplingMode::Deterministic {
        let mut order: Vec<usize> = (0..neighbors.len()).collect();
        order.sort_by(|&a, &b| {
            probs[b]
                .partial_cmp(&probs[a])
                .unwrap_or(Ordering::Equal)
                .then(neighbors[a].cmp(&neighbors[b]))
        });
        order.truncate(k);
        order
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(entity_seed(rng_seed, center));
        draw_without_replacement(&probs, k, &mut rng)
    };
    Ok(build_subgraph(center, neighbors, &picked, embeddings, &probs))
}

/// Sequential weighted draws, renormalizing over what is left.
fn draw_without_replacement(probs: &[f64], k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..probs.len()).collect();
    let mut picked = Vec::with_capacity(k);
    while picked.len() < k && !remaining.is_empty() {
        let mass: f64 = remaining.iter().map(|&i| probs[i]).sum();
        let mut u = rng.random::<f64>() * mass;
        let mut chosen = remaining.len() - 1;
        for (pos, &i) in remaining.iter().enumerate() {
            if u < probs[i] {
                chosen = pos;
                break;
            }
            u -= probs[i];
        }
        picked.push(remaining.remove(chosen));
    }
    picked
}

/// Uniform `k`-subset of the neighborhood, seeded per entity.
pub fn random_sample_neighborhood(
    center: usize,
    graph: &MergedGraph,
    embeddings: ArrayView2<f64>,
    k: usize,
    rng_seed: u64,
) -> Result<NeighborhoodSubgraph> {
    if k == 0 {
        return Err(NmnError::InvalidInput("sample size K must be at least 1".into()));
    }
    check_center(center, graph, embeddings)?;
    let neighbors = graph.neighbors(center);
    if neighbors.is_empty() {
        return Ok(empty_subgraph(center, embeddings.ncols()));
    }
    let probs = vec![1.0 / neighbors.len() as f64; neighbors.len()];
    let picked: Vec<usize> = if neighbors.len() <= k {
        (0..neighbors.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(entity_seed(rng_seed, center));
        let mut idx = index::sample(&mut rng, neighbors.len(), k).into_vec();
        idx.sort_unstable();
        idx
    };
    Ok(build_subgraph(center, neighbors, &picked, embeddings, &probs))
}

fn empty_subgraph(center: usize, dim: usize) -> NeighborhoodSubgraph {
    NeighborhoodSubgraph {
        center,
        neighbor_ids: Vec::new(),
        neighbor_embeddings: Array2::zeros((0, dim)),
        sample_probs: Vec::new(),
    }
}

fn build_subgraph(
    center: usize,
    neighbors: &[usize],
    picked: &[usize],
    embeddings: ArrayView2<f64>,
    probs: &[f64],
) -> NeighborhoodSubgraph {
    let ids: Vec<usize> = picked.iter().map(|&i| neighbors[i]).collect();
    NeighborhoodSubgraph {
        center,
        neighbor_embeddings: embeddings.select(Axis(0), &ids),
        neighbor_ids: ids,
        sample_probs: picked.iter().map(|&i| probs[i]).collect(),
    }
}

/// The `t` rows of `other_embeddings` closest to `source_emb` in L1,
/// ascending, ties to the smaller id.
pub fn select_candidates(
    source: usize,
    source_emb: ArrayView1<f64>,
    other_embeddings: ArrayView2<f64>,
    other_ids: &[usize],
    t: usize,
) -> Result<CandidateSet> {
    if other_ids.is_empty() {
        return Err(NmnError::InvalidInput("candidate pool is empty".into()));
    }
    if t == 0 {
        return Err(NmnError::InvalidInput("candidate count t must be at least 1".into()));
    }
    if other_embeddings.nrows() != other_ids.len() {
        return Err(NmnError::dim("candidate pool", other_ids.len(), other_embeddings.nrows()));
    }
    let mut scored: Vec<(f64, usize)> = other_embeddings
        .rows()
        .into_iter()
        .zip(other_ids)
        .map(|(row, &id)| (l1_distance(source_emb, row), id))
        .collect();
    let t = t.min(scored.len());
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if t < scored.len() {
        scored.select_nth_unstable_by(t - 1, cmp);
        scored.truncate(t);
    }
    scored.sort_by(cmp);
    Ok(CandidateSet {
        source,
        candidates: scored.iter().map(|s| s.1).collect(),
        distances: scored.iter().map(|s| s.0).collect(),
    })
}

/// Candidate sets for `source` nodes against a node range of `embeddings`.
pub fn candidates_for_nodes(
    sources: &[usize],
    embeddings: ArrayView2<f64>,
    pool: std::ops::Range<usize>,
    t: usize,
) -> Result<Vec<CandidateSet>> {
    let ids: Vec<usize> = pool.clone().collect();
    let pool_embs = embeddings.slice(ndarray::s![pool, ..]);
    sources
        .iter()
        .map(|&s| select_candidates(s, embeddings.row(s), pool_embs, &ids, t))
        .collect()
}
