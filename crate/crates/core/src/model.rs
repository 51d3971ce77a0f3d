//! The full trainable model: encoder, sampler and matching parameters, plus
//! the differentiable pair-distance pipeline used by training.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{encode, glorot, EncoderParams, EncoderVars};
use crate::error::{NmnError, Result};
use crate::kg::MergedGraph;
use crate::matching::{Aggregation, MatchParams, PairScorer};
use crate::neighborhood::{random_sample_neighborhood, sample_neighborhood, SamplerParams, SamplingMode};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingStrategy {
    /// Top-K under the learned `W_s` distribution.
    Learned,
    /// Uniform random K-subset.
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub sampler: SamplerParams,
    pub matching: MatchParams,
}

impl ModelParams {
    pub fn init(dim: usize, num_layers: usize, neighbor_dim: usize, beta: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::init(dim, num_layers, &mut rng);
        let sampler = SamplerParams {
            w_s: glorot(&mut rng, dim, dim),
        };
        let matching = MatchParams::init(dim, neighbor_dim, beta, &mut rng);
        ModelParams {
            encoder,
            sampler,
            matching,
        }
    }

    pub fn dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.sampler.validate(self.dim())?;
        self.matching.validate(self.dim())
    }

    /// Parameter arrays under their checkpoint names.
    pub fn named_arrays(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        let e = &self.encoder;
        for l in 0..e.num_layers() {
            out.push((format!("gcn_w_{l}"), &e.gcn_weights[l]));
            out.push((format!("hw_t_{l}"), &e.highway_gate_weights[l]));
            out.push((format!("hw_b_{l}"), &e.highway_gate_bias[l]));
        }
        out.push(("w_s".to_string(), &self.sampler.w_s));
        out.push(("w_gate".to_string(), &self.matching.w_gate));
        out.push(("w_n".to_string(), &self.matching.w_n));
        out
    }

    pub fn from_named(mut arrays: BTreeMap<String, Array2<f64>>, beta: f64) -> Result<Self> {
        let mut take = |name: &str| {
            arrays
                .remove(name)
                .ok_or_else(|| NmnError::Checkpoint(format!("missing array {name}")))
        };
        let mut encoder = EncoderParams {
            gcn_weights: Vec::new(),
            highway_gate_weights: Vec::new(),
            highway_gate_bias: Vec::new(),
        };
        let w_s = take("w_s")?;
        let w_gate = take("w_gate")?;
        let w_n = take("w_n")?;
        let mut l = 0;
        while let Ok(w) = take(&format!("gcn_w_{l}")) {
            encoder.gcn_weights.push(w);
            encoder.highway_gate_weights.push(take(&format!("hw_t_{l}"))?);
            encoder.highway_gate_bias.push(take(&format!("hw_b_{l}"))?);
            l += 1;
        }
        if let Some(extra) = arrays.keys().next() {
            return Err(NmnError::Checkpoint(format!("unexpected array {extra}")));
        }
        let params = ModelParams {
            encoder,
            sampler: SamplerParams { w_s },
            matching: MatchParams { beta, w_gate, w_n },
        };
        params.validate()?;
        Ok(params)
    }
}

/// Inference-time settings that, with the parameters, fully determine
/// matching distances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchSettings {
    pub k: usize,
    pub strategy: SamplingStrategy,
    pub aggregation: Aggregation,
    pub seed: u64,
}

/// Sampled neighbor lists for every node of the merged graph. A node
/// without neighbors stands in for its own neighborhood, as it does in the
/// self-looped propagation of the encoder.
pub fn sample_all(
    merged: &MergedGraph,
    embeddings: ArrayView2<f64>,
    sampler: &SamplerParams,
    settings: &MatchSettings,
) -> Result<Vec<Vec<usize>>> {
    (0..merged.num_nodes)
        .map(|node| {
            let sub = match settings.strategy {
                SamplingStrategy::Learned => sample_neighborhood(
                    node,
                    merged,
                    embeddings,
                    sampler.w_s.view(),
                    settings.k,
                    SamplingMode::Deterministic,
                    settings.seed,
                )?,
                SamplingStrategy::Random => {
                    random_sample_neighborhood(node, merged, embeddings, settings.k, settings.seed)?
                }
            };
            Ok(if sub.neighbor_ids.is_empty() { vec![node] } else { sub.neighbor_ids })
        })
        .collect()
}

/// Encoder output, sampled subgraphs and a pair scorer for fixed parameters.
pub struct Snapshot {
    pub embeddings: Array2<f64>,
    pub subgraphs: Vec<Vec<usize>>,
}

impl Snapshot {
    pub fn take(merged: &MergedGraph, params: &ModelParams, settings: &MatchSettings) -> Result<Self> {
        let embeddings = encode(merged, &params.encoder)?;
        let subgraphs = sample_all(merged, embeddings.view(), &params.sampler, settings)?;
        Ok(Snapshot { embeddings, subgraphs })
    }

    pub fn scorer<'a>(&'a self, params: &'a MatchParams, aggregation: Aggregation) -> Result<PairScorer<'a>> {
        PairScorer::new(self.embeddings.view(), params, aggregation)
    }
}

/// Tape handles needed to score pairs differentiably.
pub struct PairTape {
    pub encoder: EncoderVars,
    pub w_gate: Var,
    pub w_n: Var,
    pub embeddings: Var,
    proj_top: Var,
    proj_bottom: Var,
    beta: f64,
    aggregation: Aggregation,
    zero_pool: Var,
}

impl PairTape {
    pub fn build<'g>(
        tape: &mut Tape<'g>,
        merged: &'g MergedGraph,
        params: &ModelParams,
        aggregation: Aggregation,
    ) -> Self {
        let encoder = EncoderVars::register(tape, &params.encoder);
        let w_gate = tape.leaf(params.matching.w_gate.clone());
        let w_n = tape.leaf(params.matching.w_n.clone());
        let embeddings = crate::encoder::encode_on_tape(tape, merged, &encoder);
        let d = params.dim();
        let top = tape.slice_rows(w_gate, 0, d);
        let bottom = tape.slice_rows(w_gate, d, 2 * d);
        let proj_top = tape.matmul(embeddings, top);
        let proj_bottom = tape.matmul(embeddings, bottom);
        let pool_dim = match aggregation {
            Aggregation::Matching => 2 * d,
            Aggregation::Mean => d,
        };
        let zero_pool = tape.leaf(Array2::zeros((1, pool_dim)));
        PairTape {
            encoder,
            w_gate,
            w_n,
            embeddings,
            proj_top,
            proj_bottom,
            beta: params.matching.beta,
            aggregation,
            zero_pool,
        }
    }

    /// Pooled gated rows `Σ_p σ(ĥ_p W_gate) ⊙ ĥ_p` (or the mean of `h_p`
    /// under mean aggregation), before projection by `W_N`.
    fn pooled(&self, tape: &mut Tape<'_>, own: &[usize], other: &[usize]) -> Var {
        if own.is_empty() {
            return self.zero_pool;
        }
        let h_own = tape.gather(self.embeddings, own);
        match self.aggregation {
            Aggregation::Mean => {
                let s = tape.sum_rows(h_own);
                tape.scale(s, 1.0 / own.len() as f64)
            }
            Aggregation::Matching => {
                let top = tape.gather(self.proj_top, own);
                let (aug, pre) = if other.is_empty() {
                    let zeros = tape.scale(h_own, 0.0);
                    (tape.concat(h_own, zeros), top)
                } else {
                    let h_other = tape.gather(self.embeddings, other);
                    let logits = tape.matmul_t(h_own, h_other);
                    let attn = tape.softmax_rows(logits);
                    let m = tape.cross_match(h_own, h_other, attn);
                    let m = tape.scale(m, self.beta);
                    let aug = tape.concat(h_own, m);
                    let b_own = tape.gather(self.proj_bottom, own);
                    let b_other = tape.gather(self.proj_bottom, other);
                    let mb = tape.cross_match(b_own, b_other, attn);
                    let mb = tape.scale(mb, self.beta);
                    (aug, tape.add(top, mb))
                };
                let gate = tape.sigmoid(pre);
                let gated = tape.mul(gate, aug);
                tape.sum_rows(gated)
            }
        }
    }

    /// `‖h^match_a − h^match_b‖₁` for every `(a, b)` as a column, row `i`
    /// for `pairs[i]`. `subgraphs[n]` is the sampled neighborhood of node `n`.
    pub fn distances(&self, tape: &mut Tape<'_>, pairs: &[(usize, usize)], subgraphs: &[Vec<usize>]) -> Var {
        let mut diffs = Vec::with_capacity(pairs.len());
        for &(a, b) in pairs {
            let (sa, sb) = (&subgraphs[a], &subgraphs[b]);
            let pa = self.pooled(tape, sa, sb);
            let pb = self.pooled(tape, sb, sa);
            diffs.push(tape.sub(pa, pb));
        }
        let stacked = tape.stack_rows(&diffs);
        let g = match self.aggregation {
            Aggregation::Matching => tape.matmul(stacked, self.w_n),
            Aggregation::Mean => stacked,
        };
        let (left, right): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let ha = tape.gather(self.embeddings, &left);
        let hb = tape.gather(self.embeddings, &right);
        let h = tape.sub(ha, hb);
        let all = tape.concat(g, h);
        tape.row_abs_sum(all)
    }

    /// Single-pair form of [`PairTape::distances`] with explicit subgraphs.
    pub fn distance(&self, tape: &mut Tape<'_>, a: usize, sa: &[usize], b: usize, sb: &[usize]) -> Var {
        let pa = self.pooled(tape, sa, sb);
        let pb = self.pooled(tape, sb, sa);
        let diff = tape.sub(pa, pb);
        let g = match self.aggregation {
            Aggregation::Matching => tape.matmul(diff, self.w_n),
            Aggregation::Mean => diff,
        };
        let ha = tape.gather(self.embeddings, &[a]);
        let hb = tape.gather(self.embeddings, &[b]);
        let h = tape.sub(ha, hb);
        let all = tape.concat(g, h);
        tape.abs_sum(all)
    }
}

/// Neighbor embeddings of the listed nodes.
pub fn rows(embeddings: ArrayView2<f64>, ids: &[usize]) -> Array2<f64> {
    embeddings.select(Axis(0), ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn fixture() -> MergedGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let edges = [(0, 1), (0, 2), (1, 2), (2, 3), (4, 5), (4, 6), (6, 7), (5, 7)];
        let mut nb = vec![Vec::new(); 8];
        for (a, b) in edges {
            nb[a].push(b);
            nb[b].push(a);
        }
        let f = Array2::from_shape_simple_fn((8, 4), || StandardNormal.sample(&mut rng));
        MergedGraph::from_adjacency(nb, f, 4)
    }

    #[test]
    fn tape_distance_matches_scorer() {
        let g = fixture();
        let params = ModelParams::init(4, 2, 3, 0.5, 7);
        let settings = MatchSettings {
            k: 2,
            strategy: SamplingStrategy::Learned,
            aggregation: Aggregation::Matching,
            seed: 0,
        };
        let snap = Snapshot::take(&g, &params, &settings).unwrap();
        for aggregation in [Aggregation::Matching, Aggregation::Mean] {
            let scorer = snap.scorer(&params.matching, aggregation).unwrap();
            let mut tape = Tape::new();
            let pt = PairTape::build(&mut tape, &g, &params, aggregation);
            for (a, b) in [(0, 4), (2, 6), (3, 7)] {
                let d = pt.distance(&mut tape, a, &snap.subgraphs[a], b, &snap.subgraphs[b]);
                let want = scorer.distance(a, &snap.subgraphs[a], b, &snap.subgraphs[b]);
                assert!((tape.scalar(d) - want).abs() < 1e-10);
            }
            let pairs = [(0, 4), (2, 6), (3, 7), (1, 5)];
            let col = pt.distances(&mut tape, &pairs, &snap.subgraphs);
            for (i, &(a, b)) in pairs.iter().enumerate() {
                let want = scorer.distance(a, &snap.subgraphs[a], b, &snap.subgraphs[b]);
                assert!((tape.value(col)[[i, 0]] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn named_roundtrip() {
        let params = ModelParams::init(3, 2, 2, 0.1, 0);
        let map: BTreeMap<String, Array2<f64>> =
            params.named_arrays().into_iter().map(|(k, v)| (k, v.clone())).collect();
        assert!(map.contains_key("gcn_w_1") && map.contains_key("hw_b_0"));
        assert_eq!(ModelParams::from_named(map, 0.1).unwrap(), params);
    }
}
