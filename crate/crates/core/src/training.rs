//! Pre-training, the matching objective, sampler tuning and the schedule
//! that alternates between them.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{NmnError, Result};
use crate::evaluation::{embedding_ranking, rank_counterparts, rank_of};
use crate::kg::{MergedGraph, Side};
use crate::matching::{augment_rows, Aggregation, MatchParams};
use crate::model::{MatchSettings, ModelParams, PairTape, SamplingStrategy, Snapshot};
use crate::neighborhood::{candidates_for_nodes, l1_distance, softmax};
use crate::tape::{cross_match_values, sigmoid, softmax_rows, Tape};

/// Counterparts a source is ranked against at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankPool {
    /// Gold counterparts of the evaluated pairs.
    Held,
    /// Every entity of G2.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Training hyperparameters. Serialized as flat `key=value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lr: f64,
    /// Neighbors kept per entity (`K`).
    pub k: usize,
    /// Candidate set size (`t`).
    pub t: usize,
    pub ws_interval: usize,
    pub pretrain_patience: usize,
    /// Matching-phase epochs; also caps pre-training unless
    /// `pretrain_max_epochs` is set.
    pub max_epochs: usize,
    pub negatives_per_positive: usize,
    pub negative_refresh_epochs: usize,
    pub seed: u64,
    pub pretrain_max_epochs: Option<usize>,
    pub beta: f64,
    pub num_layers: usize,
    pub neighbor_dim: usize,
    /// Gradient steps per `W_s` tuning round.
    pub ws_steps: usize,
    /// Positives per batch; 0 means one batch per epoch.
    pub batch_size: usize,
    /// Share of training seeds held out for early stopping and logging.
    pub valid_fraction: f64,
    /// Share of gold pairs used as training seeds.
    pub split_fraction: f64,
    pub aggregation: Aggregation,
    pub sampling: SamplingStrategy,
    pub optimizer: OptimizerKind,
    /// Evaluation pre-screen width; 0 re-ranks every counterpart.
    pub rescreen_width: usize,
    pub rank_pool: RankPool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 1.0,
            lr: 0.001,
            k: 5,
            t: 20,
            ws_interval: 50,
            pretrain_patience: 20,
            max_epochs: 100,
            negatives_per_positive: 5,
            negative_refresh_epochs: 10,
            seed: 0,
            pretrain_max_epochs: None,
            beta: 0.1,
            num_layers: 2,
            neighbor_dim: 50,
            ws_steps: 5,
            batch_size: 0,
            valid_fraction: 0.1,
            split_fraction: 0.3,
            aggregation: Aggregation::Matching,
            sampling: SamplingStrategy::Learned,
            optimizer: OptimizerKind::Sgd,
            rescreen_width: 0,
            rank_pool: RankPool::Held,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| NmnError::Config(format!("bad value {value:?} for {key}")))
}

impl TrainConfig {
    pub fn match_settings(&self) -> MatchSettings {
        MatchSettings {
            k: self.k,
            strategy: self.sampling,
            aggregation: self.aggregation,
            seed: self.seed,
        }
    }

    /// Ranking pool for evaluating `pairs`, in ascending node order.
    pub fn rank_pool_nodes(&self, merged: &MergedGraph, pairs: &[(usize, usize)]) -> Vec<usize> {
        match self.rank_pool {
            RankPool::All => merged.nodes_of(Side::Second).collect(),
            RankPool::Held => {
                let mut v: Vec<usize> = pairs.iter().map(|p| p.1).collect();
                v.sort_unstable();
                v.dedup();
                v
            }
        }
    }

    /// Stage-2 width for a pool of `pool_len` counterparts.
    pub fn rescreen_for(&self, pool_len: usize) -> usize {
        if self.rescreen_width == 0 {
            pool_len
        } else {
            self.rescreen_width
        }
    }

    pub fn pretrain_cap(&self) -> usize {
        self.pretrain_max_epochs.unwrap_or(self.max_epochs)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "gamma" => self.gamma = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "K" => self.k = parse_value(key, value)?,
            "t" => self.t = parse_value(key, value)?,
            "ws_interval" => self.ws_interval = parse_value(key, value)?,
            "pretrain_patience" => self.pretrain_patience = parse_value(key, value)?,
            "max_epochs" => self.max_epochs = parse_value(key, value)?,
            "negatives_per_positive" => self.negatives_per_positive = parse_value(key, value)?,
            "negative_refresh_epochs" => self.negative_refresh_epochs = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "pretrain_max_epochs" => {
                self.pretrain_max_epochs = match value {
                    "" | "none" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "beta" => self.beta = parse_value(key, value)?,
            "num_layers" => self.num_layers = parse_value(key, value)?,
            "neighbor_dim" => self.neighbor_dim = parse_value(key, value)?,
            "ws_steps" => self.ws_steps = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "valid_fraction" => self.valid_fraction = parse_value(key, value)?,
            "split_fraction" => self.split_fraction = parse_value(key, value)?,
            "rescreen_width" => self.rescreen_width = parse_value(key, value)?,
            "aggregation" => {
                self.aggregation = match value {
                    "matching" => Aggregation::Matching,
                    "mean" => Aggregation::Mean,
                    _ => return Err(NmnError::Config(format!("unknown aggregation {value:?}"))),
                }
            }
            "sampling" => {
                self.sampling = match value {
                    "learned" => SamplingStrategy::Learned,
                    "random" => SamplingStrategy::Random,
                    _ => return Err(NmnError::Config(format!("unknown sampling {value:?}"))),
                }
            }
            "rank_pool" => {
                self.rank_pool = match value {
                    "held" => RankPool::Held,
                    "all" => RankPool::All,
                    _ => return Err(NmnError::Config(format!("unknown rank_pool {value:?}"))),
                }
            }
            "optimizer" => {
                self.optimizer = match value {
                    "sgd" => OptimizerKind::Sgd,
                    "adam" => OptimizerKind::Adam,
                    _ => return Err(NmnError::Config(format!("unknown optimizer {value:?}"))),
                }
            }
            _ => return Err(NmnError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| NmnError::Config(format!("line {}: expected key=value", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NmnError::Config(m.to_string()));
        if !(self.gamma > 0.0) {
            return bad("gamma must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.ws_interval == 0 {
            return bad("ws_interval must be at least 1");
        }
        if self.k == 0 || self.t == 0 {
            return bad("K and t must be at least 1");
        }
        if self.negatives_per_positive == 0 || self.negative_refresh_epochs == 0 {
            return bad("negatives_per_positive and negative_refresh_epochs must be at least 1");
        }
        if self.beta < 0.0 {
            return bad("beta must be non-negative");
        }
        if self.num_layers == 0 || self.neighbor_dim == 0 {
            return bad("num_layers and neighbor_dim must be at least 1");
        }
        if !(0.0..1.0).contains(&self.valid_fraction) {
            return bad("valid_fraction must lie in [0, 1)");
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return bad("split_fraction must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let agg = match self.aggregation {
            Aggregation::Matching => "matching",
            Aggregation::Mean => "mean",
        };
        let sampling = match self.sampling {
            SamplingStrategy::Learned => "learned",
            SamplingStrategy::Random => "random",
        };
        let opt = match self.optimizer {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        };
        let _ = writeln!(s, "gamma={}", self.gamma);
        let _ = writeln!(s, "lr={}", self.lr);
        let _ = writeln!(s, "K={}", self.k);
        let _ = writeln!(s, "t={}", self.t);
        let _ = writeln!(s, "ws_interval={}", self.ws_interval);
        let _ = writeln!(s, "pretrain_patience={}", self.pretrain_patience);
        let _ = writeln!(s, "max_epochs={}", self.max_epochs);
        let _ = writeln!(s, "negatives_per_positive={}", self.negatives_per_positive);
        let _ = writeln!(s, "negative_refresh_epochs={}", self.negative_refresh_epochs);
        let _ = writeln!(s, "seed={}", self.seed);
        if let Some(p) = self.pretrain_max_epochs {
            let _ = writeln!(s, "pretrain_max_epochs={p}");
        }
        let _ = writeln!(s, "beta={}", self.beta);
        let _ = writeln!(s, "num_layers={}", self.num_layers);
        let _ = writeln!(s, "neighbor_dim={}", self.neighbor_dim);
        let _ = writeln!(s, "ws_steps={}", self.ws_steps);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "valid_fraction={}", self.valid_fraction);
        let _ = writeln!(s, "split_fraction={}", self.split_fraction);
        let _ = writeln!(s, "aggregation={agg}");
        let _ = writeln!(s, "sampling={sampling}");
        let _ = writeln!(s, "optimizer={opt}");
        let _ = writeln!(s, "rescreen_width={}", self.rescreen_width);
        let pool = match self.rank_pool {
            RankPool::Held => "held",
            RankPool::All => "all",
        };
        let _ = writeln!(s, "rank_pool={pool}");
        s
    }
}

/// L1 distance between two encoder embeddings.
pub fn pretrain_distance(h1: ndarray::ArrayView1<f64>, h2: ndarray::ArrayView1<f64>) -> Result<f64> {
    if h1.len() != h2.len() {
        return Err(NmnError::dim("pretrain_distance", h1.len(), h2.len()));
    }
    Ok(l1_distance(h1, h2))
}

/// `Σ_pos Σ_neg max(0, d̃(pos) − d̃(neg) + γ)` over node pairs.
pub fn pretrain_loss(
    positives: &[(usize, usize)],
    negatives: &[(usize, usize)],
    embeddings: ArrayView2<f64>,
    gamma: f64,
) -> Result<f64> {
    if positives.is_empty() {
        return Err(NmnError::InvalidInput("no positive pairs".into()));
    }
    let d = |&(a, b): &(usize, usize)| l1_distance(embeddings.row(a), embeddings.row(b));
    let pos: Vec<f64> = positives.iter().map(d).collect();
    let neg: Vec<f64> = negatives.iter().map(d).collect();
    Ok(pos
        .iter()
        .map(|p| neg.iter().map(|n| (p - n + gamma).max(0.0)).sum::<f64>())
        .sum())
}

/// Corruptions of each positive `(i, j)`: `(i, j')` for the `n_neg` G2
/// nodes nearest to `i` other than `j`, then `(i', j)` for the G1 nodes
/// nearest to `j` other than `i`. Grouped per positive.
pub fn nearest_neighbor_negatives_grouped(
    positives: &[(usize, usize)],
    embeddings: ArrayView2<f64>,
    merged: &MergedGraph,
    n_neg: usize,
) -> Result<Vec<Vec<(usize, usize)>>> {
    let right_pool = merged.nodes_of(Side::Second);
    let left_pool = merged.nodes_of(Side::First);
    positives
        .iter()
        .map(|&(i, j)| {
            let mut out = Vec::with_capacity(2 * n_neg);
            let rc = candidates_for_nodes(&[i], embeddings, right_pool.clone(), n_neg + 1)?;
            out.extend(rc[0].candidates.iter().filter(|&&c| c != j).take(n_neg).map(|&c| (i, c)));
            let lc = candidates_for_nodes(&[j], embeddings, left_pool.clone(), n_neg + 1)?;
            out.extend(lc[0].candidates.iter().filter(|&&c| c != i).take(n_neg).map(|&c| (c, j)));
            Ok(out)
        })
        .collect()
}

pub fn nearest_neighbor_negatives(
    positives: &[(usize, usize)],
    embeddings: ArrayView2<f64>,
    merged: &MergedGraph,
    n_neg: usize,
) -> Result<Vec<(usize, usize)>> {
    Ok(nearest_neighbor_negatives_grouped(positives, embeddings, merged, n_neg)?
        .into_iter()
        .flatten()
        .collect())
}

/// Negative set `ℂ` of each positive `(r, t)`: `(r, t')` for `t'` in the
/// candidate set of `r` and `(r', t)` for `r'` in that of `t`, gold removed.
pub fn candidate_negatives(
    positives: &[(usize, usize)],
    embeddings: ArrayView2<f64>,
    merged: &MergedGraph,
    t: usize,
) -> Result<Vec<Vec<(usize, usize)>>> {
    let lefts: Vec<usize> = positives.iter().map(|p| p.0).collect();
    let rights: Vec<usize> = positives.iter().map(|p| p.1).collect();
    let c_left = candidates_for_nodes(&lefts, embeddings, merged.nodes_of(Side::Second), t)?;
    let c_right = candidates_for_nodes(&rights, embeddings, merged.nodes_of(Side::First), t)?;
    Ok(positives
        .iter()
        .zip(c_left.iter().zip(&c_right))
        .map(|(&(r, tt), (cl, cr))| {
            let mut negs: Vec<(usize, usize)> =
                cl.candidates.iter().filter(|&&c| c != tt).map(|&c| (r, c)).collect();
            negs.extend(cr.candidates.iter().filter(|&&c| c != r).map(|&c| (c, tt)));
            negs
        })
        .collect())
}

/// Matching objective over fixed parameters.
pub fn main_loss(
    positives: &[(usize, usize)],
    negatives: &[Vec<(usize, usize)>],
    snapshot: &Snapshot,
    params: &ModelParams,
    aggregation: Aggregation,
    gamma: f64,
) -> Result<f64> {
    if negatives.len() != positives.len() {
        return Err(NmnError::dim("negative sets", positives.len(), negatives.len()));
    }
    let scorer = snapshot.scorer(&params.matching, aggregation)?;
    let sg = &snapshot.subgraphs;
    let mut total = 0.0;
    for (&(r, t), negs) in positives.iter().zip(negatives) {
        if negs.is_empty() {
            return Err(NmnError::InvalidInput(format!("empty candidate set for pair ({r}, {t})")));
        }
        let pos = scorer.distance(r, &sg[r], t, &sg[t]);
        for &(a, b) in negs {
            total += (pos - scorer.distance(a, &sg[a], b, &sg[b]) + gamma).max(0.0);
        }
    }
    Ok(total)
}

/// Per-neighbor gated rows projected by `W_N` for the full neighborhood of
/// `own` matched against the full neighborhood of `other`: row `p` is
/// `(sigmoid(ĥ_p W_gate) ⊙ ĥ_p) W_N`.
fn projected_gated_rows(
    embeddings: ArrayView2<f64>,
    own: &[usize],
    other: &[usize],
    params: &MatchParams,
) -> Array2<f64> {
    let h_own = embeddings.select(Axis(0), own);
    let m = if other.is_empty() {
        Array2::zeros(h_own.raw_dim())
    } else {
        let h_other = embeddings.select(Axis(0), other);
        let attn = softmax_rows(h_own.dot(&h_other.t()).view());
        cross_match_values(h_own.view(), h_other.view(), attn.view())
    };
    let aug = augment_rows(h_own.view(), m.view(), params.beta);
    let gated = aug.dot(&params.w_gate).mapv(sigmoid) * &aug;
    gated.dot(&params.w_n)
}

fn sampling_weights(embeddings: ArrayView2<f64>, center: usize, nbrs: &[usize], w_s: ArrayView2<f64>) -> Vec<f64> {
    let proj = embeddings.row(center).dot(&w_s);
    let logits: Vec<f64> = nbrs.iter().map(|&j| proj.dot(&embeddings.row(j))).collect();
    softmax(&logits)
}

/// `Σ_(r,t) ‖g^w_r − g^w_t‖₁` with soft aggregation over full neighborhoods.
pub fn ws_loss(
    positives: &[(usize, usize)],
    params: &ModelParams,
    merged: &MergedGraph,
    embeddings: ArrayView2<f64>,
) -> f64 {
    let w_s = params.sampler.w_s.view();
    let g_dim = params.matching.neighbor_dim();
    let soft = |c: usize, other: usize| {
        let own = merged.neighbors(c);
        if own.is_empty() {
            return ndarray::Array1::zeros(g_dim);
        }
        let q = projected_gated_rows(embeddings, own, merged.neighbors(other), &params.matching);
        let alpha = ndarray::Array1::from(sampling_weights(embeddings, c, own, w_s));
        alpha.dot(&q)
    };
    positives
        .iter()
        .map(|&(r, t)| {
            let gr = soft(r, t);
            let gt = soft(t, r);
            gr.iter().zip(&gt).map(|(a, b)| (a - b).abs()).sum::<f64>()
        })
        .sum()
}

/// `ws_loss` and its gradient with respect to `W_s`.
pub fn ws_loss_and_grad(
    positives: &[(usize, usize)],
    params: &ModelParams,
    merged: &MergedGraph,
    embeddings: ArrayView2<f64>,
) -> (f64, Array2<f64>) {
    let mut tape = Tape::new();
    let w_s = tape.leaf(params.sampler.w_s.clone());
    let g_dim = params.matching.neighbor_dim();
    let zero = tape.leaf(Array2::zeros((1, g_dim)));
    let mut terms = Vec::with_capacity(positives.len());
    let soft = |tape: &mut Tape<'_>, c: usize, other: usize| {
        let own = merged.neighbors(c);
        if own.is_empty() {
            return zero;
        }
        let q = tape.leaf(projected_gated_rows(embeddings, own, merged.neighbors(other), &params.matching));
        let hc = tape.leaf(embeddings.select(Axis(0), &[c]));
        let hn = tape.leaf(embeddings.select(Axis(0), own));
        let proj = tape.matmul(hc, w_s);
        let logits = tape.matmul_t(proj, hn);
        let alpha = tape.softmax_rows(logits);
        tape.matmul(alpha, q)
    };
    for &(r, t) in positives {
        let gr = soft(&mut tape, r, t);
        let gt = soft(&mut tape, t, r);
        let diff = tape.sub(gr, gt);
        terms.push(tape.abs_sum(diff));
    }
    if terms.is_empty() {
        return (0.0, Array2::zeros(params.sampler.w_s.raw_dim()));
    }
    let loss = tape.add_many(&terms);
    let grads = tape.backward(loss);
    let g = grads.get_or_zeros(w_s, params.sampler.w_s.dim());
    (tape.scalar(loss), g)
}

/// Gradients of one objective, keyed by checkpoint parameter name.
pub type NamedGrads = Vec<(String, Array2<f64>)>;

fn encoder_grads(grads: &crate::tape::Gradients, vars: &crate::encoder::EncoderVars, params: &ModelParams) -> NamedGrads {
    let e = &params.encoder;
    let mut out = Vec::new();
    for l in 0..e.num_layers() {
        out.push((format!("gcn_w_{l}"), grads.get_or_zeros(vars.gcn_weights[l], e.gcn_weights[l].dim())));
        out.push((
            format!("hw_t_{l}"),
            grads.get_or_zeros(vars.highway_gate_weights[l], e.highway_gate_weights[l].dim()),
        ));
        out.push((
            format!("hw_b_{l}"),
            grads.get_or_zeros(vars.highway_gate_bias[l], e.highway_gate_bias[l].dim()),
        ));
    }
    out
}

/// Pre-training objective and encoder gradients. Each positive is hinged
/// against its own negatives and the result is averaged over hinge terms.
pub fn pretrain_loss_and_grads(
    positives: &[(usize, usize)],
    negatives: &[Vec<(usize, usize)>],
    params: &ModelParams,
    merged: &MergedGraph,
    gamma: f64,
) -> Result<(f64, NamedGrads)> {
    if positives.is_empty() {
        return Err(NmnError::InvalidInput("no positive pairs".into()));
    }
    if negatives.len() != positives.len() {
        return Err(NmnError::dim("negative sets", positives.len(), negatives.len()));
    }
    let mut tape = Tape::new();
    let vars = crate::encoder::EncoderVars::register(&mut tape, &params.encoder);
    let h = crate::encoder::encode_on_tape(&mut tape, merged, &vars);
    let flat: Vec<(usize, usize)> = negatives.iter().flatten().copied().collect();
    let column = |tape: &mut Tape<'_>, pairs: &[(usize, usize)]| {
        let (l, r): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let a = tape.gather(h, &l);
        let b = tape.gather(h, &r);
        let d = tape.sub(a, b);
        tape.row_abs_sum(d)
    };
    let pos = column(&mut tape, positives);
    let loss = if flat.is_empty() {
        tape.scale(pos, 0.0)
    } else {
        let neg = column(&mut tape, &flat);
        let mut terms = Vec::new();
        let mut start = 0;
        for (i, group) in negatives.iter().enumerate() {
            if group.is_empty() {
                continue;
            }
            let p = tape.slice_rows(pos, i, i + 1);
            let n = tape.slice_rows(neg, start, start + group.len());
            terms.push(tape.hinge_all_pairs(p, n, gamma));
            start += group.len();
        }
        let total = tape.add_many(&terms);
        tape.scale(total, 1.0 / flat.len() as f64)
    };
    let grads = tape.backward(loss);
    Ok((tape.scalar(loss), encoder_grads(&grads, &vars, params)))
}

/// Matching objective (averaged over hinge terms) and gradients for every
/// parameter but `W_s`.
pub fn main_loss_and_grads(
    positives: &[(usize, usize)],
    negatives: &[Vec<(usize, usize)>],
    subgraphs: &[Vec<usize>],
    params: &ModelParams,
    merged: &MergedGraph,
    aggregation: Aggregation,
    gamma: f64,
) -> Result<(f64, NamedGrads)> {
    if negatives.len() != positives.len() {
        return Err(NmnError::dim("negative sets", positives.len(), negatives.len()));
    }
    let mut tape = Tape::new();
    let pt = PairTape::build(&mut tape, merged, params, aggregation);
    let mut pairs = Vec::new();
    let mut groups = Vec::with_capacity(positives.len());
    for (&(r, t), negs) in positives.iter().zip(negatives) {
        if negs.is_empty() {
            return Err(NmnError::InvalidInput(format!("empty candidate set for pair ({r}, {t})")));
        }
        groups.push((pairs.len(), negs.len()));
        pairs.push((r, t));
        pairs.extend_from_slice(negs);
    }
    let count = pairs.len() - positives.len();
    let dist = pt.distances(&mut tape, &pairs, subgraphs);
    let terms: Vec<_> = groups
        .iter()
        .map(|&(start, n)| {
            let pos = tape.slice_rows(dist, start, start + 1);
            let neg = tape.slice_rows(dist, start + 1, start + 1 + n);
            tape.hinge_all_pairs(pos, neg, gamma)
        })
        .collect();
    let total = tape.add_many(&terms);
    let loss = tape.scale(total, 1.0 / count.max(1) as f64);
    let grads = tape.backward(loss);
    let mut out = encoder_grads(&grads, &pt.encoder, params);
    out.push(("w_gate".into(), grads.get_or_zeros(pt.w_gate, params.matching.w_gate.dim())));
    out.push(("w_n".into(), grads.get_or_zeros(pt.w_n, params.matching.w_n.dim())));
    Ok((tape.scalar(loss), out))
}

fn param_mut<'a>(params: &'a mut ModelParams, name: &str) -> &'a mut Array2<f64> {
    if let Some(rest) = name.strip_prefix("gcn_w_") {
        return &mut params.encoder.gcn_weights[rest.parse::<usize>().unwrap()];
    }
    if let Some(rest) = name.strip_prefix("hw_t_") {
        return &mut params.encoder.highway_gate_weights[rest.parse::<usize>().unwrap()];
    }
    if let Some(rest) = name.strip_prefix("hw_b_") {
        return &mut params.encoder.highway_gate_bias[rest.parse::<usize>().unwrap()];
    }
    match name {
        "w_s" => &mut params.sampler.w_s,
        "w_gate" => &mut params.matching.w_gate,
        "w_n" => &mut params.matching.w_n,
        _ => panic!("unknown parameter {name}"),
    }
}

/// Plain SGD, or Adam with the usual defaults.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    moments: HashMap<String, (Array2<f64>, Array2<f64>, i32)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            moments: HashMap::new(),
        }
    }

    pub fn apply(&mut self, params: &mut ModelParams, grads: &[(String, Array2<f64>)]) {
        for (name, g) in grads {
            let p = param_mut(params, name);
            match self.kind {
                OptimizerKind::Sgd => p.scaled_add(-self.lr, g),
                OptimizerKind::Adam => {
                    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
                    let (m, v, t) = self
                        .moments
                        .entry(name.clone())
                        .or_insert_with(|| (Array2::zeros(g.raw_dim()), Array2::zeros(g.raw_dim()), 0));
                    *t += 1;
                    m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
                    v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
                    let c1 = 1.0 - b1.powi(*t);
                    let c2 = 1.0 - b2.powi(*t);
                    let lr = self.lr;
                    ndarray::Zip::from(p)
                        .and(&*m)
                        .and(&*v)
                        .for_each(|p, &m, &v| *p -= lr * (m / c1) / ((v / c2).sqrt() + eps));
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Main,
}

impl Phase {
    fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Main => "main",
        }
    }
}

/// One JSON-lines log record per epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogEntry {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub hits1_val: Option<f64>,
    pub ws_round: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ws_loss: Option<f64>,
}

pub fn log_to_jsonl(log: &[LogEntry]) -> String {
    let mut s = String::new();
    for e in log {
        s.push_str(&serde_json::to_string(e).expect("log entries serialize"));
        s.push('\n');
    }
    s
}

fn check_finite(loss: f64, phase: Phase, epoch: usize, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(NmnError::NonFinite {
            phase: phase.name(),
            epoch,
            batch,
        })
    }
}

/// Stateful trainer; [`run_training`] drives it through both phases.
pub struct Trainer<'g> {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub log: Vec<LogEntry>,
    merged: &'g MergedGraph,
    fit: Vec<(usize, usize)>,
    valid: Vec<(usize, usize)>,
    optimizer: Optimizer,
    ws_optimizer: Optimizer,
    pretrain_negatives: Vec<Vec<(usize, usize)>>,
    main_negatives: Vec<Vec<(usize, usize)>>,
}

impl<'g> Trainer<'g> {
    /// `seeds` are training alignments as node-index pairs; a
    /// `valid_fraction` share is held out for validation.
    pub fn new(config: TrainConfig, merged: &'g MergedGraph, seeds: &[(usize, usize)], params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.validate()?;
        if merged.feature_dim() != params.dim() {
            return Err(NmnError::dim("feature width", params.dim(), merged.feature_dim()));
        }
        if seeds.is_empty() {
            return Err(NmnError::InvalidInput("no training seeds".into()));
        }
        for &(a, b) in seeds {
            if a >= merged.num_nodes || b >= merged.num_nodes || merged.side[a] != Side::First || merged.side[b] != Side::Second {
                return Err(NmnError::InvalidInput(format!("seed ({a}, {b}) is not a G1-G2 node pair")));
            }
        }
        let mut shuffled = seeds.to_vec();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1)));
        let n_valid = ((config.valid_fraction * seeds.len() as f64).round() as usize).min(seeds.len() - 1);
        let fit = shuffled.split_off(n_valid);
        let optimizer = Optimizer::new(config.optimizer, config.lr);
        let ws_optimizer = Optimizer::new(config.optimizer, config.lr);
        Ok(Trainer {
            config,
            params,
            log: Vec::new(),
            merged,
            fit,
            valid: shuffled,
            optimizer,
            ws_optimizer,
            pretrain_negatives: Vec::new(),
            main_negatives: Vec::new(),
        })
    }

    pub fn fit_pairs(&self) -> &[(usize, usize)] {
        &self.fit
    }

    pub fn valid_pairs(&self) -> &[(usize, usize)] {
        &self.valid
    }

    fn eval_pairs(&self) -> &[(usize, usize)] {
        if self.valid.is_empty() {
            &self.fit
        } else {
            &self.valid
        }
    }

    fn batches(&self) -> Vec<std::ops::Range<usize>> {
        let n = self.fit.len();
        let size = if self.config.batch_size == 0 { n } else { self.config.batch_size };
        (0..n).step_by(size.max(1)).map(|s| s..(s + size).min(n)).collect()
    }

    /// Hits@1 of held-out pairs by encoder distance alone.
    pub fn embedding_hits1(&self) -> Result<f64> {
        let h = crate::encoder::encode(self.merged, &self.params.encoder)?;
        let pairs = self.eval_pairs();
        let pool = self.config.rank_pool_nodes(self.merged, pairs);
        let hits = pairs
            .iter()
            .filter(|&&(s, g)| embedding_ranking(s, h.view(), &pool).first().map(|x| x.0) == Some(g))
            .count();
        Ok(hits as f64 / pairs.len() as f64)
    }

    /// Hits@1 of held-out pairs under the full matching model.
    pub fn matching_hits1(&self) -> Result<f64> {
        let snap = Snapshot::take(self.merged, &self.params, &self.config.match_settings())?;
        let scorer = snap.scorer(&self.params.matching, self.config.aggregation)?;
        let pairs = self.eval_pairs();
        let pool = self.config.rank_pool_nodes(self.merged, pairs);
        let width = self.config.rescreen_for(pool.len());
        let hits = pairs
            .iter()
            .filter(|&&(s, g)| {
                let ranked = rank_counterparts(s, &scorer, &snap.subgraphs, &pool, width);
                rank_of(&ranked, g) == Some(1)
            })
            .count();
        Ok(hits as f64 / pairs.len() as f64)
    }

    /// One pre-training epoch; returns the summed loss.
    pub fn pretrain_epoch(&mut self, epoch: usize) -> Result<f64> {
        if self.pretrain_negatives.is_empty() || (epoch - 1) % self.config.negative_refresh_epochs == 0 {
            let h = crate::encoder::encode(self.merged, &self.params.encoder)?;
            self.pretrain_negatives = nearest_neighbor_negatives_grouped(
                &self.fit,
                h.view(),
                self.merged,
                self.config.negatives_per_positive,
            )?;
        }
        let mut total = 0.0;
        for (b, range) in self.batches().into_iter().enumerate() {
            let (loss, grads) = pretrain_loss_and_grads(
                &self.fit[range.clone()],
                &self.pretrain_negatives[range],
                &self.params,
                self.merged,
                self.config.gamma,
            )?;
            check_finite(loss, Phase::Pretrain, epoch, b)?;
            self.optimizer.apply(&mut self.params, &grads);
            total += loss;
        }
        Ok(total)
    }

    /// One matching-objective epoch; `W_s` is left untouched.
    pub fn main_epoch(&mut self, epoch: usize) -> Result<f64> {
        let settings = self.config.match_settings();
        let snap = Snapshot::take(self.merged, &self.params, &settings)?;
        if self.main_negatives.is_empty() || (epoch - 1) % self.config.negative_refresh_epochs == 0 {
            self.main_negatives = candidate_negatives(&self.fit, snap.embeddings.view(), self.merged, self.config.t)?;
        }
        let mut total = 0.0;
        for (b, range) in self.batches().into_iter().enumerate() {
            let (loss, grads) = main_loss_and_grads(
                &self.fit[range.clone()],
                &self.main_negatives[range],
                &snap.subgraphs,
                &self.params,
                self.merged,
                self.config.aggregation,
                self.config.gamma,
            )?;
            check_finite(loss, Phase::Main, epoch, b)?;
            self.optimizer.apply(&mut self.params, &grads);
            total += loss;
        }
        Ok(total)
    }

    /// `ws_steps` gradient steps on the per-pair mean of the sampler
    /// objective, updating only `W_s`. Returns the summed loss before the
    /// first step.
    pub fn ws_round(&mut self, epoch: usize) -> Result<f64> {
        let h = crate::encoder::encode(self.merged, &self.params.encoder)?;
        let mut first = None;
        for _ in 0..self.config.ws_steps {
            let (loss, g) = ws_loss_and_grad(&self.fit, &self.params, self.merged, h.view());
            check_finite(loss, Phase::Main, epoch, 0)?;
            first.get_or_insert(loss);
            let g = g / self.fit.len() as f64;
            self.ws_optimizer.apply(&mut self.params, &[("w_s".to_string(), g)]);
        }
        Ok(first.unwrap_or_else(|| ws_loss(&self.fit, &self.params, self.merged, h.view())))
    }

    /// Pre-trains until held-out Hits@1 stops improving for
    /// `pretrain_patience` epochs or the epoch cap is reached.
    pub fn pretrain(&mut self) -> Result<()> {
        let mut best = f64::NEG_INFINITY;
        let mut stale = 0;
        for epoch in 1..=self.config.pretrain_cap() {
            let loss = self.pretrain_epoch(epoch)?;
            let hits = self.embedding_hits1()?;
            self.log.push(LogEntry {
                epoch,
                phase: Phase::Pretrain,
                loss,
                hits1_val: Some(hits),
                ws_round: false,
                ws_loss: None,
            });
            if hits > best {
                best = hits;
                stale = 0;
            } else {
                stale += 1;
                if stale >= self.config.pretrain_patience {
                    break;
                }
            }
        }
        Ok(())
    }

    pub fn train_main(&mut self) -> Result<()> {
        for epoch in 1..=self.config.max_epochs {
            let loss = self.main_epoch(epoch)?;
            let ws = if epoch % self.config.ws_interval == 0 {
                Some(self.ws_round(epoch)?)
            } else {
                None
            };
            let hits = self.matching_hits1()?;
            self.log.push(LogEntry {
                epoch,
                phase: Phase::Main,
                loss,
                hits1_val: Some(hits),
                ws_round: ws.is_some(),
                ws_loss: ws,
            });
        }
        Ok(())
    }
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<LogEntry>,
}

/// Fresh parameters sized for `merged`, seeded from the config.
pub fn initial_params(config: &TrainConfig, merged: &MergedGraph) -> ModelParams {
    ModelParams::init(
        merged.feature_dim(),
        config.num_layers,
        config.neighbor_dim,
        config.beta,
        config.seed,
    )
}

/// Pre-training followed by the matching phase with periodic `W_s` tuning.
/// `max_epochs = 0` returns the initial parameters and an empty log.
pub fn run_training(config: &TrainConfig, merged: &MergedGraph, seeds: &[(usize, usize)]) -> Result<TrainOutcome> {
    let params = initial_params(config, merged);
    run_training_from(config, merged, seeds, params)
}

pub fn run_training_from(
    config: &TrainConfig,
    merged: &MergedGraph,
    seeds: &[(usize, usize)],
    params: ModelParams,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), merged, seeds, params)?;
    if config.max_epochs > 0 {
        trainer.pretrain()?;
        trainer.train_main()?;
    }
    Ok(TrainOutcome {
        params: trainer.params,
        log: trainer.log,
    })
}
