//! Cross-graph neighborhood matching and aggregation into matching-oriented
//! entity representations.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;

use crate::encoder::glorot;
use crate::error::{NmnError, Result};
use crate::neighborhood::NeighborhoodSubgraph;
use crate::tape::{cross_match_values, sigmoid, softmax_rows};

#[derive(Debug, Clone, PartialEq)]
pub struct MatchParams {
    pub beta: f64,
    /// `2d × 2d` gate applied to augmented neighbor vectors.
    pub w_gate: Array2<f64>,
    /// `2d × d_g` projection to the neighborhood representation.
    pub w_n: Array2<f64>,
}

impl MatchParams {
    pub fn init(dim: usize, neighbor_dim: usize, beta: f64, rng: &mut ChaCha8Rng) -> Self {
        MatchParams {
            beta,
            w_gate: glorot(rng, 2 * dim, 2 * dim),
            w_n: glorot(rng, 2 * dim, neighbor_dim),
        }
    }

    /// Embedding width `d` these parameters expect.
    pub fn dim(&self) -> usize {
        self.w_gate.nrows() / 2
    }

    pub fn neighbor_dim(&self) -> usize {
        self.w_n.ncols()
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.beta < 0.0 || !self.beta.is_finite() {
            return Err(NmnError::InvalidInput(format!("beta must be non-negative, got {}", self.beta)));
        }
        if self.w_gate.dim() != (2 * dim, 2 * dim) {
            return Err(NmnError::dim("W_gate", format!("{0}x{0}", 2 * dim), format!("{:?}", self.w_gate.dim())));
        }
        if self.w_n.nrows() != 2 * dim {
            return Err(NmnError::dim("W_N rows", 2 * dim, self.w_n.nrows()));
        }
        Ok(())
    }
}

/// How a sampled neighborhood becomes the neighborhood vector `g`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// Cross-graph matching followed by gated aggregation.
    Matching,
    /// Plain average of sampled neighbor embeddings (no matching).
    Mean,
}

/// Attention and matching vectors in both directions for one subgraph pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttention {
    pub attention_left_to_right: Array2<f64>,
    pub attention_right_to_left: Array2<f64>,
    pub matching_vectors_left: Array2<f64>,
    pub matching_vectors_right: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedPair {
    pub left: NeighborhoodSubgraph,
    pub right: NeighborhoodSubgraph,
    pub cross: CrossAttention,
    pub distance: f64,
}

fn attend(from: ArrayView2<f64>, to: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
    let attn = softmax_rows(from.dot(&to.t()).view());
    let m = cross_match_values(from, to, attn.view());
    (attn, m)
}

/// `a_pq = softmax_q(h_p · h_q)`, `m_p = Σ_q a_pq (h_p − h_q)`, both ways.
pub fn cross_match(left: &NeighborhoodSubgraph, right: &NeighborhoodSubgraph) -> Result<CrossAttention> {
    cross_match_embeddings(left.neighbor_embeddings.view(), right.neighbor_embeddings.view())
}

pub fn cross_match_embeddings(left: ArrayView2<f64>, right: ArrayView2<f64>) -> Result<CrossAttention> {
    if left.nrows() == 0 || right.nrows() == 0 {
        return Err(NmnError::EmptyNeighborhood);
    }
    if left.ncols() != right.ncols() {
        return Err(NmnError::dim("cross_match", left.ncols(), right.ncols()));
    }
    let (a_lr, m_l) = attend(left, right);
    let (a_rl, m_r) = attend(right, left);
    Ok(CrossAttention {
        attention_left_to_right: a_lr,
        attention_right_to_left: a_rl,
        matching_vectors_left: m_l,
        matching_vectors_right: m_r,
    })
}

/// `[h_p ‖ β·m_p]`
pub fn augment_neighbor(h_p: ArrayView1<f64>, m_p: ArrayView1<f64>, beta: f64) -> Array1<f64> {
    let scaled = m_p.mapv(|x| beta * x);
    concatenate![Axis(0), h_p, scaled.view()]
}

pub fn augment_rows(h: ArrayView2<f64>, m: ArrayView2<f64>, beta: f64) -> Array2<f64> {
    let scaled = m.mapv(|x| beta * x);
    concatenate![Axis(1), h, scaled.view()]
}

fn gated_rows(augmented: ArrayView2<f64>, params: &MatchParams) -> Result<Array2<f64>> {
    if augmented.ncols() != params.w_gate.nrows() {
        return Err(NmnError::dim("augmented width", params.w_gate.nrows(), augmented.ncols()));
    }
    if params.w_n.nrows() != params.w_gate.ncols() {
        return Err(NmnError::dim("W_N rows", params.w_gate.ncols(), params.w_n.nrows()));
    }
    let gate = augmented.dot(&params.w_gate).mapv(sigmoid);
    Ok(gate * &augmented)
}

/// `g = (Σ_p sigmoid(ĥ_p W_gate) ⊙ ĥ_p) W_N`; zeros for an empty neighborhood.
pub fn aggregate_neighborhood(augmented: ArrayView2<f64>, params: &MatchParams) -> Result<Array1<f64>> {
    if augmented.nrows() == 0 {
        return Ok(Array1::zeros(params.w_n.ncols()));
    }
    let gated = gated_rows(augmented, params)?;
    Ok(gated.sum_axis(Axis(0)).dot(&params.w_n))
}

/// Probability-weighted variant over the full neighborhood, differentiable
/// in the sampler weights through `alphas`.
pub fn soft_aggregate(all_augmented: ArrayView2<f64>, alphas: &[f64], params: &MatchParams) -> Result<Array1<f64>> {
    if alphas.len() != all_augmented.nrows() {
        return Err(NmnError::dim("soft_aggregate weights", all_augmented.nrows(), alphas.len()));
    }
    if alphas.is_empty() {
        return Ok(Array1::zeros(params.w_n.ncols()));
    }
    let gated = gated_rows(all_augmented, params)?;
    let weights = ArrayView1::from(alphas);
    Ok(weights.dot(&gated).dot(&params.w_n))
}

/// `[g ‖ h]`
pub fn match_representation(g: ArrayView1<f64>, h: ArrayView1<f64>) -> Array1<f64> {
    concatenate![Axis(0), g, h]
}

pub fn pair_distance(left: ArrayView1<f64>, right: ArrayView1<f64>) -> Result<f64> {
    if left.len() != right.len() {
        return Err(NmnError::dim("pair_distance", left.len(), right.len()));
    }
    Ok(left.iter().zip(right.iter()).map(|(a, b)| (a - b).abs()).sum())
}

/// Augmented rows of `own` matched against `other`; an empty `other`
/// leaves the matching vectors at zero.
fn augmented_against(own: ArrayView2<f64>, other: ArrayView2<f64>, beta: f64) -> Array2<f64> {
    let m = if other.nrows() == 0 {
        Array2::zeros(own.raw_dim())
    } else {
        attend(own, other).1
    };
    augment_rows(own, m.view(), beta)
}

/// Neighborhood vector for one side of a pair, straight from the formulas.
pub fn neighborhood_vector(
    own: ArrayView2<f64>,
    other: ArrayView2<f64>,
    params: &MatchParams,
    aggregation: Aggregation,
) -> Result<Array1<f64>> {
    match aggregation {
        Aggregation::Matching => aggregate_neighborhood(augmented_against(own, other, params.beta).view(), params),
        Aggregation::Mean => {
            if own.nrows() == 0 {
                Ok(Array1::zeros(own.ncols()))
            } else {
                Ok(own.mean_axis(Axis(0)).unwrap())
            }
        }
    }
}

/// Matching-oriented representations of an entity pair given their sampled
/// neighbor embeddings.
pub fn pair_representations(
    h_left: ArrayView1<f64>,
    h_right: ArrayView1<f64>,
    left_nbrs: ArrayView2<f64>,
    right_nbrs: ArrayView2<f64>,
    params: &MatchParams,
    aggregation: Aggregation,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let g_l = neighborhood_vector(left_nbrs, right_nbrs, params, aggregation)?;
    let g_r = neighborhood_vector(right_nbrs, left_nbrs, params, aggregation)?;
    Ok((match_representation(g_l.view(), h_left), match_representation(g_r.view(), h_right)))
}

/// Full matching of two subgraphs including the final pair distance.
pub fn match_pair(
    left: &NeighborhoodSubgraph,
    right: &NeighborhoodSubgraph,
    h_left: ArrayView1<f64>,
    h_right: ArrayView1<f64>,
    params: &MatchParams,
) -> Result<MatchedPair> {
    let cross = cross_match(left, right)?;
    let (l, r) = pair_representations(
        h_left,
        h_right,
        left.neighbor_embeddings.view(),
        right.neighbor_embeddings.view(),
        params,
        Aggregation::Matching,
    )?;
    Ok(MatchedPair {
        left: left.clone(),
        right: right.clone(),
        cross,
        distance: pair_distance(l.view(), r.view())?,
    })
}

/// Fast pair scoring over fixed embeddings.
///
/// The gate pre-activation `ĥ_p W_gate` splits into `h_p W_top + β m_p W_bot`
/// and `m_p` is linear in the embeddings, so both halves can be projected
/// once per node instead of once per pair.
pub struct PairScorer<'a> {
    embeddings: ArrayView2<'a, f64>,
    proj_top: Array2<f64>,
    proj_bottom: Array2<f64>,
    params: &'a MatchParams,
    aggregation: Aggregation,
}

impl<'a> PairScorer<'a> {
    pub fn new(embeddings: ArrayView2<'a, f64>, params: &'a MatchParams, aggregation: Aggregation) -> Result<Self> {
        let d = embeddings.ncols();
        if aggregation == Aggregation::Matching {
            params.validate(d)?;
        }
        let (proj_top, proj_bottom) = if aggregation == Aggregation::Matching {
            (
                embeddings.dot(&params.w_gate.slice(s![..d, ..])),
                embeddings.dot(&params.w_gate.slice(s![d.., ..])),
            )
        } else {
            (Array2::zeros((0, 0)), Array2::zeros((0, 0)))
        };
        Ok(PairScorer {
            embeddings,
            proj_top,
            proj_bottom,
            params,
            aggregation,
        })
    }

    pub fn embeddings(&self) -> ArrayView2<'a, f64> {
        self.embeddings
    }

    /// Neighborhood vector of the side owning `own` matched against `other`.
    pub fn neighborhood_vector(&self, own: &[usize], other: &[usize]) -> Array1<f64> {
        let d = self.embeddings.ncols();
        match self.aggregation {
            Aggregation::Mean => {
                let mut acc = Array1::zeros(d);
                for &p in own {
                    acc += &self.embeddings.row(p);
                }
                if !own.is_empty() {
                    acc /= own.len() as f64;
                }
                acc
            }
            Aggregation::Matching => {
                if own.is_empty() {
                    return Array1::zeros(self.params.w_n.ncols());
                }
                let h_own = self.embeddings.select(Axis(0), own);
                let beta = self.params.beta;
                let mut pre = self.proj_top.select(Axis(0), own);
                let m = if other.is_empty() {
                    Array2::zeros(h_own.raw_dim())
                } else {
                    let h_other = self.embeddings.select(Axis(0), other);
                    let attn = softmax_rows(h_own.dot(&h_other.t()).view());
                    let bottom = cross_match_values(
                        self.proj_bottom.select(Axis(0), own).view(),
                        self.proj_bottom.select(Axis(0), other).view(),
                        attn.view(),
                    );
                    pre.scaled_add(beta, &bottom);
                    cross_match_values(h_own.view(), h_other.view(), attn.view())
                };
                let aug = augment_rows(h_own.view(), m.view(), beta);
                let gated = pre.mapv(sigmoid) * &aug;
                gated.sum_axis(Axis(0)).dot(&self.params.w_n)
            }
        }
    }

    /// Matching distance between nodes `a` and `b` with sampled neighbor
    /// lists `sa` and `sb`.
    pub fn distance(&self, a: usize, sa: &[usize], b: usize, sb: &[usize]) -> f64 {
        let g_a = self.neighborhood_vector(sa, sb);
        let g_b = self.neighborhood_vector(sb, sa);
        let g_part: f64 = g_a.iter().zip(&g_b).map(|(x, y)| (x - y).abs()).sum();
        let h_part: f64 = self
            .embeddings
            .row(a)
            .iter()
            .zip(self.embeddings.row(b))
            .map(|(x, y)| (x - y).abs())
            .sum();
        g_part + h_part
    }
}
