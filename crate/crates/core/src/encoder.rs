//! Highway-gated multi-layer GCN over the merged graph.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{NmnError, Result};
use crate::kg::MergedGraph;
use crate::tape::{self, Tape, Var};

/// Initial highway gate bias; negative so the gate starts mostly closed
/// (carrying the layer input through).
pub const HIGHWAY_BIAS_INIT: f64 = -1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// `W^(l)`, shape `d^(l-1) × d^(l)`.
    pub gcn_weights: Vec<Array2<f64>>,
    /// `W_T^(l)`, shape `d^(l) × d^(l)`.
    pub highway_gate_weights: Vec<Array2<f64>>,
    /// `b_T^(l)` as `1 × d^(l)` rows.
    pub highway_gate_bias: Vec<Array2<f64>>,
}

pub(crate) fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-limit..limit))
}

impl EncoderParams {
    /// Glorot-uniform weights for `num_layers` layers of width `dim`.
    pub fn init(dim: usize, num_layers: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut p = EncoderParams {
            gcn_weights: Vec::new(),
            highway_gate_weights: Vec::new(),
            highway_gate_bias: Vec::new(),
        };
        for _ in 0..num_layers {
            p.gcn_weights.push(glorot(rng, dim, dim));
            p.highway_gate_weights.push(glorot(rng, dim, dim));
            p.highway_gate_bias.push(Array2::from_elem((1, dim), HIGHWAY_BIAS_INIT));
        }
        p
    }

    pub fn seeded(dim: usize, num_layers: usize, seed: u64) -> Self {
        Self::init(dim, num_layers, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn num_layers(&self) -> usize {
        self.gcn_weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.gcn_weights.first().map_or(0, |w| w.nrows())
    }

    pub fn output_dim(&self) -> usize {
        self.gcn_weights.last().map_or(0, |w| w.ncols())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.gcn_weights.len();
        if self.highway_gate_weights.len() != n || self.highway_gate_bias.len() != n {
            return Err(NmnError::dim("encoder layer count", n, self.highway_gate_weights.len()));
        }
        for l in 0..n {
            let w = &self.gcn_weights[l];
            if l > 0 && self.gcn_weights[l - 1].ncols() != w.nrows() {
                return Err(NmnError::dim("encoder layer chain", self.gcn_weights[l - 1].ncols(), w.nrows()));
            }
            // highway mixes a layer's input with its output
            if w.nrows() != w.ncols() {
                return Err(NmnError::dim("highway layer width", w.nrows(), w.ncols()));
            }
            if self.highway_gate_weights[l].dim() != (w.ncols(), w.ncols()) {
                return Err(NmnError::dim(
                    "highway gate weight",
                    format!("{0}x{0}", w.ncols()),
                    format!("{:?}", self.highway_gate_weights[l].dim()),
                ));
            }
            if self.highway_gate_bias[l].dim() != (1, w.ncols()) {
                return Err(NmnError::dim("highway gate bias", w.ncols(), self.highway_gate_bias[l].ncols()));
            }
        }
        Ok(())
    }
}

/// `ReLU((1/ε_i) Σ_{j ∈ N_i ∪ {i}} h_j W)` for every node.
pub fn gcn_layer_forward(h: ArrayView2<f64>, merged: &MergedGraph, w: ArrayView2<f64>) -> Result<Array2<f64>> {
    if h.nrows() != merged.num_nodes {
        return Err(NmnError::dim("gcn_layer_forward rows", merged.num_nodes, h.nrows()));
    }
    if h.ncols() != w.nrows() {
        return Err(NmnError::dim("gcn_layer_forward weight", h.ncols(), w.nrows()));
    }
    let mut out = tape::graph_mean(h, merged).dot(&w);
    out.mapv_inplace(|x| x.max(0.0));
    Ok(out)
}

/// `T ⊙ H_out + (1 − T) ⊙ H_in` with `T = sigmoid(H_in W_T + b_T)`.
pub fn highway_combine(
    h_in: ArrayView2<f64>,
    h_out: ArrayView2<f64>,
    w_t: ArrayView2<f64>,
    b_t: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    if h_in.dim() != h_out.dim() {
        return Err(NmnError::dim("highway_combine inputs", format!("{:?}", h_in.dim()), format!("{:?}", h_out.dim())));
    }
    let d = h_in.ncols();
    if w_t.dim() != (d, d) || b_t.dim() != (1, d) {
        return Err(NmnError::dim("highway_combine gate", d, format!("{:?}/{:?}", w_t.dim(), b_t.dim())));
    }
    let mut gate = h_in.dot(&w_t) + &b_t;
    gate.mapv_inplace(tape::sigmoid);
    Ok(&gate * &h_out + &(1.0 - &gate) * &h_in)
}

/// Runs every layer (GCN then highway against the layer input) and returns
/// the final-layer embeddings.
pub fn encode(merged: &MergedGraph, params: &EncoderParams) -> Result<Array2<f64>> {
    params.validate()?;
    if merged.feature_dim() != params.input_dim() {
        return Err(NmnError::dim("encode features", params.input_dim(), merged.feature_dim()));
    }
    let mut h = merged.features.clone();
    for l in 0..params.num_layers() {
        let out = gcn_layer_forward(h.view(), merged, params.gcn_weights[l].view())?;
        h = highway_combine(
            h.view(),
            out.view(),
            params.highway_gate_weights[l].view(),
            params.highway_gate_bias[l].view(),
        )?;
    }
    Ok(h)
}

/// Tape handles for the encoder parameters.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub gcn_weights: Vec<Var>,
    pub highway_gate_weights: Vec<Var>,
    pub highway_gate_bias: Vec<Var>,
}

impl EncoderVars {
    pub fn register(tape: &mut Tape<'_>, params: &EncoderParams) -> Self {
        EncoderVars {
            gcn_weights: params.gcn_weights.iter().map(|w| tape.leaf(w.clone())).collect(),
            highway_gate_weights: params.highway_gate_weights.iter().map(|w| tape.leaf(w.clone())).collect(),
            highway_gate_bias: params.highway_gate_bias.iter().map(|w| tape.leaf(w.clone())).collect(),
        }
    }
}

/// Differentiable counterpart of [`encode`].
pub fn encode_on_tape<'g>(tape: &mut Tape<'g>, merged: &'g MergedGraph, vars: &EncoderVars) -> Var {
    let mut h = tape.leaf(merged.features.clone());
    for l in 0..vars.gcn_weights.len() {
        let agg = tape.graph_mean(h, merged);
        let lin = tape.matmul(agg, vars.gcn_weights[l]);
        let out = tape.relu(lin);
        let pre = tape.matmul(h, vars.highway_gate_weights[l]);
        let pre = tape.add_row(pre, vars.highway_gate_bias[l]);
        let gate = tape.sigmoid(pre);
        // h + T ⊙ (out − h)
        let delta = tape.sub(out, h);
        let gated = tape.mul(gate, delta);
        h = tape.add(h, gated);
    }
    h
}
