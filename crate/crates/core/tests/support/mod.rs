//! Finite-difference gradient checks shared by the gradient tests and the
//! acceptance runner.
#![allow(dead_code)]

use std::collections::BTreeMap;

use ndarray::Array2;
use nmn_core::encoder::encode;
use nmn_core::kg::MergedGraph;
use nmn_core::matching::{Aggregation, PairScorer};
use nmn_core::model::ModelParams;
use nmn_core::training::{main_loss_and_grads, pretrain_loss, pretrain_loss_and_grads, ws_loss, ws_loss_and_grad};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// Relative error of one parameter's analytic gradient.
#[derive(Debug)]
pub struct GradCheck {
    pub name: String,
    pub rel_err: f64,
    /// Largest finite-difference entry, to catch checks that pass only
    /// because both sides vanish.
    pub max_abs: f64,
    /// Analytic loss minus the plain forward loss.
    pub loss_gap: f64,
}

impl GradCheck {
    pub fn ok(&self) -> bool {
        self.rel_err <= TOL && self.max_abs > 1e-8 && self.loss_gap.abs() < 1e-9
    }
}

pub fn graph(edges: &[(usize, usize)], n: usize, n_first: usize, dim: usize, seed: u64) -> MergedGraph {
    let mut nb = vec![Vec::new(); n];
    for &(a, b) in edges {
        nb[a].push(b);
        nb[b].push(a);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let f = Array2::from_shape_simple_fn((n, dim), || normal.sample(&mut rng));
    MergedGraph::from_adjacency(nb, f, n_first)
}

/// 10 nodes: 0..5 in G1, 5..10 in G2.
pub fn ten_nodes() -> MergedGraph {
    let edges = [(0, 1), (0, 2), (1, 3), (2, 3), (3, 4), (5, 6), (5, 7), (6, 8), (8, 9), (7, 9)];
    graph(&edges, 10, 5, 4, 11)
}

fn perturbed(params: &ModelParams, name: &str, idx: (usize, usize), delta: f64) -> ModelParams {
    let mut map: BTreeMap<String, Array2<f64>> =
        params.named_arrays().into_iter().map(|(k, v)| (k, v.clone())).collect();
    map.get_mut(name).unwrap()[idx] += delta;
    ModelParams::from_named(map, params.matching.beta).unwrap()
}

pub fn numeric(params: &ModelParams, name: &str, f: &dyn Fn(&ModelParams) -> f64) -> Array2<f64> {
    let shape = params.named_arrays().into_iter().find(|(k, _)| k == name).unwrap().1.dim();
    Array2::from_shape_fn(shape, |idx| {
        let up = f(&perturbed(params, name, idx, STEP));
        let down = f(&perturbed(params, name, idx, -STEP));
        (up - down) / (2.0 * STEP)
    })
}

pub fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = (a - b).mapv(|x| x * x).sum().sqrt();
    let scale = a.mapv(|x| x * x).sum().sqrt().max(b.mapv(|x| x * x).sum().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn check(name: &str, analytic: &Array2<f64>, params: &ModelParams, f: &dyn Fn(&ModelParams) -> f64, loss_gap: f64) -> GradCheck {
    let num = numeric(params, name, f);
    GradCheck {
        name: name.to_string(),
        rel_err: rel_err(analytic, &num),
        max_abs: num.iter().fold(0.0, |m, x| m.max(x.abs())),
        loss_gap,
    }
}

/// Hinge mean over groups, computed with the plain forward pass.
fn main_objective(
    params: &ModelParams,
    g: &MergedGraph,
    positives: &[(usize, usize)],
    negatives: &[Vec<(usize, usize)>],
    subgraphs: &[Vec<usize>],
    agg: Aggregation,
    gamma: f64,
) -> f64 {
    let h = encode(g, &params.encoder).unwrap();
    let scorer = PairScorer::new(h.view(), &params.matching, agg).unwrap();
    let d = |(a, b): (usize, usize)| scorer.distance(a, &subgraphs[a], b, &subgraphs[b]);
    let mut total = 0.0;
    let mut count = 0;
    for (&p, negs) in positives.iter().zip(negatives) {
        for &n in negs {
            total += (d(p) - d(n) + gamma).max(0.0);
            count += 1;
        }
    }
    total / count as f64
}

pub fn main_checks(agg: Aggregation, names: &[&str]) -> Vec<GradCheck> {
    let g = ten_nodes();
    let params = ModelParams::init(4, 2, 3, 0.7, 5);
    let pos = vec![(0, 5), (3, 8), (4, 9)];
    let neg = vec![vec![(0, 6), (1, 5)], vec![(3, 9), (2, 8), (3, 5)], vec![(4, 8)]];
    let sub = vec![
        vec![1, 2],
        vec![0, 3],
        vec![0, 3],
        vec![1, 2, 4],
        vec![3],
        vec![6, 7],
        vec![5, 8],
        vec![5, 9],
        vec![6, 9],
        vec![8, 7],
    ];
    // a wide margin keeps every hinge active, away from its kink
    let gamma = 100.0;
    let (loss, grads) = main_loss_and_grads(&pos, &neg, &sub, &params, &g, agg, gamma).unwrap();
    let f = |p: &ModelParams| main_objective(p, &g, &pos, &neg, &sub, agg, gamma);
    let gap = loss - f(&params);
    names
        .iter()
        .map(|&name| {
            let analytic = &grads.iter().find(|(k, _)| k == name).unwrap().1;
            check(name, analytic, &params, &f, gap)
        })
        .collect()
}

pub fn matching_checks() -> Vec<GradCheck> {
    main_checks(
        Aggregation::Matching,
        &["gcn_w_0", "gcn_w_1", "hw_t_0", "hw_t_1", "hw_b_0", "hw_b_1", "w_gate", "w_n"],
    )
}

pub fn pretrain_checks() -> Vec<GradCheck> {
    let g = ten_nodes();
    let params = ModelParams::init(4, 2, 3, 0.1, 9);
    let positives = vec![(0, 5), (2, 7)];
    let negatives = vec![vec![(0, 6), (1, 5), (0, 9)], vec![(2, 8), (3, 7)]];
    let gamma = 100.0;
    let f = |p: &ModelParams| {
        let h = encode(&g, &p.encoder).unwrap();
        let mut total = 0.0;
        for (&pos, negs) in positives.iter().zip(&negatives) {
            total += pretrain_loss(&[pos], negs, h.view(), gamma).unwrap();
        }
        total / 5.0
    };
    let (loss, grads) = pretrain_loss_and_grads(&positives, &negatives, &params, &g, gamma).unwrap();
    let gap = loss - f(&params);
    grads.iter().map(|(name, a)| check(name, a, &params, &f, gap)).collect()
}

pub fn sampler_check() -> GradCheck {
    // six nodes: a triangle on one side, a star on the other
    let g = graph(&[(0, 1), (0, 2), (1, 2), (3, 4), (3, 5)], 6, 3, 3, 4);
    let params = ModelParams::init(3, 1, 2, 0.5, 21);
    let h = encode(&g, &params.encoder).unwrap();
    let positives = [(0, 3), (1, 4), (2, 5)];
    let (loss, analytic) = ws_loss_and_grad(&positives, &params, &g, h.view());
    let f = |p: &ModelParams| ws_loss(&positives, p, &g, h.view());
    let gap = loss - f(&params);
    check("w_s", &analytic, &params, &f, gap)
}
