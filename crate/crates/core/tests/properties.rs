use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use nmn_core::datatools::{degree_diff_distribution, id_sets, sparsify, triple_counts};
use nmn_core::encoder::{encode, gcn_layer_forward, EncoderParams};
use nmn_core::evaluation::{hits_at_k, rank_counterparts, AlignmentRanking};
use nmn_core::kg::{load_kg, write_kg, KnowledgeGraph, MergedGraph, Triple};
use nmn_core::matching::{cross_match_embeddings, pair_distance, Aggregation, MatchParams};
use nmn_core::model::{MatchSettings, ModelParams, SamplingStrategy, Snapshot};
use nmn_core::neighborhood::{sample_neighborhood, select_candidates, softmax, SamplingMode};
use nmn_core::tape::cross_match_values;
use nmn_core::training::{main_loss, pretrain_loss};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

/// Random undirected graph on `n` nodes as adjacency lists.
fn adjacency(n: usize) -> impl Strategy<Value = Vec<Vec<usize>>> {
    prop::collection::vec(any::<bool>(), n * n).prop_map(move |bits| {
        let mut nb = vec![Vec::new(); n];
        for i in 0..n {
            for j in i + 1..n {
                if bits[i * n + j] {
                    nb[i].push(j);
                    nb[j].push(i);
                }
            }
        }
        nb
    })
}

fn kg_strategy() -> impl Strategy<Value = KnowledgeGraph> {
    (2u32..12).prop_flat_map(|n| {
        prop::collection::vec((0..n, 0u32..4, 0..n), 0..20).prop_map(move |ts| {
            let ents = (0..n).map(|i| (i * 3 + 1, format!("entity {i}")));
            let triples = ts
                .into_iter()
                .map(|(h, r, t)| Triple { head: h * 3 + 1, relation: r, tail: t * 3 + 1 })
                .collect();
            KnowledgeGraph::new(ents, triples).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn encoder_is_permutation_equivariant(nb in adjacency(6), f in matrix(6, 3), seed in any::<u64>()) {
        let params = EncoderParams::seeded(3, 2, 1);
        let g = MergedGraph::from_adjacency(nb.clone(), f.clone(), 6);
        let mut perm: Vec<usize> = (0..6).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        // node i of the original becomes node perm[i]
        let mut nb_p = vec![Vec::new(); 6];
        let mut f_p = Array2::zeros((6, 3));
        for i in 0..6 {
            nb_p[perm[i]] = nb[i].iter().map(|&j| perm[j]).collect();
            f_p.row_mut(perm[i]).assign(&f.row(i));
        }
        let gp = MergedGraph::from_adjacency(nb_p, f_p, 6);
        let h = encode(&g, &params).unwrap();
        let hp = encode(&gp, &params).unwrap();
        for i in 0..6 {
            for c in 0..3 {
                prop_assert!((h[[i, c]] - hp[[perm[i], c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gcn_output_is_non_negative(nb in adjacency(5), f in matrix(5, 3), w in matrix(3, 3)) {
        let g = MergedGraph::from_adjacency(nb, f.clone(), 5);
        let out = gcn_layer_forward(f.view(), &g, w.view()).unwrap();
        prop_assert!(out.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn normalizer_is_degree_plus_one(nb in adjacency(7)) {
        let g = MergedGraph::from_adjacency(nb.clone(), Array2::zeros((7, 1)), 4);
        for (i, list) in nb.iter().enumerate() {
            prop_assert_eq!(g.norm_constants[i], list.len() as f64 + 1.0);
        }
    }

    #[test]
    fn softmax_is_shift_invariant(logits in prop::collection::vec(-30.0f64..30.0, 1..8), c in -100.0f64..100.0) {
        let shifted: Vec<f64> = logits.iter().map(|x| x + c).collect();
        for (a, b) in softmax(&logits).iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn top_k_ignores_positive_scaling(nb in adjacency(7), f in matrix(7, 3), w in matrix(3, 3), c in 0.1f64..10.0, k in 1usize..4) {
        let g = MergedGraph::from_adjacency(nb, f.clone(), 7);
        let wc = &w * c;
        for center in 0..7 {
            if g.neighbors(center).is_empty() {
                continue;
            }
            let a = sample_neighborhood(center, &g, f.view(), w.view(), k, SamplingMode::Deterministic, 0).unwrap();
            let b = sample_neighborhood(center, &g, f.view(), wc.view(), k, SamplingMode::Deterministic, 0).unwrap();
            let sa: BTreeSet<usize> = a.neighbor_ids.into_iter().collect();
            let sb: BTreeSet<usize> = b.neighbor_ids.into_iter().collect();
            prop_assert_eq!(sa, sb);
        }
    }

    #[test]
    fn candidates_ignore_pool_order(src in matrix(1, 3), pool in matrix(8, 3), t in 1usize..9, seed in any::<u64>()) {
        let ids: Vec<usize> = (10..18).collect();
        let a = select_candidates(0, src.row(0), pool.view(), &ids, t).unwrap();
        let mut order: Vec<usize> = (0..8).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let shuffled = pool.select(ndarray::Axis(0), &order);
        let sids: Vec<usize> = order.iter().map(|&i| ids[i]).collect();
        let b = select_candidates(0, src.row(0), shuffled.view(), &sids, t).unwrap();
        prop_assert_eq!(a.candidates, b.candidates);
    }

    #[test]
    fn attention_rows_are_distributions(l in matrix(4, 3), r in matrix(5, 3)) {
        let c = cross_match_embeddings(l.view(), r.view()).unwrap();
        for row in c.attention_left_to_right.rows().into_iter().chain(c.attention_right_to_left.rows()) {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn identical_copies_match_to_zero(h in matrix(1, 4), copies in 1usize..5) {
        let right = Array2::from_shape_fn((copies, 4), |(_, c)| h[[0, c]]);
        let c = cross_match_embeddings(h.view(), right.view()).unwrap();
        prop_assert!(c.matching_vectors_left.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matching_vector_scales_with_differences(hp in matrix(1, 3), hq in matrix(3, 3), logits in matrix(1, 3), c in 1.0f64..5.0) {
        let attn = Array2::from_shape_vec((1, 3), softmax(&logits.row(0).to_vec())).unwrap();
        // h_q moved so that every h_p − h_q is multiplied by c
        let far = Array2::from_shape_fn((3, 3), |(q, i)| hp[[0, i]] - c * (hp[[0, i]] - hq[[q, i]]));
        let base = cross_match_values(hp.view(), hq.view(), attn.view());
        let scaled = cross_match_values(hp.view(), far.view(), attn.view());
        for i in 0..3 {
            prop_assert!((scaled[[0, i]] - c * base[[0, i]]).abs() < 1e-9);
        }
    }

    #[test]
    fn pair_distance_is_a_metric(x in prop::collection::vec(-5.0f64..5.0, 6), y in prop::collection::vec(-5.0f64..5.0, 6), z in prop::collection::vec(-5.0f64..5.0, 6)) {
        let (x, y, z) = (Array1::from(x), Array1::from(y), Array1::from(z));
        let d = |a: &Array1<f64>, b: &Array1<f64>| pair_distance(a.view(), b.view()).unwrap();
        prop_assert_eq!(d(&x, &x), 0.0);
        prop_assert_eq!(d(&x, &y), d(&y, &x));
        prop_assert!(d(&x, &z) <= d(&x, &y) + d(&y, &z) + 1e-12);
        if x != y {
            prop_assert!(d(&x, &y) > 0.0);
        }
    }

    #[test]
    fn hinge_losses_are_non_negative(h in matrix(6, 3), gamma in 0.01f64..3.0) {
        let l = pretrain_loss(&[(0, 3), (1, 4)], &[(0, 4), (2, 3), (1, 5)], h.view(), gamma).unwrap();
        prop_assert!(l >= 0.0);
    }

    #[test]
    fn kg_roundtrip(kg in kg_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let (e, t) = (dir.path().join("ent"), dir.path().join("tri"));
        write_kg(&kg, &e, &t).unwrap();
        prop_assert_eq!(load_kg(&e, &t).unwrap(), kg);
    }

    #[test]
    fn sparsify_keeps_a_subset(kg in kg_strategy(), keep in 0.05f64..1.0, seed in any::<u64>()) {
        let s = sparsify(&kg, keep, seed).unwrap();
        prop_assert_eq!(s.triples.len(), (keep * kg.triples.len() as f64).floor() as usize);
        let full = triple_counts(&kg);
        for (t, c) in triple_counts(&s) {
            prop_assert!(full.get(&t).copied().unwrap_or(0) >= c);
        }
        prop_assert_eq!(id_sets(&s), id_sets(&kg));
    }

    #[test]
    fn degree_diff_is_symmetric(g1 in kg_strategy(), g2 in kg_strategy(), seed in any::<u64>()) {
        let mut a: Vec<u32> = g1.entity_ids.iter().copied().collect();
        let mut b: Vec<u32> = g2.entity_ids.iter().copied().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        a.shuffle(&mut rng);
        b.shuffle(&mut rng);
        let gold: Vec<(u32, u32)> = a.iter().copied().zip(b.iter().copied()).collect();
        let reversed: Vec<(u32, u32)> = gold.iter().map(|&(x, y)| (y, x)).collect();
        let edges = [0, 1, 3];
        let h = degree_diff_distribution(&g1, &g2, &gold, &edges).unwrap();
        prop_assert_eq!(h.clone(), degree_diff_distribution(&g2, &g1, &reversed, &edges).unwrap());
        prop_assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), gold.len());
    }

    #[test]
    fn hits_monotone_in_k(lists in prop::collection::vec(Just((0..6).collect::<Vec<u32>>()).prop_shuffle(), 1..8)) {
        let ranking = AlignmentRanking {
            rankings: lists.iter().enumerate().map(|(s, l)| (s as u32, l.iter().map(|&c| (c, 0.0)).collect())).collect(),
            rescreen_width: 6,
        };
        let gold: Vec<(u32, u32)> = (0..lists.len() as u32).map(|s| (s, s % 6)).collect();
        let mut prev = 0.0;
        for k in 1..=6 {
            let h = hits_at_k(&ranking, &gold, k).unwrap();
            prop_assert!(h >= prev);
            prev = h;
        }
        prop_assert_eq!(prev, 1.0);
    }

    #[test]
    fn full_width_ranking_ignores_pool_order(f in matrix(8, 3), nb in adjacency(8), seed in any::<u64>()) {
        let g = MergedGraph::from_adjacency(nb, f, 4);
        let params = ModelParams::init(3, 1, 2, 0.3, seed);
        let settings = MatchSettings { k: 2, strategy: SamplingStrategy::Learned, aggregation: Aggregation::Matching, seed: 0 };
        let snap = Snapshot::take(&g, &params, &settings).unwrap();
        let scorer = snap.scorer(&params.matching, Aggregation::Matching).unwrap();
        let ranked = rank_counterparts(0, &scorer, &snap.subgraphs, &[4, 5, 6, 7], 4);
        // oracle: exhaustive matching distance, ties to the smaller node
        let mut oracle: Vec<(usize, f64)> = (4..8)
            .map(|c| (c, scorer.distance(0, &snap.subgraphs[0], c, &snap.subgraphs[c])))
            .collect();
        oracle.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        prop_assert_eq!(ranked, oracle);
    }
}

#[test]
fn candidate_hinge_is_zero_when_margins_hold() {
    // identity encoder and zero W_N: distances reduce to embedding distance
    let f = ndarray::array![[0.0, 0.0], [10.0, 0.0], [0.0, 0.0], [10.0, 10.0]];
    let g = MergedGraph::from_adjacency(vec![vec![]; 4], f, 2);
    let mut params = ModelParams::init(2, 1, 2, 0.1, 0);
    // identity encoder: zero GCN weight and a closed highway gate
    params.encoder.gcn_weights[0] = Array2::zeros((2, 2));
    params.encoder.highway_gate_bias[0] = Array2::from_elem((1, 2), -1e3);
    params.matching = MatchParams { beta: 0.1, w_gate: Array2::zeros((4, 4)), w_n: Array2::zeros((4, 2)) };
    let settings = MatchSettings { k: 2, strategy: SamplingStrategy::Learned, aggregation: Aggregation::Matching, seed: 0 };
    let snap = Snapshot::take(&g, &params, &settings).unwrap();
    let l = main_loss(&[(0, 2)], &[vec![(0, 3)]], &snap, &params, Aggregation::Matching, 1.0).unwrap();
    assert_eq!(l, 0.0);
    // single negative at the same distance as the positive costs exactly gamma
    let l = main_loss(&[(0, 2)], &[vec![(0, 2)]], &snap, &params, Aggregation::Matching, 1.0).unwrap();
    assert_eq!(l, 1.0);
}
