//! Sparse variants, dataset statistics, degree-gap histograms and a seeded
//! synthetic benchmark generator.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{NmnError, Result};
use crate::evaluation::{bucket_index, degree_gap, validate_edges};
use crate::kg::{
    build_name_features, load_kg, merge_graphs, read_pairs, write_kg, write_pairs, EntityId, KnowledgeGraph,
    MergedGraph, Triple, WordVectors,
};

/// Keeps `⌊keep_fraction · |T|⌋` triples drawn uniformly without
/// replacement. Entities and relation ids are retained even when no kept
/// triple mentions them.
pub fn sparsify(kg: &KnowledgeGraph, keep_fraction: f64, seed: u64) -> Result<KnowledgeGraph> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(NmnError::Config(format!("keep fraction must lie in (0, 1], got {keep_fraction}")));
    }
    let n_keep = (keep_fraction * kg.triples.len() as f64).floor() as usize;
    let mut idx: Vec<usize> = (0..kg.triples.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(n_keep);
    idx.sort_unstable();
    let mut out = kg.clone();
    out.triples = idx.into_iter().map(|i| kg.triples[i]).collect();
    out.rebuild_neighbor_index();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct KgStats {
    pub num_entities: usize,
    pub num_relations: usize,
    pub num_triples: usize,
}

pub fn kg_stats(kg: &KnowledgeGraph) -> KgStats {
    KgStats {
        num_entities: kg.entity_ids.len(),
        num_relations: kg.relation_ids.len(),
        num_triples: kg.triples.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HistogramBin {
    pub lo: usize,
    pub hi: Option<usize>,
    pub count: usize,
}

/// Histogram of `|deg_G1(e1) − deg_G2(e2)|` over `gold` in half-open bins.
pub fn degree_diff_distribution(
    g1: &KnowledgeGraph,
    g2: &KnowledgeGraph,
    gold: &[(EntityId, EntityId)],
    bucket_edges: &[usize],
) -> Result<Vec<HistogramBin>> {
    validate_edges(bucket_edges)?;
    let mut counts = vec![0usize; bucket_edges.len()];
    for &pair in gold {
        let gap = degree_gap(g1, g2, pair).map_err(|e| match e {
            NmnError::Lookup(id) => NmnError::Integrity(format!("gold pair references unknown entity {id}")),
            other => other,
        })?;
        counts[bucket_index(bucket_edges, gap)] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            lo: bucket_edges[i],
            hi: bucket_edges.get(i + 1).copied(),
            count,
        })
        .collect())
}

pub fn histogram_csv(bins: &[HistogramBin]) -> String {
    let mut s = String::from("lo,hi,count\n");
    for b in bins {
        let hi = b.hi.map_or_else(|| "inf".to_string(), |h| h.to_string());
        s.push_str(&format!("{},{},{}\n", b.lo, hi, b.count));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EdgePerturbation {
    None,
    /// Remove a fraction `p` of G2's triples, keeping `⌊(1 − p)|T|⌋`.
    DropEdges(f64),
}

/// Shared high-degree confusers added to both graphs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseHubs {
    pub count: usize,
    /// Share of each side's triples with one endpoint rewired to a random hub.
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n: usize,
    pub avg_degree: f64,
    pub edges: EdgePerturbation,
    /// Standard deviation of Gaussian noise added to G2 features.
    pub feature_noise: f64,
    pub feature_dim: usize,
    pub feature_scale: f64,
    pub num_relations: u32,
    pub hubs: Option<NoiseHubs>,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(n: usize, avg_degree: f64, seed: u64) -> Self {
        SynthSpec {
            n,
            avg_degree,
            edges: EdgePerturbation::None,
            feature_noise: 0.0,
            feature_dim: 300,
            feature_scale: 0.25,
            num_relations: 10,
            hubs: None,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NmnError::Config(m));
        if self.n < 2 {
            return bad(format!("need at least 2 entities, got {}", self.n));
        }
        if !(self.avg_degree >= 0.0 && self.avg_degree <= (self.n - 1) as f64) {
            return bad(format!("average degree {} outside [0, n-1]", self.avg_degree));
        }
        if let EdgePerturbation::DropEdges(p) = self.edges {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("drop fraction must lie in [0, 1), got {p}"));
            }
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return bad(format!("feature noise must be non-negative, got {}", self.feature_noise));
        }
        if self.feature_dim == 0 || self.num_relations == 0 {
            return bad("feature_dim and num_relations must be at least 1".into());
        }
        if let Some(h) = self.hubs {
            if h.count == 0 || !(0.0..=1.0).contains(&h.fraction) {
                return bad("hubs need count ≥ 1 and fraction in [0, 1]".into());
            }
        }
        Ok(())
    }
}

/// Two graphs, their gold alignment and per-entity features (rows in
/// ascending entity id order). Entity names double as feature tokens.
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub g1: KnowledgeGraph,
    pub g2: KnowledgeGraph,
    pub gold: Vec<(EntityId, EntityId)>,
    pub features1: Array2<f64>,
    pub features2: Array2<f64>,
}

fn rewire_to_hubs(triples: &mut [Triple], hubs: NoiseHubs, first_hub: EntityId, rng: &mut ChaCha8Rng) {
    let n_rewire = (hubs.fraction * triples.len() as f64).floor() as usize;
    let mut idx: Vec<usize> = (0..triples.len()).collect();
    idx.shuffle(rng);
    for &i in &idx[..n_rewire] {
        let hub = first_hub + rng.random_range(0..hubs.count as u32);
        if rng.random_bool(0.5) {
            triples[i].tail = hub;
        } else {
            triples[i].head = hub;
        }
    }
}

/// Erdős–Rényi G1 with edge probability `avg_degree / (n − 1)`, a randomly
/// relabeled and optionally perturbed copy G2, and Gaussian features.
pub fn make_synthetic_pair(spec: &SynthSpec) -> Result<SyntheticPair> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n;
    let p = spec.avg_degree / (n - 1) as f64;
    let mut t1 = Vec::new();
    for i in 0..n as u32 {
        for j in i + 1..n as u32 {
            if rng.random_bool(p) {
                let relation = rng.random_range(0..spec.num_relations);
                t1.push(Triple { head: i, relation, tail: j });
            }
        }
    }
    let mut perm: Vec<EntityId> = (0..n as u32).collect();
    perm.shuffle(&mut rng);
    let mut t2: Vec<Triple> = t1
        .iter()
        .map(|t| Triple {
            head: perm[t.head as usize],
            relation: t.relation,
            tail: perm[t.tail as usize],
        })
        .collect();
    t2.shuffle(&mut rng);
    if let EdgePerturbation::DropEdges(frac) = spec.edges {
        let keep = ((1.0 - frac) * t2.len() as f64).floor() as usize;
        t2.truncate(keep);
    }

    let normal = Normal::new(0.0, spec.feature_scale).expect("finite scale");
    let mut features1 = Array2::from_shape_simple_fn((n, spec.feature_dim), || normal.sample(&mut rng));
    let mut features2 = Array2::zeros((n, spec.feature_dim));
    for i in 0..n {
        features2.row_mut(perm[i] as usize).assign(&features1.row(i));
    }
    if spec.feature_noise > 0.0 {
        let noise = Normal::new(0.0, spec.feature_noise).expect("finite noise");
        features2.mapv_inplace(|x| x + noise.sample(&mut rng));
    }

    let mut names1: Vec<(EntityId, String)> = (0..n as u32).map(|i| (i, format!("a{i}"))).collect();
    let mut names2: Vec<(EntityId, String)> = (0..n as u32).map(|j| (j, format!("b{j}"))).collect();
    if let Some(h) = spec.hubs {
        let hub_rows = Array2::from_shape_simple_fn((h.count, spec.feature_dim), || normal.sample(&mut rng));
        for k in 0..h.count as u32 {
            names1.push((n as u32 + k, format!("hub{k}")));
            names2.push((n as u32 + k, format!("hub{k}")));
        }
        rewire_to_hubs(&mut t1, h, n as u32, &mut rng);
        rewire_to_hubs(&mut t2, h, n as u32, &mut rng);
        features1 = ndarray::concatenate![ndarray::Axis(0), features1, hub_rows];
        features2 = ndarray::concatenate![ndarray::Axis(0), features2, hub_rows];
    }
    t2.sort_by_key(|t| (t.head, t.tail, t.relation));

    let gold = (0..n as u32).map(|i| (i, perm[i as usize])).collect();
    Ok(SyntheticPair {
        g1: KnowledgeGraph::new(names1, t1)?,
        g2: KnowledgeGraph::new(names2, t2)?,
        gold,
        features1,
        features2,
    })
}

impl SyntheticPair {
    /// Token vectors reproducing the features through name lookup.
    pub fn word_vectors(&self) -> WordVectors {
        let mut wv = WordVectors::new(self.features1.ncols());
        for (kg, f) in [(&self.g1, &self.features1), (&self.g2, &self.features2)] {
            for (row, name) in kg.entity_names.values().enumerate() {
                wv.vectors.insert(name.to_lowercase(), f.row(row).to_vec());
            }
        }
        wv
    }

    pub fn into_dataset(self) -> Dataset {
        let words = self.word_vectors();
        Dataset {
            g1: self.g1,
            g2: self.g2,
            gold: self.gold,
            words,
        }
    }
}

pub const VECTORS_FILE: &str = "vectors.txt";

/// A dataset directory: both graphs, all gold pairs and the word vectors
/// that define entity features.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub g1: KnowledgeGraph,
    pub g2: KnowledgeGraph,
    pub gold: Vec<(EntityId, EntityId)>,
    pub words: WordVectors,
}

pub struct DatasetPaths {
    pub ent_ids: [PathBuf; 2],
    pub triples: [PathBuf; 2],
    pub ref_ent_ids: PathBuf,
    pub vectors: PathBuf,
}

impl DatasetPaths {
    pub fn new(dir: &Path) -> Self {
        DatasetPaths {
            ent_ids: [dir.join("ent_ids_1"), dir.join("ent_ids_2")],
            triples: [dir.join("triples_1"), dir.join("triples_2")],
            ref_ent_ids: dir.join("ref_ent_ids"),
            vectors: dir.join(VECTORS_FILE),
        }
    }
}

/// Loads the two graphs and their gold pairs, checking that every pair
/// names known entities.
pub fn load_graphs(dir: &Path) -> Result<(KnowledgeGraph, KnowledgeGraph, Vec<(EntityId, EntityId)>)> {
    let p = DatasetPaths::new(dir);
    let g1 = load_kg(&p.ent_ids[0], &p.triples[0])?;
    let g2 = load_kg(&p.ent_ids[1], &p.triples[1])?;
    let gold = read_pairs(&p.ref_ent_ids)?;
    for &(a, b) in &gold {
        if !g1.entity_ids.contains(&a) || !g2.entity_ids.contains(&b) {
            return Err(NmnError::Integrity(format!("gold pair ({a}, {b}) references an unknown entity")));
        }
    }
    Ok((g1, g2, gold))
}

impl Dataset {
    /// `vectors` defaults to `vectors.txt` inside `dir`.
    pub fn load(dir: &Path, vectors: Option<&Path>) -> Result<Self> {
        let (g1, g2, gold) = load_graphs(dir)?;
        let default = DatasetPaths::new(dir).vectors;
        let words = WordVectors::load(vectors.unwrap_or(&default))?;
        Ok(Dataset { g1, g2, gold, words })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| NmnError::io(dir, e))?;
        let p = DatasetPaths::new(dir);
        write_kg(&self.g1, &p.ent_ids[0], &p.triples[0])?;
        write_kg(&self.g2, &p.ent_ids[1], &p.triples[1])?;
        write_pairs(&self.gold, &p.ref_ent_ids)?;
        self.words.save(&p.vectors)
    }

    pub fn merged(&self) -> Result<MergedGraph> {
        let f1 = build_name_features(&self.g1.entity_names, &self.words);
        let f2 = build_name_features(&self.g2.entity_names, &self.words);
        merge_graphs(&self.g1, &self.g2, &f1, &f2)
    }
}

/// Degree sequences of both graphs, sorted.
pub fn degree_sequences(g1: &KnowledgeGraph, g2: &KnowledgeGraph) -> (Vec<usize>, Vec<usize>) {
    let seq = |g: &KnowledgeGraph| {
        let mut d: Vec<usize> = g.entity_ids.iter().map(|&e| g.degree(e).unwrap_or(0)).collect();
        d.sort_unstable();
        d
    };
    (seq(g1), seq(g2))
}

/// Entity and relation id sets.
pub fn id_sets(kg: &KnowledgeGraph) -> (BTreeSet<EntityId>, BTreeSet<u32>) {
    (kg.entity_ids.clone(), kg.relation_ids.clone())
}

/// Multiset of triples as counts.
pub fn triple_counts(kg: &KnowledgeGraph) -> BTreeMap<(u32, u32, u32), usize> {
    let mut m = BTreeMap::new();
    for t in &kg.triples {
        *m.entry((t.head, t.relation, t.tail)).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(n_triples: u32) -> KnowledgeGraph {
        let ents = (0..=n_triples).map(|i| (i, format!("e{i}")));
        let triples = (0..n_triples).map(|i| Triple { head: i, relation: i % 3, tail: i + 1 }).collect();
        KnowledgeGraph::new(ents, triples).unwrap()
    }

    #[test]
    fn sparsify_sizes() {
        let kg = fixture(10);
        assert_eq!(triple_counts(&sparsify(&kg, 1.0, 3).unwrap()), triple_counts(&kg));
        let a = sparsify(&kg, 0.5, 1).unwrap();
        let b = sparsify(&kg, 0.5, 2).unwrap();
        assert_eq!(a.triples.len(), 5);
        assert_eq!(b.triples.len(), 5);
        assert_ne!(a.triples, b.triples);
        assert_eq!(id_sets(&a), id_sets(&kg));
        assert!(sparsify(&kg, 0.0, 1).is_err());
        assert!(sparsify(&kg, 1.5, 1).is_err());
    }

    #[test]
    fn floor_rule_on_large_count() {
        assert_eq!((0.26 * 153929f64).floor() as usize, 40021);
    }

    #[test]
    fn stats_examples() {
        let empty = KnowledgeGraph::default();
        assert_eq!(kg_stats(&empty), KgStats { num_entities: 0, num_relations: 0, num_triples: 0 });
        let kg = fixture(3);
        assert_eq!(kg_stats(&kg), KgStats { num_entities: 4, num_relations: 3, num_triples: 3 });
    }

    #[test]
    fn degree_diff_examples() {
        // e0 has degree 5 in g1, degree 2 in g2
        let star = |k: u32| {
            let ents = (0..=5).map(|i| (i, String::new()));
            let triples = (1..=k).map(|i| Triple { head: 0, relation: 0, tail: i }).collect();
            KnowledgeGraph::new(ents, triples).unwrap()
        };
        let h = degree_diff_distribution(&star(5), &star(2), &[(0, 0)], &[0, 2, 4]).unwrap();
        assert_eq!(h.iter().map(|b| b.count).collect::<Vec<_>>(), vec![0, 1, 0]);
        assert!(degree_diff_distribution(&star(5), &star(2), &[(0, 9)], &[0]).is_err());
    }

    #[test]
    fn synthetic_isomorphic() {
        let pair = make_synthetic_pair(&SynthSpec::new(40, 4.0, 9)).unwrap();
        let (d1, d2) = degree_sequences(&pair.g1, &pair.g2);
        assert_eq!(d1, d2);
        let h = degree_diff_distribution(&pair.g1, &pair.g2, &pair.gold, &[0, 1]).unwrap();
        assert_eq!(h[1].count, 0);
        for &(a, b) in &pair.gold {
            assert_eq!(pair.features1.row(a as usize), pair.features2.row(b as usize));
        }
    }

    #[test]
    fn synthetic_drop_edges_size() {
        let mut spec = SynthSpec::new(60, 5.0, 2);
        spec.edges = EdgePerturbation::DropEdges(0.5);
        let pair = make_synthetic_pair(&spec).unwrap();
        assert_eq!(pair.g2.triples.len(), pair.g1.triples.len() / 2);
        spec.edges = EdgePerturbation::DropEdges(1.5);
        assert!(matches!(make_synthetic_pair(&spec), Err(NmnError::Config(_))));
        assert!(make_synthetic_pair(&SynthSpec::new(1, 0.0, 0)).is_err());
    }
}
