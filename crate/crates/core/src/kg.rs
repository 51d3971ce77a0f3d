//! Knowledge graphs, seed alignments and the merged two-graph input.
//!
//! The on-disk layout follows the DBP15K convention: tab-separated
//! `ent_ids_{1,2}`, `triples_{1,2}` and `ref_ent_ids` files.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{NmnError, Result};

pub type EntityId = u32;
pub type RelationId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

/// One knowledge graph `(E, R, T)` with its undirected one-hop adjacency.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeGraph {
    pub entity_ids: BTreeSet<EntityId>,
    pub entity_names: BTreeMap<EntityId, String>,
    pub relation_ids: BTreeSet<RelationId>,
    pub triples: Vec<Triple>,
    pub neighbor_index: BTreeMap<EntityId, Vec<EntityId>>,
}

impl KnowledgeGraph {
    /// Builds a graph from named entities and triples, validating that every
    /// triple endpoint is a known entity.
    pub fn new(
        entities: impl IntoIterator<Item = (EntityId, String)>,
        triples: Vec<Triple>,
    ) -> Result<Self> {
        let mut entity_names = BTreeMap::new();
        for (id, name) in entities {
            if entity_names.insert(id, name).is_some() {
                return Err(NmnError::Integrity(format!("duplicate entity id {id}")));
            }
        }
        let entity_ids: BTreeSet<EntityId> = entity_names.keys().copied().collect();
        let mut relation_ids = BTreeSet::new();
        for t in &triples {
            for end in [t.head, t.tail] {
                if !entity_ids.contains(&end) {
                    return Err(NmnError::Integrity(format!(
                        "triple ({}, {}, {}) references unknown entity {end}",
                        t.head, t.relation, t.tail
                    )));
                }
            }
            relation_ids.insert(t.relation);
        }
        let mut kg = KnowledgeGraph {
            entity_ids,
            entity_names,
            relation_ids,
            triples,
            neighbor_index: BTreeMap::new(),
        };
        kg.rebuild_neighbor_index();
        Ok(kg)
    }

    pub(crate) fn rebuild_neighbor_index(&mut self) {
        let mut sets: BTreeMap<EntityId, BTreeSet<EntityId>> =
            self.entity_ids.iter().map(|&e| (e, BTreeSet::new())).collect();
        for t in &self.triples {
            if t.head != t.tail {
                sets.entry(t.head).or_default().insert(t.tail);
                sets.entry(t.tail).or_default().insert(t.head);
            }
        }
        self.neighbor_index = sets
            .into_iter()
            .map(|(k, v)| (k, v.into_iter().collect()))
            .collect();
    }

    pub fn num_entities(&self) -> usize {
        self.entity_ids.len()
    }

    pub fn neighbors(&self, id: EntityId) -> Option<&[EntityId]> {
        self.neighbor_index.get(&id).map(Vec::as_slice)
    }

    pub fn degree(&self, id: EntityId) -> Option<usize> {
        self.neighbors(id).map(<[EntityId]>::len)
    }

    pub fn max_entity_id(&self) -> Option<EntityId> {
        self.entity_ids.iter().next_back().copied()
    }
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>> {
    let file = fs::File::open(path).map_err(|e| NmnError::io(path, e))?;
    Ok(BufReader::new(file).lines().enumerate().map(|(i, l)| (i + 1, l)))
}

fn parse_id<T: std::str::FromStr>(field: &str, path: &Path, line: usize) -> Result<T> {
    field.parse().map_err(|_| NmnError::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("expected a non-negative integer id, got {field:?}"),
    })
}

fn split_fields<'a>(text: &'a str, n: usize, path: &Path, line: usize) -> Result<Vec<&'a str>> {
    let fields: Vec<&str> = text.split('\t').collect();
    if fields.len() != n {
        return Err(NmnError::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("expected {n} tab-separated fields, found {}", fields.len()),
        });
    }
    Ok(fields)
}

pub fn read_entities(path: &Path) -> Result<Vec<(EntityId, String)>> {
    let mut out = Vec::new();
    for (line, text) in open_lines(path)? {
        let text = text.map_err(|e| NmnError::io(path, e))?;
        let fields = split_fields(&text, 2, path, line)?;
        out.push((parse_id(fields[0], path, line)?, fields[1].to_string()));
    }
    Ok(out)
}

pub fn read_triples(path: &Path) -> Result<Vec<Triple>> {
    let mut out = Vec::new();
    for (line, text) in open_lines(path)? {
        let text = text.map_err(|e| NmnError::io(path, e))?;
        let f = split_fields(&text, 3, path, line)?;
        out.push(Triple {
            head: parse_id(f[0], path, line)?,
            relation: parse_id(f[1], path, line)?,
            tail: parse_id(f[2], path, line)?,
        });
    }
    Ok(out)
}

pub fn read_pairs(path: &Path) -> Result<Vec<(EntityId, EntityId)>> {
    let mut out = Vec::new();
    for (line, text) in open_lines(path)? {
        let text = text.map_err(|e| NmnError::io(path, e))?;
        let f = split_fields(&text, 2, path, line)?;
        out.push((parse_id(f[0], path, line)?, parse_id(f[1], path, line)?));
    }
    Ok(out)
}

pub fn load_kg(ent_ids_path: &Path, triples_path: &Path) -> Result<KnowledgeGraph> {
    let entities = read_entities(ent_ids_path)?;
    let triples = read_triples(triples_path)?;
    KnowledgeGraph::new(entities, triples)
}

/// Writes a graph back in the two-file wire format.
pub fn write_kg(kg: &KnowledgeGraph, ent_ids_path: &Path, triples_path: &Path) -> Result<()> {
    let mut ents = String::new();
    for (id, name) in &kg.entity_names {
        ents.push_str(&format!("{id}\t{name}\n"));
    }
    fs::write(ent_ids_path, ents).map_err(|e| NmnError::io(ent_ids_path, e))?;
    let mut tri = String::new();
    for t in &kg.triples {
        tri.push_str(&format!("{}\t{}\t{}\n", t.head, t.relation, t.tail));
    }
    fs::write(triples_path, tri).map_err(|e| NmnError::io(triples_path, e))
}

pub fn write_pairs(pairs: &[(EntityId, EntityId)], path: &Path) -> Result<()> {
    let mut s = String::new();
    for (a, b) in pairs {
        s.push_str(&format!("{a}\t{b}\n"));
    }
    fs::write(path, s).map_err(|e| NmnError::io(path, e))
}

/// Gold alignment pairs split into train and test parts.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedAlignments {
    pub train_pairs: Vec<(EntityId, EntityId)>,
    pub test_pairs: Vec<(EntityId, EntityId)>,
    pub split_fraction: f64,
    pub split_seed: u64,
}

impl SeedAlignments {
    /// Shuffles `pairs` under `seed` and keeps the first `round(fraction * n)`
    /// as training seeds.
    pub fn split(pairs: &[(EntityId, EntityId)], fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(NmnError::InvalidInput(format!(
                "split fraction must lie in (0, 1), got {fraction}"
            )));
        }
        check_one_to_one(pairs)?;
        let mut shuffled = pairs.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        shuffled.shuffle(&mut rng);
        let n_train = (fraction * pairs.len() as f64).round() as usize;
        let test_pairs = shuffled.split_off(n_train);
        Ok(SeedAlignments {
            train_pairs: shuffled,
            test_pairs,
            split_fraction: fraction,
            split_seed: seed,
        })
    }

    pub fn all_pairs(&self) -> Vec<(EntityId, EntityId)> {
        self.train_pairs.iter().chain(&self.test_pairs).copied().collect()
    }
}

pub(crate) fn check_one_to_one(pairs: &[(EntityId, EntityId)]) -> Result<()> {
    let mut left = HashSet::new();
    let mut right = HashSet::new();
    for &(a, b) in pairs {
        if !left.insert(a) {
            return Err(NmnError::Integrity(format!("entity {a} aligned twice in G1")));
        }
        if !right.insert(b) {
            return Err(NmnError::Integrity(format!("entity {b} aligned twice in G2")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    First,
    Second,
}

/// Both graphs as one disjoint input graph with dense node indices.
///
/// Nodes `0..n1` are the G1 entities in ascending id order, followed by the
/// G2 entities in ascending id order. Feature rows follow the same order.
#[derive(Debug, Clone)]
pub struct MergedGraph {
    pub num_nodes: usize,
    /// Shift applied to G2 ids to make them disjoint from G1 ids.
    pub offset: u64,
    /// Symmetric edge list over node indices, self-loops included.
    pub edges: Vec<(usize, usize)>,
    /// `|N_i ∪ {i}|` per node.
    pub norm_constants: Vec<f64>,
    pub features: Array2<f64>,
    pub side: Vec<Side>,
    entity: Vec<EntityId>,
    neighbors: Vec<Vec<usize>>,
    first_index: HashMap<EntityId, usize>,
    second_index: HashMap<EntityId, usize>,
    n_first: usize,
}

impl MergedGraph {
    pub fn node(&self, side: Side, id: EntityId) -> Option<usize> {
        match side {
            Side::First => self.first_index.get(&id).copied(),
            Side::Second => self.second_index.get(&id).copied(),
        }
    }

    pub fn entity(&self, node: usize) -> (Side, EntityId) {
        (self.side[node], self.entity[node])
    }

    /// External id of a node in the merged id space (G2 ids shifted).
    pub fn merged_id(&self, node: usize) -> u64 {
        match self.side[node] {
            Side::First => self.entity[node] as u64,
            Side::Second => self.entity[node] as u64 + self.offset,
        }
    }

    /// One-hop neighbors, sorted, self excluded.
    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn nodes_of(&self, side: Side) -> std::ops::Range<usize> {
        match side {
            Side::First => 0..self.n_first,
            Side::Second => self.n_first..self.num_nodes,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Maps entity-id pairs `(G1 id, G2 id)` to node-index pairs.
    pub fn node_pairs(&self, pairs: &[(EntityId, EntityId)]) -> Result<Vec<(usize, usize)>> {
        pairs
            .iter()
            .map(|&(a, b)| {
                let l = self.node(Side::First, a).ok_or(NmnError::Lookup(a))?;
                let r = self.node(Side::Second, b).ok_or(NmnError::Lookup(b))?;
                Ok((l, r))
            })
            .collect()
    }

    /// Builds a merged graph from node-level adjacency. Used by tests and
    /// synthetic generators that do not need the KG metadata.
    pub fn from_adjacency(neighbors: Vec<Vec<usize>>, features: Array2<f64>, n_first: usize) -> Self {
        let n = neighbors.len();
        let side = (0..n)
            .map(|i| if i < n_first { Side::First } else { Side::Second })
            .collect();
        let entity = (0..n)
            .map(|i| if i < n_first { i as u32 } else { (i - n_first) as u32 })
            .collect();
        let first_index = (0..n_first).map(|i| (i as u32, i)).collect();
        let second_index = (n_first..n).map(|i| ((i - n_first) as u32, i)).collect();
        Self::assemble(neighbors, features, side, entity, first_index, second_index, n_first, n_first as u64)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        mut neighbors: Vec<Vec<usize>>,
        features: Array2<f64>,
        side: Vec<Side>,
        entity: Vec<EntityId>,
        first_index: HashMap<EntityId, usize>,
        second_index: HashMap<EntityId, usize>,
        n_first: usize,
        offset: u64,
    ) -> Self {
        for (i, list) in neighbors.iter_mut().enumerate() {
            list.retain(|&j| j != i);
            list.sort_unstable();
            list.dedup();
        }
        let mut edges = Vec::new();
        for (i, list) in neighbors.iter().enumerate() {
            edges.push((i, i));
            edges.extend(list.iter().map(|&j| (i, j)));
        }
        let norm_constants = neighbors.iter().map(|l| (l.len() + 1) as f64).collect();
        MergedGraph {
            num_nodes: neighbors.len(),
            offset,
            edges,
            norm_constants,
            features,
            side,
            entity,
            neighbors,
            first_index,
            second_index,
            n_first,
        }
    }
}

/// Puts both graphs into one input graph. Feature rows must be in ascending
/// entity id order for each side.
pub fn merge_graphs(
    g1: &KnowledgeGraph,
    g2: &KnowledgeGraph,
    features1: &Array2<f64>,
    features2: &Array2<f64>,
) -> Result<MergedGraph> {
    if features1.nrows() != g1.num_entities() {
        return Err(NmnError::dim("merge_graphs: G1 feature rows", g1.num_entities(), features1.nrows()));
    }
    if features2.nrows() != g2.num_entities() {
        return Err(NmnError::dim("merge_graphs: G2 feature rows", g2.num_entities(), features2.nrows()));
    }
    if features1.ncols() != features2.ncols() {
        return Err(NmnError::dim("merge_graphs: feature width", features1.ncols(), features2.ncols()));
    }
    let n1 = g1.num_entities();
    let n = n1 + g2.num_entities();
    let first_index: HashMap<EntityId, usize> =
        g1.entity_ids.iter().enumerate().map(|(i, &e)| (e, i)).collect();
    let second_index: HashMap<EntityId, usize> =
        g2.entity_ids.iter().enumerate().map(|(i, &e)| (e, n1 + i)).collect();

    let mut neighbors = vec![Vec::new(); n];
    for (kg, index) in [(g1, &first_index), (g2, &second_index)] {
        for (id, list) in &kg.neighbor_index {
            let node = index[id];
            neighbors[node] = list.iter().map(|j| index[j]).collect();
        }
    }
    let mut side = vec![Side::First; n1];
    side.resize(n, Side::Second);
    let entity = g1.entity_ids.iter().chain(&g2.entity_ids).copied().collect();
    let features = ndarray::concatenate![ndarray::Axis(0), features1.view(), features2.view()];
    let offset = g1.max_entity_id().map_or(0, |m| m as u64 + 1);
    Ok(MergedGraph::assemble(
        neighbors, features, side, entity, first_index, second_index, n1, offset,
    ))
}

/// Token → vector table for name features.
#[derive(Debug, Clone, Default)]
pub struct WordVectors {
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f64>>,
}

impl WordVectors {
    pub fn new(dim: usize) -> Self {
        WordVectors {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn insert(&mut self, token: impl Into<String>, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(NmnError::dim("word vector", self.dim, v.len()));
        }
        self.vectors.insert(token.into(), v);
        Ok(())
    }

    /// Reads a text vector file: a token followed by space-separated floats.
    pub fn load(path: &Path) -> Result<Self> {
        let mut wv: Option<WordVectors> = None;
        for (line, text) in open_lines(path)? {
            let text = text.map_err(|e| NmnError::io(path, e))?;
            let mut parts = text.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let values: Vec<f64> = parts
                .map(|p| {
                    p.parse().map_err(|_| NmnError::Parse {
                        path: path.to_path_buf(),
                        line,
                        msg: format!("bad float {p:?}"),
                    })
                })
                .collect::<Result<_>>()?;
            let table = wv.get_or_insert_with(|| WordVectors::new(values.len()));
            if values.len() != table.dim {
                return Err(NmnError::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("expected {} values, found {}", table.dim, values.len()),
                });
            }
            table.vectors.insert(token.to_string(), values);
        }
        wv.ok_or_else(|| NmnError::InvalidInput(format!("{} holds no vectors", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| NmnError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut tokens: Vec<&String> = self.vectors.keys().collect();
        tokens.sort();
        for t in tokens {
            let line: Vec<String> = self.vectors[t].iter().map(|x| x.to_string()).collect();
            writeln!(w, "{t} {}", line.join(" ")).map_err(|e| NmnError::io(path, e))?;
        }
        w.flush().map_err(|e| NmnError::io(path, e))
    }
}

/// Row per entity (ascending id): mean of the in-vocabulary vectors of the
/// lower-cased whitespace tokens of its name, or zeros when none is known.
pub fn build_name_features(names: &BTreeMap<EntityId, String>, words: &WordVectors) -> Array2<f64> {
    let mut out = Array2::zeros((names.len(), words.dim));
    for (row, name) in names.values().enumerate() {
        let mut count = 0usize;
        for token in name.split_whitespace() {
            if let Some(v) = words.vectors.get(&token.to_lowercase()) {
                for (o, x) in out.row_mut(row).iter_mut().zip(v) {
                    *o += x;
                }
                count += 1;
            }
        }
        if count > 1 {
            out.row_mut(row).mapv_inplace(|x| x / count as f64);
        }
    }
    out
}
