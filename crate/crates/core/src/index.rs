//! Cosine k-nearest-neighbour search over unit vectors: an exact flat scan
//! and a hierarchical navigable small-world graph.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{self, Dtype, TensorEntry};
use crate::error::{Error, Result};
use crate::tensor::{dot, norm, Tensor};

pub const INDEX_MAGIC: &[u8; 4] = b"CPTI";
pub const INDEX_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexMode {
    Flat,
    Graph,
}

impl std::str::FromStr for IndexMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(IndexMode::Flat),
            "graph" => Ok(IndexMode::Graph),
            other => Err(Error::invalid(format!("unknown index mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphParams {
    /// Neighbour degree on upper layers; layer 0 allows twice as many.
    pub degree: usize,
    /// Candidate list size while inserting.
    pub beam: usize,
    /// Candidate list size while searching (raised to `k` when smaller).
    pub search_beam: usize,
    pub seed: u64,
}

impl Default for GraphParams {
    fn default() -> Self {
        GraphParams {
            degree: 16,
            beam: 64,
            search_beam: 128,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchHit {
    pub id: String,
    pub score: f64,
}

/// Similarity paired with a node index; orders by similarity, then prefers the
/// lower index so heap behaviour is deterministic.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Cand {
    sim: f64,
    node: u32,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sim
            .total_cmp(&other.sim)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Graph {
    params: GraphParams,
    entry: u32,
    /// `layers[l][node]` lists neighbours of `node` on layer `l`; nodes that do
    /// not reach layer `l` have an empty list.
    layers: Vec<Vec<Vec<u32>>>,
}

/// Immutable after [`VectorIndex::build`].
#[derive(Clone, Debug, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    ids: Vec<String>,
    /// Row-major `[n, dim]`, each row unit norm.
    vectors: Vec<f64>,
    graph: Option<Graph>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexMeta {
    dim: usize,
    mode: IndexMode,
    ids: Vec<String>,
    graph: Option<Graph>,
    tensors: Vec<TensorEntry>,
}

fn rank_order(a: &SearchHit, b: &SearchHit) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id))
}

impl VectorIndex {
    /// Normalises and stores `entries`. Graph mode uses default parameters.
    pub fn build(entries: Vec<(String, Vec<f64>)>, mode: IndexMode) -> Result<Self> {
        Self::build_with(entries, mode, GraphParams::default())
    }

    pub fn build_with(entries: Vec<(String, Vec<f64>)>, mode: IndexMode, params: GraphParams) -> Result<Self> {
        let dim = entries
            .first()
            .map(|(_, v)| v.len())
            .ok_or_else(|| Error::invalid("cannot build an index from zero vectors"))?;
        if dim == 0 {
            return Err(Error::invalid("vectors must have at least one dimension"));
        }
        if params.degree < 2 || params.beam == 0 || params.search_beam == 0 {
            return Err(Error::invalid("graph degree must be >= 2 and beams >= 1"));
        }
        let mut seen = HashSet::with_capacity(entries.len());
        let mut ids = Vec::with_capacity(entries.len());
        let mut vectors = Vec::with_capacity(entries.len() * dim);
        for (id, v) in entries {
            if v.len() != dim {
                return Err(Error::Shape {
                    op: "index build",
                    lhs: vec![dim],
                    rhs: vec![v.len()],
                });
            }
            let n = norm(&v);
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::invalid(format!("vector {id} has norm {n}")));
            }
            if !seen.insert(id.clone()) {
                return Err(Error::invalid(format!("duplicate id {id}")));
            }
            vectors.extend(v.iter().map(|x| x / n));
            ids.push(id);
        }
        let mut index = VectorIndex {
            dim,
            ids,
            vectors,
            graph: None,
        };
        if mode == IndexMode::Graph {
            index.graph = Some(index.build_graph(params));
        }
        Ok(index)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn mode(&self) -> IndexMode {
        if self.graph.is_some() {
            IndexMode::Graph
        } else {
            IndexMode::Flat
        }
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Graph adjacency per layer, or `None` in flat mode.
    pub fn adjacency(&self) -> Option<&[Vec<Vec<u32>>]> {
        self.graph.as_ref().map(|g| g.layers.as_slice())
    }

    fn sim(&self, q: &[f64], node: u32) -> f64 {
        dot(q, self.vector(node as usize))
    }

    fn normalized_query(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.dim {
            return Err(Error::Shape {
                op: "index search",
                lhs: vec![self.dim],
                rhs: vec![query.len()],
            });
        }
        let n = norm(query);
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::invalid(format!("query has norm {n}")));
        }
        Ok(query.iter().map(|x| x / n).collect())
    }

    /// Top `k` by cosine, descending, ties by ascending id. `k` larger than
    /// the index returns everything.
    pub fn search(&self, query: &[f64], k: usize) -> Result<Vec<SearchHit>> {
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        let q = self.normalized_query(query)?;
        let candidates: Vec<u32> = match &self.graph {
            None => (0..self.len() as u32).collect(),
            Some(g) => self.graph_candidates(g, &q, k),
        };
        let mut hits: Vec<SearchHit> = candidates
            .into_iter()
            .map(|i| SearchHit {
                id: self.ids[i as usize].clone(),
                score: self.sim(&q, i),
            })
            .collect();
        hits.sort_by(rank_order);
        hits.truncate(k);
        Ok(hits)
    }

    /// Exact scan regardless of mode.
    pub fn search_exact(&self, query: &[f64], k: usize) -> Result<Vec<SearchHit>> {
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        let q = self.normalized_query(query)?;
        let mut hits: Vec<SearchHit> = (0..self.len() as u32)
            .map(|i| SearchHit {
                id: self.ids[i as usize].clone(),
                score: self.sim(&q, i),
            })
            .collect();
        hits.sort_by(rank_order);
        hits.truncate(k);
        Ok(hits)
    }

    fn graph_candidates(&self, g: &Graph, q: &[f64], k: usize) -> Vec<u32> {
        let mut ep = Cand {
            sim: self.sim(q, g.entry),
            node: g.entry,
        };
        for layer in (1..g.layers.len()).rev() {
            ep = self.greedy(q, ep, &g.layers[layer]);
        }
        let ef = g.params.search_beam.max(k);
        self.search_layer(q, &[ep], ef, &g.layers[0])
            .into_iter()
            .map(|c| c.node)
            .collect()
    }

    fn greedy(&self, q: &[f64], mut cur: Cand, adj: &[Vec<u32>]) -> Cand {
        loop {
            let mut best = cur;
            for &nb in &adj[cur.node as usize] {
                let c = Cand {
                    sim: self.sim(q, nb),
                    node: nb,
                };
                if c > best {
                    best = c;
                }
            }
            if best == cur {
                return cur;
            }
            cur = best;
        }
    }

    /// Beam search on one layer; returns up to `ef` best candidates, best first.
    fn search_layer(&self, q: &[f64], entry: &[Cand], ef: usize, adj: &[Vec<u32>]) -> Vec<Cand> {
        let mut visited: HashSet<u32> = entry.iter().map(|c| c.node).collect();
        let mut frontier: BinaryHeap<Cand> = entry.iter().copied().collect();
        let mut found: BinaryHeap<Reverse<Cand>> = entry.iter().copied().map(Reverse).collect();
        while let Some(c) = frontier.pop() {
            let worst = found.peek().expect("non-empty").0;
            if c < worst && found.len() >= ef {
                break;
            }
            for &nb in &adj[c.node as usize] {
                if !visited.insert(nb) {
                    continue;
                }
                let cand = Cand {
                    sim: self.sim(q, nb),
                    node: nb,
                };
                let worst = found.peek().expect("non-empty").0;
                if found.len() < ef || cand > worst {
                    frontier.push(cand);
                    found.push(Reverse(cand));
                    if found.len() > ef {
                        found.pop();
                    }
                }
            }
        }
        let mut out: Vec<Cand> = found.into_iter().map(|r| r.0).collect();
        out.sort_by(|a, b| b.cmp(a));
        out
    }

    /// Keeps candidates that are closer to the base than to any already kept
    /// neighbour, then tops up with the best of the rest.
    fn select_neighbors(&self, candidates: &[Cand], m: usize) -> Vec<u32> {
        let mut kept: Vec<Cand> = Vec::with_capacity(m);
        let mut skipped = Vec::new();
        for &c in candidates {
            if kept.len() == m {
                break;
            }
            let v = self.vector(c.node as usize);
            if kept.iter().all(|k| dot(v, self.vector(k.node as usize)) < c.sim) {
                kept.push(c);
            } else {
                skipped.push(c);
            }
        }
        for c in skipped {
            if kept.len() == m {
                break;
            }
            kept.push(c);
        }
        kept.into_iter().map(|c| c.node).collect()
    }

    fn build_graph(&self, params: GraphParams) -> Graph {
        let n = self.len();
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let ml = 1.0 / (params.degree as f64).ln();
        let levels: Vec<usize> = (0..n)
            .map(|_| {
                let u: f64 = rng.random::<f64>();
                ((-(1.0 - u).ln()) * ml).floor() as usize
            })
            .collect();
        let top = levels.iter().copied().max().unwrap_or(0);
        let mut layers: Vec<Vec<Vec<u32>>> = vec![vec![Vec::new(); n]; top + 1];
        let mut entry = 0u32;
        let mut cur_top = levels[0];
        for i in 1..n {
            let q = self.vector(i).to_vec();
            let level = levels[i];
            let mut ep = Cand {
                sim: self.sim(&q, entry),
                node: entry,
            };
            for l in (level + 1..=cur_top).rev() {
                ep = self.greedy(&q, ep, &layers[l]);
            }
            let mut eps = vec![ep];
            for l in (0..=level.min(cur_top)).rev() {
                let cands = self.search_layer(&q, &eps, params.beam, &layers[l]);
                let cap = if l == 0 { 2 * params.degree } else { params.degree };
                let chosen = self.select_neighbors(&cands, params.degree);
                for &nb in &chosen {
                    let list = &mut layers[l][nb as usize];
                    list.push(i as u32);
                    if list.len() > cap {
                        let base = self.vector(nb as usize);
                        let mut scored: Vec<Cand> = list
                            .iter()
                            .map(|&o| Cand {
                                sim: dot(base, self.vector(o as usize)),
                                node: o,
                            })
                            .collect();
                        scored.sort_by(|a, b| b.cmp(a));
                        layers[l][nb as usize] = self.select_neighbors(&scored, cap);
                    }
                }
                layers[l][i] = chosen;
                eps = cands;
            }
            if level > cur_top {
                cur_top = level;
                entry = i as u32;
            }
        }
        Graph { params, entry, layers }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let t = Tensor::new(vec![self.len(), self.dim], self.vectors.clone())?;
        let (manifest, payload) = container::pack([("vectors".to_string(), &t)], Dtype::F64);
        let meta = IndexMeta {
            dim: self.dim,
            mode: self.mode(),
            ids: self.ids.clone(),
            graph: self.graph.clone(),
            tensors: manifest,
        };
        let json = serde_json::to_vec(&meta)?;
        Ok(container::frame(INDEX_MAGIC, INDEX_VERSION, &json, &payload))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, payload) = container::unframe(bytes, INDEX_MAGIC, INDEX_VERSION)?;
        let meta: IndexMeta =
            serde_json::from_slice(meta).map_err(|e| Error::Format(format!("index metadata: {e}")))?;
        let mut tensors: BTreeMap<String, Tensor> = container::unpack(&meta.tensors, payload)?.into_iter().collect();
        let vectors = tensors
            .remove("vectors")
            .ok_or_else(|| Error::Format("index has no vectors tensor".into()))?;
        let n = meta.ids.len();
        if vectors.shape() != [n, meta.dim] {
            return Err(Error::Format(format!(
                "vectors shape {:?} does not match {n} ids of dim {}",
                vectors.shape(),
                meta.dim
            )));
        }
        if (meta.mode == IndexMode::Graph) != meta.graph.is_some() {
            return Err(Error::Format("index mode and graph presence disagree".into()));
        }
        if let Some(g) = &meta.graph {
            let bad = g.entry as usize >= n
                || g.layers.is_empty()
                || g.layers.iter().any(|l| l.len() != n || l.iter().flatten().any(|&j| j as usize >= n));
            if bad {
                return Err(Error::Format("graph adjacency is inconsistent".into()));
            }
        }
        let mut seen = HashSet::new();
        if let Some(dup) = meta.ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Format(format!("duplicate id {dup}")));
        }
        Ok(VectorIndex {
            dim: meta.dim,
            ids: meta.ids,
            vectors: vectors.into_data(),
            graph: meta.graph,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&container::read_file(path)?)
    }
}

/// Mean fraction of the exact top-`k` ids recovered by `index.search`.
pub fn mean_overlap(index: &VectorIndex, queries: &[Vec<f64>], k: usize) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::invalid("no queries"));
    }
    let mut total = 0.0;
    for q in queries {
        let exact: HashSet<String> = index.search_exact(q, k)?.into_iter().map(|h| h.id).collect();
        let approx = index.search(q, k)?;
        total += approx.iter().filter(|h| exact.contains(&h.id)).count() as f64 / exact.len() as f64;
    }
    Ok(total / queries.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_unit(n: usize, d: usize, seed: u64) -> Vec<(String, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                let n = norm(&v);
                (format!("v{i:05}"), v.into_iter().map(|x| x / n).collect())
            })
            .collect()
    }

    #[test]
    fn single_vector_always_returned() {
        for mode in [IndexMode::Flat, IndexMode::Graph] {
            let idx = VectorIndex::build(vec![("only".into(), vec![1.0, 0.0])], mode).unwrap();
            let hits = idx.search(&[-0.3, 1.0], 5).unwrap();
            assert_eq!(hits.len(), 1);
            assert_eq!(hits[0].id, "only");
        }
    }

    #[test]
    fn basis_order_with_tie_by_id() {
        let basis: Vec<(String, Vec<f64>)> = (0..4)
            .rev()
            .map(|i| {
                let mut v = vec![0.0; 4];
                v[i] = 1.0;
                (format!("e{}", i + 1), v)
            })
            .collect();
        let idx = VectorIndex::build(basis, IndexMode::Flat).unwrap();
        let n = (0.81f64 + 0.01).sqrt();
        let hits = idx.search(&[0.9 / n, 0.1 / n, 0.0, 0.0], 4).unwrap();
        let ids: Vec<&str> = hits.iter().map(|h| h.id.as_str()).collect();
        assert_eq!(ids, ["e1", "e2", "e3", "e4"]);
        assert!((hits[0].score - 0.9 / n).abs() < 1e-12);
        assert_eq!(hits[2].score, 0.0);
    }

    #[test]
    fn self_query_scores_one() {
        let data = random_unit(50, 8, 1);
        let q = data[17].1.clone();
        let idx = VectorIndex::build(data, IndexMode::Graph).unwrap();
        let hits = idx.search(&q, 3).unwrap();
        assert_eq!(hits[0].id, "v00017");
        assert!((hits[0].score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn build_errors() {
        assert!(VectorIndex::build(vec![], IndexMode::Flat).is_err());
        let dup = vec![("a".into(), vec![1.0, 0.0]), ("a".into(), vec![0.0, 1.0])];
        assert!(VectorIndex::build(dup, IndexMode::Flat).is_err());
        let dims = vec![("a".into(), vec![1.0, 0.0]), ("b".into(), vec![0.0, 1.0, 0.0])];
        assert!(matches!(VectorIndex::build(dims, IndexMode::Flat), Err(Error::Shape { .. })));
        let zero = vec![("a".into(), vec![0.0, 0.0])];
        assert!(VectorIndex::build(zero, IndexMode::Flat).is_err());
    }

    #[test]
    fn graph_build_is_deterministic() {
        let data = random_unit(300, 16, 2);
        let a = VectorIndex::build(data.clone(), IndexMode::Graph).unwrap();
        let b = VectorIndex::build(data, IndexMode::Graph).unwrap();
        assert_eq!(a.adjacency(), b.adjacency());
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    }

    #[test]
    fn graph_scores_are_true_cosines() {
        let data = random_unit(400, 16, 3);
        let idx = VectorIndex::build(data.clone(), IndexMode::Graph).unwrap();
        let q = &random_unit(1, 16, 99)[0].1;
        for h in idx.search(q, 10).unwrap() {
            let v = &data.iter().find(|(id, _)| *id == h.id).unwrap().1;
            assert!((h.score - dot(q, v)).abs() < 1e-12);
        }
    }

    #[test]
    fn persistence_round_trip_and_immutability() {
        for mode in [IndexMode::Flat, IndexMode::Graph] {
            let idx = VectorIndex::build(random_unit(200, 8, 4), mode).unwrap();
            let bytes = idx.to_bytes().unwrap();
            for (_, q) in random_unit(20, 8, 5) {
                idx.search(&q, 7).unwrap();
            }
            assert_eq!(idx.to_bytes().unwrap(), bytes);
            let back = VectorIndex::from_bytes(&bytes).unwrap();
            assert_eq!(back, idx);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn corrupt_index_rejected() {
        let bytes = VectorIndex::build(random_unit(5, 4, 6), IndexMode::Flat)
            .unwrap()
            .to_bytes()
            .unwrap();
        assert!(matches!(VectorIndex::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(VectorIndex::from_bytes(b"CPTE\x01\0\0\0"), Err(Error::Format(_))));
    }

    #[test]
    fn graph_recall_small() {
        let idx = VectorIndex::build(random_unit(1000, 16, 7), IndexMode::Graph).unwrap();
        let qs: Vec<Vec<f64>> = random_unit(50, 16, 8).into_iter().map(|(_, v)| v).collect();
        assert!(mean_overlap(&idx, &qs, 10).unwrap() >= 0.95);
    }
}
