use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Vocabulary;
use crate::error::{Error, Result};

/// Shape of a path-star task `G(d, l, N)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    pub degree: usize,
    pub path_len: usize,
    pub n_values: usize,
}

impl TaskSpec {
    /// `N` defaults to `l * d`.
    pub fn new(degree: usize, path_len: usize, n_values: Option<usize>) -> Result<Self> {
        let spec = Self { degree, path_len, n_values: n_values.unwrap_or(degree * path_len) };
        spec.validate()?;
        Ok(spec)
    }

    pub fn node_count(&self) -> usize {
        self.degree * (self.path_len - 1) + 1
    }

    pub fn edge_count(&self) -> usize {
        self.degree * (self.path_len - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.degree == 0 {
            return Err(Error::Config("degree must be at least 1".into()));
        }
        if self.path_len < 2 {
            return Err(Error::Config(format!("path length {} must be at least 2", self.path_len)));
        }
        if self.n_values < self.node_count() {
            return Err(Error::Config(format!(
                "G({},{}) needs {} distinct node values but N = {}",
                self.degree,
                self.path_len,
                self.node_count(),
                self.n_values
            )));
        }
        Ok(())
    }

    /// Tokens in a serialized prefix: `E` edges of three tokens joined by
    /// `E - 1` separators, then the four-token query and answer marker.
    pub fn prefix_len(&self) -> usize {
        4 * self.edge_count() + 3
    }

    /// Path nodes plus EOS.
    pub fn answer_len(&self) -> usize {
        self.path_len + 1
    }
}

/// A centre node with `degree` disjoint arms of `path_len` nodes each
/// (centre included). Every arm starts with the centre.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PathStarGraph {
    pub spec: TaskSpec,
    pub paths: Vec<Vec<usize>>,
    pub target_path: usize,
}

impl PathStarGraph {
    pub fn center(&self) -> usize {
        self.paths[0][0]
    }

    pub fn target(&self) -> usize {
        *self.paths[self.target_path].last().expect("non-empty path")
    }

    /// The unique centre-to-target path.
    pub fn answer_path(&self) -> &[usize] {
        &self.paths[self.target_path]
    }

    /// Edges oriented away from the centre.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.paths
            .iter()
            .flat_map(|p| p.windows(2).map(|w| (w[0], w[1])))
            .collect()
    }

    pub fn nodes(&self) -> Vec<usize> {
        let mut v = vec![self.center()];
        for p in &self.paths {
            v.extend_from_slice(&p[1..]);
        }
        v
    }
}

/// Draws a graph with distinct node values and a uniformly chosen target arm.
pub fn generate_graph<R: Rng>(spec: TaskSpec, rng: &mut R) -> Result<PathStarGraph> {
    spec.validate()?;
    let values = sample(rng, spec.n_values, spec.node_count()).into_vec();
    let center = values[0];
    let paths = values[1..]
        .chunks(spec.path_len - 1)
        .map(|arm| {
            let mut p = Vec::with_capacity(spec.path_len);
            p.push(center);
            p.extend_from_slice(arm);
            p
        })
        .collect();
    let target_path = rng.random_range(0..spec.degree);
    Ok(PathStarGraph { spec, paths, target_path })
}

/// One serialized training or test example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphSample {
    pub graph: PathStarGraph,
    pub edge_order: Vec<(usize, usize)>,
    pub prefix: Vec<usize>,
    pub answer: Vec<usize>,
}

/// Serializes as `u , v | u , v | ... / start target =` followed by the
/// answer `centre ... target <eos>`. Edge order is a fresh permutation.
pub fn serialize_sample<R: Rng>(graph: &PathStarGraph, rng: &mut R, vocab: &Vocabulary) -> GraphSample {
    let mut edge_order = graph.edges();
    edge_order.shuffle(rng);
    let mut prefix = Vec::with_capacity(graph.spec.prefix_len());
    for (i, &(u, v)) in edge_order.iter().enumerate() {
        if i > 0 {
            prefix.push(vocab.edge_sep());
        }
        prefix.extend([u, vocab.pair_sep(), v]);
    }
    prefix.extend([vocab.query_sep(), graph.center(), graph.target(), vocab.answer_start()]);
    let mut answer = graph.answer_path().to_vec();
    answer.push(vocab.eos());
    GraphSample { graph: graph.clone(), edge_order, prefix, answer }
}

/// Edge list and query recovered from a serialized prefix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedPrefix {
    pub edges: Vec<(usize, usize)>,
    pub start: usize,
    pub target: usize,
}

pub fn parse_prefix(prefix: &[usize], vocab: &Vocabulary) -> Result<ParsedPrefix> {
    let bad = |msg: &str| Error::Degenerate(format!("malformed prefix: {msg}"));
    let q = prefix
        .iter()
        .position(|&t| t == vocab.query_sep())
        .ok_or_else(|| bad("no query separator"))?;
    let tail = &prefix[q..];
    if tail.len() != 4 || tail[3] != vocab.answer_start() {
        return Err(bad("query must be `/ start target =`"));
    }
    let mut edges = Vec::new();
    for (i, chunk) in prefix[..q].split(|&t| t == vocab.edge_sep()).enumerate() {
        match chunk {
            [u, s, v] if *s == vocab.pair_sep() && vocab.is_node(*u) && vocab.is_node(*v) => edges.push((*u, *v)),
            [] if q == 0 && i == 0 => {}
            _ => return Err(bad("edge must be `u , v`")),
        }
    }
    Ok(ParsedPrefix { edges, start: tail[1], target: tail[2] })
}

/// Breadth-first search over the undirected edge list; returns the path
/// from `start` to `target` and whether it is the only simple one.
pub fn bfs_path(edges: &[(usize, usize)], start: usize, target: usize) -> Option<(Vec<usize>, bool)> {
    use std::collections::{HashMap, VecDeque};
    let mut adj: HashMap<usize, Vec<usize>> = HashMap::new();
    for &(u, v) in edges {
        adj.entry(u).or_default().push(v);
        adj.entry(v).or_default().push(u);
    }
    let mut parent: HashMap<usize, usize> = HashMap::new();
    let mut paths_to: HashMap<usize, u64> = HashMap::from([(start, 1)]);
    let mut dist: HashMap<usize, usize> = HashMap::from([(start, 0)]);
    let mut queue = VecDeque::from([start]);
    while let Some(u) = queue.pop_front() {
        for &w in adj.get(&u).map(Vec::as_slice).unwrap_or(&[]) {
            match dist.get(&w) {
                None => {
                    dist.insert(w, dist[&u] + 1);
                    parent.insert(w, u);
                    paths_to.insert(w, paths_to[&u]);
                    queue.push_back(w);
                }
                Some(&dw) if dw == dist[&u] + 1 => {
                    *paths_to.get_mut(&w).unwrap() += paths_to[&u];
                }
                Some(_) => {}
            }
        }
    }
    dist.get(&target)?;
    // A connected component is a tree iff it has one edge fewer than nodes.
    let component_edges = edges.iter().filter(|(u, _)| dist.contains_key(u)).count();
    let tree = component_edges + 1 == dist.len();
    let mut path = vec![target];
    while *path.last().unwrap() != start {
        path.push(parent[path.last().unwrap()]);
    }
    path.reverse();
    Some((path, tree && paths_to[&target] == 1))
}
