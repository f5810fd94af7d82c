//! Immutable heterogeneous artifact graph.
//!
//! Four node kinds (model, dataset, paper, codebase) and four edge kinds
//! (eval, finetune, paper, code). Edges keep their ingested direction but
//! every query treats them as undirected: the adjacency of each endpoint
//! lists the other one. Metric values live on eval edges only.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeIdx = usize;
pub type EdgeIdx = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Model,
    Dataset,
    Paper,
    Codebase,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Eval,
    Finetune,
    Paper,
    Code,
}

impl EdgeKind {
    pub const ALL: [EdgeKind; 4] = [EdgeKind::Eval, EdgeKind::Finetune, EdgeKind::Paper, EdgeKind::Code];

    pub fn index(self) -> usize {
        match self {
            EdgeKind::Eval => 0,
            EdgeKind::Finetune => 1,
            EdgeKind::Paper => 2,
            EdgeKind::Code => 3,
        }
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NodeKind::Model => "model",
            NodeKind::Dataset => "dataset",
            NodeKind::Paper => "paper",
            NodeKind::Codebase => "codebase",
        };
        f.write_str(s)
    }
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EdgeKind::Eval => "eval",
            EdgeKind::Finetune => "finetune",
            EdgeKind::Paper => "paper",
            EdgeKind::Code => "code",
        };
        f.write_str(s)
    }
}

/// Set of edge kinds used to filter neighbourhood queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EdgeKindSet(u8);

impl EdgeKindSet {
    pub const ALL: EdgeKindSet = EdgeKindSet(0b1111);
    pub const NONE: EdgeKindSet = EdgeKindSet(0);

    pub fn only(kind: EdgeKind) -> Self {
        EdgeKindSet(1 << kind.index())
    }

    pub fn with(self, kind: EdgeKind) -> Self {
        EdgeKindSet(self.0 | (1 << kind.index()))
    }

    pub fn contains(self, kind: EdgeKind) -> bool {
        self.0 & (1 << kind.index()) != 0
    }
}

impl FromIterator<EdgeKind> for EdgeKindSet {
    fn from_iter<I: IntoIterator<Item = EdgeKind>>(iter: I) -> Self {
        iter.into_iter().fold(EdgeKindSet::NONE, EdgeKindSet::with)
    }
}

impl Default for EdgeKindSet {
    fn default() -> Self {
        EdgeKindSet::ALL
    }
}

/// Node descriptor as ingested.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    pub kind: NodeKind,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub description: String,
}

impl NodeSpec {
    pub fn new(id: impl Into<String>, kind: NodeKind) -> Self {
        let id = id.into();
        Self { name: id.clone(), id, kind, description: String::new() }
    }
}

/// Edge descriptor referencing endpoints by id. Metric values are already
/// normalised to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeSpec {
    pub src: String,
    pub dst: String,
    pub kind: EdgeKind,
    pub metrics: BTreeMap<String, f64>,
}

impl EdgeSpec {
    pub fn new(src: impl Into<String>, dst: impl Into<String>, kind: EdgeKind) -> Self {
        Self { src: src.into(), dst: dst.into(), kind, metrics: BTreeMap::new() }
    }

    pub fn eval(src: impl Into<String>, dst: impl Into<String>, metrics: &[(&str, f64)]) -> Self {
        let mut e = Self::new(src, dst, EdgeKind::Eval);
        e.metrics = metrics.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        e
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeRef {
    pub id: String,
    pub kind: NodeKind,
    pub index: NodeIdx,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeRef {
    pub src: NodeIdx,
    pub dst: NodeIdx,
    pub kind: EdgeKind,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("edge {edge} references unknown node id {id:?}")]
    UnknownEndpoint { edge: usize, id: String },
    #[error("edge {edge}: {detail}")]
    KindViolation { edge: usize, detail: String },
    #[error("duplicate eval edge {model:?} -> {dataset:?}")]
    DuplicateEvalEdge { model: String, dataset: String },
    #[error("duplicate node id {0:?}")]
    DuplicateNode(String),
    #[error("edge {edge}: metric {name:?} = {value} outside [0, 1]")]
    MetricOutOfRange { edge: usize, name: String, value: f64 },
}

/// Neighbour entry: the adjacent node and the edge that connects it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Adjacent {
    pub node: NodeIdx,
    pub edge: EdgeIdx,
}

#[derive(Clone, Debug)]
pub struct ArtifactGraph {
    nodes: Vec<NodeRef>,
    specs: Vec<NodeSpec>,
    edges: Vec<EdgeRef>,
    by_id: HashMap<String, NodeIdx>,
    // adjacency[v][kind] sorted by (neighbour index, edge index)
    adjacency: Vec<[Vec<Adjacent>; 4]>,
    eval_by_pair: HashMap<(NodeIdx, NodeIdx), EdgeIdx>,
    models: Vec<NodeIdx>,
    datasets: Vec<NodeIdx>,
}

impl ArtifactGraph {
    /// Builds a graph; indices follow ingestion order.
    pub fn build(nodes: Vec<NodeSpec>, edges: Vec<EdgeSpec>) -> Result<Self, GraphError> {
        let mut by_id = HashMap::with_capacity(nodes.len());
        let mut refs = Vec::with_capacity(nodes.len());
        for (index, n) in nodes.iter().enumerate() {
            if by_id.insert(n.id.clone(), index).is_some() {
                return Err(GraphError::DuplicateNode(n.id.clone()));
            }
            refs.push(NodeRef { id: n.id.clone(), kind: n.kind, index });
        }
        let mut edge_refs = Vec::with_capacity(edges.len());
        let mut eval_by_pair = HashMap::new();
        for (i, e) in edges.into_iter().enumerate() {
            let lookup = |id: &str| {
                by_id.get(id).copied().ok_or_else(|| GraphError::UnknownEndpoint { edge: i, id: id.to_string() })
            };
            let src = lookup(&e.src)?;
            let dst = lookup(&e.dst)?;
            let (sk, dk) = (refs[src].kind, refs[dst].kind);
            if src == dst {
                return Err(GraphError::KindViolation { edge: i, detail: format!("self-loop on {:?}", e.src) });
            }
            match e.kind {
                EdgeKind::Eval if sk != NodeKind::Model || dk != NodeKind::Dataset => {
                    return Err(GraphError::KindViolation {
                        edge: i,
                        detail: format!("eval edge must go model -> dataset, got {sk} -> {dk}"),
                    });
                }
                EdgeKind::Finetune if sk != NodeKind::Model || dk != NodeKind::Model => {
                    return Err(GraphError::KindViolation {
                        edge: i,
                        detail: format!("finetune edge must join two models, got {sk} -> {dk}"),
                    });
                }
                _ => {}
            }
            if e.kind != EdgeKind::Eval && !e.metrics.is_empty() {
                return Err(GraphError::KindViolation { edge: i, detail: format!("{} edge carries metrics", e.kind) });
            }
            for (name, &value) in &e.metrics {
                if !(0.0..=1.0).contains(&value) {
                    return Err(GraphError::MetricOutOfRange { edge: i, name: name.clone(), value });
                }
            }
            if e.kind == EdgeKind::Eval && eval_by_pair.insert((src, dst), i).is_some() {
                return Err(GraphError::DuplicateEvalEdge { model: e.src, dataset: e.dst });
            }
            edge_refs.push(EdgeRef { src, dst, kind: e.kind, metrics: e.metrics });
        }
        let mut adjacency: Vec<[Vec<Adjacent>; 4]> = (0..refs.len()).map(|_| Default::default()).collect();
        for (i, e) in edge_refs.iter().enumerate() {
            let k = e.kind.index();
            adjacency[e.src][k].push(Adjacent { node: e.dst, edge: i });
            adjacency[e.dst][k].push(Adjacent { node: e.src, edge: i });
        }
        for lists in &mut adjacency {
            for l in lists.iter_mut() {
                l.sort_unstable();
            }
        }
        let models = refs.iter().filter(|n| n.kind == NodeKind::Model).map(|n| n.index).collect();
        let datasets = refs.iter().filter(|n| n.kind == NodeKind::Dataset).map(|n| n.index).collect();
        Ok(Self { nodes: refs, specs: nodes, edges: edge_refs, by_id, adjacency, eval_by_pair, models, datasets })
    }

    /// Same nodes, keeping only edges for which `keep` holds. Node indices
    /// are preserved; edge indices are renumbered.
    pub fn filter_edges(&self, keep: impl Fn(EdgeIdx, &EdgeRef) -> bool) -> ArtifactGraph {
        let edges = self
            .edges
            .iter()
            .enumerate()
            .filter(|(i, e)| keep(*i, e))
            .map(|(_, e)| EdgeSpec {
                src: self.nodes[e.src].id.clone(),
                dst: self.nodes[e.dst].id.clone(),
                kind: e.kind,
                metrics: e.metrics.clone(),
            })
            .collect();
        ArtifactGraph::build(self.specs.clone(), edges).expect("subgraph of a valid graph is valid")
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn nodes(&self) -> &[NodeRef] {
        &self.nodes
    }

    pub fn node(&self, v: NodeIdx) -> &NodeRef {
        &self.nodes[v]
    }

    pub fn node_spec(&self, v: NodeIdx) -> &NodeSpec {
        &self.specs[v]
    }

    pub fn node_specs(&self) -> &[NodeSpec] {
        &self.specs
    }

    pub fn edges(&self) -> &[EdgeRef] {
        &self.edges
    }

    pub fn edge(&self, e: EdgeIdx) -> &EdgeRef {
        &self.edges[e]
    }

    pub fn index_of(&self, id: &str) -> Option<NodeIdx> {
        self.by_id.get(id).copied()
    }

    pub fn models(&self) -> &[NodeIdx] {
        &self.models
    }

    pub fn datasets(&self) -> &[NodeIdx] {
        &self.datasets
    }

    /// Eval edge indices in ingestion order.
    pub fn eval_edges(&self) -> impl Iterator<Item = EdgeIdx> + '_ {
        self.edges.iter().enumerate().filter(|(_, e)| e.kind == EdgeKind::Eval).map(|(i, _)| i)
    }

    pub fn eval_edge_between(&self, model: NodeIdx, dataset: NodeIdx) -> Option<EdgeIdx> {
        self.eval_by_pair.get(&(model, dataset)).copied()
    }

    /// Incident edges of `v` through the allowed kinds, sorted by
    /// neighbour index. Parallel edges appear once each.
    pub fn adjacent(&self, v: NodeIdx, kinds: EdgeKindSet) -> impl Iterator<Item = Adjacent> + '_ {
        EdgeKind::ALL
            .into_iter()
            .filter(move |k| kinds.contains(*k))
            .flat_map(move |k| self.adjacency[v][k.index()].iter().copied())
    }

    pub fn adjacent_kind(&self, v: NodeIdx, kind: EdgeKind) -> &[Adjacent] {
        &self.adjacency[v][kind.index()]
    }

    /// Distinct neighbours of `v`, sorted.
    pub fn neighbors(&self, v: NodeIdx, kinds: EdgeKindSet) -> Vec<NodeIdx> {
        let mut out: Vec<NodeIdx> = self.adjacent(v, kinds).map(|a| a.node).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn degree(&self, v: NodeIdx, kinds: EdgeKindSet) -> usize {
        EdgeKind::ALL.into_iter().filter(|k| kinds.contains(*k)).map(|k| self.adjacency[v][k.index()].len()).sum()
    }

    /// Nodes adjacent to both `u` and `v`, sorted by index.
    pub fn common_neighbors(&self, u: NodeIdx, v: NodeIdx, kinds: EdgeKindSet) -> Vec<NodeIdx> {
        let a = self.neighbors(u, kinds);
        let b = self.neighbors(v, kinds);
        let (mut i, mut j) = (0, 0);
        let mut out = Vec::new();
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    out.push(a[i]);
                    i += 1;
                    j += 1;
                }
            }
        }
        out
    }
}
