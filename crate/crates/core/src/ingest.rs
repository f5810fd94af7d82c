//! Corpus loading, metric normalisation and target selection.
//!
//! File formats:
//!
//! * `nodes.jsonl`: `{"id", "kind", "name", "description"}` per line.
//! * `edges.jsonl`: `{"src", "dst", "kind", "metrics"}` where `metrics`
//!   (eval edges only) maps a name to `{"value", "scale": "unit"|"percent"}`.
//! * embeddings: binary (`ALNK` magic, `u32` count, `u32` dim, then per node
//!   a `u32` id length, UTF-8 id, `dim` little-endian `f32`), or JSONL with
//!   a `{"dim": N}` header line followed by `{"id", "vector"}` rows.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use alnk_autodiff::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{ArtifactGraph, EdgeIdx, EdgeKind, EdgeSpec, GraphError, NodeIdx, NodeKind, NodeSpec};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"ALNK";
const SCALE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {msg}")]
    Format { path: PathBuf, line: usize, msg: String },
    #[error("no embedding for node(s): {}", .ids.join(", "))]
    MissingEmbedding { ids: Vec<String> },
    #[error("embedding for {id:?} has {got} components, expected {expected}")]
    DimensionMismatch { id: String, expected: usize, got: usize },
    #[error("metric value {value} outside the {scale:?} range")]
    OutOfRange { value: f64, scale: MetricScale },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> IngestError + '_ {
    move |source| IngestError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricScale {
    Unit,
    Percent,
}

/// Maps a raw metric onto `[0, 1]` according to its declared scale.
pub fn normalize_metric(raw_value: f64, scale: MetricScale) -> Result<f64, IngestError> {
    let hi = match scale {
        MetricScale::Unit => 1.0,
        MetricScale::Percent => 100.0,
    };
    if !raw_value.is_finite() || raw_value < -SCALE_TOLERANCE || raw_value > hi + SCALE_TOLERANCE {
        return Err(IngestError::OutOfRange { value: raw_value, scale });
    }
    let v = match scale {
        MetricScale::Unit => raw_value,
        MetricScale::Percent => raw_value / 100.0,
    };
    Ok(v.clamp(0.0, 1.0))
}

/// Per-node dense feature vectors, one row per graph node in index order.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, rows: Vec<Vec<f32>>) -> Result<Self, IngestError> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(IngestError::DimensionMismatch { id: format!("#{i}"), expected: dim, got: r.len() });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn row(&self, v: NodeIdx) -> &[f32] {
        &self.data[v * self.dim..(v + 1) * self.dim]
    }

    /// Feature matrix `[nodes, dim]` in `f64`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.rows(), self.dim, self.data.iter().map(|&v| f64::from(v)).collect())
            .expect("table is rectangular")
    }
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct NodeRecord {
    id: String,
    kind: NodeKind,
    #[serde(default)]
    name: String,
    #[serde(default)]
    description: String,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct MetricRecord {
    value: f64,
    scale: MetricScale,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct EdgeRecord {
    src: String,
    dst: String,
    kind: EdgeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metrics: Option<BTreeMap<String, MetricRecord>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingHeader {
    dim: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingRecord {
    id: String,
    vector: Vec<f64>,
}

/// Reads a JSONL file, calling `f` on each non-blank line (1-based numbers).
pub(crate) fn for_each_jsonl<T, F>(path: &Path, mut f: F) -> Result<(), IngestError>
where
    T: for<'de> Deserialize<'de>,
    F: FnMut(usize, T) -> Result<(), IngestError>,
{
    let file = fs::File::open(path).map_err(io_err(path))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(&line)
            .map_err(|e| IngestError::Format { path: path.to_path_buf(), line: i + 1, msg: e.to_string() })?;
        f(i + 1, rec)?;
    }
    Ok(())
}

pub fn read_nodes(path: &Path) -> Result<Vec<NodeSpec>, IngestError> {
    let mut out = Vec::new();
    for_each_jsonl(path, |_, r: NodeRecord| {
        out.push(NodeSpec { id: r.id, kind: r.kind, name: r.name, description: r.description });
        Ok(())
    })?;
    Ok(out)
}

pub fn read_edges(path: &Path) -> Result<Vec<EdgeSpec>, IngestError> {
    let mut out = Vec::new();
    for_each_jsonl(path, |line, r: EdgeRecord| {
        let mut metrics = BTreeMap::new();
        if let Some(ms) = r.metrics {
            if r.kind != EdgeKind::Eval && !ms.is_empty() {
                return Err(IngestError::Format {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("{} edge must not carry metrics", r.kind),
                });
            }
            for (name, m) in ms {
                let v = normalize_metric(m.value, m.scale).map_err(|e| IngestError::Format {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("metric {name:?}: {e}"),
                })?;
                metrics.insert(name, v);
            }
        }
        out.push(EdgeSpec { src: r.src, dst: r.dst, kind: r.kind, metrics });
        Ok(())
    })?;
    Ok(out)
}

fn read_u32(buf: &[u8], pos: &mut usize) -> Option<u32> {
    let b = buf.get(*pos..*pos + 4)?;
    *pos += 4;
    Some(u32::from_le_bytes(b.try_into().ok()?))
}

/// Reads an embedding file into `(dim, id -> vector)`, sniffing the format.
pub fn read_embeddings(path: &Path) -> Result<(usize, HashMap<String, Vec<f32>>), IngestError> {
    let mut head = [0u8; 4];
    let mut f = fs::File::open(path).map_err(io_err(path))?;
    let n = f.read(&mut head).map_err(io_err(path))?;
    if n == 4 && &head == EMBEDDING_MAGIC {
        read_embeddings_bin(path)
    } else {
        read_embeddings_jsonl(path)
    }
}

fn read_embeddings_bin(path: &Path) -> Result<(usize, HashMap<String, Vec<f32>>), IngestError> {
    let buf = fs::read(path).map_err(io_err(path))?;
    let fmt = |msg: &str| IngestError::Format { path: path.to_path_buf(), line: 0, msg: msg.to_string() };
    let mut pos = 4;
    let count = read_u32(&buf, &mut pos).ok_or_else(|| fmt("truncated header"))? as usize;
    let dim = read_u32(&buf, &mut pos).ok_or_else(|| fmt("truncated header"))? as usize;
    let mut out = HashMap::with_capacity(count);
    for i in 0..count {
        let len = read_u32(&buf, &mut pos).ok_or_else(|| fmt(&format!("truncated record {i}")))? as usize;
        let id_bytes = buf.get(pos..pos + len).ok_or_else(|| fmt(&format!("truncated id in record {i}")))?;
        let id = std::str::from_utf8(id_bytes).map_err(|_| fmt(&format!("record {i}: id is not UTF-8")))?.to_string();
        pos += len;
        let raw = buf.get(pos..pos + 4 * dim).ok_or_else(|| fmt(&format!("record {i} ({id}): truncated vector")))?;
        pos += 4 * dim;
        let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(fmt(&format!("record {i} ({id}): non-finite component")));
        }
        out.insert(id, v);
    }
    if pos != buf.len() {
        return Err(fmt("trailing bytes after last record"));
    }
    Ok((dim, out))
}

fn read_embeddings_jsonl(path: &Path) -> Result<(usize, HashMap<String, Vec<f32>>), IngestError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let fmt = |line: usize, msg: String| IngestError::Format { path: path.to_path_buf(), line, msg };
    let dim = loop {
        match lines.next() {
            None => return Err(fmt(1, "missing {\"dim\": N} header".into())),
            Some((i, l)) => {
                let l = l.map_err(io_err(path))?;
                if l.trim().is_empty() {
                    continue;
                }
                let h: EmbeddingHeader = serde_json::from_str(&l).map_err(|e| fmt(i + 1, e.to_string()))?;
                break h.dim;
            }
        }
    };
    let mut out = HashMap::new();
    for (i, l) in lines {
        let l = l.map_err(io_err(path))?;
        if l.trim().is_empty() {
            continue;
        }
        let r: EmbeddingRecord = serde_json::from_str(&l).map_err(|e| fmt(i + 1, e.to_string()))?;
        if r.vector.len() != dim {
            return Err(IngestError::DimensionMismatch { id: r.id, expected: dim, got: r.vector.len() });
        }
        let v: Vec<f32> = r.vector.iter().map(|&x| x as f32).collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(fmt(i + 1, format!("{}: non-finite component", r.id)));
        }
        out.insert(r.id, v);
    }
    Ok((dim, out))
}

/// Aligns raw embeddings with graph node order.
pub fn align_embeddings(
    g: &ArtifactGraph,
    dim: usize,
    mut by_id: HashMap<String, Vec<f32>>,
) -> Result<EmbeddingTable, IngestError> {
    let missing: Vec<String> = g.nodes().iter().filter(|n| !by_id.contains_key(&n.id)).map(|n| n.id.clone()).collect();
    if !missing.is_empty() {
        return Err(IngestError::MissingEmbedding { ids: missing });
    }
    let rows = g.nodes().iter().map(|n| by_id.remove(&n.id).expect("checked above")).collect();
    EmbeddingTable::new(dim, rows)
}

/// Loads and validates a full corpus.
pub fn load_corpus(
    nodes_path: &Path,
    edges_path: &Path,
    embeddings_path: &Path,
) -> Result<(ArtifactGraph, EmbeddingTable), IngestError> {
    let nodes = read_nodes(nodes_path)?;
    let edges = read_edges(edges_path)?;
    let g = ArtifactGraph::build(nodes, edges)?;
    let (dim, by_id) = read_embeddings(embeddings_path)?;
    let table = align_embeddings(&g, dim, by_id)?;
    Ok((g, table))
}

/// Canonical `nodes.jsonl`: index order, fixed key order.
pub fn write_nodes<W: Write>(g: &ArtifactGraph, mut w: W) -> io::Result<()> {
    for n in g.node_specs() {
        let rec = NodeRecord { id: n.id.clone(), kind: n.kind, name: n.name.clone(), description: n.description.clone() };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Canonical `edges.jsonl`: index order, metrics sorted and on unit scale.
pub fn write_edges<W: Write>(g: &ArtifactGraph, mut w: W) -> io::Result<()> {
    for e in g.edges() {
        let metrics = (e.kind == EdgeKind::Eval).then(|| {
            e.metrics.iter().map(|(k, &v)| (k.clone(), MetricRecord { value: v, scale: MetricScale::Unit })).collect()
        });
        let rec = EdgeRecord { src: g.node(e.src).id.clone(), dst: g.node(e.dst).id.clone(), kind: e.kind, metrics };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Binary embedding file, rows in node index order.
pub fn write_embeddings_bin<W: Write>(g: &ArtifactGraph, table: &EmbeddingTable, w: W) -> io::Result<()> {
    let mut w = BufWriter::new(w);
    w.write_all(EMBEDDING_MAGIC)?;
    w.write_all(&(g.node_count() as u32).to_le_bytes())?;
    w.write_all(&(table.dim() as u32).to_le_bytes())?;
    for n in g.nodes() {
        w.write_all(&(n.id.len() as u32).to_le_bytes())?;
        w.write_all(n.id.as_bytes())?;
        for v in table.row(n.index) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

/// Writes `nodes.jsonl`, `edges.jsonl` and `embeddings.bin` into `dir`.
pub fn write_corpus(dir: &Path, g: &ArtifactGraph, table: &EmbeddingTable) -> Result<(), IngestError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let open = |name: &str| {
        let p = dir.join(name);
        fs::File::create(&p).map(BufWriter::new).map_err(|source| IngestError::Io { path: p, source })
    };
    let p = dir.join("nodes.jsonl");
    write_nodes(g, open("nodes.jsonl")?).map_err(io_err(&p))?;
    let p = dir.join("edges.jsonl");
    write_edges(g, open("edges.jsonl")?).map_err(io_err(&p))?;
    let p = dir.join("embeddings.bin");
    write_embeddings_bin(g, table, open("embeddings.bin")?).map_err(io_err(&p))?;
    Ok(())
}

/// A scalar supervision target attached to an eval edge.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricTarget {
    pub edge: EdgeIdx,
    pub metric_name: String,
    pub value: f64,
}

/// Per-edge target: the lexicographically smallest metric name.
pub fn select_edge_metric(g: &ArtifactGraph, edge: EdgeIdx) -> Option<MetricTarget> {
    let e = g.edge(edge);
    if e.kind != EdgeKind::Eval {
        return None;
    }
    e.metrics
        .iter()
        .next()
        .map(|(name, &value)| MetricTarget { edge, metric_name: name.clone(), value })
}

/// Metric name carried by the most edges of `edges` (ties: smallest name).
pub fn most_frequent_metric(g: &ArtifactGraph, edges: &[EdgeIdx]) -> Option<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for &e in edges {
        for name in g.edge(e).metrics.keys() {
            *counts.entry(name.as_str()).or_default() += 1;
        }
    }
    // BTreeMap iterates names ascending, so the first maximum wins ties.
    let mut best: Option<(&str, usize)> = None;
    for (name, c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((name, c));
        }
    }
    best.map(|(n, _)| n.to_string())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMetric {
    pub metric_name: String,
    pub targets: Vec<MetricTarget>,
}

/// Per-dataset target selection for attribute ranking. Returns `None` when
/// fewer than two edges carry the chosen metric or all their values agree.
pub fn select_dataset_metric(g: &ArtifactGraph, dataset: NodeIdx, edge_subset: &[EdgeIdx]) -> Option<DatasetMetric> {
    let edges: Vec<EdgeIdx> = edge_subset
        .iter()
        .copied()
        .filter(|&e| {
            let r = g.edge(e);
            r.kind == EdgeKind::Eval && r.dst == dataset
        })
        .collect();
    let name = most_frequent_metric(g, &edges)?;
    let targets: Vec<MetricTarget> = edges
        .iter()
        .filter_map(|&e| {
            g.edge(e).metrics.get(&name).map(|&value| MetricTarget { edge: e, metric_name: name.clone(), value })
        })
        .collect();
    if targets.len() < 2 || targets.iter().all(|t| t.value == targets[0].value) {
        return None;
    }
    Some(DatasetMetric { metric_name: name, targets })
}
