//! Planted artifact graphs with known latent scores and an
//! incompatibility mask, for recovery tests and demo corpora.
//!
//! Each model has a task, a size class and latent traits `(q, a, b)`; each
//! dataset has a task, a type and loadings `(w, c, e)`. The score is
//! `y = 0.05 + 0.9 σ(3 (q - 0.5) w + a c + b e)`, a rank-3 interaction.
//! Large models cannot run on type-B datasets (the mask). Compatible
//! same-task pairs are observed with high probability, compatible off-task
//! pairs rarely, masked pairs never.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::graph::{ArtifactGraph, EdgeKind, EdgeSpec, NodeIdx, NodeKind, NodeSpec};
use crate::ingest::EmbeddingTable;

const METRIC_NAMES: [&str; 3] = ["accuracy", "f1", "exact_match"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantedConfig {
    pub models: usize,
    pub datasets: usize,
    pub papers: usize,
    pub codebases: usize,
    pub tasks: usize,
    pub large_fraction: f64,
    pub type_b_fraction: f64,
    pub on_task_observe: f64,
    pub off_task_observe: f64,
    pub feature_noise: f64,
    pub input_dim: usize,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            models: 200,
            datasets: 40,
            papers: 20,
            codebases: 10,
            tasks: 4,
            large_fraction: 0.4,
            type_b_fraction: 0.75,
            on_task_observe: 0.98,
            off_task_observe: 0.02,
            feature_noise: 0.1,
            input_dim: 32,
            seed: 7,
        }
    }
}

impl PlantedConfig {
    /// 40-node corpus: 24 models, 10 datasets, 4 papers, 2 codebases.
    pub fn fixture() -> Self {
        Self { models: 24, datasets: 10, papers: 4, codebases: 2, tasks: 2, input_dim: 16, seed: 42, ..Self::default() }
    }

    /// Signal features per node before padding with pure-noise columns.
    pub fn signal_dim(&self) -> usize {
        self.tasks + 1 + 3 + 3 + 1 + 4
    }
}

#[derive(Clone, Debug)]
pub struct PlantedInstance {
    pub config: PlantedConfig,
    pub graph: ArtifactGraph,
    pub embeddings: EmbeddingTable,
    /// Model node indices (also the first `models` nodes).
    pub models: Vec<NodeIdx>,
    pub datasets: Vec<NodeIdx>,
    /// `truth[i * datasets + j]`: latent score of model `i` on dataset `j`.
    pub truth: Vec<f64>,
    /// `masked[i * datasets + j]`: the pair cannot be evaluated.
    pub masked: Vec<bool>,
}

impl PlantedInstance {
    fn cell(&self, m: NodeIdx, d: NodeIdx) -> usize {
        let i = self.models.binary_search(&m).expect("model node");
        let j = self.datasets.binary_search(&d).expect("dataset node");
        i * self.datasets.len() + j
    }

    pub fn truth_of(&self, m: NodeIdx, d: NodeIdx) -> f64 {
        self.truth[self.cell(m, d)]
    }

    pub fn is_masked(&self, m: NodeIdx, d: NodeIdx) -> bool {
        self.masked[self.cell(m, d)]
    }

    /// Oracle records for every unobserved pair: a score when compatible,
    /// a failure otherwise. One JSON object per line.
    pub fn oracle_jsonl(&self) -> String {
        let mut out = String::new();
        for &m in &self.models {
            for &d in &self.datasets {
                if self.graph.eval_edge_between(m, d).is_some() {
                    continue;
                }
                let (mid, did) = (&self.graph.node(m).id, &self.graph.node(d).id);
                let line = if self.is_masked(m, d) {
                    serde_json::json!({"model": mid, "dataset": did, "failure": "incompatible"})
                } else {
                    serde_json::json!({"model": mid, "dataset": did, "score": round4(self.truth_of(m, d))})
                };
                out.push_str(&line.to_string());
                out.push('\n');
            }
        }
        out
    }
}

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Exactly `round(frac · n)` indices out of `n` flagged, in random positions.
fn exact_flags(n: usize, frac: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let k = (n as f64 * frac).round() as usize;
    let mut flags: Vec<bool> = (0..n).map(|i| i < k).collect();
    flags.shuffle(rng);
    flags
}

pub fn generate(cfg: &PlantedConfig) -> PlantedInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let (nm, nd, t) = (cfg.models, cfg.datasets, cfg.tasks.max(1));

    let large = exact_flags(nm, cfg.large_fraction, &mut rng);
    let type_b = exact_flags(nd, cfg.type_b_fraction, &mut rng);
    let m_task: Vec<usize> = (0..nm).map(|i| i % t).collect();
    let d_task: Vec<usize> = (0..nd).map(|j| j % t).collect();
    let q: Vec<f64> = large
        .iter()
        .map(|&l| if l { rng.random_range(0.5..1.0) } else { rng.random_range(0.0..0.6) })
        .collect();
    let a: Vec<f64> = (0..nm).map(|_| std.sample(&mut rng)).collect();
    let b: Vec<f64> = (0..nm).map(|_| std.sample(&mut rng)).collect();
    let w: Vec<f64> = (0..nd).map(|_| rng.random_range(0.5..1.5)).collect();
    let c: Vec<f64> = (0..nd).map(|_| 0.8 * std.sample(&mut rng)).collect();
    let e: Vec<f64> = (0..nd).map(|_| 0.8 * std.sample(&mut rng)).collect();

    let mut truth = vec![0.0; nm * nd];
    let mut masked = vec![false; nm * nd];
    for i in 0..nm {
        for j in 0..nd {
            let s = 3.0 * (q[i] - 0.5) * w[j] + a[i] * c[j] + b[i] * e[j];
            truth[i * nd + j] = 0.05 + 0.9 * sigmoid(s);
            masked[i * nd + j] = large[i] && type_b[j];
        }
    }

    let mut nodes = Vec::with_capacity(nm + nd + cfg.papers + cfg.codebases);
    for i in 0..nm {
        let size = if large[i] { "large" } else { "small" };
        let mut n = NodeSpec::new(format!("model-{i:03}"), NodeKind::Model);
        n.name = format!("Model {i}");
        n.description = format!("{size} model for task {}", m_task[i]);
        nodes.push(n);
    }
    for j in 0..nd {
        let kind = if type_b[j] { "B" } else { "A" };
        let mut n = NodeSpec::new(format!("dataset-{j:03}"), NodeKind::Dataset);
        n.name = format!("Dataset {j}");
        n.description = format!("type-{kind} benchmark for task {}", d_task[j]);
        nodes.push(n);
    }
    for p in 0..cfg.papers {
        nodes.push(NodeSpec::new(format!("paper-{p:03}"), NodeKind::Paper));
    }
    for k in 0..cfg.codebases {
        nodes.push(NodeSpec::new(format!("code-{k:03}"), NodeKind::Codebase));
    }

    let mut edges = Vec::new();
    for i in 0..nm {
        for j in 0..nd {
            if masked[i * nd + j] {
                continue;
            }
            let p = if m_task[i] == d_task[j] { cfg.on_task_observe } else { cfg.off_task_observe };
            if rng.random::<f64>() < p {
                let name = METRIC_NAMES[j % METRIC_NAMES.len()];
                edges.push(EdgeSpec::eval(
                    format!("model-{i:03}"),
                    format!("dataset-{j:03}"),
                    &[(name, round4(truth[i * nd + j]))],
                ));
            }
        }
    }
    // Papers introduce a few models and datasets of one task.
    for p in 0..cfg.papers {
        let task = p % t;
        let pid = format!("paper-{p:03}");
        let ms: Vec<usize> = (0..nm).filter(|&i| m_task[i] == task).collect();
        let ds: Vec<usize> = (0..nd).filter(|&j| d_task[j] == task).collect();
        for &i in ms.choose_multiple(&mut rng, 3.min(ms.len())) {
            edges.push(EdgeSpec::new(format!("model-{i:03}"), pid.clone(), EdgeKind::Paper));
        }
        for &j in ds.choose_multiple(&mut rng, 1.min(ds.len())) {
            edges.push(EdgeSpec::new(pid.clone(), format!("dataset-{j:03}"), EdgeKind::Paper));
        }
    }
    for k in 0..cfg.codebases {
        let kid = format!("code-{k:03}");
        let picks: Vec<usize> = (0..nm).collect();
        for &i in picks.choose_multiple(&mut rng, 4.min(nm)) {
            edges.push(EdgeSpec::new(format!("model-{i:03}"), kid.clone(), EdgeKind::Code));
        }
    }
    // Finetune chains inside a task and size class.
    for i in t..nm {
        if large[i] == large[i - t] && rng.random::<f64>() < 0.3 {
            edges.push(EdgeSpec::new(format!("model-{:03}", i - t), format!("model-{i:03}"), EdgeKind::Finetune));
        }
    }

    let graph = ArtifactGraph::build(nodes, edges).expect("generator produces a valid graph");

    let dim = cfg.input_dim.max(cfg.signal_dim());
    let noise = Normal::new(0.0, cfg.feature_noise.max(0.0)).expect("finite noise");
    let mut rows = Vec::with_capacity(graph.node_count());
    for v in 0..graph.node_count() {
        let mut f = vec![0.0f64; dim];
        let kind = graph.node(v).kind;
        let o = t;
        if v < nm {
            f[m_task[v]] = 1.0;
            f[o] = if large[v] { 1.0 } else { 0.0 };
            f[o + 1] = q[v];
            f[o + 2] = a[v];
            f[o + 3] = b[v];
        } else if v < nm + nd {
            let j = v - nm;
            f[d_task[j]] = 1.0;
            f[o + 4] = w[j];
            f[o + 5] = c[j];
            f[o + 6] = e[j];
            f[o + 7] = if type_b[j] { 1.0 } else { 0.0 };
        }
        let k = match kind {
            NodeKind::Model => 0,
            NodeKind::Dataset => 1,
            NodeKind::Paper => 2,
            NodeKind::Codebase => 3,
        };
        f[o + 8 + k] = 1.0;
        rows.push(f.iter().map(|x| (x + noise.sample(&mut rng)) as f32).collect());
    }
    let embeddings = EmbeddingTable::new(dim, rows).expect("rectangular rows");

    PlantedInstance {
        config: cfg.clone(),
        graph,
        embeddings,
        models: (0..nm).collect(),
        datasets: (nm..nm + nd).collect(),
        truth,
        masked,
    }
}
