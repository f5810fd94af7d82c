#![allow(dead_code)]

use alnk_core::graph::{ArtifactGraph, EdgeKind, EdgeSpec, NodeKind, NodeSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Descriptor lists of a random valid multigraph: at least one model and one
/// dataset, unique eval pairs with metrics, parallel auxiliary edges allowed.
pub fn random_specs(seed: u64, max_nodes: usize) -> (Vec<NodeSpec>, Vec<EdgeSpec>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(4..=max_nodes.max(4));
    let kinds = [NodeKind::Model, NodeKind::Dataset, NodeKind::Paper, NodeKind::Codebase];
    let nodes: Vec<NodeSpec> = (0..n)
        .map(|i| {
            let kind = if i < 4 { kinds[i] } else { kinds[rng.random_range(0..4)] };
            NodeSpec::new(format!("n{i}"), kind)
        })
        .collect();
    let of = |k: NodeKind| -> Vec<usize> { (0..n).filter(|&i| nodes[i].kind == k).collect() };
    let (models, datasets) = (of(NodeKind::Model), of(NodeKind::Dataset));
    let mut edges = Vec::new();
    for &m in &models {
        for &d in &datasets {
            if rng.random_bool(0.35) {
                let mut metrics = vec![("accuracy", (rng.random_range(0..=100) as f64) / 100.0)];
                if rng.random_bool(0.3) {
                    metrics.push(("f1", rng.random()));
                }
                edges.push(EdgeSpec::eval(format!("n{m}"), format!("n{d}"), &metrics));
            }
        }
    }
    for _ in 0..rng.random_range(0..=n) {
        let (a, b) = (models[rng.random_range(0..models.len())], models[rng.random_range(0..models.len())]);
        if a != b {
            edges.push(EdgeSpec::new(format!("n{a}"), format!("n{b}"), EdgeKind::Finetune));
        }
    }
    for _ in 0..rng.random_range(0..=2 * n) {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b {
            let kind = if rng.random_bool(0.5) { EdgeKind::Paper } else { EdgeKind::Code };
            edges.push(EdgeSpec::new(format!("n{a}"), format!("n{b}"), kind));
        }
    }
    (nodes, edges)
}

pub fn random_graph(seed: u64, max_nodes: usize) -> ArtifactGraph {
    let (nodes, edges) = random_specs(seed, max_nodes);
    ArtifactGraph::build(nodes, edges).expect("generator emits valid graphs")
}

/// Model × dataset graph with `p`-dense eval edges and a guaranteed edge
/// for the first model on every dataset.
pub fn random_bipartite(seed: u64, models: usize, datasets: usize, p: f64) -> ArtifactGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes: Vec<NodeSpec> = (0..models).map(|i| NodeSpec::new(format!("m{i}"), NodeKind::Model)).collect();
    nodes.extend((0..datasets).map(|j| NodeSpec::new(format!("d{j}"), NodeKind::Dataset)));
    let mut edges = Vec::new();
    for i in 0..models {
        for j in 0..datasets {
            if i == 0 || rng.random_bool(p) {
                edges.push(EdgeSpec::eval(format!("m{i}"), format!("d{j}"), &[("accuracy", rng.random())]));
            }
        }
    }
    ArtifactGraph::build(nodes, edges).unwrap()
}
