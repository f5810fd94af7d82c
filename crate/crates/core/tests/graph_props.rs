mod common;

use std::collections::BTreeSet;

use alnk_core::graph::{ArtifactGraph, EdgeKind, EdgeKindSet, EdgeSpec, GraphError, NodeKind, NodeSpec};
use alnk_core::heuristics::{adamic_adar, katz, katz_from};
use alnk_core::ingest::{
    load_corpus, normalize_metric, select_dataset_metric, select_edge_metric, write_corpus, EmbeddingTable,
    MetricScale,
};
use common::{random_graph, random_specs};
use proptest::prelude::*;

fn table_for(g: &ArtifactGraph, dim: usize) -> EmbeddingTable {
    let rows = (0..g.node_count()).map(|v| (0..dim).map(|k| (v * 31 + k) as f32 * 0.01 - 0.5).collect()).collect();
    EmbeddingTable::new(dim, rows).unwrap()
}

proptest! {
    #[test]
    fn handshake_holds_per_kind(seed in any::<u64>()) {
        let g = random_graph(seed, 30);
        for kind in EdgeKind::ALL {
            let set = EdgeKindSet::only(kind);
            let total: usize = (0..g.node_count()).map(|v| g.degree(v, set)).sum();
            let edges = g.edges().iter().filter(|e| e.kind == kind).count();
            prop_assert_eq!(total, 2 * edges);
        }
    }

    #[test]
    fn common_neighbors_symmetric_and_brute_force(seed in any::<u64>()) {
        let g = random_graph(seed, 30);
        let n = g.node_count();
        let nbrs: Vec<BTreeSet<usize>> = (0..n)
            .map(|v| g.edges().iter().filter_map(|e| if e.src == v { Some(e.dst) } else if e.dst == v { Some(e.src) } else { None }).collect())
            .collect();
        for u in 0..n {
            for v in 0..n {
                let cn = g.common_neighbors(u, v, EdgeKindSet::ALL);
                prop_assert_eq!(&cn, &g.common_neighbors(v, u, EdgeKindSet::ALL));
                let brute: Vec<usize> = nbrs[u].intersection(&nbrs[v]).copied().collect();
                prop_assert_eq!(cn, brute);
            }
        }
    }

    #[test]
    fn rebuild_is_deterministic(seed in any::<u64>()) {
        let (nodes, edges) = random_specs(seed, 25);
        let a = ArtifactGraph::build(nodes.clone(), edges.clone()).unwrap();
        let b = ArtifactGraph::build(nodes, edges).unwrap();
        prop_assert_eq!(a.edges(), b.edges());
        for v in 0..a.node_count() {
            let (x, y): (Vec<_>, Vec<_>) = (a.adjacent(v, EdgeKindSet::ALL).collect(), b.adjacent(v, EdgeKindSet::ALL).collect());
            prop_assert_eq!(x, y);
        }
    }

    #[test]
    fn heuristics_are_symmetric(seed in any::<u64>()) {
        let g = random_graph(seed, 20);
        for u in 0..g.node_count() {
            for v in u + 1..g.node_count() {
                prop_assert_eq!(adamic_adar(&g, u, v, EdgeKindSet::ALL), adamic_adar(&g, v, u, EdgeKindSet::ALL));
                let (a, b) = (katz(&g, u, v, 0.05, 4, EdgeKindSet::ALL), katz(&g, v, u, 0.05, 4, EdgeKindSet::ALL));
                prop_assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn single_hop_katz_counts_parallel_edges(seed in any::<u64>(), beta in 0.001f64..0.5) {
        let g = random_graph(seed, 20);
        for u in 0..g.node_count() {
            let row = katz_from(&g, u, beta, 1, EdgeKindSet::ALL);
            for (v, &s) in row.iter().enumerate() {
                let direct = g.edges().iter().filter(|e| (e.src == u && e.dst == v) || (e.src == v && e.dst == u)).count();
                prop_assert_eq!(s, beta * direct as f64);
            }
        }
    }

    #[test]
    fn metric_normalisation_idempotent_and_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0, p in 0.0f64..=100.0, q in 0.0f64..=100.0) {
        let na = normalize_metric(a, MetricScale::Unit).unwrap();
        prop_assert_eq!(na, a);
        prop_assert_eq!(normalize_metric(na, MetricScale::Unit).unwrap(), na);
        prop_assert_eq!(a <= b, na <= normalize_metric(b, MetricScale::Unit).unwrap());
        let (np, nq) = (normalize_metric(p, MetricScale::Percent).unwrap(), normalize_metric(q, MetricScale::Percent).unwrap());
        prop_assert!((0.0..=1.0).contains(&np));
        prop_assert!(p > q || np <= nq);
    }

    #[test]
    fn target_selection_is_pure(seed in any::<u64>()) {
        let g = random_graph(seed, 25);
        let evals: Vec<usize> = g.eval_edges().collect();
        for &e in &evals {
            prop_assert_eq!(select_edge_metric(&g, e), select_edge_metric(&g, e));
        }
        for &d in g.datasets() {
            prop_assert_eq!(select_dataset_metric(&g, d, &evals), select_dataset_metric(&g, d, &evals));
        }
    }
}

/// Tiny graphs cover the minimal connecting length for small β.
#[test]
fn small_beta_katz_orders_by_shortest_path_counts() {
    for seed in 0..40 {
        let g = random_graph(seed, 12);
        let n = g.node_count();
        let beta = 1e-7;
        for u in 0..n {
            // (walk length, walk count) of the shortest connecting walks, by BFS
            // on walk counts.
            let mut walks = vec![0.0f64; n];
            walks[u] = 1.0;
            let mut first: Vec<Option<(usize, f64)>> = vec![None; n];
            for len in 1..=3 {
                let mut next = vec![0.0; n];
                for e in g.edges() {
                    next[e.dst] += walks[e.src];
                    next[e.src] += walks[e.dst];
                }
                for v in 0..n {
                    if first[v].is_none() && next[v] > 0.0 {
                        first[v] = Some((len, next[v]));
                    }
                }
                walks = next;
            }
            let row = katz_from(&g, u, beta, 3, EdgeKindSet::ALL);
            for v in 0..n {
                for w in 0..n {
                    if let (Some((lv, cv)), Some((lw, cw))) = (first[v], first[w]) {
                        let shorter = lv < lw || (lv == lw && cv > cw);
                        if shorter {
                            assert!(row[v] > row[w], "seed {seed}: {u}->{v} {:?} vs {u}->{w} {:?}", first[v], first[w]);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn corpus_round_trip_is_byte_identical() {
    for seed in 0..10 {
        let g = random_graph(seed, 30);
        let table = table_for(&g, 6);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_corpus(a.path(), &g, &table).unwrap();
        let p = |d: &std::path::Path, f: &str| d.join(f);
        let (g2, t2) =
            load_corpus(&p(a.path(), "nodes.jsonl"), &p(a.path(), "edges.jsonl"), &p(a.path(), "embeddings.bin")).unwrap();
        assert_eq!(t2, table);
        write_corpus(b.path(), &g2, &t2).unwrap();
        for f in ["nodes.jsonl", "edges.jsonl", "embeddings.bin"] {
            let (x, y) = (std::fs::read(p(a.path(), f)).unwrap(), std::fs::read(p(b.path(), f)).unwrap());
            if x != y {
                let (xs, ys) = (String::from_utf8_lossy(&x), String::from_utf8_lossy(&y));
                let diff: Vec<_> = xs.lines().zip(ys.lines()).filter(|(l, r)| l != r).take(2).collect();
                panic!("{f} differs: {diff:?}");
            }
        }
    }
}

#[test]
fn validation_rules() {
    let nodes = || {
        vec![
            NodeSpec::new("m", NodeKind::Model),
            NodeSpec::new("m2", NodeKind::Model),
            NodeSpec::new("d", NodeKind::Dataset),
            NodeSpec::new("p", NodeKind::Paper),
        ]
    };
    let build = |edges: Vec<EdgeSpec>| ArtifactGraph::build(nodes(), edges);
    assert!(matches!(build(vec![EdgeSpec::new("p", "p", EdgeKind::Paper)]), Err(GraphError::KindViolation { .. })));
    assert!(matches!(build(vec![EdgeSpec::new("m", "d", EdgeKind::Finetune)]), Err(GraphError::KindViolation { .. })));
    let mut with_metric = EdgeSpec::new("m", "p", EdgeKind::Paper);
    with_metric.metrics.insert("accuracy".into(), 0.5);
    assert!(matches!(build(vec![with_metric]), Err(GraphError::KindViolation { .. })));
    assert!(matches!(build(vec![EdgeSpec::eval("m", "d", &[("acc", -0.1)])]), Err(GraphError::MetricOutOfRange { .. })));
    let mut dup_nodes = nodes();
    dup_nodes.push(NodeSpec::new("m", NodeKind::Dataset));
    assert!(matches!(ArtifactGraph::build(dup_nodes, vec![]), Err(GraphError::DuplicateNode(_))));
    let parallel = build(vec![
        EdgeSpec::new("p", "m", EdgeKind::Paper),
        EdgeSpec::new("p", "m", EdgeKind::Paper),
        EdgeSpec::new("m2", "m", EdgeKind::Finetune),
        EdgeSpec::new("m2", "m", EdgeKind::Finetune),
    ])
    .unwrap();
    assert_eq!(parallel.degree(0, EdgeKindSet::ALL), 4);
    assert_eq!(parallel.neighbors(0, EdgeKindSet::ALL), vec![1, 3]);
}
