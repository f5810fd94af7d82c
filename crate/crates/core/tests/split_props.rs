mod common;

use std::collections::{BTreeSet, HashSet};

use alnk_core::graph::{ArtifactGraph, EdgeKind, EdgeSpec, NodeSpec};
use alnk_core::splits::{
    enumerate_eval_negatives, inductive_split, link_ranking_candidates, sample_train_negatives, transductive_split,
    SplitSpec,
};
use common::{random_bipartite, random_specs};
use proptest::prelude::*;

fn all_pairs(g: &ArtifactGraph) -> Vec<(usize, usize)> {
    g.models().iter().flat_map(|&m| g.datasets().iter().map(move |&d| (m, d))).collect()
}

fn assert_partition(g: &ArtifactGraph, s: &SplitSpec) {
    let mut all: Vec<usize> = s.train.iter().chain(&s.dev).chain(&s.test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, g.eval_edges().collect::<Vec<_>>(), "splits partition the eval edges");
    for part in [&s.train, &s.dev, &s.test] {
        assert!(part.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn inductive_invariants_over_100_seeds() {
    let g = random_bipartite(3, 30, 12, 0.3);
    let mut held_sets = BTreeSet::new();
    for seed in 0..100 {
        let s = inductive_split(&g, 0.2, seed).unwrap();
        assert_partition(&g, &s);
        let held: HashSet<usize> = s.held_out_models.iter().copied().collect();
        for &e in &s.test {
            assert!(held.contains(&g.edge(e).src));
        }
        for &e in s.train.iter().chain(&s.dev) {
            assert!(!held.contains(&g.edge(e).src));
        }
        for e in g.eval_edges() {
            if held.contains(&g.edge(e).src) {
                assert!(s.test.contains(&e));
            }
        }
        held_sets.insert(s.held_out_models.clone());
    }
    assert!(held_sets.len() > 50, "seeds change the held-out set");
}

#[test]
fn eval_negatives_match_set_difference() {
    for seed in 0..20 {
        let g = random_bipartite(seed, 20, 20, 0.2);
        let s = transductive_split(&g, 0.2, 0.1, seed).unwrap();
        let pos = s.positives(&g);
        let brute: Vec<_> = all_pairs(&g).into_iter().filter(|p| !pos.contains(p)).collect();
        assert_eq!(enumerate_eval_negatives(&g, &s).pairs, brute);
    }
}

#[test]
fn ranking_candidates_match_filter() {
    for seed in 0..20 {
        let g = random_bipartite(seed, 20, 8, 0.3);
        let s = transductive_split(&g, 0.3, 0.1, seed).unwrap();
        let (train, test): (HashSet<_>, HashSet<_>) =
            (SplitSpec::pairs(&g, &s.train).into_iter().collect(), SplitSpec::pairs(&g, &s.test).into_iter().collect());
        for &d in g.datasets() {
            let Ok(got) = link_ranking_candidates(&g, &s, d) else {
                assert!(!test.iter().any(|p| p.1 == d));
                continue;
            };
            let brute: Vec<usize> = g
                .models()
                .iter()
                .copied()
                .filter(|&m| test.contains(&(m, d)) || (!train.contains(&(m, d)) && !test.contains(&(m, d))))
                .collect();
            assert_eq!(got, brute);
        }
    }
}

/// Reverses node order and renames every id; edges keep their order.
fn relabelled(nodes: &[NodeSpec], edges: &[EdgeSpec]) -> ArtifactGraph {
    let rename = |id: &str| format!("x_{id}");
    let nodes: Vec<NodeSpec> = nodes.iter().rev().map(|n| NodeSpec { id: rename(&n.id), ..n.clone() }).collect();
    let edges: Vec<EdgeSpec> =
        edges.iter().map(|e| EdgeSpec { src: rename(&e.src), dst: rename(&e.dst), ..e.clone() }).collect();
    ArtifactGraph::build(nodes, edges).unwrap()
}

proptest! {
    #[test]
    fn train_negatives_never_hit_positives(seed in any::<u64>(), ratio in 1usize..4) {
        let (nodes, edges) = random_specs(seed, 30);
        let g = ArtifactGraph::build(nodes, edges).unwrap();
        prop_assume!(g.eval_edges().count() >= 4);
        let s = transductive_split(&g, 0.2, 0.1, seed).unwrap();
        prop_assume!(!s.train.is_empty());
        let pos = s.positives(&g);
        prop_assume!(pos.len() < all_pairs(&g).len());
        let a = sample_train_negatives(&g, &s, ratio, seed).unwrap();
        prop_assert_eq!(a.pairs.len(), ratio * s.train.len());
        prop_assert!(a.pairs.iter().all(|p| !pos.contains(p)));
        prop_assert_eq!(&a, &sample_train_negatives(&g, &s, ratio, seed).unwrap());
        let all = enumerate_eval_negatives(&g, &s);
        prop_assert!(all.pairs.iter().all(|p| !pos.contains(p)));
    }

    #[test]
    fn inductive_negatives_skip_held_out_models(seed in any::<u64>()) {
        let g = random_bipartite(seed, 15, 6, 0.3);
        let s = inductive_split(&g, 0.3, seed).unwrap();
        prop_assume!(!s.train.is_empty());
        let held: HashSet<usize> = s.held_out_models.iter().copied().collect();
        let n = sample_train_negatives(&g, &s, 2, seed).unwrap();
        prop_assert!(n.pairs.iter().all(|p| !held.contains(&p.0)));
    }

    #[test]
    fn splits_follow_relabelling(seed in any::<u64>()) {
        let (nodes, edges) = random_specs(seed, 25);
        let g = ArtifactGraph::build(nodes.clone(), edges.clone()).unwrap();
        prop_assume!(g.eval_edges().count() >= 3);
        let h = relabelled(&nodes, &edges);
        let (a, b) = (transductive_split(&g, 0.2, 0.1, seed).unwrap(), transductive_split(&h, 0.2, 0.1, seed).unwrap());
        let ids = |g: &ArtifactGraph, es: &[usize]| -> Vec<(String, String)> {
            es.iter().map(|&e| (g.node(g.edge(e).src).id.trim_start_matches("x_").to_string(), g.node(g.edge(e).dst).id.trim_start_matches("x_").to_string())).collect()
        };
        prop_assert_eq!(ids(&g, &a.test), ids(&h, &b.test));
        prop_assert_eq!(ids(&g, &a.dev), ids(&h, &b.dev));
        prop_assert_eq!(ids(&g, &a.train), ids(&h, &b.train));
    }

    #[test]
    fn train_visible_graph_hides_held_out_edges(seed in any::<u64>()) {
        let (nodes, edges) = random_specs(seed, 25);
        let g = ArtifactGraph::build(nodes, edges).unwrap();
        prop_assume!(g.eval_edges().count() >= 3);
        let s = transductive_split(&g, 0.2, 0.1, seed).unwrap();
        let v = s.train_visible_graph(&g);
        prop_assert_eq!(v.node_count(), g.node_count());
        let aux = g.edges().iter().filter(|e| e.kind != EdgeKind::Eval).count();
        prop_assert_eq!(v.edge_count(), aux + s.train.len());
        let hidden: HashSet<_> = SplitSpec::pairs(&g, &s.test).into_iter().chain(SplitSpec::pairs(&g, &s.dev)).collect();
        prop_assert!(v.eval_edges().all(|e| !hidden.contains(&(v.edge(e).src, v.edge(e).dst))));
    }
}
