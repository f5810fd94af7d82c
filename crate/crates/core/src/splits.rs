//! Edge partitions and negative sampling.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{ArtifactGraph, EdgeIdx, EdgeKind, NodeIdx};

#[derive(Debug, Error, PartialEq)]
pub enum SplitError {
    #[error("graph has no eval edges")]
    EmptyGraph,
    #[error("invalid split ratios: {0}")]
    InvalidRatio(String),
    #[error("no model has an eval edge")]
    NoEligibleModels,
    #[error("every model-dataset pair is already a positive")]
    SaturatedSpace,
    #[error("dataset {0:?} has no test positives")]
    NoTestPositives(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Transductive,
    Inductive,
}

impl std::fmt::Display for SplitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitMode::Transductive => "transductive",
            SplitMode::Inductive => "inductive",
        })
    }
}

/// Partition of eval edges. Index lists are kept ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub seed: u64,
    pub train: Vec<EdgeIdx>,
    pub dev: Vec<EdgeIdx>,
    pub test: Vec<EdgeIdx>,
    #[serde(default)]
    pub held_out_models: Vec<NodeIdx>,
}

impl SplitSpec {
    /// `(model, dataset)` pairs of the given edges.
    pub fn pairs(g: &ArtifactGraph, edges: &[EdgeIdx]) -> Vec<(NodeIdx, NodeIdx)> {
        edges.iter().map(|&e| (g.edge(e).src, g.edge(e).dst)).collect()
    }

    pub fn positives(&self, g: &ArtifactGraph) -> HashSet<(NodeIdx, NodeIdx)> {
        [&self.train, &self.dev, &self.test].into_iter().flat_map(|es| Self::pairs(g, es)).collect()
    }

    /// Graph visible during training: every non-eval edge plus train eval edges.
    pub fn train_visible_graph(&self, g: &ArtifactGraph) -> ArtifactGraph {
        let train: HashSet<EdgeIdx> = self.train.iter().copied().collect();
        g.filter_edges(|i, e| e.kind != EdgeKind::Eval || train.contains(&i))
    }
}

pub fn transductive_split(
    g: &ArtifactGraph,
    test_ratio: f64,
    dev_ratio: f64,
    seed: u64,
) -> Result<SplitSpec, SplitError> {
    let total = test_ratio + dev_ratio;
    if !(test_ratio >= 0.0 && dev_ratio >= 0.0 && total > 0.0 && total < 1.0) {
        return Err(SplitError::InvalidRatio(format!("test {test_ratio} + dev {dev_ratio} must lie in (0, 1)")));
    }
    let mut edges: Vec<EdgeIdx> = g.eval_edges().collect();
    if edges.is_empty() {
        return Err(SplitError::EmptyGraph);
    }
    let n = edges.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    edges.shuffle(&mut rng);
    let n_test = (n as f64 * test_ratio).round() as usize;
    let n_dev = ((n as f64 * dev_ratio).round() as usize).min(n - n_test);
    let mut test = edges[..n_test].to_vec();
    let mut dev = edges[n_test..n_test + n_dev].to_vec();
    let mut train = edges[n_test + n_dev..].to_vec();
    test.sort_unstable();
    dev.sort_unstable();
    train.sort_unstable();
    Ok(SplitSpec { mode: SplitMode::Transductive, seed, train, dev, test, held_out_models: Vec::new() })
}

/// Holds out a model partition; the remaining edges split 7:1 into train/dev.
pub fn inductive_split(g: &ArtifactGraph, model_fraction: f64, seed: u64) -> Result<SplitSpec, SplitError> {
    if !(model_fraction > 0.0 && model_fraction < 1.0) {
        return Err(SplitError::InvalidRatio(format!("model fraction {model_fraction} must lie in (0, 1)")));
    }
    let eval: Vec<EdgeIdx> = g.eval_edges().collect();
    if eval.is_empty() {
        return Err(if g.models().is_empty() { SplitError::NoEligibleModels } else { SplitError::EmptyGraph });
    }
    // Eligible models in order of first eval edge, so the draw does not
    // depend on node ids or node ordering.
    let mut seen = HashSet::new();
    let mut eligible: Vec<NodeIdx> = Vec::new();
    for &e in &eval {
        let m = g.edge(e).src;
        if seen.insert(m) {
            eligible.push(m);
        }
    }
    if eligible.is_empty() {
        return Err(SplitError::NoEligibleModels);
    }
    let k = ((model_fraction * eligible.len() as f64).ceil() as usize).clamp(1, eligible.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eligible.shuffle(&mut rng);
    let mut held: Vec<NodeIdx> = eligible[..k].to_vec();
    held.sort_unstable();
    let held_set: HashSet<NodeIdx> = held.iter().copied().collect();

    let (mut test, mut rest): (Vec<EdgeIdx>, Vec<EdgeIdx>) =
        eval.iter().partition(|&&e| held_set.contains(&g.edge(e).src));
    rest.shuffle(&mut rng);
    let n_dev = (rest.len() as f64 / 8.0).round() as usize;
    let mut dev = rest[..n_dev].to_vec();
    let mut train = rest[n_dev..].to_vec();
    test.sort_unstable();
    dev.sort_unstable();
    train.sort_unstable();
    Ok(SplitSpec { mode: SplitMode::Inductive, seed, train, dev, test, held_out_models: held })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeProvenance {
    TrainSampled,
    EvalEnumerated,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegativeInventory {
    pub pairs: Vec<(NodeIdx, NodeIdx)>,
    pub provenance: NegativeProvenance,
}

/// Seed for the negative draw of a given epoch.
pub fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    seed ^ epoch
}

/// Draws `ratio · |train|` negatives uniformly, with replacement, from pairs
/// that are positive in no split. Held-out models of an inductive split are
/// never drawn.
pub fn sample_train_negatives(
    g: &ArtifactGraph,
    split: &SplitSpec,
    ratio: usize,
    seed: u64,
) -> Result<NegativeInventory, SplitError> {
    if ratio == 0 {
        return Err(SplitError::InvalidRatio("negative ratio must be at least 1".into()));
    }
    let positives = split.positives(g);
    let held: HashSet<NodeIdx> = split.held_out_models.iter().copied().collect();
    let models: Vec<NodeIdx> = g.models().iter().copied().filter(|m| !held.contains(m)).collect();
    let datasets = g.datasets();
    let space = models.len() * datasets.len();
    let taken = positives.iter().filter(|(m, _)| !held.contains(m)).count();
    if space <= taken {
        return Err(SplitError::SaturatedSpace);
    }
    let want = ratio * split.train.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(want);
    if (space - taken) * 20 < space {
        // Dense positives: rejection would spin, so draw from the free list.
        let free: Vec<(NodeIdx, NodeIdx)> = models
            .iter()
            .flat_map(|&m| datasets.iter().map(move |&d| (m, d)))
            .filter(|p| !positives.contains(p))
            .collect();
        for _ in 0..want {
            pairs.push(free[rng.random_range(0..free.len())]);
        }
    } else {
        while pairs.len() < want {
            let p = (models[rng.random_range(0..models.len())], datasets[rng.random_range(0..datasets.len())]);
            if !positives.contains(&p) {
                pairs.push(p);
            }
        }
    }
    Ok(NegativeInventory { pairs, provenance: NegativeProvenance::TrainSampled })
}

/// Every model-dataset pair that is positive in no split, model-major order.
pub fn enumerate_eval_negatives(g: &ArtifactGraph, split: &SplitSpec) -> NegativeInventory {
    let positives = split.positives(g);
    let pairs = g
        .models()
        .iter()
        .flat_map(|&m| g.datasets().iter().map(move |&d| (m, d)))
        .filter(|p| !positives.contains(p))
        .collect();
    NegativeInventory { pairs, provenance: NegativeProvenance::EvalEnumerated }
}

/// Candidate models for ranking `dataset`: its test positives plus every
/// model without a train or test positive to it, ascending by index.
pub fn link_ranking_candidates(
    g: &ArtifactGraph,
    split: &SplitSpec,
    dataset: NodeIdx,
) -> Result<Vec<NodeIdx>, SplitError> {
    let to_d = |edges: &[EdgeIdx]| -> HashSet<NodeIdx> {
        edges.iter().map(|&e| g.edge(e)).filter(|e| e.dst == dataset).map(|e| e.src).collect()
    };
    let test = to_d(&split.test);
    if test.is_empty() {
        return Err(SplitError::NoTestPositives(g.node(dataset).id.clone()));
    }
    let train = to_d(&split.train);
    Ok(g.models().iter().copied().filter(|m| test.contains(m) || !train.contains(m)).collect())
}
