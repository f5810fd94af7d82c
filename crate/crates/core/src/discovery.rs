//! Rank-and-verify: order unobserved pairs, verify the top of the list
//! through an oracle, record state-of-the-art events, and summarise the
//! verification cost as a curve.

use std::collections::HashMap;
use std::io::{self, BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{ArtifactGraph, EdgeKind, NodeIdx};
use crate::ingest::most_frequent_metric;

#[derive(Debug, Error)]
pub enum DiscoveryError {
    #[error("oracle backend failed: {0}")]
    Oracle(String),
    #[error("budget must be at least 1")]
    InvalidBudget,
    #[error("candidates are not sorted by score descending")]
    Unsorted,
    #[error("dataset {0} has no positive oracle best")]
    ZeroOracleBest(usize),
    #[error("cost curve needs at least one dataset")]
    NoDatasets,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Score(f64),
    Failure(String),
}

impl Outcome {
    pub fn score(&self) -> Option<f64> {
        match self {
            Outcome::Score(s) => Some(*s),
            Outcome::Failure(_) => None,
        }
    }
}

pub trait VerificationOracle {
    /// Errors are reserved for backend failures; a pair that cannot be run
    /// is an `Outcome::Failure`.
    fn verify(&self, model: &str, dataset: &str) -> Result<Outcome, DiscoveryError>;
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OracleLine {
    model: String,
    dataset: String,
    score: Option<f64>,
    failure: Option<String>,
}

/// Lookup-table oracle. Misses fail with reason `unverifiable`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FileOracle {
    table: HashMap<(String, String), Outcome>,
}

impl FileOracle {
    pub fn insert(&mut self, model: impl Into<String>, dataset: impl Into<String>, outcome: Outcome) {
        self.table.insert((model.into(), dataset.into()), outcome);
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn from_reader<R: BufRead>(r: R) -> Result<Self, DiscoveryError> {
        let mut o = Self::default();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| DiscoveryError::Oracle(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: String| DiscoveryError::Oracle(format!("line {}: {m}", i + 1));
            let rec: OracleLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            let outcome = match (rec.score, rec.failure) {
                (Some(s), None) if (0.0..=1.0).contains(&s) => Outcome::Score(s),
                (Some(s), None) => return Err(bad(format!("score {s} outside [0, 1]"))),
                (None, Some(f)) => Outcome::Failure(f),
                _ => return Err(bad("exactly one of score and failure is required".into())),
            };
            o.insert(rec.model, rec.dataset, outcome);
        }
        Ok(o)
    }

    pub fn from_path(path: &Path) -> Result<Self, DiscoveryError> {
        let f = std::fs::File::open(path).map_err(|e| DiscoveryError::Oracle(format!("{}: {e}", path.display())))?;
        Self::from_reader(io::BufReader::new(f))
    }
}

impl VerificationOracle for FileOracle {
    fn verify(&self, model: &str, dataset: &str) -> Result<Outcome, DiscoveryError> {
        Ok(self
            .table
            .get(&(model.to_string(), dataset.to_string()))
            .cloned()
            .unwrap_or_else(|| Outcome::Failure("unverifiable".into())))
    }
}

/// Best observed value of the dataset's most frequent metric.
pub fn current_sota(g: &ArtifactGraph, d: NodeIdx) -> Option<f64> {
    let edges: Vec<usize> = g.adjacent_kind(d, EdgeKind::Eval).iter().map(|a| a.edge).collect();
    let name = most_frequent_metric(g, &edges)?;
    edges.iter().filter_map(|&e| g.edge(e).metrics.get(&name).copied()).reduce(f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub model: NodeIdx,
    pub dataset: NodeIdx,
    pub score: f64,
}

/// Sorts by score descending, ties by input position.
pub fn rank_candidates(pairs: &[(NodeIdx, NodeIdx)], scores: &[f64]) -> Vec<Candidate> {
    crate::metrics::ranked_order(scores)
        .into_iter()
        .map(|i| Candidate { model: pairs[i].0, dataset: pairs[i].1, score: scores[i] })
        .collect()
}

/// Every model-dataset pair without an eval edge in `g`, model-major.
pub fn unobserved_pairs(g: &ArtifactGraph) -> Vec<(NodeIdx, NodeIdx)> {
    g.models()
        .iter()
        .flat_map(|&m| g.datasets().iter().map(move |&d| (m, d)))
        .filter(|&(m, d)| g.eval_edge_between(m, d).is_none())
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LedgerRecord {
    pub rank: usize,
    pub model: NodeIdx,
    pub dataset: NodeIdx,
    pub predicted: f64,
    pub outcome: Outcome,
    pub current_sota_before: Option<f64>,
    pub is_new_sota: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DiscoveryLedger {
    pub records: Vec<LedgerRecord>,
    pub budget_used: usize,
}

impl DiscoveryLedger {
    pub fn sota_events(&self) -> usize {
        self.records.iter().filter(|r| r.is_new_sota).count()
    }

    /// `rank,model,dataset,predicted,verified,is_new_sota`; failures appear
    /// as `failure:<reason>` in the verified column.
    pub fn write_csv<W: Write>(&self, g: &ArtifactGraph, mut w: W) -> io::Result<()> {
        writeln!(w, "rank,model,dataset,predicted,verified,is_new_sota")?;
        for r in &self.records {
            let verified = match &r.outcome {
                Outcome::Score(s) => s.to_string(),
                Outcome::Failure(f) => format!("failure:{}", f.replace([',', '\n'], " ")),
            };
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.rank,
                g.node(r.model).id,
                g.node(r.dataset).id,
                r.predicted,
                verified,
                r.is_new_sota
            )?;
        }
        Ok(())
    }
}

/// Verifies the first `budget` candidates in order. The running maximum is
/// kept per dataset and seeded from the observed graph.
pub fn discover(
    g: &ArtifactGraph,
    candidates: &[Candidate],
    oracle: &dyn VerificationOracle,
    budget: usize,
) -> Result<DiscoveryLedger, DiscoveryError> {
    if budget == 0 {
        return Err(DiscoveryError::InvalidBudget);
    }
    if candidates.windows(2).any(|w| w[1].score > w[0].score) {
        return Err(DiscoveryError::Unsorted);
    }
    let mut best: HashMap<NodeIdx, Option<f64>> = HashMap::new();
    let mut ledger = DiscoveryLedger::default();
    for (rank, c) in candidates.iter().take(budget).enumerate() {
        let before = *best.entry(c.dataset).or_insert_with(|| current_sota(g, c.dataset));
        let outcome = oracle.verify(&g.node(c.model).id, &g.node(c.dataset).id)?;
        let is_new = match (outcome.score(), before) {
            (Some(s), Some(b)) => s > b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if is_new {
            best.insert(c.dataset, outcome.score());
        }
        ledger.records.push(LedgerRecord {
            rank: rank + 1,
            model: c.model,
            dataset: c.dataset,
            predicted: c.score,
            outcome,
            current_sota_before: before,
            is_new_sota: is_new,
        });
        ledger.budget_used += 1;
    }
    Ok(ledger)
}

/// One dataset's verification sequence for the cost curve.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRun {
    /// Verified scores in ranked order; failures are `None`.
    pub verified: Vec<Option<f64>>,
    /// Best score attainable over the dataset's candidate pool.
    pub oracle_best: f64,
}

impl DatasetRun {
    pub fn from_ledger(ledger: &DiscoveryLedger, dataset: NodeIdx, oracle_best: f64) -> Self {
        let verified = ledger.records.iter().filter(|r| r.dataset == dataset).map(|r| r.outcome.score()).collect();
        Self { verified, oracle_best }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostCurve {
    /// `normalized[k - 1]`: mean normalised best within the top `k`.
    pub normalized: Vec<f64>,
    /// Fraction of datasets whose best within the top `k` reaches the
    /// oracle best.
    pub reached: Vec<f64>,
}

impl CostCurve {
    /// Smallest `K` with `normalized(K) >= level`.
    pub fn first_k_reaching(&self, level: f64) -> Option<usize> {
        self.normalized.iter().position(|&v| v >= level).map(|i| i + 1)
    }

    /// `k,normalized,reached`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "k,normalized,reached")?;
        for (i, (n, r)) in self.normalized.iter().zip(&self.reached).enumerate() {
            writeln!(w, "{},{},{}", i + 1, n, r)?;
        }
        Ok(())
    }
}

pub fn cost_curve(runs: &[DatasetRun], k_max: usize) -> Result<CostCurve, DiscoveryError> {
    if runs.is_empty() {
        return Err(DiscoveryError::NoDatasets);
    }
    if let Some(i) = runs.iter().position(|r| r.oracle_best.is_nan() || r.oracle_best <= 0.0) {
        return Err(DiscoveryError::ZeroOracleBest(i));
    }
    let n = runs.len() as f64;
    let mut normalized = Vec::with_capacity(k_max);
    let mut reached = Vec::with_capacity(k_max);
    let mut best = vec![0.0f64; runs.len()];
    for k in 0..k_max {
        for (b, r) in best.iter_mut().zip(runs) {
            if let Some(Some(s)) = r.verified.get(k) {
                *b = b.max(*s);
            }
        }
        normalized.push(best.iter().zip(runs).map(|(b, r)| (b / r.oracle_best).min(1.0)).sum::<f64>() / n);
        reached.push(best.iter().zip(runs).filter(|(b, r)| **b >= r.oracle_best).count() as f64 / n);
    }
    Ok(CostCurve { normalized, reached })
}
