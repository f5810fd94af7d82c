//! Four-task evaluation of any scorer over a split.
//!
//! Tasks: link prediction (AP, MCC) over test positives and fully enumerated
//! negatives; link ranking per dataset; attribute prediction on targeted
//! test edges; attribute ranking per qualifying dataset.

use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{ArtifactGraph, EdgeIdx, EdgeKindSet, NodeIdx};
use crate::heuristics::{adamic_adar, katz_from, mf_score_cold, MfModel, KATZ_BETA, KATZ_MAX_LEN};
use crate::ingest::{select_dataset_metric, select_edge_metric};
use crate::metrics::{
    average_precision, correlation_metrics, degree_binned_mae, mcc, ranking_metrics, regression_metrics,
    spearman_rho, sweep_mcc_threshold, top1_metrics, DegreeBin, MeanBaselines, MeanKind, MetricError, Report,
};
use crate::ranker::{RankerError, Scorer};
use crate::splits::{enumerate_eval_negatives, link_ranking_candidates, SplitError, SplitSpec};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Ranker(#[from] RankerError),
    #[error(transparent)]
    Split(#[from] SplitError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// 0.5 for the ranker and MF, 0.9 for the structural heuristics, unless
    /// `mcc_threshold` overrides it.
    Fixed,
    DevSweep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: usize,
    pub threshold_mode: ThresholdMode,
    pub mcc_threshold: Option<f64>,
    /// Half-open dataset eval-degree bins for the degree-binned MAE.
    pub degree_bins: Vec<(usize, usize)>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 5,
            threshold_mode: ThresholdMode::Fixed,
            mcc_threshold: None,
            degree_bins: vec![(0, 3), (3, 10), (10, 30), (30, 100), (100, usize::MAX)],
        }
    }
}

/// A scorer under evaluation. Structural heuristics read the graph they are
/// given, which should be the train-visible graph.
pub enum Predictor<'a> {
    Ranker(&'a Scorer),
    AdamicAdar(&'a ArtifactGraph),
    Katz(&'a ArtifactGraph),
    Mf(&'a MfModel),
    Mean(&'a MeanBaselines, MeanKind),
}

type Pair = (NodeIdx, NodeIdx);

impl Predictor<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Predictor::Ranker(_) => "ranker",
            Predictor::AdamicAdar(_) => "adamic_adar",
            Predictor::Katz(_) => "katz",
            Predictor::Mf(_) => "mf",
            Predictor::Mean(_, k) => k.name(),
        }
    }

    fn default_threshold(&self) -> f64 {
        match self {
            Predictor::AdamicAdar(_) | Predictor::Katz(_) => 0.9,
            _ => 0.5,
        }
    }

    /// Link scores, or `None` when the scorer has no link head.
    pub fn link_scores(&self, pairs: &[Pair]) -> Result<Option<Vec<f64>>, EvalError> {
        Ok(Some(match self {
            Predictor::Ranker(s) => s.score_pairs(pairs)?.iter().map(|p| p.link_prob()).collect(),
            Predictor::AdamicAdar(g) => pairs.par_iter().map(|&(m, d)| adamic_adar(g, m, d, EdgeKindSet::ALL)).collect(),
            Predictor::Katz(g) => katz_pairs(g, pairs),
            Predictor::Mf(mf) => pairs.iter().map(|&(m, d)| mf_score_cold(mf, m, d)).collect(),
            Predictor::Mean(..) => return Ok(None),
        }))
    }

    /// Attribute predictions in score space, or `None` without an
    /// attribute head.
    pub fn attr_scores(&self, pairs: &[Pair]) -> Result<Option<Vec<f64>>, EvalError> {
        Ok(match self {
            Predictor::Ranker(s) => Some(s.score_pairs(pairs)?.iter().map(|p| p.attr_score()).collect()),
            Predictor::Mean(b, k) => Some(pairs.iter().map(|&(m, d)| b.predict(*k, m, d)).collect()),
            _ => None,
        })
    }
}

fn katz_pairs(g: &ArtifactGraph, pairs: &[Pair]) -> Vec<f64> {
    let sources: Vec<NodeIdx> = pairs.iter().map(|p| p.0).collect::<HashSet<_>>().into_iter().collect();
    let rows: HashMap<NodeIdx, Vec<f64>> = sources
        .par_iter()
        .map(|&m| (m, katz_from(g, m, KATZ_BETA, KATZ_MAX_LEN, EdgeKindSet::ALL)))
        .collect();
    pairs.iter().map(|&(m, d)| rows[&m][d]).collect()
}

fn report(model: &str, task: &str, split: &SplitSpec, n: usize, metrics: &[(&str, f64)]) -> Report {
    Report {
        model: model.into(),
        task: task.into(),
        setting: split.mode.to_string(),
        metrics: metrics.iter().map(|&(k, v)| (k.to_string(), v)).collect::<BTreeMap<_, _>>(),
        n,
    }
}

fn targeted(g: &ArtifactGraph, edges: &[EdgeIdx]) -> (Vec<Pair>, Vec<f64>) {
    edges
        .iter()
        .filter_map(|&e| select_edge_metric(g, e).map(|t| ((g.edge(e).src, g.edge(e).dst), t.value)))
        .unzip()
}

fn link_pool(g: &ArtifactGraph, split: &SplitSpec, positives: &[EdgeIdx]) -> (Vec<Pair>, Vec<bool>) {
    let mut pairs = SplitSpec::pairs(g, positives);
    let mut labels = vec![true; pairs.len()];
    let neg = enumerate_eval_negatives(g, split);
    labels.extend(std::iter::repeat_n(false, neg.pairs.len()));
    pairs.extend(neg.pairs);
    (pairs, labels)
}

/// Reports for every task the predictor supports. Tasks whose pools are
/// empty on this split are skipped with a warning.
pub fn evaluate(
    g: &ArtifactGraph,
    split: &SplitSpec,
    predictor: &Predictor,
    cfg: &EvalConfig,
) -> Result<Vec<Report>, EvalError> {
    let mut out = Vec::new();
    let k = cfg.k;
    let name = predictor.name();

    // Link prediction.
    let (pairs, labels) = link_pool(g, split, &split.test);
    if let Some(scores) = predictor.link_scores(&pairs)? {
        if labels.iter().any(|&l| l) {
            let threshold = match cfg.threshold_mode {
                ThresholdMode::Fixed => cfg.mcc_threshold.unwrap_or(predictor.default_threshold()),
                ThresholdMode::DevSweep => {
                    let (dp, dl) = link_pool(g, split, &split.dev);
                    let ds = predictor.link_scores(&dp)?.expect("link-capable");
                    sweep_mcc_threshold(&ds, &dl).unwrap_or(predictor.default_threshold())
                }
            };
            let ap = average_precision(&scores, &labels)?;
            let m = mcc(&scores, &labels, threshold);
            out.push(report(name, "link_prediction", split, pairs.len(), &[("ap", ap), ("mcc", m), ("mcc_threshold", threshold)]));
        } else {
            log::warn!("no test positives; skipping link prediction");
        }

        // Link ranking, one query per dataset with test positives.
        let test_pairs: HashSet<Pair> = SplitSpec::pairs(g, &split.test).into_iter().collect();
        let mut queries = Vec::new();
        for &d in g.datasets() {
            let cands = match link_ranking_candidates(g, split, d) {
                Ok(c) => c,
                Err(SplitError::NoTestPositives(_)) => continue,
                Err(e) => return Err(e.into()),
            };
            let qp: Vec<Pair> = cands.iter().map(|&m| (m, d)).collect();
            let ql: Vec<bool> = qp.iter().map(|p| test_pairs.contains(p)).collect();
            let qs = predictor.link_scores(&qp)?.expect("link-capable");
            queries.push((qs, ql));
        }
        if queries.is_empty() {
            log::warn!("no dataset has test positives; skipping link ranking");
        } else {
            let r = ranking_metrics(&queries, k)?;
            out.push(report(
                name,
                "link_ranking",
                split,
                r.queries,
                &[
                    ("mrr", r.mrr),
                    (&format!("hits@{k}"), r.hits),
                    (&format!("recall@{k}"), r.recall),
                    (&format!("ndcg@{k}"), r.ndcg),
                ],
            ));
        }
    }

    // Attribute prediction.
    let (tp, tv) = targeted(g, &split.test);
    if let Some(pred) = predictor.attr_scores(&tp)? {
        if tp.is_empty() {
            log::warn!("no targeted test edges; skipping attribute tasks");
            return Ok(out);
        }
        let r = regression_metrics(&pred, &tv)?;
        out.push(report(
            name,
            "attribute_prediction",
            split,
            tp.len(),
            &[("mae", r.mae), ("rmse", r.rmse), ("spearman_rho_pooled", spearman_rho(&pred, &tv))],
        ));

        // Attribute ranking per qualifying dataset.
        let mut by_d: BTreeMap<NodeIdx, Vec<EdgeIdx>> = BTreeMap::new();
        for &e in &split.test {
            by_d.entry(g.edge(e).dst).or_default().push(e);
        }
        let mut pools = Vec::new();
        let (mut tau, mut rho) = (0.0, 0.0);
        for (&d, edges) in &by_d {
            let Some(sel) = select_dataset_metric(g, d, edges) else { continue };
            let dp: Vec<Pair> = sel.targets.iter().map(|t| (g.edge(t.edge).src, d)).collect();
            let y: Vec<f64> = sel.targets.iter().map(|t| t.value).collect();
            let s = predictor.attr_scores(&dp)?.expect("attr-capable");
            let c = correlation_metrics(&s, &y)?;
            tau += c.kendall_tau_b;
            rho += c.spearman_rho;
            pools.push((s, y));
        }
        if pools.is_empty() {
            log::warn!("no dataset qualifies for attribute ranking");
        } else {
            let t = top1_metrics(&pools)?;
            let n = pools.len() as f64;
            out.push(report(
                name,
                "attribute_ranking",
                split,
                pools.len(),
                &[("kendall_tau_b", tau / n), ("spearman_rho", rho / n), ("hit@1", t.hit1), ("ndcg@1", t.ndcg1)],
            ));
        }
    }
    Ok(out)
}

/// `(dataset, |prediction - target|)` for every targeted test edge.
pub fn attribute_errors(
    g: &ArtifactGraph,
    split: &SplitSpec,
    predictor: &Predictor,
) -> Result<Option<Vec<(NodeIdx, f64)>>, EvalError> {
    let (tp, tv) = targeted(g, &split.test);
    Ok(predictor
        .attr_scores(&tp)?
        .map(|pred| tp.iter().zip(pred.iter().zip(&tv)).map(|(p, (a, b))| (p.1, (a - b).abs())).collect()))
}

pub fn degree_binned(
    g: &ArtifactGraph,
    split: &SplitSpec,
    predictor: &Predictor,
    bins: &[(usize, usize)],
) -> Result<Option<Vec<DegreeBin>>, EvalError> {
    Ok(attribute_errors(g, split, predictor)?.map(|errs| degree_binned_mae(&errs, g, bins)))
}
