//! Classification, ranking, regression and correlation metrics.
//!
//! Ranked orders sort by score descending and break ties by ascending entry
//! index, so every metric is deterministic under ties.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{ArtifactGraph, EdgeKind, EdgeKindSet, NodeIdx};
use crate::ingest::select_edge_metric;
use crate::splits::SplitSpec;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("pool has no positives")]
    NoPositives,
    #[error("query {0} has no positives")]
    EmptyQuery(usize),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty pool")]
    EmptyPool,
    #[error("no train targets")]
    NoTrainTargets,
}

/// Indices of `scores` in ranked order.
pub fn ranked_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch(scores.len(), labels.len()));
    }
    let npos = labels.iter().filter(|&&l| l).count();
    if npos == 0 {
        return Err(MetricError::NoPositives);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &i) in ranked_order(scores).iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / npos as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn at(scores: &[f64], labels: &[bool], threshold: f64) -> Self {
        let mut c = Self::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= threshold, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    /// Matthews correlation; 0 when any marginal is empty.
    pub fn mcc(&self) -> f64 {
        let (tp, fp, fn_, tn) = (self.tp as f64, self.fp as f64, self.fn_ as f64, self.tn as f64);
        let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
        if denom == 0.0 {
            0.0
        } else {
            (tp * tn - fp * fn_) / denom.sqrt()
        }
    }
}

pub fn mcc(scores: &[f64], labels: &[bool], threshold: f64) -> f64 {
    Confusion::at(scores, labels, threshold).mcc()
}

/// Threshold maximising MCC on a (dev) pool, searched over the distinct
/// scores; the smallest maximiser wins. `None` for an empty pool.
pub fn sweep_mcc_threshold(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut cands: Vec<f64> = scores.to_vec();
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    let mut best: Option<(f64, f64)> = None;
    for t in cands {
        let m = mcc(scores, labels, t);
        if best.is_none_or(|(bm, _)| m > bm) {
            best = Some((m, t));
        }
    }
    best.map(|b| b.1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub mrr: f64,
    pub hits: f64,
    pub recall: f64,
    pub ndcg: f64,
    pub queries: usize,
}

/// Per-query MRR, Hits@k, Recall@k and binary NDCG@k, averaged.
pub fn ranking_metrics(queries: &[(Vec<f64>, Vec<bool>)], k: usize) -> Result<RankingMetrics, MetricError> {
    let mut acc = RankingMetrics { mrr: 0.0, hits: 0.0, recall: 0.0, ndcg: 0.0, queries: queries.len() };
    if queries.is_empty() {
        return Err(MetricError::EmptyPool);
    }
    for (q, (scores, labels)) in queries.iter().enumerate() {
        if scores.len() != labels.len() {
            return Err(MetricError::LengthMismatch(scores.len(), labels.len()));
        }
        let npos = labels.iter().filter(|&&l| l).count();
        if npos == 0 {
            return Err(MetricError::EmptyQuery(q));
        }
        let order = ranked_order(scores);
        let first = order.iter().position(|&i| labels[i]).expect("has a positive");
        acc.mrr += 1.0 / (first + 1) as f64;
        let top = order.iter().take(k).filter(|&&i| labels[i]).count();
        acc.hits += if top > 0 { 1.0 } else { 0.0 };
        acc.recall += top as f64 / npos as f64;
        let dcg: f64 = order
            .iter()
            .take(k)
            .enumerate()
            .filter(|(_, &i)| labels[i])
            .map(|(r, _)| 1.0 / ((r + 2) as f64).log2())
            .sum();
        let idcg: f64 = (0..npos.min(k)).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
        acc.ndcg += if idcg > 0.0 { dcg / idcg } else { 0.0 };
    }
    let n = queries.len() as f64;
    acc.mrr /= n;
    acc.hits /= n;
    acc.recall /= n;
    acc.ndcg /= n;
    Ok(acc)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub mae: f64,
    pub rmse: f64,
}

pub fn regression_metrics(pred: &[f64], target: &[f64]) -> Result<RegressionMetrics, MetricError> {
    if pred.len() != target.len() {
        return Err(MetricError::LengthMismatch(pred.len(), target.len()));
    }
    if pred.is_empty() {
        return Err(MetricError::EmptyPool);
    }
    let n = pred.len() as f64;
    let mae = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let mse = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n;
    Ok(RegressionMetrics { mae, rmse: mse.sqrt() })
}

/// Number of tied pairs within runs of equal values in a sorted slice.
fn tied_pairs<T: PartialEq>(sorted: &[T]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Merge sort counting inversions (strictly greater elements before smaller).
fn sort_count_swaps(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = sort_count_swaps(&mut v[..mid], buf) + sort_count_swaps(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf.push(v[j]);
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    swaps
}

/// Kendall tau-b in O(n log n) (Knight's algorithm). 0 when either input
/// is constant.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    if n < 2 {
        return 0.0;
    }
    let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).take(n).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let n0 = (n as u64) * (n as u64 - 1) / 2;
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let n1 = tied_pairs(&xs);
    let n3 = tied_pairs(&pairs);
    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = Vec::with_capacity(n);
    let swaps = sort_count_swaps(&mut ys, &mut buf);
    let n2 = tied_pairs(&ys);
    let denom = ((n0 - n1) as f64) * ((n0 - n2) as f64);
    if denom == 0.0 {
        return 0.0;
    }
    let num = n0 as f64 - n1 as f64 - n2 as f64 + n3 as f64 - 2.0 * swaps as f64;
    num / denom.sqrt()
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
    }
}

/// Spearman's rho via average ranks. 0 when either input is constant.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> f64 {
    if x.len() != y.len() || x.len() < 2 {
        return 0.0;
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMetrics {
    pub kendall_tau_b: f64,
    pub spearman_rho: f64,
}

pub fn correlation_metrics(pred: &[f64], target: &[f64]) -> Result<CorrelationMetrics, MetricError> {
    if pred.len() != target.len() {
        return Err(MetricError::LengthMismatch(pred.len(), target.len()));
    }
    Ok(CorrelationMetrics { kendall_tau_b: kendall_tau_b(pred, target), spearman_rho: spearman_rho(pred, target) })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Top1Metrics {
    pub hit1: f64,
    pub ndcg1: f64,
    pub pools: usize,
}

/// Hit@1 and the regret-ratio NDCG@1 `y_top / max y`, averaged over pools of
/// `(scores, targets)`.
pub fn top1_metrics(pools: &[(Vec<f64>, Vec<f64>)]) -> Result<Top1Metrics, MetricError> {
    if pools.is_empty() {
        return Err(MetricError::EmptyPool);
    }
    let (mut hit, mut ndcg) = (0.0, 0.0);
    for (scores, targets) in pools {
        if scores.len() != targets.len() {
            return Err(MetricError::LengthMismatch(scores.len(), targets.len()));
        }
        if scores.is_empty() {
            return Err(MetricError::EmptyPool);
        }
        let top = ranked_order(scores)[0];
        let best = targets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        hit += if targets[top] >= best { 1.0 } else { 0.0 };
        ndcg += if best <= 0.0 { 1.0 } else { targets[top] / best };
    }
    let n = pools.len() as f64;
    Ok(Top1Metrics { hit1: hit / n, ndcg1: ndcg / n, pools: pools.len() })
}

/// Global, per-model and per-dataset mean predictors fitted on train targets.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanBaselines {
    pub global: f64,
    pub model: HashMap<NodeIdx, f64>,
    pub dataset: HashMap<NodeIdx, f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeanKind {
    Global,
    Model,
    Dataset,
}

impl MeanKind {
    pub const ALL: [MeanKind; 3] = [MeanKind::Global, MeanKind::Model, MeanKind::Dataset];

    pub fn name(self) -> &'static str {
        match self {
            MeanKind::Global => "global_mean",
            MeanKind::Model => "model_mean",
            MeanKind::Dataset => "dataset_mean",
        }
    }
}

impl MeanBaselines {
    pub fn predict(&self, kind: MeanKind, m: NodeIdx, d: NodeIdx) -> f64 {
        match kind {
            MeanKind::Global => self.global,
            MeanKind::Model => self.model.get(&m).copied().unwrap_or(self.global),
            MeanKind::Dataset => self.dataset.get(&d).copied().unwrap_or(self.global),
        }
    }
}

pub fn mean_baselines(g: &ArtifactGraph, split: &SplitSpec) -> Result<MeanBaselines, MetricError> {
    let mut all = Vec::new();
    let mut by_m: BTreeMap<NodeIdx, Vec<f64>> = BTreeMap::new();
    let mut by_d: BTreeMap<NodeIdx, Vec<f64>> = BTreeMap::new();
    for &e in &split.train {
        if let Some(t) = select_edge_metric(g, e) {
            let r = g.edge(e);
            all.push(t.value);
            by_m.entry(r.src).or_default().push(t.value);
            by_d.entry(r.dst).or_default().push(t.value);
        }
    }
    if all.is_empty() {
        return Err(MetricError::NoTrainTargets);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(MeanBaselines {
        global: mean(&all),
        model: by_m.iter().map(|(&k, v)| (k, mean(v))).collect(),
        dataset: by_d.iter().map(|(&k, v)| (k, mean(v))).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegreeBin {
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
    pub mae: Option<f64>,
}

/// Absolute errors `(dataset, |pred - target|)` grouped by the dataset's
/// eval-degree into half-open bins `[lo, hi)`.
pub fn degree_binned_mae(errors: &[(NodeIdx, f64)], g: &ArtifactGraph, bins: &[(usize, usize)]) -> Vec<DegreeBin> {
    let mut sums = vec![(0usize, 0.0f64); bins.len()];
    for &(d, err) in errors {
        let deg = g.degree(d, EdgeKindSet::only(EdgeKind::Eval));
        if let Some(b) = bins.iter().position(|&(lo, hi)| deg >= lo && deg < hi) {
            sums[b].0 += 1;
            sums[b].1 += err.abs();
        }
    }
    bins.iter()
        .zip(sums)
        .map(|(&(lo, hi), (count, s))| DegreeBin { lo, hi, count, mae: (count > 0).then(|| s / count as f64) })
        .collect()
}

/// One task/setting result block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub model: String,
    pub task: String,
    pub setting: String,
    pub metrics: BTreeMap<String, f64>,
    pub n: usize,
}

/// Flat CSV: `model,task,setting,metric,value,n`.
pub fn write_reports_csv<W: Write>(reports: &[Report], mut w: W) -> io::Result<()> {
    writeln!(w, "model,task,setting,metric,value,n")?;
    for r in reports {
        for (k, v) in &r.metrics {
            writeln!(w, "{},{},{},{},{},{}", r.model, r.task, r.setting, k, v, r.n)?;
        }
    }
    Ok(())
}
