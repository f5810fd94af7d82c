//! Low-rank structure of a dataset-by-model score matrix: assembly,
//! double-centering and the singular-value variance curve.

use std::io::{self, Write};

use serde::Serialize;
use thiserror::Error;

use crate::discovery::DiscoveryLedger;
use crate::graph::{ArtifactGraph, EdgeKind, NodeIdx};
use crate::ingest::most_frequent_metric;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("{0} has no observed cell")]
    AllMissingRowOrColumn(String),
    #[error("no complete column remains after exclusion")]
    NoCompleteColumns,
    #[error("matrix contains a non-finite value")]
    NonFinite,
    #[error("empty matrix")]
    Empty,
}

/// Rows are datasets, columns models; `None` marks a missing cell.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalMatrix {
    pub datasets: Vec<String>,
    pub models: Vec<String>,
    pub values: Vec<Option<f64>>,
}

impl EvalMatrix {
    pub fn new(datasets: Vec<String>, models: Vec<String>) -> Self {
        let n = datasets.len() * models.len();
        Self { datasets, models, values: vec![None; n] }
    }

    pub fn get(&self, r: usize, c: usize) -> Option<f64> {
        self.values[r * self.models.len() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: Option<f64>) {
        let n = self.models.len();
        self.values[r * n + c] = v;
    }

    pub fn filled(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }

    /// Header of model ids, one row per dataset, empty masked cells.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "dataset,{}", self.models.join(","))?;
        for (r, d) in self.datasets.iter().enumerate() {
            let cells: Vec<String> =
                (0..self.models.len()).map(|c| self.get(r, c).map(|v| v.to_string()).unwrap_or_default()).collect();
            writeln!(w, "{d},{}", cells.join(","))?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    /// Fill each missing cell with its column (model) mean.
    #[default]
    ImputeColumnMean,
    /// Drop every model column with a missing cell.
    ExcludeIncompleteColumns,
}

/// Dense row-major matrix with its row and column labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub data: Vec<f64>,
}

impl Dense {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        Self {
            rows: (0..rows).map(|i| format!("r{i}")).collect(),
            cols: (0..cols).map(|j| format!("c{j}")).collect(),
            data: (0..rows * cols).map(|k| f(k / cols, k % cols)).collect(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows.len(), self.cols.len())
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols.len() + c]
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "dataset,{}", self.cols.join(","))?;
        for (r, name) in self.rows.iter().enumerate() {
            let cells: Vec<String> = (0..self.cols.len()).map(|c| self.at(r, c).to_string()).collect();
            writeln!(w, "{name},{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Applies the missing-cell policy, yielding a dense matrix.
pub fn densify(m: &EvalMatrix, policy: MissingPolicy) -> Result<Dense, AnalysisError> {
    let (nr, nc) = (m.datasets.len(), m.models.len());
    if nr == 0 || nc == 0 {
        return Err(AnalysisError::Empty);
    }
    for r in 0..nr {
        if (0..nc).all(|c| m.get(r, c).is_none()) {
            return Err(AnalysisError::AllMissingRowOrColumn(format!("dataset {}", m.datasets[r])));
        }
    }
    let keep: Vec<usize> = match policy {
        MissingPolicy::ImputeColumnMean => {
            if let Some(c) = (0..nc).find(|&c| (0..nr).all(|r| m.get(r, c).is_none())) {
                return Err(AnalysisError::AllMissingRowOrColumn(format!("model {}", m.models[c])));
            }
            (0..nc).collect()
        }
        MissingPolicy::ExcludeIncompleteColumns => {
            let k: Vec<usize> = (0..nc).filter(|&c| (0..nr).all(|r| m.get(r, c).is_some())).collect();
            if k.is_empty() {
                return Err(AnalysisError::NoCompleteColumns);
            }
            k
        }
    };
    let means: Vec<f64> = keep
        .iter()
        .map(|&c| {
            let v: Vec<f64> = (0..nr).filter_map(|r| m.get(r, c)).collect();
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect();
    let mut data = Vec::with_capacity(nr * keep.len());
    for r in 0..nr {
        for (k, &c) in keep.iter().enumerate() {
            data.push(m.get(r, c).unwrap_or(means[k]));
        }
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    Ok(Dense { rows: m.datasets.clone(), cols: keep.iter().map(|&c| m.models[c].clone()).collect(), data })
}

/// `M - row means - column means + grand mean`.
pub fn double_center_dense(m: &Dense) -> Dense {
    let (nr, nc) = m.shape();
    let row: Vec<f64> = (0..nr).map(|r| (0..nc).map(|c| m.at(r, c)).sum::<f64>() / nc as f64).collect();
    let col: Vec<f64> = (0..nc).map(|c| (0..nr).map(|r| m.at(r, c)).sum::<f64>() / nr as f64).collect();
    let grand = row.iter().sum::<f64>() / nr as f64;
    let data = (0..nr * nc).map(|k| m.data[k] - row[k / nc] - col[k % nc] + grand).collect();
    Dense { rows: m.rows.clone(), cols: m.cols.clone(), data }
}

pub fn double_center(m: &EvalMatrix, policy: MissingPolicy) -> Result<Dense, AnalysisError> {
    Ok(double_center_dense(&densify(m, policy)?))
}

/// Singular values, descending, by one-sided Jacobi rotations on the
/// columns of whichever orientation has fewer columns.
pub fn singular_values(m: &Dense) -> Result<Vec<f64>, AnalysisError> {
    if m.data.iter().any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    let (nr, nc) = m.shape();
    if nr == 0 || nc == 0 {
        return Err(AnalysisError::Empty);
    }
    // Column-major working copy: `n` columns of length `len`.
    let (n, len) = if nc <= nr { (nc, nr) } else { (nr, nc) };
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..len).map(|i| if nc <= nr { m.at(i, j) } else { m.at(j, i) }).collect())
        .collect();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let sign = if zeta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = a.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = a.iter().map(|col| dot(col, col).sqrt()).collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    Ok(sv)
}

/// `(k, Σ_{i≤k} σ_i² / Σ σ_i²)` for `k = 1..=rank bound`. A zero matrix
/// yields an all-ones curve.
pub fn svd_variance_curve(m: &Dense) -> Result<Vec<(usize, f64)>, AnalysisError> {
    let sv = singular_values(m)?;
    let total: f64 = sv.iter().map(|s| s * s).sum();
    let mut acc = 0.0;
    Ok(sv
        .iter()
        .enumerate()
        .map(|(i, s)| {
            acc += s * s;
            (i + 1, if total > 0.0 { (acc / total).min(1.0) } else { 1.0 })
        })
        .collect())
}

pub fn write_curve_csv<W: Write>(curve: &[(usize, f64)], mut w: W) -> io::Result<()> {
    writeln!(w, "k,fraction")?;
    for (k, f) in curve {
        writeln!(w, "{k},{f}")?;
    }
    Ok(())
}

/// Cells from observed edges (the named metric, or each dataset's most
/// frequent one), overridden by verified ledger scores.
pub fn assemble_matrix(
    g: &ArtifactGraph,
    ledgers: &[DiscoveryLedger],
    datasets: &[NodeIdx],
    models: &[NodeIdx],
    metric: Option<&str>,
) -> EvalMatrix {
    let mut out = EvalMatrix::new(
        datasets.iter().map(|&d| g.node(d).id.clone()).collect(),
        models.iter().map(|&m| g.node(m).id.clone()).collect(),
    );
    let col = |m: NodeIdx| models.iter().position(|&x| x == m);
    for (r, &d) in datasets.iter().enumerate() {
        let edges: Vec<usize> = g.adjacent_kind(d, EdgeKind::Eval).iter().map(|a| a.edge).collect();
        let name = match metric {
            Some(n) => Some(n.to_string()),
            None => most_frequent_metric(g, &edges),
        };
        let Some(name) = name else { continue };
        for &e in &edges {
            let er = g.edge(e);
            if let (Some(c), Some(&v)) = (col(er.src), er.metrics.get(&name)) {
                out.set(r, c, Some(v));
            }
        }
    }
    for l in ledgers {
        for rec in &l.records {
            let (Some(r), Some(c)) = (datasets.iter().position(|&x| x == rec.dataset), col(rec.model)) else {
                continue;
            };
            if let Some(s) = rec.outcome.score() {
                out.set(r, c, Some(s));
            }
        }
    }
    out
}
