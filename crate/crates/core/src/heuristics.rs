//! Non-learned link scores: Adamic-Adar, truncated Katz, and logistic
//! matrix factorisation.

use std::collections::{BTreeSet, HashMap};

use alnk_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{CheckpointError, Container};
use crate::graph::{ArtifactGraph, EdgeKindSet, NodeIdx};
use crate::splits::{NegativeInventory, SplitSpec};

pub const KATZ_BETA: f64 = 0.005;
pub const KATZ_MAX_LEN: usize = 4;

/// `Σ 1/ln deg(w)` over common neighbours `w`; degree counts parallel edges.
pub fn adamic_adar(g: &ArtifactGraph, m: NodeIdx, d: NodeIdx, kinds: EdgeKindSet) -> f64 {
    g.common_neighbors(m, d, kinds)
        .into_iter()
        .map(|w| g.degree(w, kinds))
        .filter(|&k| k > 1)
        .map(|k| 1.0 / (k as f64).ln())
        .sum()
}

/// Katz scores from `src` to every node: `Σ_ℓ β^ℓ · walks_ℓ(src, ·)` on the
/// undirected multigraph, by repeated sparse adjacency application.
pub fn katz_from(g: &ArtifactGraph, src: NodeIdx, beta: f64, max_len: usize, kinds: EdgeKindSet) -> Vec<f64> {
    let n = g.node_count();
    let mut walks = vec![0.0; n];
    walks[src] = 1.0;
    let mut next = vec![0.0; n];
    let mut score = vec![0.0; n];
    let mut coef = 1.0;
    for _ in 0..max_len {
        next.iter_mut().for_each(|v| *v = 0.0);
        for (u, &w) in walks.iter().enumerate() {
            if w != 0.0 {
                for a in g.adjacent(u, kinds) {
                    next[a.node] += w;
                }
            }
        }
        std::mem::swap(&mut walks, &mut next);
        coef *= beta;
        for (s, &w) in score.iter_mut().zip(&walks) {
            *s += coef * w;
        }
    }
    score
}

pub fn katz(g: &ArtifactGraph, m: NodeIdx, d: NodeIdx, beta: f64, max_len: usize, kinds: EdgeKindSet) -> f64 {
    katz_from(g, m, beta, max_len, kinds)[d]
}

#[derive(Debug, Error)]
pub enum MfError {
    #[error("rank must be at least 1")]
    ZeroRank,
    #[error("no train positives")]
    NoPositives,
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("node {0:?} has no factor row")]
    UnknownNode(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MfConfig {
    pub rank: usize,
    pub lr: f64,
    pub epochs: usize,
    pub l2: f64,
    pub init_std: f64,
}

impl Default for MfConfig {
    fn default() -> Self {
        Self { rank: 32, lr: 0.05, epochs: 500, l2: 1e-4, init_std: 0.1 }
    }
}

/// Logistic MF over the nodes seen in training.
#[derive(Clone, Debug, PartialEq)]
pub struct MfModel {
    pub rank: usize,
    pub global: f64,
    model_rows: HashMap<NodeIdx, usize>,
    dataset_rows: HashMap<NodeIdx, usize>,
    /// Row node indices, ascending: the inverse of the row maps.
    model_ids: Vec<NodeIdx>,
    dataset_ids: Vec<NodeIdx>,
    model_factors: Vec<f64>,
    dataset_factors: Vec<f64>,
    model_bias: Vec<f64>,
    dataset_bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MfHeader {
    kind: String,
    rank: usize,
    model_ids: Vec<NodeIdx>,
    dataset_ids: Vec<NodeIdx>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^{-|x|}) + max(x, 0) - y·x`, the logistic loss on a logit.
fn bce_logit(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

impl MfModel {
    fn init(model_ids: Vec<NodeIdx>, dataset_ids: Vec<NodeIdx>, cfg: &MfConfig, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, cfg.init_std).expect("std is finite");
        let r = cfg.rank;
        let model_factors = (0..model_ids.len() * r).map(|_| normal.sample(rng)).collect();
        let dataset_factors = (0..dataset_ids.len() * r).map(|_| normal.sample(rng)).collect();
        let mut m = Self {
            rank: r,
            global: 0.0,
            model_rows: HashMap::new(),
            dataset_rows: HashMap::new(),
            model_bias: vec![0.0; model_ids.len()],
            dataset_bias: vec![0.0; dataset_ids.len()],
            model_ids,
            dataset_ids,
            model_factors,
            dataset_factors,
        };
        m.index_rows();
        m
    }

    fn index_rows(&mut self) {
        self.model_rows = self.model_ids.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        self.dataset_rows = self.dataset_ids.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    }

    fn rows(&self, m: NodeIdx, d: NodeIdx) -> Option<(usize, usize)> {
        Some((*self.model_rows.get(&m)?, *self.dataset_rows.get(&d)?))
    }

    fn logit_rows(&self, i: usize, j: usize) -> f64 {
        let r = self.rank;
        let fm = &self.model_factors[i * r..(i + 1) * r];
        let fd = &self.dataset_factors[j * r..(j + 1) * r];
        self.global + self.model_bias[i] + self.dataset_bias[j] + fm.iter().zip(fd).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn has_model(&self, m: NodeIdx) -> bool {
        self.model_rows.contains_key(&m)
    }

    pub fn model_factor(&self, m: NodeIdx) -> Option<&[f64]> {
        let i = *self.model_rows.get(&m)?;
        Some(&self.model_factors[i * self.rank..(i + 1) * self.rank])
    }

    pub fn dataset_factor(&self, d: NodeIdx) -> Option<&[f64]> {
        let j = *self.dataset_rows.get(&d)?;
        Some(&self.dataset_factors[j * self.rank..(j + 1) * self.rank])
    }

    pub fn to_container(&self) -> Container {
        let header = MfHeader {
            kind: "mf".into(),
            rank: self.rank,
            model_ids: self.model_ids.clone(),
            dataset_ids: self.dataset_ids.clone(),
        };
        let mut c = Container::new(serde_json::to_vec(&header).expect("header serialises"));
        let (nm, nd, r) = (self.model_ids.len(), self.dataset_ids.len(), self.rank);
        c.push("mf.global", Tensor::scalar(self.global));
        c.push("mf.model_bias", Tensor::matrix(nm, 1, self.model_bias.clone()).unwrap());
        c.push("mf.dataset_bias", Tensor::matrix(nd, 1, self.dataset_bias.clone()).unwrap());
        c.push("mf.model_factors", Tensor::matrix(nm, r, self.model_factors.clone()).unwrap());
        c.push("mf.dataset_factors", Tensor::matrix(nd, r, self.dataset_factors.clone()).unwrap());
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, MfError> {
        let h: MfHeader = serde_json::from_slice(&c.config).map_err(CheckpointError::from)?;
        if h.kind != "mf" {
            return Err(CheckpointError::Corrupt(format!("expected an mf checkpoint, found {:?}", h.kind)).into());
        }
        let (nm, nd, r) = (h.model_ids.len(), h.dataset_ids.len(), h.rank);
        let mut m = Self {
            rank: r,
            global: c.expect("mf.global", &[1, 1])?.data()[0],
            model_rows: HashMap::new(),
            dataset_rows: HashMap::new(),
            model_bias: c.expect("mf.model_bias", &[nm, 1])?.data().to_vec(),
            dataset_bias: c.expect("mf.dataset_bias", &[nd, 1])?.data().to_vec(),
            model_factors: c.expect("mf.model_factors", &[nm, r])?.data().to_vec(),
            dataset_factors: c.expect("mf.dataset_factors", &[nd, r])?.data().to_vec(),
            model_ids: h.model_ids,
            dataset_ids: h.dataset_ids,
        };
        m.index_rows();
        Ok(m)
    }
}

/// Fits MF by per-example SGD on logistic loss. Returns the model and the
/// mean loss of the final epoch.
pub fn mf_train(
    g: &ArtifactGraph,
    split: &SplitSpec,
    negatives: &NegativeInventory,
    cfg: &MfConfig,
    seed: u64,
) -> Result<(MfModel, f64), MfError> {
    if cfg.rank == 0 {
        return Err(MfError::ZeroRank);
    }
    if split.train.is_empty() {
        return Err(MfError::NoPositives);
    }
    let mut examples: Vec<(NodeIdx, NodeIdx, f64)> =
        SplitSpec::pairs(g, &split.train).into_iter().map(|(m, d)| (m, d, 1.0)).collect();
    examples.extend(negatives.pairs.iter().map(|&(m, d)| (m, d, 0.0)));
    let models: BTreeSet<NodeIdx> = examples.iter().map(|e| e.0).collect();
    let datasets: BTreeSet<NodeIdx> = examples.iter().map(|e| e.1).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mf = MfModel::init(models.into_iter().collect(), datasets.into_iter().collect(), cfg, &mut rng);
    let rows: Vec<(usize, usize, f64)> =
        examples.iter().map(|&(m, d, y)| (mf.model_rows[&m], mf.dataset_rows[&d], y)).collect();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let r = cfg.rank;
    let mut last_loss = rows.iter().map(|&(i, j, y)| bce_logit(mf.logit_rows(i, j), y)).sum::<f64>() / rows.len() as f64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &k in &order {
            let (i, j, y) = rows[k];
            let x = mf.logit_rows(i, j);
            total += bce_logit(x, y);
            let gr = sigmoid(x) - y;
            mf.global -= cfg.lr * gr;
            mf.model_bias[i] -= cfg.lr * gr;
            mf.dataset_bias[j] -= cfg.lr * gr;
            for t in 0..r {
                let a = mf.model_factors[i * r + t];
                let b = mf.dataset_factors[j * r + t];
                mf.model_factors[i * r + t] -= cfg.lr * (gr * b + cfg.l2 * a);
                mf.dataset_factors[j * r + t] -= cfg.lr * (gr * a + cfg.l2 * b);
            }
        }
        last_loss = total / rows.len() as f64;
        if !last_loss.is_finite() {
            return Err(MfError::NonFiniteLoss { epoch });
        }
    }
    Ok((mf, last_loss))
}

/// `σ(global + b_m + b_d + ⟨f_m, f_d⟩)`.
pub fn mf_score(mf: &MfModel, g: &ArtifactGraph, m: NodeIdx, d: NodeIdx) -> Result<f64, MfError> {
    match mf.rows(m, d) {
        Some((i, j)) => Ok(sigmoid(mf.logit_rows(i, j))),
        None => {
            let missing = if mf.has_model(m) { d } else { m };
            Err(MfError::UnknownNode(g.node(missing).id.clone()))
        }
    }
}

/// Like [`mf_score`], but a node without a row contributes no bias and no
/// factor, so cold-start pairs fall back towards the global prior.
pub fn mf_score_cold(mf: &MfModel, m: NodeIdx, d: NodeIdx) -> f64 {
    if let Some((i, j)) = mf.rows(m, d) {
        return sigmoid(mf.logit_rows(i, j));
    }
    let mut logit = mf.global;
    if let Some(&i) = mf.model_rows.get(&m) {
        logit += mf.model_bias[i];
    }
    if let Some(&j) = mf.dataset_rows.get(&d) {
        logit += mf.dataset_bias[j];
    }
    sigmoid(logit)
}
