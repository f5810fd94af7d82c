use std::sync::Arc;

use alnk_autodiff::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::model::{attr_logit, cn_context, encode, link_logit, MessageGraph};
use super::{logit_to_score, rank_score, sigmoid, Layout, LinkDecoder, RankerError, RankerParams};
use crate::graph::{ArtifactGraph, EdgeKindSet, NodeIdx};

const BATCH: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairScore {
    pub link_logit: f64,
    pub attr_logit: f64,
}

impl PairScore {
    pub fn link_prob(&self) -> f64 {
        sigmoid(self.link_logit)
    }

    pub fn attr_score(&self) -> f64 {
        logit_to_score(self.attr_logit)
    }

    pub fn rank_score(&self) -> f64 {
        rank_score(self.link_logit, self.attr_logit)
    }
}

/// Frozen parameters with node embeddings computed once in eval mode.
pub struct Scorer {
    params: RankerParams,
    layout: Layout,
    graph: ArtifactGraph,
    z: Tensor,
}

impl Scorer {
    /// `graph` is the structure messages flow over (normally the
    /// train-visible graph); `features` holds one row per node.
    pub fn new(params: &RankerParams, graph: &ArtifactGraph, features: &Tensor) -> Result<Self, RankerError> {
        let layout = params.layout();
        let mg = MessageGraph::from_graph(graph, EdgeKindSet::ALL);
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.tensors().iter().map(|t| tape.constant(t.clone())).collect::<Result<_, _>>()?;
        let x = tape.constant(features.clone())?;
        // Eval mode never draws from the generator.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = encode(&mut tape, &vars, &layout, &params.config, &mg, x, false, &mut rng)?;
        let z = tape.value(z).clone();
        Ok(Self { params: params.clone(), layout, graph: graph.clone(), z })
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.z
    }

    pub fn params(&self) -> &RankerParams {
        &self.params
    }

    fn score_batch(&self, pairs: &[(NodeIdx, NodeIdx)]) -> Result<Vec<PairScore>, RankerError> {
        let mut tape = Tape::new();
        // Head evaluation touches only head slots; encoder slots get a
        // placeholder to avoid copying their weights per batch.
        let vars: Vec<Var> = self
            .params
            .names()
            .iter()
            .zip(self.params.tensors())
            .map(|(n, t)| {
                if n.starts_with("link.") || n.starts_with("attr.") {
                    tape.constant(t.clone())
                } else {
                    tape.constant(Tensor::scalar(0.0))
                }
            })
            .collect::<Result<_, _>>()?;
        let z = tape.constant(self.z.clone())?;
        let ms: Arc<[usize]> = pairs.iter().map(|p| p.0).collect();
        let ds: Arc<[usize]> = pairs.iter().map(|p| p.1).collect();
        let zm = tape.gather_rows(z, ms)?;
        let zd = tape.gather_rows(z, ds)?;
        let cn = if self.params.config.train.link_decoder == LinkDecoder::Ncn {
            Some(cn_context(&mut tape, z, &self.graph, pairs)?)
        } else {
            None
        };
        let link = link_logit(&mut tape, &vars, &self.layout, zm, zd, cn)?;
        let attr = attr_logit(&mut tape, &vars, &self.layout, zm, zd, link)?;
        let (l, a) = (tape.value(link).data(), tape.value(attr).data());
        Ok(l.iter().zip(a).map(|(&link_logit, &attr_logit)| PairScore { link_logit, attr_logit }).collect())
    }

    /// Scores `pairs` in order; batches run in parallel.
    pub fn score_pairs(&self, pairs: &[(NodeIdx, NodeIdx)]) -> Result<Vec<PairScore>, RankerError> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let parts: Vec<Vec<PairScore>> =
            pairs.par_chunks(BATCH).map(|c| self.score_batch(c)).collect::<Result<_, _>>()?;
        Ok(parts.into_iter().flatten().collect())
    }

    pub fn rank_score(&self, m: NodeIdx, d: NodeIdx) -> Result<f64, RankerError> {
        Ok(self.score_batch(&[(m, d)])?[0].rank_score())
    }
}
