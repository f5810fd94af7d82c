//! Attention encoder with link and attribute heads, joint training and
//! the multiplicative ranking score.

mod model;
mod params;
mod scorer;
mod train;

use alnk_autodiff::AutodiffError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::splits::SplitError;

pub use model::{attr_logit, cn_context, encode, joint_loss, link_logit, LossVars, MessageGraph};
pub use params::{Layout, RankerParams};
pub use scorer::{PairScore, Scorer};
pub use train::{train, write_log_csv, LogRow, TrainOutcome};

pub const TARGET_CLAMP: f64 = 1e-7;
pub const LOGIT_CLIP: f64 = 10.0;
pub const ATTENTION_SLOPE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum RankerError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("no train positive carries a metric target")]
    NoTargets,
    #[error("loss needs at least one positive and one negative")]
    EmptyBatch,
    #[error("ncn decoder needs a common-neighbour context")]
    MissingContext,
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JumpingKnowledge {
    ConcatProject,
    Last,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkDecoder {
    Bilinear,
    Dot,
    Cosine,
    ConcatMlp,
    Ncn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointSelection {
    DevAttrMse,
    /// Selects on the test split. Leaks test information; for comparison only.
    TestAttrMse,
    Final,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub input_dim: usize,
    pub dropout: f64,
    pub edge_kind_embed_dim: usize,
    pub jumping_knowledge: JumpingKnowledge,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            hidden: 128,
            heads: 8,
            input_dim: 1024,
            dropout: 0.2,
            edge_kind_embed_dim: 8,
            jumping_knowledge: JumpingKnowledge::ConcatProject,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub lambda_attr: f64,
    pub neg_ratio: usize,
    pub seed: u64,
    pub checkpoint_selection: CheckpointSelection,
    pub link_decoder: LinkDecoder,
    /// Epoch interval between selection evaluations (the last epoch is
    /// always evaluated).
    pub eval_every: usize,
    /// Draw fresh negatives every epoch; otherwise reuse the epoch-0 draw.
    pub resample_negatives: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            lr_min: 1e-5,
            weight_decay: 1e-5,
            epochs: 1500,
            lambda_attr: 5.0,
            neg_ratio: 2,
            seed: 42,
            checkpoint_selection: CheckpointSelection::DevAttrMse,
            link_decoder: LinkDecoder::Bilinear,
            eval_every: 10,
            resample_negatives: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankerConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
}

impl RankerConfig {
    pub fn validate(&self) -> Result<(), RankerError> {
        let e = &self.encoder;
        let t = &self.train;
        let bad = |m: &str| Err(RankerError::Config(m.to_string()));
        if e.hidden == 0 || e.heads == 0 || e.input_dim == 0 || e.edge_kind_embed_dim == 0 {
            return bad("hidden, heads, input_dim and edge_kind_embed_dim must be positive");
        }
        if !(0.0..1.0).contains(&e.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if t.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if t.lambda_attr.is_nan() || t.lambda_attr < 0.0 {
            return bad("lambda_attr must be non-negative");
        }
        if t.neg_ratio == 0 {
            return bad("neg_ratio must be at least 1");
        }
        if !(t.lr > 0.0 && t.lr_min >= 0.0 && t.weight_decay >= 0.0) {
            return bad("lr must be positive; lr_min and weight_decay non-negative");
        }
        if t.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        Ok(())
    }
}

/// `logit(clamp(y, 1e-7, 1 - 1e-7))`.
pub fn target_to_logit(y: f64) -> f64 {
    let y = y.clamp(TARGET_CLAMP, 1.0 - TARGET_CLAMP);
    (y / (1.0 - y)).ln()
}

/// `σ(clip(ℓ, -10, 10))`.
pub fn logit_to_score(logit: f64) -> f64 {
    sigmoid(logit.clamp(-LOGIT_CLIP, LOGIT_CLIP))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `σ(link) · logit_to_score(attr)`.
pub fn rank_score(link_logit: f64, attr_logit: f64) -> f64 {
    sigmoid(link_logit) * logit_to_score(attr_logit)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_mapping_examples() {
        assert_eq!(target_to_logit(0.5), 0.0);
        let hi = target_to_logit(1.0);
        assert!((hi - ((1.0 - 1e-7) / 1e-7f64).ln()).abs() < 1e-8);
        assert!((hi - 16.11810).abs() < 1e-5);
        assert!((logit_to_score(12.0) - 0.9999546).abs() < 1e-7);
        assert_eq!(logit_to_score(12.0), sigmoid(10.0));
    }

    #[test]
    fn rank_score_suppression() {
        assert!(rank_score(-20.0, 5.0) < 1e-8);
        assert!((rank_score(20.0, 0.0) - 0.5).abs() < 1e-8);
        for (l, a) in [(-3.0, 2.0), (0.5, -1.0), (4.0, 4.0)] {
            assert!(rank_score(l, a) <= sigmoid(l).min(logit_to_score(a)));
        }
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = RankerConfig::default();
        assert_eq!((c.encoder.layers, c.encoder.hidden, c.encoder.heads, c.encoder.input_dim), (3, 128, 8, 1024));
        assert_eq!((c.train.lr, c.train.epochs, c.train.lambda_attr, c.train.neg_ratio), (2e-3, 1500, 5.0, 2));
        c.validate().unwrap();
        let mut bad = c.clone();
        bad.train.epochs = 0;
        assert!(bad.validate().is_err());
        let parsed: RankerConfig = serde_json::from_str(r#"{"train":{"epochs":3}}"#).unwrap();
        assert_eq!(parsed.train.epochs, 3);
        assert!(serde_json::from_str::<RankerConfig>(r#"{"train":{"epoch":3}}"#).is_err());
    }
}
