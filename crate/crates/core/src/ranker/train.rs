use std::io::{self, Write};
use std::sync::Arc;

use alnk_autodiff::{adam_step, cosine_lr, AdamState, AutodiffError, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{attr_logit, cn_context, encode, joint_loss, link_logit, MessageGraph};
use super::scorer::Scorer;
use super::{logit_to_score, CheckpointSelection, LinkDecoder, RankerConfig, RankerError, RankerParams};
use crate::graph::{ArtifactGraph, EdgeIdx, EdgeKindSet, NodeIdx};
use crate::ingest::{select_edge_metric, EmbeddingTable};
use crate::splits::{epoch_seed, sample_train_negatives, NegativeInventory, SplitSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_link: f64,
    pub loss_attr: f64,
    pub selection_metric: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: RankerParams,
    pub log: Vec<LogRow>,
    /// Epoch whose post-update parameters were kept.
    pub best_epoch: usize,
    pub best_metric: Option<f64>,
}

pub fn write_log_csv<W: Write>(rows: &[LogRow], mut w: W) -> io::Result<()> {
    writeln!(w, "epoch,lr,loss_total,loss_link,loss_attr,selection_metric")?;
    for r in rows {
        let sel = r.selection_metric.map(|v| v.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{},{},{}", r.epoch, r.lr, r.loss_total, r.loss_link, r.loss_attr, sel)?;
    }
    Ok(())
}

fn nonfinite(epoch: usize) -> impl Fn(RankerError) -> RankerError {
    move |e| match e {
        RankerError::Autodiff(AutodiffError::NonFiniteValue { .. }) => RankerError::NonFiniteLoss { epoch },
        other => other,
    }
}

/// `(model, dataset, target)` for the edges of `edges` that carry a metric.
fn targeted(g: &ArtifactGraph, edges: &[EdgeIdx]) -> Vec<(NodeIdx, NodeIdx, f64)> {
    edges
        .iter()
        .filter_map(|&e| select_edge_metric(g, e).map(|t| (g.edge(e).src, g.edge(e).dst, t.value)))
        .collect()
}

/// Score-space attribute MSE of `scorer` over `targets`.
pub(crate) fn attr_mse(scorer: &Scorer, targets: &[(NodeIdx, NodeIdx, f64)]) -> Result<f64, RankerError> {
    let pairs: Vec<(NodeIdx, NodeIdx)> = targets.iter().map(|t| (t.0, t.1)).collect();
    let scores = scorer.score_pairs(&pairs)?;
    let sse: f64 = scores.iter().zip(targets).map(|(s, t)| (logit_to_score(s.attr_logit) - t.2).powi(2)).sum();
    Ok(sse / targets.len() as f64)
}

/// Full-batch joint training with per-epoch negatives, Adam and cosine
/// annealing. Messages flow over the train-visible graph only.
pub fn train(
    g: &ArtifactGraph,
    emb: &EmbeddingTable,
    split: &SplitSpec,
    cfg: &RankerConfig,
) -> Result<TrainOutcome, RankerError> {
    cfg.validate()?;
    if emb.dim() != cfg.encoder.input_dim || emb.rows() != g.node_count() {
        return Err(RankerError::ShapeMismatch(format!(
            "embeddings are {}x{}, graph has {} nodes and input_dim is {}",
            emb.rows(),
            emb.dim(),
            g.node_count(),
            cfg.encoder.input_dim
        )));
    }
    let tc = &cfg.train;
    let pos_pairs = SplitSpec::pairs(g, &split.train);
    if pos_pairs.is_empty() {
        return Err(RankerError::EmptyBatch);
    }
    let targets: Vec<Option<f64>> =
        split.train.iter().map(|&e| select_edge_metric(g, e).map(|t| t.value)).collect();
    if targets.iter().all(Option::is_none) {
        return Err(RankerError::NoTargets);
    }
    let selection_targets = match tc.checkpoint_selection {
        CheckpointSelection::DevAttrMse => targeted(g, &split.dev),
        CheckpointSelection::TestAttrMse => {
            log::warn!("checkpoint selection on the test split leaks test information");
            targeted(g, &split.test)
        }
        CheckpointSelection::Final => Vec::new(),
    };
    let select = !selection_targets.is_empty();
    if !select && tc.checkpoint_selection != CheckpointSelection::Final {
        log::warn!("selection split has no targets; keeping the final epoch");
    }

    let visible = split.train_visible_graph(g);
    let mg = MessageGraph::from_graph(&visible, EdgeKindSet::ALL);
    let features = emb.to_tensor();
    let mut params = RankerParams::init(cfg, tc.seed);
    let layout = params.layout();
    let mut adam = AdamState::new(&params.tensors().iter().collect::<Vec<_>>());
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    dropout_rng.set_stream(1);

    let np = pos_pairs.len();
    let mut fixed_negatives: Option<NegativeInventory> = None;
    let mut log_rows = Vec::with_capacity(tc.epochs);
    let mut best: Option<(f64, usize, RankerParams)> = None;

    for epoch in 0..tc.epochs {
        let negatives = match (&fixed_negatives, tc.resample_negatives) {
            (Some(n), false) => n.clone(),
            _ => {
                let n = sample_train_negatives(g, split, tc.neg_ratio, epoch_seed(tc.seed, epoch as u64))?;
                if !tc.resample_negatives {
                    fixed_negatives = Some(n.clone());
                }
                n
            }
        };
        let mut pairs = pos_pairs.clone();
        pairs.extend_from_slice(&negatives.pairs);
        let nn = negatives.pairs.len();

        let mut tape = Tape::new();
        let step = (|| -> Result<(Vec<Var>, f64, f64, f64, Var), RankerError> {
            let vars: Vec<Var> = params.tensors().iter().map(|t| tape.param(t)).collect::<Result<_, _>>()?;
            let x = tape.constant(features.clone())?;
            let z = encode(&mut tape, &vars, &layout, cfg, &mg, x, true, &mut dropout_rng)?;
            let ms: Arc<[usize]> = pairs.iter().map(|p| p.0).collect();
            let ds: Arc<[usize]> = pairs.iter().map(|p| p.1).collect();
            let zm = tape.gather_rows(z, ms)?;
            let zd = tape.gather_rows(z, ds)?;
            let cn = if tc.link_decoder == LinkDecoder::Ncn {
                Some(cn_context(&mut tape, z, &visible, &pairs)?)
            } else {
                None
            };
            let link = link_logit(&mut tape, &vars, &layout, zm, zd, cn)?;
            let link_pos = tape.slice(link, alnk_autodiff::Axis::Rows, 0, np)?;
            let link_neg = tape.slice(link, alnk_autodiff::Axis::Rows, np, nn)?;
            let zm_pos = tape.slice(zm, alnk_autodiff::Axis::Rows, 0, np)?;
            let zd_pos = tape.slice(zd, alnk_autodiff::Axis::Rows, 0, np)?;
            let attr_pos = attr_logit(&mut tape, &vars, &layout, zm_pos, zd_pos, link_pos)?;
            let loss = joint_loss(&mut tape, link_pos, link_neg, attr_pos, &targets, tc.lambda_attr)?;
            let v = |t: &Tape, x: Var| t.value(x).data()[0];
            Ok((vars, v(&tape, loss.total), v(&tape, loss.link), v(&tape, loss.attr), loss.total))
        })()
        .map_err(nonfinite(epoch))?;
        let (vars, total, link_l, attr_l, loss_var) = step;
        if !total.is_finite() {
            return Err(RankerError::NonFiniteLoss { epoch });
        }
        let grads = tape.backward(loss_var).map_err(|e| nonfinite(epoch)(e.into()))?;
        let grads: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
        drop(tape);
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(RankerError::NonFiniteLoss { epoch });
        }
        let lr = cosine_lr(epoch, tc.epochs, tc.lr, tc.lr_min);
        {
            let mut refs: Vec<&mut Tensor> = params.tensors_mut().iter_mut().collect();
            adam_step(&mut refs, &grads, &mut adam, lr, tc.weight_decay).map_err(|e| nonfinite(epoch)(e.into()))?;
        }

        let last = epoch + 1 == tc.epochs;
        let mut selection_metric = None;
        if select && ((epoch + 1) % tc.eval_every == 0 || last) {
            let scorer = Scorer::new(&params, &visible, &features).map_err(nonfinite(epoch))?;
            let mse = attr_mse(&scorer, &selection_targets)?;
            selection_metric = Some(mse);
            if best.as_ref().is_none_or(|b| mse < b.0) {
                best = Some((mse, epoch, params.clone()));
            }
        }
        log::debug!("epoch {epoch}: loss {total:.6} (link {link_l:.6}, attr {attr_l:.6}), lr {lr:.3e}");
        log_rows.push(LogRow { epoch, lr, loss_total: total, loss_link: link_l, loss_attr: attr_l, selection_metric });
    }

    let (params, best_epoch, best_metric) = match best {
        Some((m, e, p)) => (p, e, Some(m)),
        None => (params, tc.epochs - 1, None),
    };
    Ok(TrainOutcome { params, log: log_rows, best_epoch, best_metric })
}
