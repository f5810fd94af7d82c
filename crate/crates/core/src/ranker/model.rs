use std::sync::Arc;

use alnk_autodiff::{Axis, Tape, Tensor, Var};
use rand::Rng;

use super::params::{LayerSlots, LinkSlots, Mlp, SELF_KIND};
use super::{target_to_logit, JumpingKnowledge, Layout, RankerConfig, RankerError, ATTENTION_SLOPE};
use crate::graph::{ArtifactGraph, EdgeKindSet, NodeIdx};

/// Directed message edges `src -> dst` sorted by destination, with one
/// self loop per node. Each undirected graph edge yields both directions.
#[derive(Clone, Debug)]
pub struct MessageGraph {
    pub nodes: usize,
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
    pub kind: Arc<[usize]>,
}

impl MessageGraph {
    pub fn from_graph(g: &ArtifactGraph, kinds: EdgeKindSet) -> Self {
        let mut triples: Vec<(usize, usize, usize)> = Vec::new();
        for v in 0..g.node_count() {
            triples.push((v, v, SELF_KIND));
            for a in g.adjacent(v, kinds) {
                triples.push((v, a.node, g.edge(a.edge).kind.index()));
            }
        }
        triples.sort_unstable();
        let dst: Vec<usize> = triples.iter().map(|t| t.0).collect();
        let src: Vec<usize> = triples.iter().map(|t| t.1).collect();
        let kind: Vec<usize> = triples.iter().map(|t| t.2).collect();
        Self { nodes: g.node_count(), src: src.into(), dst: dst.into(), kind: kind.into() }
    }

    pub fn edges(&self) -> usize {
        self.src.len()
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, RankerError> {
    let rows = tape.shape(x)[0];
    let y = tape.matmul(x, w)?;
    let b = tape.broadcast_rows(b, rows)?;
    Ok(tape.add(y, b)?)
}

fn mlp(tape: &mut Tape, p: &[Var], m: &Mlp, x: Var) -> Result<Var, RankerError> {
    let h = linear(tape, x, p[m.w1], p[m.b1])?;
    let h = tape.leaky_relu(h, ATTENTION_SLOPE)?;
    linear(tape, h, p[m.w2], p[m.b2])
}

#[allow(clippy::too_many_arguments)]
fn gat_layer<R: Rng + ?Sized>(
    tape: &mut Tape,
    p: &[Var],
    l: &LayerSlots,
    mg: &MessageGraph,
    h: Var,
    dropout: f64,
    train: bool,
    rng: &mut R,
) -> Result<Var, RankerError> {
    let e = mg.edges();
    let (heads, c) = (l.heads, l.head_dim);
    let hs = tape.matmul(h, p[l.ws])?;
    let ht = tape.matmul(h, p[l.wt])?;
    let kinds = tape.matmul(p[l.kind_emb], p[l.kind_proj])?;
    let gs = tape.gather_rows(hs, mg.src.clone())?;
    let gt = tape.gather_rows(ht, mg.dst.clone())?;
    let gk = tape.gather_rows(kinds, mg.kind.clone())?;
    let s = tape.add(gs, gt)?;
    let s = tape.add(s, gk)?;
    let s = tape.leaky_relu(s, ATTENTION_SLOPE)?;
    let a = tape.broadcast_rows(p[l.att], e)?;
    let s = tape.mul(s, a)?;
    let s = tape.reshape(s, vec![e * heads, c])?;
    let s = tape.sum(s, Axis::Cols)?;
    let s = tape.reshape(s, vec![e, heads])?;
    let alpha = tape.segment_softmax(s, mg.dst.clone())?;
    let alpha = tape.reshape(alpha, vec![e * heads, 1])?;
    let alpha = tape.broadcast_cols(alpha, c)?;
    let alpha = tape.reshape(alpha, vec![e, heads * c])?;
    let msg = tape.mul(gs, alpha)?;
    let agg = tape.segment_sum(msg, mg.dst.clone(), mg.nodes)?;
    let bias = tape.broadcast_rows(p[l.bias], mg.nodes)?;
    let out = tape.add(agg, bias)?;
    let out = tape.graph_norm(out, p[l.gn_alpha], p[l.gn_gamma], p[l.gn_beta])?;
    let out = tape.prelu(out, p[l.prelu])?;
    let out = tape.dropout(out, dropout, train, rng)?;
    if l.width_in == l.width_out() {
        Ok(tape.add(out, h)?)
    } else {
        Ok(out)
    }
}

/// Node embeddings `Z` (`[nodes, hidden]`) from input features `x`.
#[allow(clippy::too_many_arguments)]
pub fn encode<R: Rng + ?Sized>(
    tape: &mut Tape,
    params: &[Var],
    layout: &Layout,
    cfg: &RankerConfig,
    mg: &MessageGraph,
    x: Var,
    train: bool,
    rng: &mut R,
) -> Result<Var, RankerError> {
    let shape = tape.shape(x).to_vec();
    if shape != [mg.nodes, cfg.encoder.input_dim] {
        return Err(RankerError::ShapeMismatch(format!(
            "features {shape:?}, expected [{}, {}]",
            mg.nodes, cfg.encoder.input_dim
        )));
    }
    let mut h = x;
    let mut outs = Vec::with_capacity(layout.layers.len());
    for l in &layout.layers {
        h = gat_layer(tape, params, l, mg, h, cfg.encoder.dropout, train, rng)?;
        outs.push(h);
    }
    match (layout.proj, cfg.encoder.jumping_knowledge) {
        (Some((w, b)), _) if outs.is_empty() => linear(tape, x, params[w], params[b]),
        (Some((w, b)), JumpingKnowledge::ConcatProject) => {
            let cat = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, Axis::Cols)? };
            linear(tape, cat, params[w], params[b])
        }
        _ => Ok(h),
    }
}

/// Mean-pooled `Z` rows of each pair's common neighbours (`[pairs, hidden]`,
/// zero rows for pairs without any).
pub fn cn_context(
    tape: &mut Tape,
    z: Var,
    g: &ArtifactGraph,
    pairs: &[(NodeIdx, NodeIdx)],
) -> Result<Var, RankerError> {
    let hidden = tape.shape(z)[1];
    let mut flat = Vec::new();
    let mut seg = Vec::new();
    let mut inv = Vec::with_capacity(pairs.len());
    for (i, &(m, d)) in pairs.iter().enumerate() {
        let cn = g.common_neighbors(m, d, EdgeKindSet::ALL);
        inv.push(if cn.is_empty() { 0.0 } else { 1.0 / cn.len() as f64 });
        seg.extend(std::iter::repeat_n(i, cn.len()));
        flat.extend(cn);
    }
    if flat.is_empty() {
        return Ok(tape.constant(Tensor::zeros(&[pairs.len(), hidden]))?);
    }
    let rows = tape.gather_rows(z, flat.into())?;
    let sums = tape.segment_sum(rows, seg.into(), pairs.len())?;
    let inv = tape.constant(Tensor::matrix(pairs.len(), 1, inv)?)?;
    let inv = tape.broadcast_cols(inv, hidden)?;
    Ok(tape.mul(sums, inv)?)
}

fn row_dot(tape: &mut Tape, a: Var, b: Var) -> Result<Var, RankerError> {
    let p = tape.mul(a, b)?;
    Ok(tape.sum(p, Axis::Cols)?)
}

/// Pre-sigmoid link scores `[pairs, 1]` from gathered `zm`, `zd` rows.
pub fn link_logit(
    tape: &mut Tape,
    params: &[Var],
    layout: &Layout,
    zm: Var,
    zd: Var,
    cn: Option<Var>,
) -> Result<Var, RankerError> {
    match &layout.link {
        LinkSlots::Bilinear { b } => {
            let t = tape.matmul(zm, params[*b])?;
            row_dot(tape, t, zd)
        }
        LinkSlots::Dot => row_dot(tape, zm, zd),
        LinkSlots::Cosine { scale } => {
            let rows = tape.shape(zm)[0];
            let dot = row_dot(tape, zm, zd)?;
            let nm = row_dot(tape, zm, zm)?;
            let nm = tape.add_const(nm, 1e-12)?;
            let nm = tape.sqrt(nm)?;
            let nd = row_dot(tape, zd, zd)?;
            let nd = tape.add_const(nd, 1e-12)?;
            let nd = tape.sqrt(nd)?;
            let denom = tape.mul(nm, nd)?;
            let cos = tape.div(dot, denom)?;
            let s = tape.broadcast_rows(params[*scale], rows)?;
            Ok(tape.mul(cos, s)?)
        }
        LinkSlots::ConcatMlp(m) => {
            let x = tape.concat(&[zm, zd], Axis::Cols)?;
            mlp(tape, params, m, x)
        }
        LinkSlots::Ncn(m) => {
            let cn = cn.ok_or(RankerError::MissingContext)?;
            let x = tape.concat(&[zm, zd, cn], Axis::Cols)?;
            mlp(tape, params, m, x)
        }
    }
}

/// Attribute logits `[pairs, 1]` from `[zm ‖ zd ‖ zm⊙zd ‖ link]`.
pub fn attr_logit(
    tape: &mut Tape,
    params: &[Var],
    layout: &Layout,
    zm: Var,
    zd: Var,
    link: Var,
) -> Result<Var, RankerError> {
    let prod = tape.mul(zm, zd)?;
    let x = tape.concat(&[zm, zd, prod, link], Axis::Cols)?;
    mlp(tape, params, &layout.attr, x)
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub link: Var,
    pub attr: Var,
}

/// `L_link + λ·L_attr` with class-balanced BCE and logit-space MSE on the
/// positives that carry a target.
pub fn joint_loss(
    tape: &mut Tape,
    link_pos: Var,
    link_neg: Var,
    attr_pos: Var,
    targets: &[Option<f64>],
    lambda: f64,
) -> Result<LossVars, RankerError> {
    let (np, nn) = (tape.shape(link_pos)[0], tape.shape(link_neg)[0]);
    if np == 0 || nn == 0 {
        return Err(RankerError::EmptyBatch);
    }
    if targets.len() != np || tape.shape(attr_pos)[0] != np {
        return Err(RankerError::ShapeMismatch(format!("{np} positives, {} targets", targets.len())));
    }
    let neg_x = tape.scale(link_pos, -1.0)?;
    let bp = tape.softplus(neg_x)?;
    let bp = tape.mean_all(bp)?;
    let bn = tape.softplus(link_neg)?;
    let bn = tape.mean_all(bn)?;
    let link = tape.add(bp, bn)?;
    let link = tape.scale(link, 0.5)?;

    let (idx, ys): (Vec<usize>, Vec<f64>) =
        targets.iter().enumerate().filter_map(|(i, t)| t.map(|y| (i, target_to_logit(y)))).unzip();
    let attr = if idx.is_empty() {
        tape.constant(Tensor::scalar(0.0))?
    } else {
        let n = idx.len();
        let pred = tape.gather_rows(attr_pos, idx.into())?;
        let y = tape.constant(Tensor::matrix(n, 1, ys)?)?;
        let r = tape.sub(pred, y)?;
        let sq = tape.mul(r, r)?;
        tape.mean_all(sq)?
    };
    let weighted = tape.scale(attr, lambda)?;
    let total = tape.add(link, weighted)?;
    Ok(LossVars { total, link, attr })
}
