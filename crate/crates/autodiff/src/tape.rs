//! Operation tape and reverse pass.
//!
//! Every primitive appends one node holding its forward value and enough
//! saved state to compute the vector-Jacobian product later. Nodes are
//! appended in evaluation order, so the tape is topologically sorted by
//! construction and [`Tape::backward`] simply walks it in reverse,
//! accumulating gradients additively into each input.
//!
//! Broadcasting is never implicit: a `[1, m]` row or `[n, 1]` column has to
//! be expanded with [`Tape::broadcast_rows`] / [`Tape::broadcast_cols`]
//! before it can be combined elementwise with an `[n, m]` tensor.

use std::sync::Arc;

use rand::Rng;

use crate::error::{AutodiffError, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction axis for rank-2 tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Reduce over rows, producing `[1, cols]`.
    Rows,
    /// Reduce over columns, producing `[rows, 1]`.
    Cols,
}

const GRAPH_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
struct GraphNormSaved {
    mean: Vec<f64>,
    std: Vec<f64>,
    centered: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    BroadcastRows(Var),
    BroadcastCols(Var),
    Reshape(Var),
    Concat(Vec<Var>, Axis),
    Slice { x: Var, axis: Axis, start: usize },
    Sum(Var, Axis),
    SumAll(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Sqrt(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    PRelu(Var, Var),
    GatherRows(Var, Arc<[usize]>),
    SegmentSum(Var, Arc<[usize]>),
    SegmentSoftmax(Var, Arc<[usize]>),
    Dropout(Var, Vec<f64>),
    GraphNorm { x: Var, alpha: Var, gamma: Var, beta: Var, saved: GraphNormSaved },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` if `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when `v` is off the loss path.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

/// Records primitive applications for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    kink_margin: f64,
}

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), kink_margin: f64::INFINITY }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest |input| seen by any piecewise-linear op (relu, leaky_relu,
    /// prelu). Finite-difference checks with step `h` are only meaningful
    /// when this exceeds `h` by a comfortable factor.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFiniteValue { op: name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn note_kinks(&mut self, data: &[f64]) {
        let m = data.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        self.kink_margin = self.kink_margin.min(m);
    }

    /// Records a leaf. Parameters use `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn param(&mut self, value: &Tensor) -> Result<Var> {
        self.leaf(value.clone(), true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 || self.value(a).rank() != 2 || self.value(b).rank() != 2 {
            return Err(mismatch("matmul", format!("{:?} x {:?}", self.shape(a), self.shape(b))));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), ng, "matmul")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, record: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let ta = self.value(a);
        let tb = self.value(b);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(out, record, ng, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, record: Op) -> Result<Var> {
        let out = self.value(x).map(f);
        let ng = self.ng(x);
        self.push(out, record, ng, name)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("add_const", x, |v| v + c, Op::AddConst(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, f64::ln, Op::Log(x))
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, softplus, Op::Softplus(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary("sqrt", x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().to_vec();
        self.note_kinks(&data);
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let data = self.value(x).data().to_vec();
        self.note_kinks(&data);
        self.unary("leaky_relu", x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    /// Parametric ReLU with a learnable slope: `[1, 1]` (shared) or
    /// `[1, cols]` (per channel).
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let (n, m) = self.dims2(x);
        let (sr, sc) = self.dims2(slope);
        if sr != 1 || (sc != 1 && sc != m) {
            return Err(mismatch("prelu", format!("slope {:?} for input {:?}", self.shape(slope), self.shape(x))));
        }
        let xs = self.value(x).data().to_vec();
        self.note_kinks(&xs);
        let s = self.value(slope).data();
        let mut out = Vec::with_capacity(n * m);
        for r in 0..n {
            for c in 0..m {
                let v = xs[r * m + c];
                let a = if sc == 1 { s[0] } else { s[c] };
                out.push(if v > 0.0 { v } else { a * v });
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(slope);
        self.push(Tensor::new(shape, out)?, Op::PRelu(x, slope), ng, "prelu")
    }

    /// Expands a `[1, m]` row into `[n, m]`.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let (r, m) = self.dims2(x);
        if r != 1 {
            return Err(mismatch("broadcast_rows", format!("expected one row, got {:?}", self.shape(x))));
        }
        let row = self.value(x).data();
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(row);
        }
        let ng = self.ng(x);
        self.push(Tensor::matrix(n, m, out)?, Op::BroadcastRows(x), ng, "broadcast_rows")
    }

    /// Expands an `[n, 1]` column into `[n, m]`.
    pub fn broadcast_cols(&mut self, x: Var, m: usize) -> Result<Var> {
        let (n, c) = self.dims2(x);
        if c != 1 {
            return Err(mismatch("broadcast_cols", format!("expected one column, got {:?}", self.shape(x))));
        }
        let col = self.value(x).data();
        let mut out = Vec::with_capacity(n * m);
        for &v in col {
            out.extend(std::iter::repeat_n(v, m));
        }
        let ng = self.ng(x);
        self.push(Tensor::matrix(n, m, out)?, Op::BroadcastCols(x), ng, "broadcast_cols")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let ng = self.ng(x);
        self.push(out, Op::Reshape(x), ng, "reshape")
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        if parts.is_empty() {
            return Err(mismatch("concat", "no inputs".into()));
        }
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| self.dims2(p)).collect();
        let out = match axis {
            Axis::Rows => {
                let m = dims[0].1;
                if dims.iter().any(|d| d.1 != m) {
                    return Err(mismatch("concat", format!("column counts differ: {dims:?}")));
                }
                let n: usize = dims.iter().map(|d| d.0).sum();
                let mut data = Vec::with_capacity(n * m);
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::matrix(n, m, data)?
            }
            Axis::Cols => {
                let n = dims[0].0;
                if dims.iter().any(|d| d.0 != n) {
                    return Err(mismatch("concat", format!("row counts differ: {dims:?}")));
                }
                let m: usize = dims.iter().map(|d| d.1).sum();
                let mut data = Vec::with_capacity(n * m);
                for r in 0..n {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(r));
                    }
                }
                Tensor::matrix(n, m, data)?
            }
        };
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::Concat(parts.to_vec(), axis), ng, "concat")
    }

    pub fn slice(&mut self, x: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.dims2(x);
        let t = self.value(x);
        let out = match axis {
            Axis::Rows => {
                if start + len > n {
                    return Err(mismatch("slice", format!("rows {start}..{} of {n}", start + len)));
                }
                Tensor::matrix(len, m, t.data()[start * m..(start + len) * m].to_vec())?
            }
            Axis::Cols => {
                if start + len > m {
                    return Err(mismatch("slice", format!("cols {start}..{} of {m}", start + len)));
                }
                let mut data = Vec::with_capacity(n * len);
                for r in 0..n {
                    data.extend_from_slice(&t.row(r)[start..start + len]);
                }
                Tensor::matrix(n, len, data)?
            }
        };
        let ng = self.ng(x);
        self.push(out, Op::Slice { x, axis, start }, ng, "slice")
    }

    pub fn sum(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let (n, m) = self.dims2(x);
        let t = self.value(x);
        let out = match axis {
            Axis::Rows => {
                let mut acc = vec![0.0; m];
                for r in 0..n {
                    for (a, v) in acc.iter_mut().zip(t.row(r)) {
                        *a += v;
                    }
                }
                Tensor::matrix(1, m, acc)?
            }
            Axis::Cols => Tensor::matrix(n, 1, (0..n).map(|r| t.row(r).iter().sum()).collect())?,
        };
        let ng = self.ng(x);
        self.push(out, Op::Sum(x, axis), ng, "sum")
    }

    pub fn mean(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let (n, m) = self.dims2(x);
        let count = match axis {
            Axis::Rows => n,
            Axis::Cols => m,
        };
        let s = self.sum(x, axis)?;
        self.scale(s, 1.0 / count.max(1) as f64)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng, "sum_all")
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n.max(1) as f64)
    }

    /// Selects rows `idx` of `x` (rows may repeat).
    pub fn gather_rows(&mut self, x: Var, idx: Arc<[usize]>) -> Result<Var> {
        let (n, m) = self.dims2(x);
        let t = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * m);
        for &i in idx.iter() {
            if i >= n {
                return Err(mismatch("gather_rows", format!("row {i} of {n}")));
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(idx.len(), m, data)?;
        let ng = self.ng(x);
        self.push(out, Op::GatherRows(x, idx), ng, "gather_rows")
    }

    /// Sums rows of `x` into `segments` output rows: row `i` goes to
    /// output row `seg[i]`. Empty segments are zero.
    pub fn segment_sum(&mut self, x: Var, seg: Arc<[usize]>, segments: usize) -> Result<Var> {
        let (n, m) = self.dims2(x);
        if seg.len() != n {
            return Err(mismatch("segment_sum", format!("{} segment ids for {n} rows", seg.len())));
        }
        let t = self.value(x);
        let mut data = vec![0.0; segments * m];
        for (r, &s) in seg.iter().enumerate() {
            if s >= segments {
                return Err(mismatch("segment_sum", format!("segment {s} of {segments}")));
            }
            for (a, v) in data[s * m..(s + 1) * m].iter_mut().zip(t.row(r)) {
                *a += v;
            }
        }
        let out = Tensor::matrix(segments, m, data)?;
        let ng = self.ng(x);
        self.push(out, Op::SegmentSum(x, seg), ng, "segment_sum")
    }

    /// Softmax over rows sharing a segment id, independently per column.
    /// Segment ids must be non-decreasing.
    pub fn segment_softmax(&mut self, x: Var, seg: Arc<[usize]>) -> Result<Var> {
        let (n, m) = self.dims2(x);
        if seg.len() != n {
            return Err(mismatch("segment_softmax", format!("{} segment ids for {n} rows", seg.len())));
        }
        if seg.windows(2).any(|w| w[0] > w[1]) {
            return Err(mismatch("segment_softmax", "segment ids must be sorted".into()));
        }
        let t = self.value(x);
        let mut out = vec![0.0; n * m];
        for (start, end) in segment_bounds(&seg) {
            for c in 0..m {
                let mx = (start..end).map(|r| t.get(r, c)).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for r in start..end {
                    let e = (t.get(r, c) - mx).exp();
                    out[r * m + c] = e;
                    z += e;
                }
                for r in start..end {
                    out[r * m + c] /= z;
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let ng = self.ng(x);
        self.push(out, Op::SegmentSoftmax(x, seg), ng, "segment_softmax")
    }

    /// Inverted dropout. At eval time (or `p == 0`) this is the identity
    /// and records nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !train || p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(mismatch("dropout", format!("drop probability {p} must be < 1")));
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(v, k)| v * k).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let ng = self.ng(x);
        self.push(out, Op::Dropout(x, mask), ng, "dropout")
    }

    /// GraphNorm over the node (row) axis. For column `j`:
    /// `(x_j - alpha_j * mean(x_j)) / (std_j + 1e-5) * gamma_j + beta_j`,
    /// where `std_j` is the population standard deviation of the shifted
    /// column. `alpha`, `gamma`, `beta` are `[1, cols]`.
    pub fn graph_norm(&mut self, x: Var, alpha: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, m) = self.dims2(x);
        for p in [alpha, gamma, beta] {
            if self.dims2(p) != (1, m) {
                return Err(mismatch("graph_norm", format!("parameter {:?} for input {:?}", self.shape(p), self.shape(x))));
            }
        }
        let t = self.value(x);
        let a = self.value(alpha).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let nf = n.max(1) as f64;
        let mut mean = vec![0.0; m];
        for r in 0..n {
            for (mu, v) in mean.iter_mut().zip(t.row(r)) {
                *mu += v;
            }
        }
        mean.iter_mut().for_each(|mu| *mu /= nf);
        let mut centered = vec![0.0; n * m];
        let mut var = vec![0.0; m];
        for r in 0..n {
            for c in 0..m {
                let v = t.get(r, c) - a[c] * mean[c];
                centered[r * m + c] = v;
                var[c] += v * v;
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / nf).sqrt()).collect();
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            for c in 0..m {
                out[r * m + c] = centered[r * m + c] / (std[c] + GRAPH_NORM_EPS) * g[c] + b[c];
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(alpha) || self.ng(gamma) || self.ng(beta);
        let saved = GraphNormSaved { mean, std, centered };
        self.push(out, Op::GraphNorm { x, alpha, gamma, beta, saved }, ng, "graph_norm")
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(AutodiffError::NotScalar { shape: lt.shape().to_vec() });
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.ng(loss) {
            log::warn!("loss does not depend on any parameter; returning zero gradients");
            return Ok(Gradients { grads, shapes });
        }
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &node.value;
        let elementwise = |x: Var, f: &dyn Fn(usize, f64) -> f64| -> Tensor {
            let xs = self.value(x);
            let data = g.data().iter().enumerate().map(|(i, &gi)| f(i, gi)).collect();
            Tensor::new(xs.shape().to_vec(), data).expect("gradient shape follows input")
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let (_, n) = self.dims2(*b);
                if self.ng(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, self.value(*b).data(), true, &mut ga, 0.0);
                    self.accumulate(grads, *a, Tensor::matrix(m, k, ga)?);
                }
                if self.ng(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, g.data(), false, &mut gb, 0.0);
                    self.accumulate(grads, *b, Tensor::matrix(k, n, gb)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, elementwise(*a, &|i, gi| gi * bv[i]));
                self.accumulate(grads, *b, elementwise(*b, &|i, gi| gi * av[i]));
            }
            Op::Div(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, elementwise(*a, &|i, gi| gi / bv[i]));
                self.accumulate(grads, *b, elementwise(*b, &|i, gi| -gi * av[i] / (bv[i] * bv[i])));
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.map(|v| v * c)),
            Op::AddConst(x) => self.accumulate(grads, *x, g.clone()),
            Op::BroadcastRows(x) => {
                let m = g.cols();
                let mut acc = vec![0.0; m];
                for r in 0..g.rows() {
                    for (a, v) in acc.iter_mut().zip(g.row(r)) {
                        *a += v;
                    }
                }
                self.accumulate(grads, *x, Tensor::matrix(1, m, acc)?);
            }
            Op::BroadcastCols(x) => {
                let n = g.rows();
                let acc = (0..n).map(|r| g.row(r).iter().sum()).collect();
                self.accumulate(grads, *x, Tensor::matrix(n, 1, acc)?);
            }
            Op::Reshape(x) => {
                let gx = g.clone().reshaped(self.shape(*x).to_vec())?;
                self.accumulate(grads, *x, gx);
            }
            Op::Concat(parts, axis) => {
                let mut offset = 0;
                for &p in parts {
                    let (pn, pm) = self.dims2(p);
                    let gp = match axis {
                        Axis::Rows => {
                            let s = g.data()[offset * pm..(offset + pn) * pm].to_vec();
                            offset += pn;
                            Tensor::matrix(pn, pm, s)?
                        }
                        Axis::Cols => {
                            let mut s = Vec::with_capacity(pn * pm);
                            for r in 0..pn {
                                s.extend_from_slice(&g.row(r)[offset..offset + pm]);
                            }
                            offset += pm;
                            Tensor::matrix(pn, pm, s)?
                        }
                    };
                    self.accumulate(grads, p, gp);
                }
            }
            Op::Slice { x, axis, start } => {
                let (n, m) = self.dims2(*x);
                let mut gx = vec![0.0; n * m];
                match axis {
                    Axis::Rows => gx[start * m..start * m + g.len()].copy_from_slice(g.data()),
                    Axis::Cols => {
                        let len = g.cols();
                        for r in 0..n {
                            gx[r * m + start..r * m + start + len].copy_from_slice(g.row(r));
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx)?);
            }
            Op::Sum(x, axis) => {
                let (n, m) = self.dims2(*x);
                let mut gx = vec![0.0; n * m];
                for r in 0..n {
                    for c in 0..m {
                        gx[r * m + c] = match axis {
                            Axis::Rows => g.data()[c],
                            Axis::Cols => g.data()[r],
                        };
                    }
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx)?);
            }
            Op::SumAll(x) => {
                let gv = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                self.accumulate(grads, *x, elementwise(*x, &|i, gi| gi * y[i] * (1.0 - y[i])));
            }
            Op::Tanh(x) => {
                let y = out.data();
                self.accumulate(grads, *x, elementwise(*x, &|i, gi| gi * (1.0 - y[i] * y[i])));
            }
            Op::Exp(x) => {
                let y = out.data();
                self.accumulate(grads, *x, elementwise(*x, &|i, gi| gi * y[i]));
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, elementwise(*x, &|i, gi| gi / xv[i]));
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, elementwise(*x, &|i, gi| gi * sigmoid(xv[i])));
            }
            Op::Sqrt(x) => {
                let y = out.data();
                self.accumulate(grads, *x, elementwise(*x, &|i, gi| gi * 0.5 / y[i]));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, elementwise(*x, &|i, gi| if xv[i] > 0.0 { gi } else { 0.0 }));
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, elementwise(*x, &|i, gi| if xv[i] > 0.0 { gi } else { gi * slope }));
            }
            Op::PRelu(x, slope) => {
                let (n, m) = self.dims2(*x);
                let xv = self.value(*x).data();
                let s = self.value(*slope).data();
                let shared = s.len() == 1;
                let mut gx = vec![0.0; n * m];
                let mut gs = vec![0.0; s.len()];
                for r in 0..n {
                    for c in 0..m {
                        let i = r * m + c;
                        let si = if shared { 0 } else { c };
                        if xv[i] > 0.0 {
                            gx[i] = g.data()[i];
                        } else {
                            gx[i] = g.data()[i] * s[si];
                            gs[si] += g.data()[i] * xv[i];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx)?);
                self.accumulate(grads, *slope, Tensor::new(self.shape(*slope).to_vec(), gs)?);
            }
            Op::GatherRows(x, idx) => {
                let (n, m) = self.dims2(*x);
                let mut gx = vec![0.0; n * m];
                for (r, &i) in idx.iter().enumerate() {
                    for (a, v) in gx[i * m..(i + 1) * m].iter_mut().zip(g.row(r)) {
                        *a += v;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx)?);
            }
            Op::SegmentSum(x, seg) => {
                let (n, m) = self.dims2(*x);
                let mut gx = Vec::with_capacity(n * m);
                for &s in seg.iter() {
                    gx.extend_from_slice(g.row(s));
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx)?);
            }
            Op::SegmentSoftmax(x, seg) => {
                let (n, m) = self.dims2(*x);
                let y = out.data();
                let mut gx = vec![0.0; n * m];
                for (start, end) in segment_bounds(seg) {
                    for c in 0..m {
                        let dot: f64 = (start..end).map(|r| g.data()[r * m + c] * y[r * m + c]).sum();
                        for r in start..end {
                            let i = r * m + c;
                            gx[i] = y[i] * (g.data()[i] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx)?);
            }
            Op::Dropout(x, mask) => {
                self.accumulate(grads, *x, elementwise(*x, &|i, gi| gi * mask[i]));
            }
            Op::GraphNorm { x, alpha, gamma, beta, saved } => {
                let (n, m) = self.dims2(*x);
                let nf = n.max(1) as f64;
                let a = self.value(*alpha).data();
                let gam = self.value(*gamma).data();
                let gd = g.data();
                let mut gx = vec![0.0; n * m];
                let mut ga = vec![0.0; m];
                let mut gg = vec![0.0; m];
                let mut gb = vec![0.0; m];
                for c in 0..m {
                    let d = saved.std[c] + GRAPH_NORM_EPS;
                    let mut g_d = 0.0;
                    for r in 0..n {
                        let i = r * m + c;
                        gb[c] += gd[i];
                        gg[c] += gd[i] * saved.centered[i] / d;
                        g_d -= gam[c] * gd[i] * saved.centered[i] / (d * d);
                    }
                    // d(std)/d(centered_i) = centered_i / (n * std); zero at std == 0.
                    let coef = if saved.std[c] > 0.0 { g_d / (nf * saved.std[c]) } else { 0.0 };
                    let mut sum_gc = 0.0;
                    for r in 0..n {
                        let i = r * m + c;
                        let gc = gam[c] * gd[i] / d + coef * saved.centered[i];
                        gx[i] = gc;
                        sum_gc += gc;
                    }
                    for r in 0..n {
                        gx[r * m + c] -= a[c] * sum_gc / nf;
                    }
                    ga[c] = -saved.mean[c] * sum_gc;
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx)?);
                self.accumulate(grads, *alpha, Tensor::matrix(1, m, ga)?);
                self.accumulate(grads, *gamma, Tensor::matrix(1, m, gg)?);
                self.accumulate(grads, *beta, Tensor::matrix(1, m, gb)?);
            }
        }
        Ok(())
    }
}

/// `[start, end)` row ranges of runs of equal ids in a sorted id list.
fn segment_bounds(seg: &[usize]) -> Vec<(usize, usize)> {
    let mut bounds = Vec::new();
    let mut start = 0;
    for i in 1..=seg.len() {
        if i == seg.len() || seg[i] != seg[start] {
            bounds.push((start, i));
            start = i;
        }
    }
    bounds
}
