//! Define-by-run reverse-mode tape.
//!
//! Every forward op appends one node holding its output value and whatever
//! it needs for the backward rule. Nodes only reference earlier nodes, so the
//! append order is a topological order and `backward` is a single reverse
//! sweep. A tape supports exactly one backward pass.

use crate::autograd::rng::Rng;
use crate::autograd::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    StopGradient(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBroadcast(usize, usize),
    MulBroadcast(usize, usize),
    Scale(usize, f64),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    GatherRows(usize, Vec<usize>),
    Reshape(usize),
    Gelu(usize),
    Exp(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    Mse {
        pred: usize,
        target: Tensor,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(usize),
    Mean(usize),
    Rotary {
        x: usize,
        cos: Vec<f64>,
        sin: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            StopGradient(a)
            | Transpose(a)
            | Scale(a, _)
            | SliceCols(a, _)
            | SliceRows(a, _)
            | GatherRows(a, _)
            | Reshape(a)
            | Gelu(a)
            | Exp(a)
            | Softmax(a)
            | Sum(a)
            | Mean(a) => vec![*a],
            MatMul(a, b)
            | Add(a, b)
            | Sub(a, b)
            | Mul(a, b)
            | AddBroadcast(a, b)
            | MulBroadcast(a, b) => vec![*a, *b],
            ConcatCols(v) | ConcatRows(v) => v.clone(),
            LayerNorm { x, .. } | Dropout { x, .. } | Rotary { x, .. } => vec![*x],
            Mse { pred, .. } => vec![*pred],
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            StopGradient(_) => "stop_gradient",
            MatMul(..) => "matmul",
            Transpose(_) => "transpose",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            AddBroadcast(..) => "add_broadcast",
            MulBroadcast(..) => "mul_broadcast",
            Scale(..) => "scale",
            ConcatCols(_) => "concat_channels",
            ConcatRows(_) => "concat_rows",
            SliceCols(..) => "slice_cols",
            SliceRows(..) => "slice_rows",
            GatherRows(..) => "gather_rows",
            Reshape(_) => "reshape",
            Gelu(_) => "gelu",
            Exp(_) => "exp",
            Softmax(_) => "softmax",
            LayerNorm { .. } => "layer_norm",
            Dropout { .. } => "dropout",
            Mse { .. } => "mse_loss",
            CrossEntropy { .. } => "cross_entropy",
            Sum(_) => "sum",
            Mean(_) => "mean",
            Rotary { .. } => "rotary",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Accumulated gradient, if any flowed into `v`.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zero-filled when nothing reached it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = match op {
            Op::Leaf | Op::StopGradient(_) => false,
            _ => op.inputs().iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    /// Identity in the forward pass; contributes nothing in the backward pass.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let value = self.val(x.0).clone();
        self.push(value, Op::StopGradient(x.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.val(a.0), self.val(b.0));
        let (m, k, k2, n) = (av.rows(), av.cols(), bv.rows(), bv.cols());
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let out = Tensor::matrix(m, n, matmul_nn(av.data(), bv.data(), m, k, n))?;
        self.push(out, Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.val(x.0);
        let out = transpose_data(xv.data(), xv.rows(), xv.cols());
        let out = Tensor::matrix(xv.cols(), xv.rows(), out)?;
        self.push(out, Op::Transpose(x.0))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.val(a.0), self.val(b.0));
        if av.len() != bv.len() || av.rows() != bv.rows() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.val(a.0), self.val(b.0));
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a.0, b.0))
    }

    fn broadcast_check(&self, op: &'static str, x: Var, y: Var) -> Result<(usize, usize)> {
        let (xv, yv) = (self.val(x.0), self.val(y.0));
        let (rx, ry) = (xv.rows(), yv.rows());
        if xv.cols() != yv.cols() || ry == 0 || rx % ry != 0 {
            return Err(Error::shape(
                op,
                format!("cannot tile {:?} over {:?}", yv.shape(), xv.shape()),
            ));
        }
        Ok((ry, xv.cols()))
    }

    /// `x + y` where `y`'s rows are tiled down `x` (bias rows, position tables).
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (ry, c) = self.broadcast_check("add_broadcast", x, y)?;
        let (xv, yv) = (self.val(x.0), self.val(y.0));
        let block = ry * c;
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + yv.data()[i % block])
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(out, Op::AddBroadcast(x.0, y.0))
    }

    /// `x ⊙ y` where `y`'s rows are tiled down `x`.
    pub fn mul_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (ry, c) = self.broadcast_check("mul_broadcast", x, y)?;
        let (xv, yv) = (self.val(x.0), self.val(y.0));
        let block = ry * c;
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * yv.data()[i % block])
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(out, Op::MulBroadcast(x.0, y.0))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.val(x.0).map(|v| v * c);
        self.push(out, Op::Scale(x.0, c))
    }

    /// Concatenate along the channel (last) axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_channels", "no inputs"));
        }
        let rows = self.val(parts[0].0).rows();
        if parts.iter().any(|p| self.val(p.0).rows() != rows) {
            return Err(Error::shape("concat_channels", "row counts differ"));
        }
        let total: usize = parts.iter().map(|p| self.val(p.0).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.val(p.0).row(r));
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        self.push(out, Op::ConcatCols(parts.iter().map(|p| p.0).collect()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs"));
        }
        let cols = self.val(parts[0].0).cols();
        if parts.iter().any(|p| self.val(p.0).cols() != cols) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            data.extend_from_slice(self.val(p.0).data());
            rows += self.val(p.0).rows();
        }
        let out = Tensor::matrix(rows, cols, data)?;
        self.push(out, Op::ConcatRows(parts.iter().map(|p| p.0).collect()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.val(x.0);
        if start > end || end > xv.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}..{end} of {} cols", xv.cols()),
            ));
        }
        let mut data = Vec::with_capacity(xv.rows() * (end - start));
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row(r)[start..end]);
        }
        let out = Tensor::matrix(xv.rows(), end - start, data)?;
        self.push(out, Op::SliceCols(x.0, start))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.val(x.0);
        if start > end || end > xv.rows() {
            return Err(Error::shape(
                "slice_rows",
                format!("{start}..{end} of {} rows", xv.rows()),
            ));
        }
        let c = xv.cols();
        let data = xv.data()[start * c..end * c].to_vec();
        let out = Tensor::matrix(end - start, c, data)?;
        self.push(out, Op::SliceRows(x.0, start))
    }

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = self.val(x.0);
        if let Some(&bad) = indices.iter().find(|&&i| i >= xv.rows()) {
            return Err(Error::shape(
                "gather_rows",
                format!("index {bad} out of {} rows", xv.rows()),
            ));
        }
        let mut data = Vec::with_capacity(indices.len() * xv.cols());
        for &i in indices {
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::matrix(indices.len(), xv.cols(), data)?;
        self.push(out, Op::GatherRows(x.0, indices.to_vec()))
    }

    /// Row lookup into an embedding table.
    pub fn embed_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.val(x.0).clone().reshaped(shape.to_vec())?;
        self.push(out, Op::Reshape(x.0))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.val(x.0).map(|v| {
            let u = GELU_C * (v + GELU_K * v * v * v);
            0.5 * v * (1.0 + u.tanh())
        });
        self.push(out, Op::Gelu(x.0))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.val(x.0).map(f64::exp);
        self.push(out, Op::Exp(x.0))
    }

    /// Row-wise softmax over the channel axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.val(x.0);
        let c = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(out, Op::Softmax(x.0))
    }

    /// Row-wise normalization to zero mean, unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let xv = self.val(x.0);
        let c = xv.cols();
        let mut data = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for row in data.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(out, Op::LayerNorm { x: x.0, inv_std })
    }

    /// Inverted dropout. The sampled mask is a constant for backward.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidProbability(p));
        }
        let xv = self.val(x.0);
        if p == 0.0 {
            let out = xv.clone();
            let mask = vec![1.0; out.len()];
            return self.push(out, Op::Dropout { x: x.0, mask });
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.uniform() < p { 0.0 } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(out, Op::Dropout { x: x.0, mask })
    }

    /// Mean squared error over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let pv = self.val(pred.0);
        if pv.len() != target.len() {
            return Err(Error::shape(
                "mse_loss",
                format!("{:?} vs {:?}", pv.shape(), target.shape()),
            ));
        }
        let n = pv.len().max(1) as f64;
        let loss = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred: pred.0,
                target: target.clone(),
            },
        )
    }

    /// Mean over rows of softmax cross-entropy against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.val(logits.0);
        let c = lv.cols();
        if labels.len() != lv.rows() || labels.iter().any(|&l| l >= c) {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for {:?} logits", labels.len(), lv.shape()),
            ));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(c).zip(labels) {
            softmax_in_place(row);
            loss -= row[label].max(f64::MIN_POSITIVE).ln();
        }
        loss /= labels.len().max(1) as f64;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.val(x.0).sum();
        self.push(Tensor::scalar(s), Op::Sum(x.0))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.val(x.0);
        let s = xv.sum() / xv.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(x.0))
    }

    /// Rotate consecutive channel pairs of each row by per-row angles.
    ///
    /// `angles` has one row per row of `x` and `cols(x) / 2` columns.
    pub fn rotary(&mut self, x: Var, angles: &Tensor) -> Result<Var> {
        let xv = self.val(x.0);
        let (n, c) = (xv.rows(), xv.cols());
        if c % 2 != 0 || angles.rows() != n || angles.cols() != c / 2 {
            return Err(Error::shape(
                "rotary",
                format!("x {:?} with angles {:?}", xv.shape(), angles.shape()),
            ));
        }
        let cos: Vec<f64> = angles.data().iter().map(|a| a.cos()).collect();
        let sin: Vec<f64> = angles.data().iter().map(|a| a.sin()).collect();
        let mut data = xv.data().to_vec();
        for (j, pair) in data.chunks_mut(2).enumerate() {
            let (x0, x1) = (pair[0], pair[1]);
            pair[0] = x0 * cos[j] - x1 * sin[j];
            pair[1] = x0 * sin[j] + x1 * cos[j];
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(out, Op::Rotary { x: x.0, cos, sin })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::AlreadyBackpropagated);
        }
        let loss_shape = self.val(loss.0).shape().to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(&input) = node.op.inputs().iter().find(|&&j| j >= i) {
                return Err(Error::Cycle { node: i, input });
            }
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(loss_shape, 1.0));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                grads[i] = Some(g);
                continue;
            }
            if !g.all_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
        if !self.nodes[i].requires_grad {
            return;
        }
        match &mut grads[i] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn like(&self, i: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(self.val(i).shape().to_vec(), data).expect("gradient matches value shape")
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf | Op::StopGradient(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.nodes[*a].requires_grad {
                    let da = matmul_nt(gd, bv.data(), m, n, k);
                    self.accumulate(grads, *a, self.like(*a, da));
                }
                if self.nodes[*b].requires_grad {
                    let db = matmul_tn(av.data(), gd, m, k, n);
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::Transpose(x) => {
                let xv = self.val(*x);
                let d = transpose_data(gd, xv.cols(), xv.rows());
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, self.like(*a, gd.to_vec()));
                self.accumulate(grads, *b, self.like(*b, gd.to_vec()));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, self.like(*a, gd.to_vec()));
                self.accumulate(grads, *b, self.like(*b, gd.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                let da = gd.iter().zip(bv).map(|(g, y)| g * y).collect();
                let db = gd.iter().zip(av).map(|(g, x)| g * x).collect();
                self.accumulate(grads, *a, self.like(*a, da));
                self.accumulate(grads, *b, self.like(*b, db));
            }
            Op::AddBroadcast(x, y) => {
                self.accumulate(grads, *x, self.like(*x, gd.to_vec()));
                let block = self.val(*y).len();
                let mut dy = vec![0.0; block];
                for (j, gv) in gd.iter().enumerate() {
                    dy[j % block] += gv;
                }
                self.accumulate(grads, *y, self.like(*y, dy));
            }
            Op::MulBroadcast(x, y) => {
                let (xv, yv) = (self.val(*x).data(), self.val(*y).data());
                let block = yv.len();
                let dx = gd
                    .iter()
                    .enumerate()
                    .map(|(j, gv)| gv * yv[j % block])
                    .collect();
                let mut dy = vec![0.0; block];
                for (j, gv) in gd.iter().enumerate() {
                    dy[j % block] += gv * xv[j];
                }
                self.accumulate(grads, *x, self.like(*x, dx));
                self.accumulate(grads, *y, self.like(*y, dy));
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, self.like(*x, gd.iter().map(|v| v * c).collect()));
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.val(p).cols();
                    if self.nodes[p].requires_grad {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&gd[r * total + offset..r * total + offset + c]);
                        }
                        self.accumulate(grads, p, self.like(p, d));
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.val(p).len();
                    if self.nodes[p].requires_grad {
                        self.accumulate(grads, p, self.like(p, gd[offset..offset + len].to_vec()));
                    }
                    offset += len;
                }
            }
            Op::SliceCols(x, start) => {
                let xv = self.val(*x);
                let (c, w) = (xv.cols(), g.cols());
                let mut d = vec![0.0; xv.len()];
                for r in 0..xv.rows() {
                    d[r * c + start..r * c + start + w].copy_from_slice(&gd[r * w..(r + 1) * w]);
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::SliceRows(x, start) => {
                let xv = self.val(*x);
                let c = xv.cols();
                let mut d = vec![0.0; xv.len()];
                d[start * c..start * c + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::GatherRows(x, idx) => {
                let xv = self.val(*x);
                let c = xv.cols();
                let mut d = vec![0.0; xv.len()];
                for (k, &r) in idx.iter().enumerate() {
                    for j in 0..c {
                        d[r * c + j] += gd[k * c + j];
                    }
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, self.like(*x, gd.to_vec()));
            }
            Op::Exp(x) => {
                let d = gd
                    .iter()
                    .zip(self.val(i).data())
                    .map(|(g, y)| g * y)
                    .collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Gelu(x) => {
                let xv = self.val(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(gv, &v)| {
                        let u = GELU_C * (v + GELU_K * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                        gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                    .collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Softmax(x) => {
                let y = self.nodes[i].value.data();
                let c = g.cols();
                let mut d = vec![0.0; y.len()];
                for ((drow, yrow), grow) in d.chunks_mut(c).zip(y.chunks(c)).zip(gd.chunks(c)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for ((dv, yv), gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *dv = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::LayerNorm { x, inv_std } => {
                let y = self.nodes[i].value.data();
                let c = g.cols();
                let mut d = vec![0.0; y.len()];
                for (r, ((drow, yrow), grow)) in d
                    .chunks_mut(c)
                    .zip(y.chunks(c))
                    .zip(gd.chunks(c))
                    .enumerate()
                {
                    let gmean = grow.iter().sum::<f64>() / c as f64;
                    let gy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for ((dv, yv), gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *dv = inv_std[r] * (gv - gmean - yv * gy);
                    }
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Dropout { x, mask } => {
                let d = gd.iter().zip(mask).map(|(a, b)| a * b).collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Mse { pred, target } => {
                let pv = self.val(*pred).data();
                let scale = 2.0 * gd[0] / pv.len().max(1) as f64;
                let d = pv
                    .iter()
                    .zip(target.data())
                    .map(|(p, t)| scale * (p - t))
                    .collect();
                self.accumulate(grads, *pred, self.like(*pred, d));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.val(*logits).cols();
                let scale = gd[0] / labels.len().max(1) as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * c + l] -= scale;
                }
                self.accumulate(grads, *logits, self.like(*logits, d));
            }
            Op::Sum(x) => {
                let n = self.val(*x).len();
                self.accumulate(grads, *x, self.like(*x, vec![gd[0]; n]));
            }
            Op::Mean(x) => {
                let n = self.val(*x).len();
                self.accumulate(grads, *x, self.like(*x, vec![gd[0] / n.max(1) as f64; n]));
            }
            Op::Rotary { x, cos, sin } => {
                let mut d = gd.to_vec();
                for (j, pair) in d.chunks_mut(2).enumerate() {
                    let (g0, g1) = (pair[0], pair[1]);
                    pair[0] = g0 * cos[j] + g1 * sin[j];
                    pair[1] = -g0 * sin[j] + g1 * cos[j];
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
        }
        Ok(())
    }
}

fn transpose_data(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0)).unwrap();
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).item(), 6.0);
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.0)).unwrap();
        let y = tape.scale(x, 2.0).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(
            tape.backward(y),
            Err(Error::AlreadyBackpropagated)
        ));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn stop_gradient_forward_identity_and_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.5, -2.0])).unwrap();
        let s = tape.stop_gradient(x).unwrap();
        assert_eq!(tape.value(s).data(), &[1.5, -2.0]);
        let l = tape.sum(s).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn live_edge_survives_detached_sibling() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0)).unwrap();
        let s = tape.stop_gradient(x).unwrap();
        let y = tape.add(x, s).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).item(), 1.0);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0; 3])).unwrap();
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn concat_channels_widths_add() {
        let mut tape = Tape::new();
        let parts: Vec<Var> = (0..3)
            .map(|i| tape.constant(Tensor::vector(vec![i as f64; 4])).unwrap())
            .collect();
        let y = tape.concat_channels(&parts).unwrap();
        assert_eq!(tape.value(y).cols(), 12);
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(vec![2, 3])).unwrap();
        assert!(tape.matmul(a, b).is_err());
        let c = tape.constant(Tensor::zeros(vec![3, 3])).unwrap();
        assert!(tape.add(a, c).is_err());
        let mut rng = Rng::seed_from(0);
        assert!(matches!(
            tape.dropout(a, 1.0, &mut rng),
            Err(Error::InvalidProbability(_))
        ));
        assert!(tape.dropout(a, -0.1, &mut rng).is_err());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(1e200)).unwrap();
        assert!(matches!(
            tape.mul(a, a),
            Err(Error::NonFinite { op: "mul" })
        ));
    }

    #[test]
    fn diamond_accumulates() {
        // y = (2x) * (x + 1); dy/dx = 4x + 2
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.5)).unwrap();
        let a = tape.scale(x, 2.0).unwrap();
        let one = tape.constant(Tensor::scalar(1.0)).unwrap();
        let b = tape.add(x, one).unwrap();
        let y = tape.mul(a, b).unwrap();
        let g = tape.backward(y).unwrap();
        assert!((g.wrt(x).item() - 8.0).abs() < 1e-15);
    }
}
