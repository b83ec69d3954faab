//! Tape-style reverse-mode differentiation over small dense matrices.
//!
//! Every operation appends a node, so parents always precede children and
//! the backward sweep is a single reverse pass over the node list. Nodes that
//! cannot reach a trainable leaf never receive gradient, which is how frozen
//! networks (the classifier during generator updates, the generator during
//! discriminator updates) stay untouched.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Negative slope used by every leaky-relu in the crate.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Inputs to `log` are clamped from below at this value.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }

    pub fn from_index(i: usize) -> Self {
        NodeId(i)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    LeakyRelu(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    LogSigmoid(NodeId),
    SoftmaxRows(NodeId),
    Log(NodeId),
    MeanRows(NodeId),
    Sum(NodeId),
}

impl Op {
    fn parents(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                vec![a, b]
            }
            Op::Scale(a, _)
            | Op::LeakyRelu(a)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::LogSigmoid(a)
            | Op::SoftmaxRows(a)
            | Op::Log(a)
            | Op::MeanRows(a)
            | Op::Sum(a) => vec![a],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    grad: Tensor,
    trainable: bool,
    needs_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_matrix() {
        Ok(())
    } else {
        Err(shape_err(op, format!("expected a matrix, got shape {:?}", t.shape())))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(sigmoid(x)) = -softplus(-x), evaluated without overflow.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: receives a gradient on backward.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    /// Constant leaf: data or frozen weights.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> NodeId {
        let grad = Tensor::zeros(value.shape());
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            grad,
            trainable,
            needs_grad: trainable,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].grad
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        self.nodes[id.0].trainable
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        let grad = Tensor::zeros(value.shape());
        self.nodes.push(Node {
            op,
            value,
            grad,
            trainable: false,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn map(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(op, value)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            Ok(())
        } else {
            Err(shape_err(op, format!("{sa:?} vs {sb:?}")))
        }
    }

    fn zip(&mut self, op_name: &'static str, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        self.same_shape(op_name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(op, value))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        require_matrix("matmul", va)?;
        require_matrix("matmul", vb)?;
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        if vb.rows() != k {
            return Err(shape_err("matmul", format!("{:?} x {:?}", va.shape(), vb.shape())));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(va.data(), vb.data(), &mut out, m, k, n);
        Ok(self.push(Op::MatMul(a, b), Tensor::matrix(m, n, out)))
    }

    /// Adds a `[1, n]` bias to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(bias));
        require_matrix("add_bias", vx)?;
        if vb.shape() != [1, vx.cols()] {
            return Err(shape_err("add_bias", format!("{:?} + bias {:?}", vx.shape(), vb.shape())));
        }
        let n = vx.cols();
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vb.data()[i % n])
            .collect();
        Ok(self.push(Op::AddBias(x, bias), Tensor::matrix(vx.rows(), n, data)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.map(a, Op::Scale(a, factor), |v| v * factor)
    }

    pub fn leaky_relu(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::LeakyRelu(a), |v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Relu(a), |v| v.max(0.0))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    /// Numerically stable `log(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::LogSigmoid(a), log_sigmoid)
    }

    /// Natural log with the input clamped at [`LOG_FLOOR`].
    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Log(a), |v| v.max(LOG_FLOOR).ln())
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        require_matrix("softmax_rows", va)?;
        let (m, n) = (va.rows(), va.cols());
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = va.row_slice(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut total = 0.0;
            for &v in row {
                let e = (v - max).exp();
                total += e;
                out.push(e);
            }
            for v in &mut out[start..] {
                *v /= total;
            }
        }
        Ok(self.push(Op::SoftmaxRows(a), Tensor::matrix(m, n, out)))
    }

    /// Mean over the batch (row) axis: `[m, n] -> [1, n]`.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        require_matrix("mean_rows", va)?;
        let (m, n) = (va.rows(), va.cols());
        if m == 0 {
            return Err(shape_err("mean_rows", "empty batch".into()));
        }
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(va.row_slice(r)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        Ok(self.push(Op::MeanRows(a), Tensor::row(out)))
    }

    /// Sum of all entries, as a `1 x 1` tensor.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    /// Mean of all entries, as a `1 x 1` tensor.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Fills gradients with d(root)/d(node). Gradients of nodes that do not
    /// depend on a trainable leaf stay zero.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let root_shape = self.value(root).shape().to_vec();
        if self.value(root).len() != 1 {
            return Err(Error::NonScalarRoot(root_shape));
        }
        for node in &mut self.nodes {
            node.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
        if !self.nodes[root.0].needs_grad {
            return Ok(());
        }
        self.nodes[root.0].grad.data_mut()[0] = 1.0;

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            if op == Op::Leaf {
                continue;
            }
            let upstream = std::mem::replace(&mut self.nodes[i].grad, Tensor::zeros(&[0]));
            self.propagate(i, &op, &upstream);
            self.nodes[i].grad = upstream;
        }
        Ok(())
    }

    fn accumulate(&mut self, target: NodeId, contribution: impl IntoIterator<Item = f64>) {
        let node = &mut self.nodes[target.0];
        if !node.needs_grad {
            return;
        }
        for (g, c) in node.grad.data_mut().iter_mut().zip(contribution) {
            *g += c;
        }
    }

    fn propagate(&mut self, i: usize, op: &Op, up: &Tensor) {
        let out = self.nodes[i].value.clone();
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(a).clone(), self.value(b).clone());
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.nodes[a.0].needs_grad {
                    // dA = dY * B^T
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for c in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += up.data()[r * n + j] * vb.data()[c * n + j];
                            }
                            da[r * k + c] = s;
                        }
                    }
                    self.accumulate(a, da);
                }
                if self.nodes[b.0].needs_grad {
                    // dB = A^T * dY
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        for c in 0..k {
                            let av = va.data()[r * k + c];
                            if av == 0.0 {
                                continue;
                            }
                            let urow = &up.data()[r * n..(r + 1) * n];
                            for (d, u) in db[c * n..(c + 1) * n].iter_mut().zip(urow) {
                                *d += av * u;
                            }
                        }
                    }
                    self.accumulate(b, db);
                }
            }
            Op::AddBias(x, bias) => {
                self.accumulate(x, up.data().to_vec());
                let n = up.cols();
                let mut db = vec![0.0; n];
                for (j, u) in up.data().iter().enumerate() {
                    db[j % n] += u;
                }
                self.accumulate(bias, db);
            }
            Op::Add(a, b) => {
                self.accumulate(a, up.data().to_vec());
                self.accumulate(b, up.data().to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, up.data().to_vec());
                self.accumulate(b, up.data().iter().map(|u| -u).collect::<Vec<_>>());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).clone(), self.value(b).clone());
                self.accumulate(a, up.data().iter().zip(vb.data()).map(|(u, y)| u * y).collect::<Vec<_>>());
                self.accumulate(b, up.data().iter().zip(va.data()).map(|(u, x)| u * x).collect::<Vec<_>>());
            }
            Op::Scale(a, f) => self.accumulate(a, up.data().iter().map(|u| u * f).collect::<Vec<_>>()),
            Op::LeakyRelu(a) => {
                let va = self.value(a).clone();
                let g = va
                    .data()
                    .iter()
                    .zip(up.data())
                    .map(|(&x, u)| if x > 0.0 { *u } else { LEAKY_SLOPE * u })
                    .collect::<Vec<_>>();
                self.accumulate(a, g);
            }
            Op::Relu(a) => {
                let va = self.value(a).clone();
                let g = va
                    .data()
                    .iter()
                    .zip(up.data())
                    .map(|(&x, u)| if x > 0.0 { *u } else { 0.0 })
                    .collect::<Vec<_>>();
                self.accumulate(a, g);
            }
            Op::Tanh(a) => {
                let g = out.data().iter().zip(up.data()).map(|(y, u)| u * (1.0 - y * y)).collect::<Vec<_>>();
                self.accumulate(a, g);
            }
            Op::Sigmoid(a) => {
                let g = out.data().iter().zip(up.data()).map(|(y, u)| u * y * (1.0 - y)).collect::<Vec<_>>();
                self.accumulate(a, g);
            }
            Op::LogSigmoid(a) => {
                let va = self.value(a).clone();
                // d/dx log(sigmoid(x)) = sigmoid(-x)
                let g = va.data().iter().zip(up.data()).map(|(&x, u)| u * sigmoid(-x)).collect::<Vec<_>>();
                self.accumulate(a, g);
            }
            Op::Log(a) => {
                let va = self.value(a).clone();
                let g = va
                    .data()
                    .iter()
                    .zip(up.data())
                    .map(|(&x, u)| if x >= LOG_FLOOR { u / x } else { 0.0 })
                    .collect::<Vec<_>>();
                self.accumulate(a, g);
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = (out.rows(), out.cols());
                let mut g = vec![0.0; m * n];
                for r in 0..m {
                    let y = out.row_slice(r);
                    let dy = &up.data()[r * n..(r + 1) * n];
                    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        g[r * n + j] = y[j] * (dy[j] - dot);
                    }
                }
                self.accumulate(a, g);
            }
            Op::MeanRows(a) => {
                let m = self.value(a).rows();
                let n = up.cols();
                let g = (0..m * n).map(|idx| up.data()[idx % n] / m as f64).collect::<Vec<_>>();
                self.accumulate(a, g);
            }
            Op::Sum(a) => {
                let len = self.value(a).len();
                let u = up.item();
                self.accumulate(a, std::iter::repeat_n(u, len));
            }
        }
    }
}

/// `out += a[m,k] * b[k,n]`, i-k-j loop order.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
