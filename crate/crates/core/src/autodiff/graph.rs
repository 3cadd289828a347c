//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only tape. Every operation pushes a node whose
//! parents already live on the tape, so the node list is a topological order
//! by construction and the backward pass is a single reverse sweep.

use super::tensor::{log_softmax, softmax, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Concat(Vec<NodeId>),
    Slice(NodeId, usize, usize),
    Sum(NodeId),
    Mean(NodeId),
    CrossEntropy(NodeId, Vec<usize>),
}

/// Discriminant of an operation, exposed for inspection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    AddBias,
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Softplus,
    Exp,
    Log,
    Softmax,
    LogSoftmax,
    Concat,
    Slice,
    Sum,
    Mean,
    CrossEntropy,
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    /// False for constants and anything computed only from constants.
    tracked: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(what: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::contract(format!(
        "{what}: incompatible shapes {:?} and {:?}",
        a.shape(),
        b.shape()
    ))
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        match self.nodes[id.0].op {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(..) => OpKind::Relu,
            Op::Softplus(..) => OpKind::Softplus,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LogSoftmax(..) => OpKind::LogSoftmax,
            Op::Concat(..) => OpKind::Concat,
            Op::Slice(..) => OpKind::Slice,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::CrossEntropy(..) => OpKind::CrossEntropy,
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let tracked = match &op {
            Op::Leaf => true,
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                self.tracked(*a) || self.tracked(*b)
            }
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Softplus(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Slice(a, ..)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::CrossEntropy(a, _) => self.tracked(*a),
            Op::Concat(parts) => parts.iter().any(|&p| self.tracked(p)),
        };
        self.nodes.push(Node { op, value, tracked });
        NodeId(self.nodes.len() - 1)
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    /// Inserts a differentiable leaf (a parameter or an input of interest).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Inserts a leaf that receives no adjoint; the backward sweep skips
    /// every node computed only from constants.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            tracked: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    /// Adds a bias row `[c]` to every row of `x: [r, c]`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if xv.cols() != bv.len() {
            return Err(shape_err("add_bias", xv, bv));
        }
        let c = xv.cols();
        let mut out = xv.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv.data()[i % c];
        }
        Ok(self.push(Op::AddBias(x, bias), out))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, name: &str) -> Result<(&Tensor, &Tensor)> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av, bv));
        }
        Ok((av, bv))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = self.binary(a, b, "add")?;
        let v = av.zip_map(bv, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = self.binary(a, b, "sub")?;
        let v = av.zip_map(bv, |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = self.binary(a, b, "mul")?;
        let v = av.zip_map(bv, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a).map(|x| x * k);
        self.push(Op::Scale(a, k), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(softplus);
        self.push(Op::Softplus(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Log(a), v)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let v = rowwise(self.value(a), softmax);
        self.push(Op::Softmax(a), v)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let v = rowwise(self.value(a), log_softmax);
        self.push(Op::LogSoftmax(a), v)
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of nothing"))?;
        let rows = self.value(*first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::contract("concat: row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let v = Tensor::matrix(rows, total, data)?;
        Ok(self.push(Op::Concat(parts.to_vec()), v))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let av = self.value(a);
        if start >= end || end > av.cols() {
            return Err(Error::contract(format!(
                "slice {start}..{end} out of range for {} columns",
                av.cols()
            )));
        }
        let rows = av.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&av.row(r)[start..end]);
        }
        let v = Tensor::matrix(rows, end - start, data)?;
        Ok(self.push(Op::Slice(a, start, end), v))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let v = Tensor::scalar(av.data().iter().sum::<f64>() / av.len() as f64);
        self.push(Op::Mean(a), v)
    }

    /// Mean over rows of `-log softmax(logits)[target]`, via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.rows() != targets.len() {
            return Err(Error::contract(format!(
                "cross_entropy: {} rows but {} targets",
                lv.rows(),
                targets.len()
            )));
        }
        let c = lv.cols();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::contract(format!(
                    "cross_entropy: target {t} outside {c} classes"
                )));
            }
            total -= log_softmax(lv.row(r))[t];
        }
        let v = Tensor::scalar(total / targets.len() as f64);
        Ok(self.push(Op::CrossEntropy(logits, targets.to_vec()), v))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::contract(format!(
                "backward from non-scalar node of shape {:?}",
                loss_value.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::filled(loss_value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = adj[i].clone() else { continue };
            let out = &node.value;
            let accumulate = |adj: &mut [Option<Tensor>], id: NodeId, g: Tensor| {
                if self.tracked(id) {
                    accumulate(adj, id, g);
                }
            };
            match &node.op {
                Op::Leaf => continue,
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.tracked(*a) {
                        accumulate(&mut adj, *a, g.matmul(&bv.transpose())?);
                    }
                    if self.tracked(*b) {
                        accumulate(&mut adj, *b, av.transpose().matmul(&g)?);
                    }
                }
                Op::AddBias(x, b) => {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for (k, v) in g.data().iter().enumerate() {
                        db[k % c] += v;
                    }
                    let db = Tensor::new(self.value(*b).shape().to_vec(), db)?;
                    accumulate(&mut adj, *x, g);
                    accumulate(&mut adj, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    accumulate(&mut adj, *a, g.zip_map(bv, |x, y| x * y));
                    accumulate(&mut adj, *b, g.zip_map(av, |x, y| x * y));
                }
                Op::Scale(a, k) => {
                    let k = *k;
                    accumulate(&mut adj, *a, g.map(|x| x * k));
                }
                Op::Relu(a) => {
                    let d = g.zip_map(self.value(*a), |x, z| if z > 0.0 { x } else { 0.0 });
                    accumulate(&mut adj, *a, d);
                }
                Op::Softplus(a) => {
                    let d = g.zip_map(self.value(*a), |x, z| x * sigmoid(z));
                    accumulate(&mut adj, *a, d);
                }
                Op::Exp(a) => {
                    accumulate(&mut adj, *a, g.zip_map(out, |x, y| x * y));
                }
                Op::Log(a) => {
                    accumulate(&mut adj, *a, g.zip_map(self.value(*a), |x, z| x / z));
                }
                Op::Softmax(a) => {
                    let c = out.cols();
                    let mut d = g.clone();
                    for r in 0..out.rows() {
                        let (y, gy) = (out.row(r), g.row(r));
                        let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            d.data_mut()[r * c + j] = y[j] * (gy[j] - dot);
                        }
                    }
                    accumulate(&mut adj, *a, d);
                }
                Op::LogSoftmax(a) => {
                    let c = out.cols();
                    let mut d = g.clone();
                    for r in 0..out.rows() {
                        let gy = g.row(r);
                        let total: f64 = gy.iter().sum();
                        for j in 0..c {
                            d.data_mut()[r * c + j] = gy[j] - out.row(r)[j].exp() * total;
                        }
                    }
                    accumulate(&mut adj, *a, d);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let w = pv.cols();
                        let mut data = Vec::with_capacity(pv.len());
                        for r in 0..g.rows() {
                            data.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        accumulate(&mut adj, p, Tensor::new(pv.shape().to_vec(), data)?);
                        offset += w;
                    }
                }
                Op::Slice(a, start, end) => {
                    let av = self.value(*a);
                    let c = av.cols();
                    let mut d = Tensor::zeros(av.shape());
                    for r in 0..av.rows() {
                        d.data_mut()[r * c + start..r * c + end].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut adj, *a, d);
                }
                Op::Sum(a) => {
                    let s = g.item();
                    accumulate(&mut adj, *a, Tensor::filled(self.value(*a).shape(), s));
                }
                Op::Mean(a) => {
                    let av = self.value(*a);
                    let s = g.item() / av.len() as f64;
                    accumulate(&mut adj, *a, Tensor::filled(av.shape(), s));
                }
                Op::CrossEntropy(logits, targets) => {
                    let lv = self.value(*logits);
                    let n = targets.len() as f64;
                    let scale = g.item() / n;
                    let c = lv.cols();
                    let mut d = Vec::with_capacity(lv.len());
                    for (r, &t) in targets.iter().enumerate() {
                        let p = softmax(lv.row(r));
                        d.extend(
                            p.iter()
                                .enumerate()
                                .map(|(j, &pj)| scale * (pj - if j == t { 1.0 } else { 0.0 })),
                        );
                    }
                    debug_assert_eq!(d.len(), targets.len() * c);
                    accumulate(&mut adj, *logits, Tensor::new(lv.shape().to_vec(), d)?);
                }
            }
        }
        Ok(Gradients { adjoints: adj })
    }
}

fn rowwise(t: &Tensor, f: impl Fn(&[f64]) -> Vec<f64>) -> Tensor {
    let mut data = Vec::with_capacity(t.len());
    for r in 0..t.rows() {
        data.extend(f(t.row(r)));
    }
    Tensor::new(t.shape().to_vec(), data).expect("row-wise map keeps shape")
}

fn accumulate(adj: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut adj[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Adjoints of a backward sweep; nodes the loss does not depend on have none.
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.adjoints.get(id.0).and_then(Option::as_ref)
    }

    /// Adjoint of `id`, or zeros shaped like its value when unreached.
    pub fn wrt(&self, graph: &Graph, id: NodeId) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(id).shape()))
    }
}
