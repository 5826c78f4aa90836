//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of operation records. Every node's
//! inputs precede it, so the reverse of append order is a valid topological
//! order and `backward` is a single sweep. Graphs are cheap and are rebuilt
//! for every forward pass.

use std::cell::RefCell;
use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    Silu(usize),
    Tanh(usize),
    Concat(Vec<usize>),
    RepeatRows(usize),
    Sum(usize),
    MeanSqErr(usize, usize),
    SoftmaxCe {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation tape. Single-threaded; distinct graphs share nothing.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

/// Gradients of a scalar loss with respect to the trainable leaves that
/// lie on a path to it. Keyed by node id in ascending order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(&var.id)
    }

    pub fn take(&mut self, var: &Var<'_>) -> Option<Tensor> {
        self.grads.remove(&var.id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn contains(&self, var: &Var<'_>) -> bool {
        self.grads.contains_key(&var.id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.grads.values_mut()
    }

    /// Joint L2 norm over every entry of every gradient.
    pub fn global_norm(&self) -> f64 {
        self.grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Registers a leaf. Only leaves created with `requires_grad` appear in
    /// the gradient map returned by [`Graph::backward`].
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn check_owner(&self, v: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self, v.graph) {
            Ok(())
        } else {
            Err(Error::InvalidArgument("variable belongs to another graph".into()))
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.check_owner(&loss)?;
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::from_raw(
            nodes[loss.id].value.shape().to_vec(),
            vec![1.0],
        ));
        let mut out = BTreeMap::new();

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                out.insert(id, g);
                continue;
            }
            let mut send = |to: usize, t: Tensor| {
                if nodes[to].requires_grad {
                    accumulate(&mut grads[to], t);
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].requires_grad {
                        send(*a, matmul_bt(&g, bv));
                    }
                    if nodes[*b].requires_grad {
                        send(*b, matmul_at(av, &g));
                    }
                }
                Op::AddRow(a, b) => {
                    if nodes[*b].requires_grad {
                        let bshape = nodes[*b].value.shape().to_vec();
                        send(*b, Tensor::from_raw(bshape, col_sums(&g)));
                    }
                    send(*a, g);
                }
                Op::MulRow(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*b].requires_grad {
                        let n = g.cols();
                        let mut db = vec![0.0; n];
                        for i in 0..g.rows() {
                            for (j, d) in db.iter_mut().enumerate() {
                                *d += g.row(i)[j] * av.row(i)[j];
                            }
                        }
                        send(*b, Tensor::from_raw(bv.shape().to_vec(), db));
                    }
                    if nodes[*a].requires_grad {
                        send(*a, mul_row(&g, bv.data()));
                    }
                }
                Op::Add(a, b) => {
                    send(*b, g.clone());
                    send(*a, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|v| -v));
                    send(*a, g);
                }
                Op::Scale(a, c) => send(*a, g.map(|v| v * c)),
                Op::Silu(a) => {
                    let x = &nodes[*a].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gi, &xi)| {
                            let s = sigmoid(xi);
                            gi * s * (1.0 + xi * (1.0 - s))
                        })
                        .collect();
                    send(*a, Tensor::from_raw(x.shape().to_vec(), data));
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gi, &yi)| gi * (1.0 - yi * yi))
                        .collect();
                    send(*a, Tensor::from_raw(y.shape().to_vec(), data));
                }
                Op::Concat(parts) => {
                    let m = g.rows();
                    let total = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let w = nodes[p].value.cols();
                        if nodes[p].requires_grad {
                            let mut piece = Vec::with_capacity(m * w);
                            for i in 0..m {
                                piece.extend_from_slice(
                                    &g.data()[i * total + offset..i * total + offset + w],
                                );
                            }
                            send(p, Tensor::from_raw(nodes[p].value.shape().to_vec(), piece));
                        }
                        offset += w;
                    }
                }
                Op::RepeatRows(a) => {
                    let shape = nodes[*a].value.shape().to_vec();
                    send(*a, Tensor::from_raw(shape, col_sums(&g)));
                }
                Op::Sum(a) => {
                    let gv = g.data()[0];
                    let x = &nodes[*a].value;
                    send(*a, Tensor::from_raw(x.shape().to_vec(), vec![gv; x.len()]));
                }
                Op::MeanSqErr(a, b) => {
                    let gv = g.data()[0];
                    let (p, t) = (&nodes[*a].value, &nodes[*b].value);
                    let scale = 2.0 * gv / p.len() as f64;
                    let d: Vec<f64> = p
                        .data()
                        .iter()
                        .zip(t.data())
                        .map(|(pi, ti)| scale * (pi - ti))
                        .collect();
                    if nodes[*b].requires_grad {
                        let neg = d.iter().map(|v| -v).collect();
                        send(*b, Tensor::from_raw(t.shape().to_vec(), neg));
                    }
                    send(*a, Tensor::from_raw(p.shape().to_vec(), d));
                }
                Op::SoftmaxCe {
                    logits,
                    targets,
                    probs,
                } => {
                    let gv = g.data()[0];
                    let lv = &nodes[*logits].value;
                    let k = lv.cols();
                    let m = targets.len() as f64;
                    let mut d: Vec<f64> = probs.iter().map(|p| p * gv / m).collect();
                    for (i, &t) in targets.iter().enumerate() {
                        d[i * k + t] -= gv / m;
                    }
                    send(*logits, Tensor::from_raw(lv.shape().to_vec(), d));
                }
            }
        }
        Ok(Gradients { grads: out })
    }
}

fn accumulate(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += b;
            }
        }
        None => *slot = Some(t),
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

fn col_sums(g: &Tensor) -> Vec<f64> {
    let n = g.cols();
    let mut s = vec![0.0; n];
    for i in 0..g.rows() {
        for (acc, v) in s.iter_mut().zip(g.row(i)) {
            *acc += v;
        }
    }
    s
}

fn mul_row(a: &Tensor, b: &[f64]) -> Tensor {
    let n = a.cols();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v * b[i % n])
        .collect();
    Tensor::from_raw(a.shape().to_vec(), data)
}

/// `a[m,k] · b[k,n]`
fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_raw(vec![m, n], out)
}

/// `a[m,n] · b[k,n]ᵀ`
fn matmul_bt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, n, k) = (a.rows(), a.cols(), b.rows());
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..k {
            out[i * k + j] = arow.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    debug_assert_eq!(n, b.cols());
    Tensor::from_raw(vec![m, k], out)
}

/// `a[m,k]ᵀ · b[m,n]`
fn matmul_at(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = a.row(i);
        let brow = b.row(i);
        for (p, av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_raw(vec![k, n], out)
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Tensor {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> Result<f64> {
        self.graph.nodes.borrow()[self.id].value.item()
    }

    /// Copies the value into a fresh constant leaf, cutting the gradient path.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant(self.value())
    }

    fn same_graph(&self, other: &Var<'_>) -> Result<()> {
        self.graph.check_owner(other)
    }

    fn emit(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'g> {
        let rg = self.graph.needs_grad(inputs);
        self.graph.push(value, op, rg)
    }

    /// Matrix product `self[m,k] · rhs[k,n]`.
    pub fn matmul(&self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&rhs)?;
        let value = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
            if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
                return Err(Error::Shape(format!(
                    "matmul {:?} x {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            matmul_raw(a, b)
        };
        Ok(self.emit(value, Op::MatMul(self.id, rhs.id), &[self.id, rhs.id]))
    }

    /// Adds the vector `b[n]` to every row of `self[m,n]`.
    pub fn add_row(&self, b: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&b)?;
        let value = {
            let nodes = self.graph.nodes.borrow();
            let (a, bv) = (&nodes[self.id].value, &nodes[b.id].value);
            if bv.len() != a.cols() {
                return Err(Error::Shape(format!(
                    "row add {:?} + {:?}",
                    a.shape(),
                    bv.shape()
                )));
            }
            let n = a.cols();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v + bv.data()[i % n])
                .collect();
            Tensor::from_raw(a.shape().to_vec(), data)
        };
        Ok(self.emit(value, Op::AddRow(self.id, b.id), &[self.id, b.id]))
    }

    /// Multiplies every row of `self[m,n]` elementwise by `b[n]`.
    pub fn mul_row(&self, b: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&b)?;
        let value = {
            let nodes = self.graph.nodes.borrow();
            let (a, bv) = (&nodes[self.id].value, &nodes[b.id].value);
            if bv.len() != a.cols() {
                return Err(Error::Shape(format!(
                    "row mul {:?} * {:?}",
                    a.shape(),
                    bv.shape()
                )));
            }
            mul_row(a, bv.data())
        };
        Ok(self.emit(value, Op::MulRow(self.id, b.id), &[self.id, b.id]))
    }

    fn zip_with(&self, rhs: &Var<'g>, f: impl Fn(f64, f64) -> f64, what: &str) -> Result<Tensor> {
        self.same_graph(rhs)?;
        let nodes = self.graph.nodes.borrow();
        let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!(
                "{what} {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_raw(a.shape().to_vec(), data))
    }

    pub fn add(&self, rhs: Var<'g>) -> Result<Var<'g>> {
        let value = self.zip_with(&rhs, |x, y| x + y, "add")?;
        Ok(self.emit(value, Op::Add(self.id, rhs.id), &[self.id, rhs.id]))
    }

    pub fn sub(&self, rhs: Var<'g>) -> Result<Var<'g>> {
        let value = self.zip_with(&rhs, |x, y| x - y, "sub")?;
        Ok(self.emit(value, Op::Sub(self.id, rhs.id), &[self.id, rhs.id]))
    }

    pub fn scale(&self, c: f64) -> Var<'g> {
        let value = self.graph.nodes.borrow()[self.id].value.map(|v| v * c);
        self.emit(value, Op::Scale(self.id, c), &[self.id])
    }

    /// `x · σ(x)` elementwise.
    pub fn silu(&self) -> Var<'g> {
        let value = self.graph.nodes.borrow()[self.id]
            .value
            .map(|x| x * sigmoid(x));
        self.emit(value, Op::Silu(self.id), &[self.id])
    }

    pub fn tanh(&self) -> Var<'g> {
        let value = self.graph.nodes.borrow()[self.id].value.map(f64::tanh);
        self.emit(value, Op::Tanh(self.id), &[self.id])
    }

    /// Broadcasts a vector `[n]` (or `[1,n]`) to `m` identical rows.
    pub fn repeat_rows(&self, m: usize) -> Result<Var<'g>> {
        if m == 0 {
            return Err(Error::Shape("repeat to zero rows".into()));
        }
        let value = {
            let nodes = self.graph.nodes.borrow();
            let v = &nodes[self.id].value;
            if v.rows() != 1 {
                return Err(Error::Shape(format!("repeat_rows of {:?}", v.shape())));
            }
            let n = v.cols();
            let mut data = Vec::with_capacity(m * n);
            for _ in 0..m {
                data.extend_from_slice(v.data());
            }
            Tensor::from_raw(vec![m, n], data)
        };
        Ok(self.emit(value, Op::RepeatRows(self.id), &[self.id]))
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&self) -> Var<'g> {
        let value = Tensor::scalar(self.graph.nodes.borrow()[self.id].value.data().iter().sum());
        self.emit(value, Op::Sum(self.id), &[self.id])
    }
}

/// Horizontal concatenation of `[m, n_i]` blocks into `[m, Σn_i]`.
pub fn concat_features<'g>(parts: &[Var<'g>]) -> Result<Var<'g>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
    let graph = first.graph;
    for p in parts {
        graph.check_owner(p)?;
    }
    let value = {
        let nodes = graph.nodes.borrow();
        let m = nodes[first.id].value.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let v = &nodes[p.id].value;
            if v.shape().len() != 2 || v.rows() != m {
                return Err(Error::Shape(format!(
                    "concat part {:?} does not have {m} rows",
                    v.shape()
                )));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                data.extend_from_slice(nodes[p.id].value.row(i));
            }
        }
        Tensor::from_raw(vec![m, total], data)
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    Ok(first.emit(value, Op::Concat(ids.clone()), &ids))
}

/// Mean over all entries of `(pred - target)²`.
pub fn mean_sq_err<'g>(pred: Var<'g>, target: Var<'g>) -> Result<Var<'g>> {
    let diff = pred.zip_with(&target, |x, y| (x - y) * (x - y), "mse")?;
    let n = diff.len() as f64;
    let value = Tensor::scalar(diff.data().iter().sum::<f64>() / n);
    Ok(pred.emit(value, Op::MeanSqErr(pred.id, target.id), &[pred.id, target.id]))
}

/// Mean over rows of `-log softmax(logits_i)[target_i]`.
///
/// `logits` is `[K]` for a single example or `[m, K]` for a batch with one
/// target per row. Uses max-subtraction, so large logits do not overflow.
pub fn softmax_cross_entropy<'g>(logits: Var<'g>, targets: &[usize]) -> Result<Var<'g>> {
    let (value, probs) = {
        let nodes = logits.graph.nodes.borrow();
        let l = &nodes[logits.id].value;
        let (m, k) = (l.rows(), l.cols());
        if targets.len() != m {
            return Err(Error::Shape(format!(
                "{} targets for {m} logit rows",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::InvalidArgument(format!(
                "target {t} out of range for {k} classes"
            )));
        }
        let mut probs = Vec::with_capacity(m * k);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = l.row(i);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            total += lse - row[t];
            probs.extend(row.iter().map(|v| (v - mx).exp() / z));
        }
        (Tensor::scalar(total / m as f64), probs)
    };
    let op = Op::SoftmaxCe {
        logits: logits.id,
        targets: targets.to_vec(),
        probs,
    };
    Ok(logits.emit(value, op, &[logits.id]))
}
