use std::cell::{Cell, Ref, RefCell};

use super::{dot, Tensor, LOG_FLOOR, NORM_EPS};
use crate::error::{Error, Result};

/// Row-stochastic tolerance accepted by [`Var::kl_rows`].
const STOCHASTIC_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMulT(usize, usize),
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine { input: usize, scale: f64 },
    Tanh(usize),
    Sum(usize),
    Mean(usize),
    NormalizeRows { input: usize, norms: Vec<f64> },
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    KlRows(usize, usize),
    Gather { input: usize, index: Vec<usize> },
    RowNorms(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Counters for numerically guarded situations hit while recording.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Diagnostics {
    /// Rows whose norm fell below the cosine guard.
    pub zero_norm_rows: usize,
}

/// A dynamic tape. Nodes are appended in evaluation order, so insertion
/// order is already a topological order. A graph supports one backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
    diagnostics: Cell<Diagnostics>,
}

/// Handle to a value recorded on a [`Graph`].
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

/// Leaf gradients produced by a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`, if `var` is a tracked leaf
    /// that the root depends on.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but yields zeros for untouched leaves.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.value().shape()),
        }
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
        self.len() == 0
    }

    pub fn diagnostics(&self) -> Diagnostics {
        self.diagnostics.get()
    }

    /// A trainable input: gradients are reported for it.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A value treated as constant during differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn tracked(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let requires_grad = self.tracked(inputs);
        self.push(value, op, requires_grad)
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn bump_zero_norm(&self, count: usize) {
        let mut d = self.diagnostics.get();
        d.zero_norm_rows += count;
        self.diagnostics.set(d);
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Tensor {
        self.graph.value_ref(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.value_ref(self.id).shape().to_vec()
    }

    pub fn item(&self) -> Result<f64> {
        self.graph.value_ref(self.id).item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn same_graph(&self, other: Var<'g>) -> Result<()> {
        if !std::ptr::eq(self.graph, other.graph) {
            return Err(Error::Contract("operands belong to different graphs".into()));
        }
        Ok(())
    }

    /// Value passthrough that blocks gradient flow.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant(self.value())
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(other)?;
        let v = self.graph.value_ref(self.id).matmul_t(&self.graph.value_ref(other.id))?;
        Ok(self.graph.record(v, Op::MatMulT(self.id, other.id), &[self.id, other.id]))
    }

    /// Adds a bias vector to every row.
    pub fn add_row(&self, bias: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(bias)?;
        let v = self.graph.value_ref(self.id).add_row(&self.graph.value_ref(bias.id))?;
        Ok(self.graph.record(v, Op::AddRow(self.id, bias.id), &[self.id, bias.id]))
    }

    fn binary(&self, other: Var<'g>, what: &str, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_graph(other)?;
        let a = self.graph.value_ref(self.id);
        let b = self.graph.value_ref(other.id);
        a.same_shape(&b, what)?;
        Ok(a.zip_map(&b, f))
    }

    pub fn add(&self, other: Var<'g>) -> Result<Var<'g>> {
        let v = self.binary(other, "add", |a, b| a + b)?;
        Ok(self.graph.record(v, Op::Add(self.id, other.id), &[self.id, other.id]))
    }

    pub fn sub(&self, other: Var<'g>) -> Result<Var<'g>> {
        let v = self.binary(other, "sub", |a, b| a - b)?;
        Ok(self.graph.record(v, Op::Sub(self.id, other.id), &[self.id, other.id]))
    }

    /// Elementwise product.
    pub fn mul(&self, other: Var<'g>) -> Result<Var<'g>> {
        let v = self.binary(other, "mul", |a, b| a * b)?;
        Ok(self.graph.record(v, Op::Mul(self.id, other.id), &[self.id, other.id]))
    }

    /// `scale · self + shift`, elementwise.
    pub fn affine(&self, scale: f64, shift: f64) -> Var<'g> {
        let v = self.graph.value_ref(self.id).map(|x| scale * x + shift);
        self.graph.record(v, Op::Affine { input: self.id, scale }, &[self.id])
    }

    pub fn scale(&self, scale: f64) -> Var<'g> {
        self.affine(scale, 0.0)
    }

    pub fn neg(&self) -> Var<'g> {
        self.affine(-1.0, 0.0)
    }

    pub fn tanh(&self) -> Var<'g> {
        let v = self.graph.value_ref(self.id).map(f64::tanh);
        self.graph.record(v, Op::Tanh(self.id), &[self.id])
    }

    pub fn sum(&self) -> Var<'g> {
        let s = self.graph.value_ref(self.id).data().iter().sum();
        self.graph.record(Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    /// Mean over all elements. The mean of an empty tensor is 0.
    pub fn mean(&self) -> Var<'g> {
        let v = self.graph.value_ref(self.id);
        let n = v.numel();
        let m = if n == 0 { 0.0 } else { v.data().iter().sum::<f64>() / n as f64 };
        drop(v);
        self.graph.record(Tensor::scalar(m), Op::Mean(self.id), &[self.id])
    }

    /// Divides each row by its ℓ2 norm, floored at [`NORM_EPS`].
    pub fn normalize_rows(&self) -> Result<Var<'g>> {
        let (v, norms) = self.graph.value_ref(self.id).normalize_rows()?;
        let zero = norms.iter().filter(|&&n| n < NORM_EPS).count();
        if zero > 0 {
            self.graph.bump_zero_norm(zero);
        }
        Ok(self.graph.record(v, Op::NormalizeRows { input: self.id, norms }, &[self.id]))
    }

    pub fn softmax_rows(&self) -> Result<Var<'g>> {
        let v = self.graph.value_ref(self.id).softmax_rows()?;
        Ok(self.graph.record(v, Op::SoftmaxRows(self.id), &[self.id]))
    }

    pub fn log_softmax_rows(&self) -> Result<Var<'g>> {
        let v = self.graph.value_ref(self.id).log_softmax_rows()?;
        Ok(self.graph.record(v, Op::LogSoftmaxRows(self.id), &[self.id]))
    }

    /// Per-row `KL(self_i ‖ other_i)` with a [`LOG_FLOOR`] inside both logs.
    pub fn kl_rows(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(other)?;
        let out = {
            let p = self.graph.value_ref(self.id);
            let q = self.graph.value_ref(other.id);
            p.same_shape(&q, "kl_rows")?;
            let (rows, cols) = p.require_matrix("kl_rows")?;
            check_stochastic(&p, "first argument")?;
            check_stochastic(&q, "second argument")?;
            let mut out = Vec::with_capacity(rows);
            for i in 0..rows {
                let mut acc = 0.0;
                for (&pc, &qc) in p.row(i).iter().zip(q.row(i)) {
                    acc += pc * (pc.max(LOG_FLOOR).ln() - qc.max(LOG_FLOOR).ln());
                }
                out.push(acc);
            }
            debug_assert!(cols > 0);
            Tensor::vector(out)
        };
        Ok(self.graph.record(out, Op::KlRows(self.id, other.id), &[self.id, other.id]))
    }

    /// Picks `self[i, index[i]]` from each row of a matrix.
    pub fn gather(&self, index: &[usize]) -> Result<Var<'g>> {
        let out = {
            let v = self.graph.value_ref(self.id);
            let (rows, cols) = v.require_matrix("gather")?;
            if index.len() != rows {
                return Err(Error::Dimension(format!(
                    "gather: {} indices for {rows} rows",
                    index.len()
                )));
            }
            let mut out = Vec::with_capacity(rows);
            for (i, &j) in index.iter().enumerate() {
                if j >= cols {
                    return Err(Error::Domain(format!(
                        "gather: index {j} out of range for {cols} columns"
                    )));
                }
                out.push(v.row(i)[j]);
            }
            Tensor::vector(out)
        };
        Ok(self.graph.record(out, Op::Gather { input: self.id, index: index.to_vec() }, &[self.id]))
    }

    /// ℓ2 norm of each row (not squared).
    pub fn row_norms(&self) -> Result<Var<'g>> {
        let out = {
            let v = self.graph.value_ref(self.id);
            let (rows, _) = v.require_matrix("row_norms")?;
            Tensor::vector((0..rows).map(|i| dot(v.row(i), v.row(i)).sqrt()).collect())
        };
        Ok(self.graph.record(out, Op::RowNorms(self.id), &[self.id]))
    }

    /// Reverse-mode sweep from this scalar. Consumes the graph.
    pub fn backward(&self) -> Result<Gradients> {
        let graph = self.graph;
        if graph.consumed.get() {
            return Err(Error::GraphConsumed);
        }
        let nodes = graph.nodes.borrow();
        let root = &nodes[self.id];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root.value.shape()
            )));
        }
        graph.consumed.set(true);

        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        let mut leaves: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if root.requires_grad {
            grads[self.id] = Some(Tensor::full(root.value.shape(), 1.0));
        }

        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let mut send = |target: usize, contribution: Tensor| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            };
            match &node.op {
                Op::Leaf => leaves[id] = Some(g),
                Op::Constant => {}
                Op::MatMulT(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    if nodes[*a].requires_grad {
                        send(*a, g.matmul(bv)?);
                    }
                    if nodes[*b].requires_grad {
                        send(*b, g.t_matmul(av)?);
                    }
                }
                Op::AddRow(a, bias) => {
                    if nodes[*bias].requires_grad {
                        let cols = g.cols();
                        let mut col_sum = vec![0.0; cols];
                        for row in g.data().chunks(cols.max(1)) {
                            for (s, v) in col_sum.iter_mut().zip(row) {
                                *s += v;
                            }
                        }
                        let shape = nodes[*bias].value.shape().to_vec();
                        send(*bias, Tensor::new(shape, col_sum)?);
                    }
                    send(*a, g);
                }
                Op::Add(a, b) => {
                    send(*b, g.clone());
                    send(*a, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|v| -v));
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    send(*a, g.zip_map(bv, |gi, bi| gi * bi));
                    send(*b, g.zip_map(av, |gi, ai| gi * ai));
                }
                Op::Affine { input, scale } => send(*input, g.map(|v| v * scale)),
                Op::Tanh(a) => send(*a, g.zip_map(&node.value, |gi, y| gi * (1.0 - y * y))),
                Op::Sum(a) => {
                    let gv = g.item()?;
                    send(*a, Tensor::full(nodes[*a].value.shape(), gv));
                }
                Op::Mean(a) => {
                    let n = nodes[*a].value.numel().max(1) as f64;
                    let gv = g.item()? / n;
                    send(*a, Tensor::full(nodes[*a].value.shape(), gv));
                }
                Op::NormalizeRows { input, norms } => {
                    let y = &node.value;
                    let mut out = g.clone();
                    for (i, &n) in norms.iter().enumerate() {
                        let yr = y.row(i);
                        let row = out.row_mut(i);
                        if n > NORM_EPS {
                            let yg = dot(yr, row);
                            for (o, &yv) in row.iter_mut().zip(yr) {
                                *o = (*o - yv * yg) / n;
                            }
                        } else {
                            for o in row.iter_mut() {
                                *o /= NORM_EPS;
                            }
                        }
                    }
                    send(*input, out);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut out = g.clone();
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let row = out.row_mut(i);
                        let gy = dot(row, yr);
                        for (o, &yv) in row.iter_mut().zip(yr) {
                            *o = yv * (*o - gy);
                        }
                    }
                    send(*a, out);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut out = g.clone();
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let row = out.row_mut(i);
                        let gs: f64 = row.iter().sum();
                        for (o, &yv) in row.iter_mut().zip(yr) {
                            *o -= yv.exp() * gs;
                        }
                    }
                    send(*a, out);
                }
                Op::KlRows(p, q) => {
                    let pv = &nodes[*p].value;
                    let qv = &nodes[*q].value;
                    let gd = g.data();
                    if nodes[*p].requires_grad {
                        let mut dp = Tensor::zeros(pv.shape());
                        for (i, &gi) in gd.iter().enumerate().take(pv.rows()) {
                            let row = dp.row_mut(i);
                            for ((o, &pc), &qc) in row.iter_mut().zip(pv.row(i)).zip(qv.row(i)) {
                                let active = if pc > LOG_FLOOR { 1.0 } else { 0.0 };
                                *o = gi * (pc.max(LOG_FLOOR).ln() + active - qc.max(LOG_FLOOR).ln());
                            }
                        }
                        send(*p, dp);
                    }
                    if nodes[*q].requires_grad {
                        let mut dq = Tensor::zeros(qv.shape());
                        for (i, &gi) in gd.iter().enumerate().take(qv.rows()) {
                            let row = dq.row_mut(i);
                            for ((o, &pc), &qc) in row.iter_mut().zip(pv.row(i)).zip(qv.row(i)) {
                                if qc > LOG_FLOOR {
                                    *o = -gi * pc / qc;
                                }
                            }
                        }
                        send(*q, dq);
                    }
                }
                Op::Gather { input, index } => {
                    let mut out = Tensor::zeros(nodes[*input].value.shape());
                    for (i, (&j, &gi)) in index.iter().zip(g.data()).enumerate() {
                        out.row_mut(i)[j] += gi;
                    }
                    send(*input, out);
                }
                Op::RowNorms(a) => {
                    let av = &nodes[*a].value;
                    let mut out = Tensor::zeros(av.shape());
                    for (i, (&n, &gi)) in node.value.data().iter().zip(g.data()).enumerate() {
                        if n > 0.0 {
                            for (o, &x) in out.row_mut(i).iter_mut().zip(av.row(i)) {
                                *o = gi * x / n;
                            }
                        }
                    }
                    send(*a, out);
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }
}

fn check_stochastic(t: &Tensor, which: &str) -> Result<()> {
    for i in 0..t.rows() {
        let row = t.row(i);
        let sum: f64 = row.iter().sum();
        let min = row.iter().copied().fold(f64::INFINITY, f64::min);
        if !sum.is_finite() {
            return Err(Error::Numeric(format!("kl_rows: {which} row {i} is not finite")));
        }
        if (sum - 1.0).abs() > STOCHASTIC_TOL || min < -STOCHASTIC_TOL {
            return Err(Error::Domain(format!(
                "kl_rows: {which} row {i} is not a probability vector (sum {sum}, min {min})"
            )));
        }
    }
    Ok(())
}
