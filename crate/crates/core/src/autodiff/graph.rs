use std::fmt;
use std::sync::Arc;

use super::{AutodiffError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    Param,
    Input,
    Constant,
}

/// Pathwise derivative rule for a sampled tensor whose rows are i.i.d. draws
/// parameterised by per-column input vectors.
///
/// `partials` returns, for every input, the elementwise derivative of each
/// sample with respect to that input's column entry. The result has the
/// sample's shape. Partials are treated as constants when differentiated
/// again.
pub trait PathwiseGrad: Send + Sync {
    fn partials(&self, sample: &Tensor, inputs: &[&Tensor]) -> Vec<Tensor>;
}

#[derive(Clone)]
enum Op {
    Leaf(LeafKind),
    Add,
    Sub,
    Mul,
    Neg,
    Scale(f64),
    AddScalar(f64),
    MatMul { ta: bool, tb: bool },
    AddRow,
    SumRows,
    BroadcastRows(usize),
    SumCols,
    BroadcastCols(usize),
    Sum,
    Broadcast(Vec<usize>),
    Relu,
    Step,
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Recip,
    Sqrt,
    Clip { lo: f64, hi: f64 },
    InRange { lo: f64, hi: f64 },
    Reshape(Vec<usize>),
    SliceFlat { offset: usize, shape: Vec<usize> },
    ScatterFlat { offset: usize, shape: Vec<usize> },
    LogSumExpRows,
    Detach,
    Pathwise { sample: Arc<Tensor>, rule: Arc<dyn PathwiseGrad> },
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Leaf(k) => write!(f, "Leaf({k:?})"),
            Op::Add => write!(f, "Add"),
            Op::Sub => write!(f, "Sub"),
            Op::Mul => write!(f, "Mul"),
            Op::Neg => write!(f, "Neg"),
            Op::Scale(c) => write!(f, "Scale({c})"),
            Op::AddScalar(c) => write!(f, "AddScalar({c})"),
            Op::MatMul { ta, tb } => write!(f, "MatMul(ta={ta}, tb={tb})"),
            Op::AddRow => write!(f, "AddRow"),
            Op::SumRows => write!(f, "SumRows"),
            Op::BroadcastRows(r) => write!(f, "BroadcastRows({r})"),
            Op::SumCols => write!(f, "SumCols"),
            Op::BroadcastCols(c) => write!(f, "BroadcastCols({c})"),
            Op::Sum => write!(f, "Sum"),
            Op::Broadcast(s) => write!(f, "Broadcast({s:?})"),
            Op::Relu => write!(f, "Relu"),
            Op::Step => write!(f, "Step"),
            Op::Tanh => write!(f, "Tanh"),
            Op::Sigmoid => write!(f, "Sigmoid"),
            Op::Softplus => write!(f, "Softplus"),
            Op::Exp => write!(f, "Exp"),
            Op::Log => write!(f, "Log"),
            Op::Recip => write!(f, "Recip"),
            Op::Sqrt => write!(f, "Sqrt"),
            Op::Clip { lo, hi } => write!(f, "Clip[{lo}, {hi}]"),
            Op::InRange { lo, hi } => write!(f, "InRange[{lo}, {hi}]"),
            Op::Reshape(s) => write!(f, "Reshape({s:?})"),
            Op::SliceFlat { offset, shape } => write!(f, "SliceFlat(@{offset}, {shape:?})"),
            Op::ScatterFlat { offset, shape } => write!(f, "ScatterFlat(@{offset}, {shape:?})"),
            Op::LogSumExpRows => write!(f, "LogSumExpRows"),
            Op::Detach => write!(f, "Detach"),
            Op::Pathwise { .. } => write!(f, "Pathwise"),
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Recorded computation. Nodes are appended in evaluation order, so every
/// node's inputs precede it.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), AutodiffError> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
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
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize), AutodiffError> {
    if t.shape().len() != 2 {
        return Err(mismatch(op, format!("expected a matrix, got {:?}", t.shape())));
    }
    Ok(t.dims2())
}

fn forward(op: &Op, ins: &[&Tensor]) -> Result<Tensor, AutodiffError> {
    let t = match op {
        Op::Leaf(_) => unreachable!("leaves are not recomputed"),
        Op::Add => {
            same_shape("add", ins[0], ins[1])?;
            ins[0].zip_map(ins[1], |a, b| a + b)
        }
        Op::Sub => {
            same_shape("sub", ins[0], ins[1])?;
            ins[0].zip_map(ins[1], |a, b| a - b)
        }
        Op::Mul => {
            same_shape("mul", ins[0], ins[1])?;
            ins[0].zip_map(ins[1], |a, b| a * b)
        }
        Op::Neg => ins[0].map(|a| -a),
        Op::Scale(c) => ins[0].map(|a| a * c),
        Op::AddScalar(c) => ins[0].map(|a| a + c),
        Op::MatMul { ta, tb } => Tensor::matmul(ins[0], ins[1], *ta, *tb)?,
        Op::AddRow => {
            let (r, c) = require_matrix("add_row", ins[0])?;
            if ins[1].len() != c {
                return Err(mismatch("add_row", format!("{:?} + row {:?}", ins[0].shape(), ins[1].shape())));
            }
            let row = ins[1].data();
            let mut out = ins[0].data().to_vec();
            for chunk in out.chunks_mut(c) {
                for (o, b) in chunk.iter_mut().zip(row) {
                    *o += b;
                }
            }
            Tensor::matrix(r, c, out)?
        }
        Op::SumRows => {
            let (_, c) = require_matrix("sum_rows", ins[0])?;
            let mut out = vec![0.0; c];
            for chunk in ins[0].data().chunks(c) {
                for (o, v) in out.iter_mut().zip(chunk) {
                    *o += v;
                }
            }
            Tensor::vector(out)
        }
        Op::BroadcastRows(r) => {
            let c = ins[0].len();
            let mut out = Vec::with_capacity(r * c);
            for _ in 0..*r {
                out.extend_from_slice(ins[0].data());
            }
            Tensor::matrix(*r, c, out)?
        }
        Op::SumCols => {
            let (_, c) = require_matrix("sum_cols", ins[0])?;
            Tensor::vector(ins[0].data().chunks(c).map(|row| row.iter().sum()).collect())
        }
        Op::BroadcastCols(c) => {
            let r = ins[0].len();
            let mut out = Vec::with_capacity(r * c);
            for &v in ins[0].data() {
                out.extend(std::iter::repeat_n(v, *c));
            }
            Tensor::matrix(r, *c, out)?
        }
        Op::Sum => Tensor::scalar(ins[0].sum()),
        Op::Broadcast(shape) => {
            if !ins[0].is_scalar() {
                return Err(mismatch("broadcast", format!("source {:?} is not a scalar", ins[0].shape())));
            }
            Tensor::filled(shape, ins[0].item())
        }
        Op::Relu => ins[0].map(|a| a.max(0.0)),
        Op::Step => ins[0].map(|a| if a > 0.0 { 1.0 } else { 0.0 }),
        Op::Tanh => ins[0].map(f64::tanh),
        Op::Sigmoid => ins[0].map(sigmoid),
        Op::Softplus => ins[0].map(softplus),
        Op::Exp => ins[0].map(f64::exp),
        Op::Log => ins[0].map(f64::ln),
        Op::Recip => ins[0].map(|a| 1.0 / a),
        Op::Sqrt => ins[0].map(f64::sqrt),
        Op::Clip { lo, hi } => ins[0].map(|a| a.clamp(*lo, *hi)),
        Op::InRange { lo, hi } => ins[0].map(|a| if a > *lo && a < *hi { 1.0 } else { 0.0 }),
        Op::Reshape(shape) => ins[0].reshaped(shape)?,
        Op::SliceFlat { offset, shape } => {
            let n: usize = shape.iter().product();
            if offset + n > ins[0].len() {
                return Err(mismatch(
                    "slice",
                    format!("range {}..{} outside {} values", offset, offset + n, ins[0].len()),
                ));
            }
            Tensor::new(shape.clone(), ins[0].data()[*offset..offset + n].to_vec())?
        }
        Op::ScatterFlat { offset, shape } => {
            let mut out = Tensor::zeros(shape);
            let n = ins[0].len();
            if offset + n > out.len() {
                return Err(mismatch("scatter", format!("range {}..{} outside {shape:?}", offset, offset + n)));
            }
            out.data_mut()[*offset..offset + n].copy_from_slice(ins[0].data());
            out
        }
        Op::LogSumExpRows => {
            let (_, c) = require_matrix("logsumexp_rows", ins[0])?;
            Tensor::vector(
                ins[0]
                    .data()
                    .chunks(c)
                    .map(|row| {
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
                    })
                    .collect(),
            )
        }
        Op::Detach => ins[0].clone(),
        Op::Pathwise { sample, .. } => {
            let (_, c) = sample.dims2();
            for t in ins {
                if t.len() != c {
                    return Err(mismatch("pathwise", format!("parameter {:?} vs sample {:?}", t.shape(), sample.shape())));
                }
            }
            (**sample).clone()
        }
    };
    Ok(t)
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn leaf(&mut self, kind: LeafKind, value: Tensor) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf(kind), inputs: Vec::new(), value });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(LeafKind::Param, value)
    }

    /// Bindable data leaf.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.leaf(LeafKind::Input, value)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(LeafKind::Constant, value)
    }

    fn check(&self, id: NodeId) -> Result<(), AutodiffError> {
        if id.0 >= self.nodes.len() {
            return Err(AutodiffError::UnknownNode(id.0));
        }
        Ok(())
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> Result<NodeId, AutodiffError> {
        for &i in &inputs {
            self.check(i)?;
        }
        let value = {
            let ins: Vec<&Tensor> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            forward(&op, &ins)?
        };
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { node: self.nodes.len(), op: format!("{op:?}") });
        }
        self.nodes.push(Node { op, inputs, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Add, vec![a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Sub, vec![a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Mul, vec![a, b])
    }
    pub fn neg(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Neg, vec![a])
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, AutodiffError> {
        self.push(Op::Scale(c), vec![a])
    }
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId, AutodiffError> {
        self.push(Op::AddScalar(c), vec![a])
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.matmul_t(a, b, false, false)
    }
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId, AutodiffError> {
        self.push(Op::MatMul { ta, tb }, vec![a, b])
    }
    /// `[r, c] + [c]`, the row vector added to every row.
    pub fn add_row(&mut self, m: NodeId, row: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::AddRow, vec![m, row])
    }
    /// `[r, c] → [c]`.
    pub fn sum_rows(&mut self, m: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::SumRows, vec![m])
    }
    pub fn broadcast_rows(&mut self, v: NodeId, rows: usize) -> Result<NodeId, AutodiffError> {
        self.push(Op::BroadcastRows(rows), vec![v])
    }
    /// `[r, c] → [r]`.
    pub fn sum_cols(&mut self, m: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::SumCols, vec![m])
    }
    pub fn broadcast_cols(&mut self, v: NodeId, cols: usize) -> Result<NodeId, AutodiffError> {
        self.push(Op::BroadcastCols(cols), vec![v])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Sum, vec![a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }
    pub fn broadcast(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, AutodiffError> {
        self.push(Op::Broadcast(shape.to_vec()), vec![a])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Relu, vec![a])
    }
    /// Heaviside step; its derivative is zero.
    pub fn step(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Step, vec![a])
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Tanh, vec![a])
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Sigmoid, vec![a])
    }
    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Softplus, vec![a])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Exp, vec![a])
    }
    pub fn ln(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Log, vec![a])
    }
    pub fn recip(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Recip, vec![a])
    }
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Sqrt, vec![a])
    }
    /// Clamp into `[lo, hi]`; the gradient is zero outside the open interval.
    pub fn clip(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId, AutodiffError> {
        self.push(Op::Clip { lo, hi }, vec![a])
    }
    fn in_range(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId, AutodiffError> {
        self.push(Op::InRange { lo, hi }, vec![a])
    }
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, AutodiffError> {
        self.push(Op::Reshape(shape.to_vec()), vec![a])
    }
    /// Contiguous block of the row-major data starting at `offset`, viewed with `shape`.
    pub fn slice_flat(&mut self, a: NodeId, offset: usize, shape: &[usize]) -> Result<NodeId, AutodiffError> {
        self.push(Op::SliceFlat { offset, shape: shape.to_vec() }, vec![a])
    }
    fn scatter_flat(&mut self, a: NodeId, offset: usize, shape: &[usize]) -> Result<NodeId, AutodiffError> {
        self.push(Op::ScatterFlat { offset, shape: shape.to_vec() }, vec![a])
    }
    /// Row-wise `ln Σ exp`, `[r, c] → [r]`.
    pub fn logsumexp_rows(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::LogSumExpRows, vec![a])
    }
    /// Identity on values, blocks gradients.
    pub fn detach(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Detach, vec![a])
    }
    /// Record an externally drawn `[rows, cols]` sample whose column `j`
    /// depends on entry `j` of every parameter vector in `params`.
    pub fn pathwise(
        &mut self,
        sample: Tensor,
        params: &[NodeId],
        rule: Arc<dyn PathwiseGrad>,
    ) -> Result<NodeId, AutodiffError> {
        if sample.shape().len() != 2 {
            return Err(mismatch("pathwise", format!("sample must be a matrix, got {:?}", sample.shape())));
        }
        self.push(Op::Pathwise { sample: Arc::new(sample), rule }, params.to_vec())
    }

    /// Replays the recorded forward pass with some leaves rebound and returns
    /// the value at `output`. The graph itself is not modified.
    pub fn evaluate(&self, output: NodeId, bindings: &[(NodeId, Tensor)]) -> Result<Tensor, AutodiffError> {
        self.check(output)?;
        let mut overrides: Vec<Option<&Tensor>> = vec![None; output.0 + 1];
        for (id, t) in bindings {
            self.check(*id)?;
            let node = &self.nodes[id.0];
            if !matches!(node.op, Op::Leaf(LeafKind::Param | LeafKind::Input)) {
                return Err(AutodiffError::NotALeaf(id.0));
            }
            if t.shape() != node.value.shape() {
                return Err(mismatch("bind", format!("node {} expects {:?}, got {:?}", id.0, node.value.shape(), t.shape())));
            }
            if id.0 <= output.0 {
                overrides[id.0] = Some(t);
            }
        }
        let mut values: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        for idx in 0..=output.0 {
            let node = &self.nodes[idx];
            let v = match &node.op {
                Op::Leaf(_) => overrides[idx].cloned().unwrap_or_else(|| node.value.clone()),
                op => {
                    let ins: Vec<&Tensor> = node.inputs.iter().map(|i| values[i.0].as_ref().expect("topological order")).collect();
                    let v = forward(op, &ins)?;
                    if !v.all_finite() {
                        return Err(AutodiffError::NonFinite { node: idx, op: format!("{op:?}") });
                    }
                    v
                }
            };
            values[idx] = Some(v);
        }
        Ok(values.pop().flatten().expect("output evaluated"))
    }

    /// Reverse-mode gradients of the scalar `output` with respect to `wrt`.
    ///
    /// The backward pass is recorded on this graph, so the returned gradient
    /// nodes can be differentiated again. Nodes in `wrt` that do not reach
    /// `output` get an all-zero constant.
    pub fn grad(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>, AutodiffError> {
        self.check(output)?;
        for &w in wrt {
            self.check(w)?;
        }
        if !self.value(output).is_scalar() {
            return Err(AutodiffError::NonScalarOutput(output.0));
        }
        let n = output.0 + 1;
        let mut needs = vec![false; n];
        for &w in wrt {
            if w.0 < n {
                needs[w.0] = true;
            }
        }
        for idx in 0..n {
            if !needs[idx] {
                let node = &self.nodes[idx];
                let blocks = matches!(node.op, Op::Detach | Op::Step | Op::InRange { .. });
                if !blocks && node.inputs.iter().any(|i| needs[i.0]) {
                    needs[idx] = true;
                }
            }
        }

        let mut adj: Vec<Option<NodeId>> = vec![None; n];
        let seed_shape = self.value(output).shape().to_vec();
        adj[output.0] = Some(self.constant(Tensor::filled(&seed_shape, 1.0)));

        for idx in (0..n).rev() {
            if !needs[idx] {
                continue;
            }
            let Some(g) = adj[idx] else { continue };
            let (op, inputs) = {
                let node = &self.nodes[idx];
                (node.op.clone(), node.inputs.clone())
            };
            let contribs = self.backprop(NodeId(idx), &op, &inputs, g, &needs)?;
            for (input, c) in contribs {
                adj[input.0] = Some(match adj[input.0] {
                    Some(prev) => self.add(prev, c)?,
                    None => c,
                });
            }
        }

        wrt.iter()
            .map(|&w| match adj.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let shape = self.value(w).shape().to_vec();
                    Ok(self.constant(Tensor::zeros(&shape)))
                }
            })
            .collect()
    }

    /// Convenience wrapper returning gradient values.
    pub fn grad_values(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>, AutodiffError> {
        let ids = self.grad(output, wrt)?;
        Ok(ids.into_iter().map(|id| self.value(id).clone()).collect())
    }

    fn backprop(
        &mut self,
        node: NodeId,
        op: &Op,
        inputs: &[NodeId],
        g: NodeId,
        needs: &[bool],
    ) -> Result<Vec<(NodeId, NodeId)>, AutodiffError> {
        let want = |i: usize| needs[inputs[i].0];
        let mut out = Vec::with_capacity(inputs.len());
        match op {
            Op::Leaf(_) | Op::Detach | Op::Step | Op::InRange { .. } => {}
            Op::Add => {
                for i in 0..2 {
                    if want(i) {
                        out.push((inputs[i], g));
                    }
                }
            }
            Op::Sub => {
                if want(0) {
                    out.push((inputs[0], g));
                }
                if want(1) {
                    out.push((inputs[1], self.neg(g)?));
                }
            }
            Op::Mul => {
                if want(0) {
                    out.push((inputs[0], self.mul(g, inputs[1])?));
                }
                if want(1) {
                    out.push((inputs[1], self.mul(g, inputs[0])?));
                }
            }
            Op::Neg => out.push((inputs[0], self.neg(g)?)),
            Op::Scale(c) => out.push((inputs[0], self.scale(g, *c)?)),
            Op::AddScalar(_) => out.push((inputs[0], g)),
            Op::MatMul { ta, tb } => {
                let (a, b) = (inputs[0], inputs[1]);
                if want(0) {
                    let da = if *ta { self.matmul_t(b, g, *tb, true)? } else { self.matmul_t(g, b, false, !tb)? };
                    out.push((a, da));
                }
                if want(1) {
                    let db = if *tb { self.matmul_t(g, a, true, *ta)? } else { self.matmul_t(a, g, !ta, false)? };
                    out.push((b, db));
                }
            }
            Op::AddRow => {
                if want(0) {
                    out.push((inputs[0], g));
                }
                if want(1) {
                    let s = self.sum_rows(g)?;
                    let target = self.value(inputs[1]).shape().to_vec();
                    let s = if self.value(s).shape() != target.as_slice() { self.reshape(s, &target)? } else { s };
                    out.push((inputs[1], s));
                }
            }
            Op::SumRows => {
                let rows = self.value(inputs[0]).dims2().0;
                out.push((inputs[0], self.broadcast_rows(g, rows)?));
            }
            Op::BroadcastRows(_) => {
                let s = self.sum_rows(g)?;
                let target = self.value(inputs[0]).shape().to_vec();
                let s = if self.value(s).shape() != target.as_slice() { self.reshape(s, &target)? } else { s };
                out.push((inputs[0], s));
            }
            Op::SumCols => {
                let cols = self.value(inputs[0]).dims2().1;
                out.push((inputs[0], self.broadcast_cols(g, cols)?));
            }
            Op::BroadcastCols(_) => {
                let s = self.sum_cols(g)?;
                let target = self.value(inputs[0]).shape().to_vec();
                let s = if self.value(s).shape() != target.as_slice() { self.reshape(s, &target)? } else { s };
                out.push((inputs[0], s));
            }
            Op::Sum => {
                let shape = self.value(inputs[0]).shape().to_vec();
                out.push((inputs[0], self.broadcast(g, &shape)?));
            }
            Op::Broadcast(_) => {
                let s = self.sum(g)?;
                let target = self.value(inputs[0]).shape().to_vec();
                let s = if self.value(s).shape() != target.as_slice() { self.reshape(s, &target)? } else { s };
                out.push((inputs[0], s));
            }
            Op::Relu => {
                let mask = self.step(inputs[0])?;
                out.push((inputs[0], self.mul(g, mask)?));
            }
            Op::Tanh => {
                let y2 = self.mul(node, node)?;
                let neg = self.neg(y2)?;
                let d = self.add_scalar(neg, 1.0)?;
                out.push((inputs[0], self.mul(g, d)?));
            }
            Op::Sigmoid => {
                let neg = self.neg(node)?;
                let one_minus = self.add_scalar(neg, 1.0)?;
                let d = self.mul(node, one_minus)?;
                out.push((inputs[0], self.mul(g, d)?));
            }
            Op::Softplus => {
                let s = self.sigmoid(inputs[0])?;
                out.push((inputs[0], self.mul(g, s)?));
            }
            Op::Exp => out.push((inputs[0], self.mul(g, node)?)),
            Op::Log => {
                let r = self.recip(inputs[0])?;
                out.push((inputs[0], self.mul(g, r)?));
            }
            Op::Recip => {
                let y2 = self.mul(node, node)?;
                let gy = self.mul(g, y2)?;
                out.push((inputs[0], self.neg(gy)?));
            }
            Op::Sqrt => {
                let r = self.recip(node)?;
                let half = self.scale(r, 0.5)?;
                out.push((inputs[0], self.mul(g, half)?));
            }
            Op::Clip { lo, hi } => {
                let mask = self.in_range(inputs[0], *lo, *hi)?;
                out.push((inputs[0], self.mul(g, mask)?));
            }
            Op::Reshape(_) => {
                let shape = self.value(inputs[0]).shape().to_vec();
                out.push((inputs[0], self.reshape(g, &shape)?));
            }
            Op::SliceFlat { offset, .. } => {
                let shape = self.value(inputs[0]).shape().to_vec();
                out.push((inputs[0], self.scatter_flat(g, *offset, &shape)?));
            }
            Op::ScatterFlat { offset, .. } => {
                let shape = self.value(inputs[0]).shape().to_vec();
                out.push((inputs[0], self.slice_flat(g, *offset, &shape)?));
            }
            Op::LogSumExpRows => {
                let x = inputs[0];
                let cols = self.value(x).dims2().1;
                let yb = self.broadcast_cols(node, cols)?;
                let centered = self.sub(x, yb)?;
                let softmax = self.exp(centered)?;
                let gb = self.broadcast_cols(g, cols)?;
                out.push((x, self.mul(softmax, gb)?));
            }
            Op::Pathwise { sample, rule } => {
                let partials = {
                    let ins: Vec<&Tensor> = inputs.iter().map(|i| self.value(*i)).collect();
                    rule.partials(sample, &ins)
                };
                for (i, p) in partials.into_iter().enumerate() {
                    if !want(i) {
                        continue;
                    }
                    let pc = self.constant(p);
                    let prod = self.mul(g, pc)?;
                    let s = self.sum_rows(prod)?;
                    let target = self.value(inputs[i]).shape().to_vec();
                    let s = if self.value(s).shape() != target.as_slice() { self.reshape(s, &target)? } else { s };
                    out.push((inputs[i], s));
                }
            }
        }
        Ok(out)
    }
}
