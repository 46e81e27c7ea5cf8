//! Static computation graph with a reverse-mode tape.
//!
//! Nodes are appended in construction order, which is a valid topological
//! order by construction: an op can only reference nodes that already exist.
//! `forward` evaluates every node in that order and records the values;
//! `backward` walks the same list in exact reverse.

use std::collections::{BTreeMap, HashMap};

use super::params::ParamStore;
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op {
    Input {
        name: String,
        shape: Vec<Option<usize>>,
        index: bool,
    },
    Param {
        name: String,
    },
    Constant(Tensor),
    Affine {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Tanh(NodeId),
    Relu(NodeId),
    Log(NodeId),
    Softmax(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: NodeId,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Concat(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Sum(NodeId),
    Mean(NodeId),
    SquaredError(NodeId, NodeId),
    Gather {
        table: NodeId,
        index: NodeId,
    },
    SegmentMean {
        x: NodeId,
        segments: NodeId,
    },
    GradReverse {
        x: NodeId,
        alpha: f64,
    },
    Detach(NodeId),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::Constant(_) => "constant",
            Op::Affine { .. } => "affine",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Log(_) => "log",
            Op::Softmax(_) => "softmax",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Concat(_) => "concat",
            Op::ConcatRows(_) => "concat_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SquaredError(..) => "squared_error",
            Op::Gather { .. } => "gather",
            Op::SegmentMean { .. } => "segment_mean",
            Op::GradReverse { .. } => "grad_reverse",
            Op::Detach(_) => "detach",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    label: Option<String>,
}

/// A computation graph over dense tensors.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    outputs: Vec<(String, NodeId)>,
    tape: Option<Vec<Tensor>>,
}

/// Input gradients returned by [`Graph::backward`], keyed by input name.
pub type InputGrads = BTreeMap<String, Tensor>;

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

    fn push(&mut self, op: Op) -> NodeId {
        let refs: Vec<NodeId> = match &op {
            Op::Input { .. } | Op::Param { .. } | Op::Constant(_) => vec![],
            Op::Affine { x, w, b } => [Some(*x), Some(*w), *b].into_iter().flatten().collect(),
            Op::Tanh(a) | Op::Relu(a) | Op::Log(a) | Op::Softmax(a) | Op::Scale(a, _) => vec![*a],
            Op::Sum(a) | Op::Mean(a) | Op::Detach(a) => vec![*a],
            Op::GradReverse { x, .. } => vec![*x],
            Op::SoftmaxCrossEntropy { logits, labels } => vec![*logits, *labels],
            Op::Add(a, b) | Op::Mul(a, b) | Op::SquaredError(a, b) => vec![*a, *b],
            Op::Concat(v) | Op::ConcatRows(v) => v.clone(),
            Op::Gather { table, index } => vec![*table, *index],
            Op::SegmentMean { x, segments } => vec![*x, *segments],
        };
        let id = self.nodes.len();
        assert!(
            refs.iter().all(|&r| r < id),
            "graph nodes must reference earlier nodes"
        );
        self.nodes.push(Node { op, label: None });
        self.tape = None;
        id
    }

    /// Attaches a human-readable label used in error messages.
    pub fn label(&mut self, id: NodeId, label: impl Into<String>) -> NodeId {
        self.nodes[id].label = Some(label.into());
        id
    }

    fn describe(&self, id: NodeId) -> String {
        let n = &self.nodes[id];
        match (&n.label, &n.op) {
            (Some(l), op) => format!("node #{id} `{l}` ({})", op.kind()),
            (None, Op::Input { name, .. }) => format!("node #{id} input `{name}`"),
            (None, Op::Param { name }) => format!("node #{id} param `{name}`"),
            (None, op) => format!("node #{id} ({})", op.kind()),
        }
    }

    /// A real-valued input. `None` entries in `shape` accept any extent.
    pub fn input(&mut self, name: &str, shape: &[Option<usize>]) -> NodeId {
        self.push(Op::Input {
            name: name.into(),
            shape: shape.to_vec(),
            index: false,
        })
    }

    /// A matrix input with any number of rows and a fixed number of columns.
    pub fn input_rows(&mut self, name: &str, cols: usize) -> NodeId {
        self.input(name, &[None, Some(cols)])
    }

    /// A one-dimensional input of non-negative integers (labels, ids).
    /// Receives no gradient.
    pub fn index_input(&mut self, name: &str) -> NodeId {
        self.push(Op::Input {
            name: name.into(),
            shape: vec![None],
            index: true,
        })
    }

    pub fn param(&mut self, name: &str) -> NodeId {
        self.push(Op::Param { name: name.into() })
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Constant(t))
    }

    /// `x W + b` with `x: [n, i]`, `W: [i, o]`, `b: [o]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        self.push(Op::Affine { x, w, b })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Tanh(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu(x))
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Log(x))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softmax(x))
    }

    /// Mean over rows of `-log softmax(logits)[label]`, fused for stability.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: NodeId) -> NodeId {
        self.push(Op::SoftmaxCrossEntropy { logits, labels })
    }

    /// Elementwise sum; `b` may also be a row vector or a scalar broadcast over `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    /// Elementwise product with the same broadcasting rules as [`Graph::add`].
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(x, c))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::Concat(parts.to_vec()))
    }

    /// Row-wise concatenation of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::ConcatRows(parts.to_vec()))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean(x))
    }

    /// Mean over all elements of `(a - b)^2`.
    pub fn squared_error(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::SquaredError(a, b))
    }

    /// Row lookup: `out[i] = table[index[i]]`.
    pub fn gather(&mut self, table: NodeId, index: NodeId) -> NodeId {
        self.push(Op::Gather { table, index })
    }

    /// Averages the rows of `x` sharing a segment id; output row `s` is the
    /// mean of segment `s`. Segment ids must cover `0..=max` without gaps.
    pub fn segment_mean(&mut self, x: NodeId, segments: NodeId) -> NodeId {
        self.push(Op::SegmentMean { x, segments })
    }

    /// Identity on the forward pass; multiplies the incoming gradient by
    /// `-alpha` on the backward pass.
    pub fn grad_reverse(&mut self, x: NodeId, alpha: f64) -> Result<NodeId> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "gradient reversal requires alpha > 0, got {alpha}"
            )));
        }
        Ok(self.push(Op::GradReverse { x, alpha }))
    }

    /// Identity on the forward pass; blocks gradients.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Detach(x))
    }

    pub fn set_output(&mut self, name: &str, id: NodeId) {
        self.outputs.retain(|(n, _)| n != name);
        self.outputs.push((name.into(), id));
    }

    pub fn output_id(&self, name: &str) -> Option<NodeId> {
        self.outputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
    }

    /// Names of the differentiable (non-index) inputs.
    pub fn value_inputs(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Input {
                    name, index: false, ..
                } => Some(name.clone()),
                _ => None,
            })
            .collect()
    }

    /// Names of all parameters referenced by the graph.
    pub fn param_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Param { name } => Some(name.clone()),
                _ => None,
            })
            .collect();
        v.sort();
        v.dedup();
        v
    }

    /// Evaluates the graph and records every intermediate value for a later
    /// [`Graph::backward`]. Returns the named outputs.
    pub fn forward(
        &mut self,
        store: &ParamStore,
        inputs: &HashMap<String, Tensor>,
    ) -> Result<BTreeMap<String, Tensor>> {
        self.tape = None;
        let values = self.run(store, inputs)?;
        let out = self.collect_outputs(&values);
        self.tape = Some(values);
        Ok(out)
    }

    /// Evaluates the graph without recording a tape.
    pub fn evaluate(
        &self,
        store: &ParamStore,
        inputs: &HashMap<String, Tensor>,
    ) -> Result<BTreeMap<String, Tensor>> {
        let values = self.run(store, inputs)?;
        Ok(self.collect_outputs(&values))
    }

    /// Value of any node from the last `forward`.
    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        self.tape.as_ref().map(|t| &t[id]).ok_or(Error::NoForward)
    }

    fn collect_outputs(&self, values: &[Tensor]) -> BTreeMap<String, Tensor> {
        self.outputs
            .iter()
            .map(|(n, id)| (n.clone(), values[*id].clone()))
            .collect()
    }

    fn shape_err(&self, id: NodeId, detail: impl Into<String>) -> Error {
        Error::Shape {
            node: self.describe(id),
            detail: detail.into(),
        }
    }

    fn run(&self, store: &ParamStore, inputs: &HashMap<String, Tensor>) -> Result<Vec<Tensor>> {
        let mut vals: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let v = self.eval_node(id, &node.op, &vals, store, inputs)?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    node: self.describe(id),
                });
            }
            vals.push(v);
        }
        Ok(vals)
    }

    fn eval_node(
        &self,
        id: NodeId,
        op: &Op,
        v: &[Tensor],
        store: &ParamStore,
        inputs: &HashMap<String, Tensor>,
    ) -> Result<Tensor> {
        Ok(match op {
            Op::Input { name, shape, index } => {
                let t = inputs
                    .get(name)
                    .ok_or_else(|| Error::MissingInput(name.clone()))?;
                let ok = t.shape().len() == shape.len()
                    && t.shape()
                        .iter()
                        .zip(shape)
                        .all(|(&a, b)| b.is_none_or(|b| a == b));
                if !ok {
                    return Err(
                        self.shape_err(id, format!("expected {shape:?}, got {:?}", t.shape()))
                    );
                }
                if *index && t.data().iter().any(|&x| x < 0.0 || x.fract() != 0.0) {
                    return Err(self.shape_err(id, "index input must hold non-negative integers"));
                }
                t.clone()
            }
            Op::Param { name } => store.get(name)?.clone(),
            Op::Constant(t) => t.clone(),
            Op::Affine { x, w, b } => {
                let (x, w) = (&v[*x], &v[*w]);
                if x.shape().len() != 2 || w.shape().len() != 2 || x.shape()[1] != w.shape()[0] {
                    return Err(
                        self.shape_err(id, format!("x {:?} · W {:?}", x.shape(), w.shape()))
                    );
                }
                let (n, i, o) = (x.shape()[0], x.shape()[1], w.shape()[1]);
                let mut out = vec![0.0; n * o];
                if let Some(b) = b {
                    let b = &v[*b];
                    if b.shape() != [o] {
                        return Err(
                            self.shape_err(id, format!("bias {:?} for width {o}", b.shape()))
                        );
                    }
                    for row in out.chunks_mut(o) {
                        row.copy_from_slice(b.data());
                    }
                    gemm(n, i, o, x.data(), false, w.data(), false, 1.0, &mut out);
                } else {
                    gemm(n, i, o, x.data(), false, w.data(), false, 0.0, &mut out);
                }
                Tensor::matrix(n, o, out)?
            }
            Op::Tanh(a) => v[*a].map(f64::tanh),
            Op::Relu(a) => v[*a].map(|x| x.max(0.0)),
            Op::Log(a) => v[*a].map(f64::ln),
            Op::Softmax(a) => {
                let x = &v[*a];
                let mut out = x.clone();
                let c = x.ncols();
                for row in out.data_mut().chunks_mut(c) {
                    softmax_in_place(row);
                }
                out
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let (x, y) = (&v[*logits], &v[*labels]);
                if x.nrows() != y.len() {
                    return Err(
                        self.shape_err(id, format!("{} rows vs {} labels", x.nrows(), y.len()))
                    );
                }
                let c = x.ncols();
                let mut total = 0.0;
                for (row, &lab) in x.rows().zip(y.data()) {
                    let lab = lab as usize;
                    if lab >= c {
                        return Err(self.shape_err(id, format!("label {lab} out of {c} classes")));
                    }
                    total += log_sum_exp(row) - row[lab];
                }
                Tensor::scalar(total / x.nrows() as f64)
            }
            Op::Add(a, b) => self.broadcast(id, &v[*a], &v[*b], |p, q| p + q)?,
            Op::Mul(a, b) => self.broadcast(id, &v[*a], &v[*b], |p, q| p * q)?,
            Op::Scale(a, c) => v[*a].scale(*c),
            Op::Concat(parts) => {
                let n = v[parts[0]].nrows();
                if parts
                    .iter()
                    .any(|&p| v[p].nrows() != n || v[p].shape().len() != 2)
                {
                    return Err(self.shape_err(id, "concat parts must be matrices with equal rows"));
                }
                let cols: usize = parts.iter().map(|&p| v[p].ncols()).sum();
                let mut out = Vec::with_capacity(n * cols);
                for r in 0..n {
                    for &p in parts {
                        out.extend_from_slice(v[p].row(r));
                    }
                }
                Tensor::matrix(n, cols, out)?
            }
            Op::ConcatRows(parts) => {
                let refs: Vec<&Tensor> = parts.iter().map(|&p| &v[p]).collect();
                Tensor::vstack(&refs).map_err(|_| self.shape_err(id, "column mismatch"))?
            }
            Op::Sum(a) => Tensor::scalar(v[*a].sum()),
            Op::Mean(a) => Tensor::scalar(v[*a].sum() / v[*a].len() as f64),
            Op::SquaredError(a, b) => {
                let (a, b) = (&v[*a], &v[*b]);
                if a.shape() != b.shape() {
                    return Err(self.shape_err(id, format!("{:?} vs {:?}", a.shape(), b.shape())));
                }
                let s: f64 = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum();
                Tensor::scalar(s / a.len() as f64)
            }
            Op::Gather { table, index } => {
                let (t, ix) = (&v[*table], &v[*index]);
                let (m, c) = (t.nrows(), t.ncols());
                let mut out = Vec::with_capacity(ix.len() * c);
                for &i in ix.data() {
                    let i = i as usize;
                    if i >= m {
                        return Err(self.shape_err(id, format!("index {i} out of {m} rows")));
                    }
                    out.extend_from_slice(t.row(i));
                }
                Tensor::matrix(ix.len(), c, out)?
            }
            Op::SegmentMean { x, segments } => {
                let (x, seg) = (&v[*x], &v[*segments]);
                if x.nrows() != seg.len() {
                    return Err(self.shape_err(
                        id,
                        format!("{} rows vs {} segment ids", x.nrows(), seg.len()),
                    ));
                }
                let counts = segment_counts(seg).map_err(|d| self.shape_err(id, d))?;
                let c = x.ncols();
                let mut members: Vec<Vec<usize>> =
                    counts.iter().map(|&n| Vec::with_capacity(n)).collect();
                for (r, &s) in seg.data().iter().enumerate() {
                    members[s as usize].push(r);
                }
                // Summing each column in sorted order makes the result
                // independent of row order, bit for bit.
                let mut out = vec![0.0; counts.len() * c];
                let mut col = Vec::new();
                for (s, rows) in members.iter().enumerate() {
                    for j in 0..c {
                        col.clear();
                        col.extend(rows.iter().map(|&r| x.row(r)[j]));
                        col.sort_by(f64::total_cmp);
                        out[s * c + j] = col.iter().sum::<f64>() / rows.len() as f64;
                    }
                }
                Tensor::matrix(counts.len(), c, out)?
            }
            Op::GradReverse { x, .. } | Op::Detach(x) => v[*x].clone(),
        })
    }

    fn broadcast(
        &self,
        id: NodeId,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        match broadcast_kind(a, b) {
            Some(Broadcast::Same) => a.zip(b, f),
            Some(Broadcast::Row) => {
                let c = b.len();
                let mut out = a.clone();
                for row in out.data_mut().chunks_mut(c) {
                    for (o, q) in row.iter_mut().zip(b.data()) {
                        *o = f(*o, *q);
                    }
                }
                Ok(out)
            }
            Some(Broadcast::Scalar) => {
                let q = b.item();
                Ok(a.map(|p| f(p, q)))
            }
            None => Err(self.shape_err(id, format!("{:?} vs {:?}", a.shape(), b.shape()))),
        }
    }

    /// Reverse pass from node `of`, accumulating parameter gradients into
    /// `store` and returning gradients with respect to the value inputs.
    ///
    /// `output_grad` may be omitted only for scalar outputs (seeded with 1).
    pub fn backward(
        &self,
        store: &mut ParamStore,
        of: NodeId,
        output_grad: Option<&Tensor>,
    ) -> Result<InputGrads> {
        let vals = self.tape.as_ref().ok_or(Error::NoForward)?;
        if of >= vals.len() {
            return Err(Error::InvalidArgument(format!("no node #{of}")));
        }
        let seed = match output_grad {
            Some(g) => {
                if g.shape() != vals[of].shape() {
                    return Err(self.shape_err(
                        of,
                        format!(
                            "output grad {:?} vs value {:?}",
                            g.shape(),
                            vals[of].shape()
                        ),
                    ));
                }
                g.clone()
            }
            None if vals[of].is_scalar() => Tensor::new(vals[of].shape().to_vec(), vec![1.0])?,
            None => {
                return Err(Error::InvalidArgument(format!(
                    "{} is not scalar; an explicit output gradient is required",
                    self.describe(of)
                )))
            }
        };
        let mut grads: Vec<Option<Tensor>> = vec![None; of + 1];
        grads[of] = Some(seed);
        let mut input_grads = InputGrads::new();

        for id in (0..=of).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Input { name, index, .. } => {
                    if !index {
                        match input_grads.get_mut(name) {
                            Some(acc) => *acc = acc.add(&g)?,
                            None => {
                                input_grads.insert(name.clone(), g);
                            }
                        }
                    }
                }
                Op::Param { name } => store.accumulate_grad(name, &g)?,
                Op::Constant(_) | Op::Detach(_) => {}
                Op::Affine { x, w, b } => {
                    let (xv, wv) = (&vals[*x], &vals[*w]);
                    let (n, i, o) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
                    let mut dx = vec![0.0; n * i];
                    gemm(n, o, i, g.data(), false, wv.data(), true, 0.0, &mut dx);
                    let mut dw = vec![0.0; i * o];
                    gemm(i, n, o, xv.data(), true, g.data(), false, 0.0, &mut dw);
                    accumulate(&mut grads, *x, Tensor::matrix(n, i, dx)?)?;
                    accumulate(&mut grads, *w, Tensor::matrix(i, o, dw)?)?;
                    if let Some(b) = b {
                        let mut db = vec![0.0; o];
                        for row in g.rows() {
                            db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                        }
                        accumulate(&mut grads, *b, Tensor::vector(db))?;
                    }
                }
                Op::Tanh(a) => {
                    let y = &vals[id];
                    accumulate(&mut grads, *a, g.zip(y, |g, y| g * (1.0 - y * y))?)?;
                }
                Op::Relu(a) => {
                    let x = &vals[*a];
                    accumulate(
                        &mut grads,
                        *a,
                        g.zip(x, |g, x| if x > 0.0 { g } else { 0.0 })?,
                    )?;
                }
                Op::Log(a) => {
                    let x = &vals[*a];
                    accumulate(&mut grads, *a, g.zip(x, |g, x| g / x)?)?;
                }
                Op::Softmax(a) => {
                    let y = &vals[id];
                    let c = y.ncols();
                    let mut dx = g.clone();
                    for (drow, yrow) in dx.data_mut().chunks_mut(c).zip(y.rows()) {
                        let dot: f64 = drow.iter().zip(yrow).map(|(d, y)| d * y).sum();
                        drow.iter_mut()
                            .zip(yrow)
                            .for_each(|(d, y)| *d = y * (*d - dot));
                    }
                    accumulate(&mut grads, *a, dx)?;
                }
                Op::SoftmaxCrossEntropy { logits, labels } => {
                    let x = &vals[*logits];
                    let n = x.nrows() as f64;
                    let c = x.ncols();
                    let scale = g.item() / n;
                    let mut dx = x.clone();
                    for (row, &lab) in dx.data_mut().chunks_mut(c).zip(vals[*labels].data()) {
                        softmax_in_place(row);
                        row[lab as usize] -= 1.0;
                        row.iter_mut().for_each(|r| *r *= scale);
                    }
                    accumulate(&mut grads, *logits, dx)?;
                }
                Op::Add(a, b) => {
                    let bg = reduce_broadcast(&g, &vals[*a], &vals[*b]);
                    accumulate(&mut grads, *a, g)?;
                    accumulate(&mut grads, *b, bg)?;
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&vals[*a], &vals[*b]);
                    let da = self.broadcast(id, &g, bv, |g, q| g * q)?;
                    let prod = g.zip(av, |g, p| g * p)?;
                    let db = reduce_broadcast(&prod, av, bv);
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.scale(*c))?,
                Op::Concat(parts) => {
                    let n = g.nrows();
                    let mut off = 0;
                    for &p in parts {
                        let c = vals[p].ncols();
                        let mut d = Vec::with_capacity(n * c);
                        for r in 0..n {
                            d.extend_from_slice(&g.row(r)[off..off + c]);
                        }
                        off += c;
                        accumulate(&mut grads, p, Tensor::new(vals[p].shape().to_vec(), d)?)?;
                    }
                }
                Op::ConcatRows(parts) => {
                    let c = g.ncols();
                    let mut off = 0;
                    for &p in parts {
                        let len = vals[p].len();
                        let d = g.data()[off..off + len].to_vec();
                        debug_assert_eq!(len % c, 0);
                        off += len;
                        accumulate(&mut grads, p, Tensor::new(vals[p].shape().to_vec(), d)?)?;
                    }
                }
                Op::Sum(a) => {
                    let s = g.item();
                    accumulate(&mut grads, *a, vals[*a].map(|_| s))?;
                }
                Op::Mean(a) => {
                    let s = g.item() / vals[*a].len() as f64;
                    accumulate(&mut grads, *a, vals[*a].map(|_| s))?;
                }
                Op::SquaredError(a, b) => {
                    let (av, bv) = (&vals[*a], &vals[*b]);
                    let s = 2.0 * g.item() / av.len() as f64;
                    let da = av.zip(bv, |p, q| s * (p - q))?;
                    accumulate(&mut grads, *b, da.scale(-1.0))?;
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Gather { table, index } => {
                    let t = &vals[*table];
                    let c = t.ncols();
                    let mut dt = Tensor::zeros(t.shape());
                    for (r, &i) in vals[*index].data().iter().enumerate() {
                        let i = i as usize;
                        dt.data_mut()[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(g.row(r))
                            .for_each(|(d, q)| *d += q);
                    }
                    accumulate(&mut grads, *table, dt)?;
                }
                Op::SegmentMean { x, segments } => {
                    let seg = &vals[*segments];
                    let counts = segment_counts(seg).map_err(|d| self.shape_err(id, d))?;
                    let xv = &vals[*x];
                    let c = xv.ncols();
                    let mut dx = Tensor::zeros(xv.shape());
                    for (r, &s) in seg.data().iter().enumerate() {
                        let s = s as usize;
                        let inv = 1.0 / counts[s] as f64;
                        dx.data_mut()[r * c..(r + 1) * c]
                            .iter_mut()
                            .zip(g.row(s))
                            .for_each(|(d, q)| *d = q * inv);
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::GradReverse { x, alpha } => accumulate(&mut grads, *x, g.scale(-alpha))?,
            }
        }
        Ok(input_grads)
    }
}

enum Broadcast {
    Same,
    Row,
    Scalar,
}

fn broadcast_kind(a: &Tensor, b: &Tensor) -> Option<Broadcast> {
    if a.shape() == b.shape() {
        Some(Broadcast::Same)
    } else if b.shape().len() == 1 && a.shape().len() == 2 && a.shape()[1] == b.shape()[0] {
        Some(Broadcast::Row)
    } else if b.shape().is_empty() {
        Some(Broadcast::Scalar)
    } else {
        None
    }
}

/// Sums a gradient of `a`'s shape down to `b`'s shape.
fn reduce_broadcast(g: &Tensor, a: &Tensor, b: &Tensor) -> Tensor {
    match broadcast_kind(a, b) {
        Some(Broadcast::Same) | None => g.clone(),
        Some(Broadcast::Row) => {
            let mut out = vec![0.0; b.len()];
            for row in g.rows() {
                out.iter_mut().zip(row).for_each(|(o, r)| *o += r);
            }
            Tensor::vector(out)
        }
        Some(Broadcast::Scalar) => Tensor::scalar(g.sum()),
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

fn segment_counts(seg: &Tensor) -> std::result::Result<Vec<usize>, String> {
    let n_seg = seg
        .data()
        .iter()
        .fold(0usize, |m, &s| m.max(s as usize + 1));
    let mut counts = vec![0usize; n_seg];
    for &s in seg.data() {
        counts[s as usize] += 1;
    }
    if counts.contains(&0) {
        return Err("segment ids must be contiguous from 0".into());
    }
    Ok(counts)
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for r in row.iter_mut() {
        *r = (*r - m).exp();
        s += *r;
    }
    row.iter_mut().for_each(|r| *r /= s);
}
