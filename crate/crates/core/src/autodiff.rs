//! Define-by-run reverse-mode automatic differentiation over dense 2-D `f64`
//! tensors.
//!
//! Every operation is evaluated eagerly when it is added to a [`Graph`], so
//! building the graph *is* the forward pass. Intermediates are retained and
//! [`Graph::backward`] replays the record in reverse, visiting each node once.
//!
//! Scalars are `1×1` tensors. Non-finite values are rejected at the node that
//! produced them.
//!
//! A graph can additionally record the values of every non-differentiable
//! decision it makes (stop-gradient snapshots, straight-through offsets,
//! quantizer indices, sampled noise) into a [`Trace`]. Replaying that trace in
//! a second graph freezes those decisions, which is what a finite-difference
//! check needs in order to probe the same surrogate function that the
//! analytic gradient differentiates.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

/// Dense row-major matrix of 64-bit floats. Scalars are `1×1`.
pub type Tensor = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },
    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("loss node {node} is not scalar (shape {shape:?})")]
    NotScalar { node: usize, shape: [usize; 2] },
    #[error("node {0} does not belong to this graph")]
    UnknownNode(usize),
    #[error("unknown input name {0:?}")]
    UnknownInput(String),
    #[error("index {index} out of range for {rows} rows in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        rows: usize,
    },
    #[error("replay trace mismatch at entry {0}")]
    TraceMismatch(usize),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;

fn shape_of(t: &Tensor) -> [usize; 2] {
    [t.nrows(), t.ncols()]
}

/// A recorded non-differentiable decision.
#[derive(Debug, Clone, PartialEq)]
pub enum TraceEntry {
    Values(Tensor),
    Indices(Vec<usize>),
}

/// Ordered record of the decisions taken while building a graph.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    entries: Vec<TraceEntry>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

enum TraceMode {
    Off,
    Record(Vec<TraceEntry>),
    Replay { trace: Arc<Trace>, cursor: usize },
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(String),
    MatMul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Softmax(NodeId),
    CrossEntropy { logits: NodeId, targets: Vec<usize> },
    Mae(NodeId, NodeId),
    Mse(NodeId, NodeId),
    MeanSqDist(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    GatherRows(NodeId, Vec<Option<usize>>),
    StopGradient,
    StraightThrough(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Softmax(_) => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Mae(..) => "mae",
            Op::Mse(..) => "mse",
            Op::MeanSqDist(..) => "mean_sq_dist",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::StopGradient => "stop_gradient",
            Op::StraightThrough(..) => "straight_through",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    // op-specific saved state (softmax probabilities for cross-entropy)
    saved: Option<Tensor>,
}

/// Computation graph. Confined to one thread at a time; separate graphs are
/// independent.
pub struct Graph {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, NodeId>,
    trace: TraceMode,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            inputs: BTreeMap::new(),
            trace: TraceMode::Off,
        }
    }

    /// A graph that records every non-differentiable decision.
    pub fn recording() -> Self {
        Graph {
            trace: TraceMode::Record(Vec::new()),
            ..Self::new()
        }
    }

    /// A graph that replays decisions from a previously recorded trace.
    pub fn replaying(trace: Arc<Trace>) -> Self {
        Graph {
            trace: TraceMode::Replay { trace, cursor: 0 },
            ..Self::new()
        }
    }

    /// Consumes a recording graph and returns its trace.
    pub fn into_trace(self) -> Option<Trace> {
        match self.trace {
            TraceMode::Record(entries) => Some(Trace { entries }),
            _ => None,
        }
    }

    pub fn is_replaying(&self) -> bool {
        matches!(self.trace, TraceMode::Replay { .. })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(AutodiffError::UnknownNode(id.0))
        }
    }

    fn push(&mut self, op: Op, value: Tensor, saved: Option<Tensor>) -> Result<NodeId> {
        let id = self.nodes.len();
        if !value.iter().all(|v| v.is_finite()) {
            return Err(AutodiffError::NonFinite {
                node: id,
                op: op.name(),
            });
        }
        self.nodes.push(Node { op, value, saved });
        Ok(NodeId(id))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    pub fn shape(&self, id: NodeId) -> [usize; 2] {
        shape_of(&self.nodes[id.0].value)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Leaf, value, None)
    }

    pub fn scalar_constant(&mut self, v: f64) -> Result<NodeId> {
        self.constant(Array2::from_elem((1, 1), v))
    }

    /// Named non-trainable leaf, retrievable with [`Graph::input_node`].
    pub fn input(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        let id = self.constant(value)?;
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn input_node(&self, name: &str) -> Result<NodeId> {
        self.inputs
            .get(name)
            .copied()
            .ok_or_else(|| AutodiffError::UnknownInput(name.to_string()))
    }

    /// Trainable leaf. Its gradient is reported under `name`.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        self.push(Op::Param(name.to_string()), value, None)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let v = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), v, None)
    }

    /// `a + row` with the `1×n` row broadcast over every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(row)?;
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr[0] != 1 || sr[1] != sa[1] {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row",
                left: sa,
                right: sr,
            });
        }
        let v = self.value(a) + self.value(row);
        self.push(Op::AddRow(a, row), v, None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), v, None)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), v, None)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a) * self.value(b);
        self.push(Op::Mul(a, b), v, None)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a) * c;
        self.push(Op::Scale(a, c), v, None)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).mapv(f64::tanh);
        self.push(Op::Tanh(a), v, None)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(Op::Relu(a), v, None)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).mapv(f64::exp);
        self.push(Op::Exp(a), v, None)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = softmax_rows(self.value(a));
        self.push(Op::Softmax(a), v, None)
    }

    /// Mean over rows of `-log softmax(logits)[row, target]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        self.check(logits)?;
        let l = self.value(logits);
        if targets.len() != l.nrows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross_entropy",
                left: shape_of(l),
                right: [targets.len(), 1],
            });
        }
        if l.nrows() == 0 {
            return Err(AutodiffError::Invalid {
                op: "cross_entropy",
                msg: "empty input".into(),
            });
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= l.ncols() {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    rows: l.ncols(),
                });
            }
            let row = l.row(r);
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let probs = softmax_rows(l);
        let v = Array2::from_elem((1, 1), total / targets.len() as f64);
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            v,
            Some(probs),
        )
    }

    /// Mean absolute error over all elements.
    pub fn mae(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mae", a, b)?;
        let n = nonempty_len("mae", self.value(a))?;
        let sum: f64 = Zip::from(self.value(a))
            .and(self.value(b))
            .fold(0.0, |acc, x, y| acc + (x - y).abs());
        self.push(Op::Mae(a, b), Array2::from_elem((1, 1), sum / n), None)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mse", a, b)?;
        let n = nonempty_len("mse", self.value(a))?;
        let sum: f64 = Zip::from(self.value(a))
            .and(self.value(b))
            .fold(0.0, |acc, x, y| acc + (x - y) * (x - y));
        self.push(Op::Mse(a, b), Array2::from_elem((1, 1), sum / n), None)
    }

    /// Mean over rows of the squared Euclidean distance between rows.
    pub fn mean_sq_dist(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mean_sq_dist", a, b)?;
        let rows = self.value(a).nrows();
        if rows == 0 {
            return Err(AutodiffError::Invalid {
                op: "mean_sq_dist",
                msg: "empty input".into(),
            });
        }
        let sum: f64 = Zip::from(self.value(a))
            .and(self.value(b))
            .fold(0.0, |acc, x, y| acc + (x - y) * (x - y));
        self.push(
            Op::MeanSqDist(a, b),
            Array2::from_elem((1, 1), sum / rows as f64),
            None,
        )
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(Op::Sum(a), v, None)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let n = nonempty_len("mean", self.value(a))?;
        let v = Array2::from_elem((1, 1), self.value(a).sum() / n);
        self.push(Op::Mean(a), v, None)
    }

    /// Horizontal concatenation; all parts must have the same row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or(AutodiffError::Invalid {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        self.check(first)?;
        let rows = self.shape(first)[0];
        let mut cols = 0;
        for &p in parts {
            self.check(p)?;
            let sp = self.shape(p);
            if sp[0] != rows {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(first),
                    right: sp,
                });
            }
            cols += sp[1];
        }
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            v.slice_mut(s![.., at..at + pv.ncols()]).assign(pv);
            at += pv.ncols();
        }
        self.push(Op::ConcatCols(parts.to_vec()), v, None)
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.check(a)?;
        let cols = self.shape(a)[1];
        if start > end || end > cols {
            return Err(AutodiffError::Invalid {
                op: "slice_cols",
                msg: format!("range {start}..{end} outside {cols} columns"),
            });
        }
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(Op::SliceCols(a, start, end), v, None)
    }

    /// Row `i` of the output is row `index[i]` of `a`, or zeros for `None`.
    pub fn gather_rows(&mut self, a: NodeId, index: &[Option<usize>]) -> Result<NodeId> {
        self.check(a)?;
        let src = self.value(a);
        let mut v = Array2::zeros((index.len(), src.ncols()));
        for (i, idx) in index.iter().enumerate() {
            if let Some(j) = *idx {
                if j >= src.nrows() {
                    return Err(AutodiffError::IndexOutOfRange {
                        op: "gather_rows",
                        index: j,
                        rows: src.nrows(),
                    });
                }
                v.row_mut(i).assign(&src.row(j));
            }
        }
        self.push(Op::GatherRows(a, index.to_vec()), v, None)
    }

    fn next_replay(&mut self) -> Result<Option<TraceEntry>> {
        match &mut self.trace {
            TraceMode::Replay { trace, cursor } => {
                let e = trace
                    .entries
                    .get(*cursor)
                    .cloned()
                    .ok_or(AutodiffError::TraceMismatch(*cursor))?;
                *cursor += 1;
                Ok(Some(e))
            }
            _ => Ok(None),
        }
    }

    fn record(&mut self, e: impl FnOnce() -> TraceEntry) {
        if let TraceMode::Record(entries) = &mut self.trace {
            entries.push(e());
        }
    }

    fn cursor(&self) -> usize {
        match &self.trace {
            TraceMode::Replay { cursor, .. } => *cursor,
            _ => 0,
        }
    }

    /// Forward identity, backward zero.
    pub fn stop_gradient(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let at = self.cursor();
        let v = match self.next_replay()? {
            Some(TraceEntry::Values(v)) if v.dim() == self.value(a).dim() => v,
            Some(_) => return Err(AutodiffError::TraceMismatch(at)),
            None => self.value(a).clone(),
        };
        self.record(|| TraceEntry::Values(v.clone()));
        self.push(Op::StopGradient, v, None)
    }

    /// Forward returns `q`; backward copies the output gradient to `z` and
    /// sends nothing to `q`.
    pub fn straight_through(&mut self, z: NodeId, q: NodeId) -> Result<NodeId> {
        self.same_shape("straight_through", z, q)?;
        let at = self.cursor();
        let v = match self.next_replay()? {
            // replay keeps the quantization offset fixed and follows z
            Some(TraceEntry::Values(offset)) if offset.dim() == self.value(z).dim() => {
                self.value(z) + &offset
            }
            Some(_) => return Err(AutodiffError::TraceMismatch(at)),
            None => self.value(q).clone(),
        };
        if matches!(self.trace, TraceMode::Record(_)) {
            let offset = self.value(q) - self.value(z);
            self.record(|| TraceEntry::Values(offset));
        }
        self.push(Op::StraightThrough(z), v, None)
    }

    /// Runs a discrete decision, or replays the recorded one.
    pub fn decide_indices(&mut self, f: impl FnOnce() -> Vec<usize>) -> Result<Vec<usize>> {
        let at = self.cursor();
        let idx = match self.next_replay()? {
            Some(TraceEntry::Indices(i)) => i,
            Some(_) => return Err(AutodiffError::TraceMismatch(at)),
            None => f(),
        };
        self.record(|| TraceEntry::Indices(idx.clone()));
        Ok(idx)
    }

    /// Runs a stochastic draw, or replays the recorded one. The result enters
    /// the graph as a constant.
    pub fn decide_constant(&mut self, f: impl FnOnce() -> Tensor) -> Result<NodeId> {
        let at = self.cursor();
        let v = match self.next_replay()? {
            Some(TraceEntry::Values(v)) => v,
            Some(_) => return Err(AutodiffError::TraceMismatch(at)),
            None => f(),
        };
        self.record(|| TraceEntry::Values(v.clone()));
        self.constant(v)
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        self.check(loss)?;
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(AutodiffError::NotScalar {
                node: loss.0,
                shape,
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
            match &mut grads[id.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::Tanh(a) => {
                    let ga = Zip::from(&g)
                        .and(&node.value)
                        .map_collect(|g, y| g * (1.0 - y * y));
                    acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = Zip::from(&g).and(self.value(*a)).map_collect(|g, x| {
                        if *x > 0.0 {
                            *g
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => acc(&mut grads, *a, &g * &node.value),
                Op::Softmax(a) => {
                    let y = &node.value;
                    let gy = &g * y;
                    let dots = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = &gy - &(y * &dots);
                    acc(&mut grads, *a, ga);
                }
                Op::CrossEntropy { logits, targets } => {
                    let mut ga = node
                        .saved
                        .clone()
                        .expect("cross-entropy saves probabilities");
                    for (r, &t) in targets.iter().enumerate() {
                        ga[[r, t]] -= 1.0;
                    }
                    ga *= g[[0, 0]] / targets.len() as f64;
                    acc(&mut grads, *logits, ga);
                }
                Op::Mae(a, b) => {
                    let scale = g[[0, 0]] / self.value(*a).len() as f64;
                    let ga = Zip::from(self.value(*a))
                        .and(self.value(*b))
                        .map_collect(|x, y| sign(x - y) * scale);
                    acc(&mut grads, *b, -&ga);
                    acc(&mut grads, *a, ga);
                }
                Op::Mse(a, b) => {
                    let scale = 2.0 * g[[0, 0]] / self.value(*a).len() as f64;
                    let ga = (self.value(*a) - self.value(*b)) * scale;
                    acc(&mut grads, *b, -&ga);
                    acc(&mut grads, *a, ga);
                }
                Op::MeanSqDist(a, b) => {
                    let scale = 2.0 * g[[0, 0]] / self.value(*a).nrows() as f64;
                    let ga = (self.value(*a) - self.value(*b)) * scale;
                    acc(&mut grads, *b, -&ga);
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len() as f64;
                    let ga = Array2::from_elem(self.value(*a).dim(), g[[0, 0]] / n);
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        acc(&mut grads, *p, g.slice(s![.., at..at + w]).to_owned());
                        at += w;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, index) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    for (i, idx) in index.iter().enumerate() {
                        if let Some(j) = *idx {
                            let mut row = ga.row_mut(j);
                            row += &g.row(i);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::StopGradient => {}
                Op::StraightThrough(z) => acc(&mut grads, *z, g),
            }
        }

        Ok(Gradients {
            grads,
            params: self.param_nodes(),
            shapes: self.nodes.iter().map(|n| n.value.dim()).collect(),
        })
    }

    fn param_nodes(&self) -> Vec<(String, NodeId)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Param(name) => Some((name.clone(), NodeId(i))),
                _ => None,
            })
            .collect()
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn nonempty_len(op: &'static str, t: &Tensor) -> Result<f64> {
    if t.is_empty() {
        Err(AutodiffError::Invalid {
            op,
            msg: "empty input".into(),
        })
    } else {
        Ok(t.len() as f64)
    }
}

fn softmax_rows(l: &Tensor) -> Tensor {
    let mut out = l.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let z = row.sum();
        row /= z;
    }
    out
}

/// Result of a reverse pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, NodeId)>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to any node; zeros when the node does not reach
    /// the loss.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        match self.grads.get(id.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Array2::zeros(self.shapes[id.0]),
        }
    }

    /// Gradient per parameter name. Parameters that were added more than once
    /// have their contributions summed; unreachable ones get zeros.
    pub fn params(&self) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, id) in &self.params {
            let g = self.wrt(*id);
            match out.get_mut(name) {
                Some(existing) => *existing += &g,
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn row(v: &[f64]) -> Tensor {
        Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap()
    }

    #[test]
    fn forward_linear_map() {
        let mut g = Graph::new();
        let x = g.input("x", row(&[1.0, 2.0])).unwrap();
        let y = g.scale(x, 2.0).unwrap();
        assert_eq!(g.value(y), &row(&[2.0, 4.0]));
        assert_eq!(g.input_node("x").unwrap(), x);
        assert!(g.input_node("nope").is_err());
    }

    #[test]
    fn forward_identity() {
        let mut g = Graph::new();
        let x = g.input("x", row(&[5.0])).unwrap();
        let y = g.scale(x, 1.0).unwrap();
        assert_eq!(g.value(y), &row(&[5.0]));
    }

    #[test]
    fn forward_mae() {
        let mut g = Graph::new();
        let a = g.constant(row(&[1.0, 3.0])).unwrap();
        let b = g.constant(row(&[2.0, 5.0])).unwrap();
        let l = g.mae(a, b).unwrap();
        assert_eq!(g.scalar(l), 1.5);
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.param("x", row(&[3.0])).unwrap();
        let l = g.mul(x, x).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.params()["x"], row(&[6.0]));
    }

    #[test]
    fn unreachable_param_gets_zero() {
        let mut g = Graph::new();
        let x = g.param("x", row(&[3.0])).unwrap();
        let _p = g.param("p", row(&[1.0, 2.0])).unwrap();
        let l = g.mul(x, x).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.params()["p"], row(&[0.0, 0.0]));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param("x", row(&[1.0, 2.0])).unwrap();
        assert!(matches!(
            g.backward(x),
            Err(AutodiffError::NotScalar { .. })
        ));
        assert!(matches!(
            g.backward(NodeId(99)),
            Err(AutodiffError::UnknownNode(99))
        ));
    }

    #[test]
    fn stop_gradient_severs_one_factor() {
        let mut g = Graph::new();
        let x = g.param("x", row(&[3.0])).unwrap();
        let sx = g.stop_gradient(x).unwrap();
        let l = g.mul(sx, x).unwrap();
        assert_eq!(g.scalar(l), 9.0);
        assert_eq!(g.backward(l).unwrap().params()["x"], row(&[3.0]));
    }

    #[test]
    fn stop_gradient_fully_severed() {
        let mut g = Graph::new();
        let x = g.param("x", row(&[-1.25, 7.0])).unwrap();
        let sx = g.stop_gradient(x).unwrap();
        let l = g.sum(sx).unwrap();
        assert_eq!(g.backward(l).unwrap().params()["x"], row(&[0.0, 0.0]));
    }

    #[test]
    fn stop_gradient_forward_identity() {
        let mut g = Graph::new();
        let x = g.constant(row(&[1.0, 2.0, 3.0])).unwrap();
        let y = g.stop_gradient(x).unwrap();
        assert_eq!(g.value(y), &row(&[1.0, 2.0, 3.0]));
    }

    #[test]
    fn straight_through_forward_and_gradient() {
        let mut g = Graph::new();
        let z = g.param("z", row(&[1.0, 1.0])).unwrap();
        let q = g.param("q", row(&[0.0, 2.0])).unwrap();
        let st = g.straight_through(z, q).unwrap();
        assert_eq!(g.value(st), &row(&[0.0, 2.0]));
        let l = g.sum(st).unwrap();
        let grads = g.backward(l).unwrap().params();
        assert_eq!(grads["z"], row(&[1.0, 1.0]));
        assert_eq!(grads["q"], row(&[0.0, 0.0]));
    }

    #[test]
    fn straight_through_shape_mismatch() {
        let mut g = Graph::new();
        let z = g.constant(row(&[1.0, 1.0])).unwrap();
        let q = g.constant(row(&[1.0])).unwrap();
        assert!(matches!(
            g.straight_through(z, q),
            Err(AutodiffError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn straight_through_matches_substituted_graph() {
        // downstream linear map: loss = sum((st(z,q) W) * c)
        let w = array![[0.5, -1.0, 2.0], [1.5, 0.25, -0.75]];
        let c = array![[1.0, -2.0, 0.5], [0.3, 0.7, -1.1]];
        let zv = array![[0.2, -0.4], [1.1, 0.9]];
        let qv = array![[0.0, 0.0], [1.0, 1.0]];

        let grad_via = |use_st: bool| {
            let mut g = Graph::new();
            let z = g.param("z", zv.clone()).unwrap();
            let q = g.constant(qv.clone()).unwrap();
            let input = if use_st {
                g.straight_through(z, q).unwrap()
            } else {
                z
            };
            let wn = g.constant(w.clone()).unwrap();
            let cn = g.constant(c.clone()).unwrap();
            let h = g.matmul(input, wn).unwrap();
            let hc = g.mul(h, cn).unwrap();
            let l = g.sum(hc).unwrap();
            g.backward(l).unwrap().params()["z"].clone()
        };
        assert_eq!(grad_via(true), grad_via(false));
    }

    #[test]
    fn non_finite_is_reported_with_node() {
        let mut g = Graph::new();
        let x = g.constant(row(&[1000.0])).unwrap();
        let err = g.exp(x).unwrap_err();
        assert_eq!(err, AutodiffError::NonFinite { node: 1, op: "exp" });
        assert!(g.constant(row(&[f64::NAN])).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g
            .constant(array![[1.0, 2.0, 3.0], [-5.0, 0.0, 5.0]])
            .unwrap();
        let p = g.softmax(x).unwrap();
        for r in g.value(p).rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut g = Graph::new();
        let uniform = g.constant(Array2::zeros((2, 12))).unwrap();
        let ce = g.cross_entropy(uniform, &[3, 7]).unwrap();
        assert!((g.scalar(ce) - 12f64.ln()).abs() < 1e-12);
        let sharp = g.constant(array![[0.0, 800.0, 0.0]]).unwrap();
        let ce = g.cross_entropy(sharp, &[1]).unwrap();
        assert!(g.scalar(ce).abs() < 1e-12);
        assert!(g.cross_entropy(sharp, &[3]).is_err());
    }

    #[test]
    fn replay_freezes_decisions() {
        let mut rec = Graph::recording();
        let x = rec.param("x", row(&[2.0])).unwrap();
        let sx = rec.stop_gradient(x).unwrap();
        let l = rec.mul(sx, x).unwrap();
        assert_eq!(rec.scalar(l), 4.0);
        let idx = rec.decide_indices(|| vec![4, 2]).unwrap();
        assert_eq!(idx, vec![4, 2]);
        let trace = Arc::new(rec.into_trace().unwrap());
        assert_eq!(trace.len(), 2);

        let mut rep = Graph::replaying(trace);
        let x = rep.param("x", row(&[3.0])).unwrap();
        let sx = rep.stop_gradient(x).unwrap();
        let l = rep.mul(sx, x).unwrap();
        // frozen factor stays at 2
        assert_eq!(rep.scalar(l), 6.0);
        assert_eq!(rep.decide_indices(|| vec![0, 0]).unwrap(), vec![4, 2]);
        assert!(rep.decide_indices(Vec::new).is_err());
    }

    #[test]
    fn backward_is_deterministic() {
        let build = || {
            let mut g = Graph::new();
            let w = g.param("w", array![[0.3, -0.2], [0.1, 0.7]]).unwrap();
            let x = g.constant(array![[1.0, 2.0], [3.0, -1.0]]).unwrap();
            let h = g.matmul(x, w).unwrap();
            let t = g.tanh(h).unwrap();
            let l = g.mean(t).unwrap();
            g.backward(l).unwrap().params()
        };
        assert_eq!(build(), build());
    }

    /// Central differences over a scalar function of one input tensor.
    fn finite_difference(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-5;
        let mut out = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            out[[r, c]] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        out
    }

    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
    }

    type Builder = fn(&mut Graph, NodeId, NodeId) -> Result<NodeId>;

    fn op_cases() -> Vec<(&'static str, Builder)> {
        vec![
            ("matmul", |g, a, b| {
                let bt = g.slice_cols(b, 0, 3)?;
                let m = g.matmul(a, bt)?;
                g.sum(m)
            }),
            ("add_row", |g, a, b| {
                let r = g.slice_cols(b, 0, 3)?;
                let r = g.gather_rows(r, &[Some(0)])?;
                let m = g.add_row(a, r)?;
                let t = g.tanh(m)?;
                g.sum(t)
            }),
            ("add_sub_mul", |g, a, b| {
                let s = g.add(a, b)?;
                let d = g.sub(a, b)?;
                let m = g.mul(s, d)?;
                g.mean(m)
            }),
            ("scale_exp", |g, a, _| {
                let s = g.scale(a, 0.5)?;
                let e = g.exp(s)?;
                g.sum(e)
            }),
            ("softmax", |g, a, b| {
                let p = g.softmax(a)?;
                let m = g.mul(p, b)?;
                g.sum(m)
            }),
            ("cross_entropy", |g, a, _| g.cross_entropy(a, &[0, 2, 1])),
            ("mae", |g, a, b| g.mae(a, b)),
            ("mse", |g, a, b| g.mse(a, b)),
            ("mean_sq_dist", |g, a, b| g.mean_sq_dist(a, b)),
            ("concat_slice", |g, a, b| {
                let c = g.concat_cols(&[a, b])?;
                let s = g.slice_cols(c, 1, 5)?;
                let t = g.tanh(s)?;
                g.sum(t)
            }),
            ("gather", |g, a, b| {
                let r = g.gather_rows(a, &[Some(2), None, Some(0), Some(2)])?;
                let r2 = g.gather_rows(b, &[Some(0), Some(1), Some(1), Some(2)])?;
                let m = g.mul(r, r2)?;
                g.sum(m)
            }),
            ("relu", |g, a, b| {
                let m = g.mul(a, b)?;
                let r = g.relu(m)?;
                g.sum(r)
            }),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn gradients_match_finite_differences(
            av in proptest::collection::vec(-2.0f64..2.0, 9),
            bv in proptest::collection::vec(-2.0f64..2.0, 9),
        ) {
            let a = Array2::from_shape_vec((3, 3), av).unwrap();
            let b = Array2::from_shape_vec((3, 3), bv).unwrap();
            for (name, build) in op_cases() {
                // kinks in |x| and max(0, x) are not differentiable
                if matches!(name, "mae" | "relu") {
                    let d = if name == "mae" { &a - &b } else { &a * &b };
                    if d.iter().any(|v| v.abs() < 1e-3) { continue; }
                }
                let mut g = Graph::new();
                let an = g.param("a", a.clone()).unwrap();
                let bn = g.param("b", b.clone()).unwrap();
                let l = build(&mut g, an, bn).unwrap();
                let grads = g.backward(l).unwrap().params();
                let eval_a = |x: &Tensor| {
                    let mut g = Graph::new();
                    let an = g.param("a", x.clone()).unwrap();
                    let bn = g.param("b", b.clone()).unwrap();
                    let l = build(&mut g, an, bn).unwrap();
                    g.scalar(l)
                };
                let eval_b = |x: &Tensor| {
                    let mut g = Graph::new();
                    let an = g.param("a", a.clone()).unwrap();
                    let bn = g.param("b", x.clone()).unwrap();
                    let l = build(&mut g, an, bn).unwrap();
                    g.scalar(l)
                };
                let na = finite_difference(&a, &eval_a);
                let nb = finite_difference(&b, &eval_b);
                for (x, y) in grads["a"].iter().zip(na.iter()).chain(grads["b"].iter().zip(nb.iter())) {
                    prop_assert!(rel_err(*x, *y) < 1e-4, "{name}: analytic {x} vs numeric {y}");
                }
            }
        }

        #[test]
        fn stop_gradient_and_straight_through_are_bit_exact(
            zv in proptest::collection::vec(-1e3f64..1e3, 6),
            qv in proptest::collection::vec(-1e3f64..1e3, 6),
        ) {
            let z = Array2::from_shape_vec((2, 3), zv).unwrap();
            let q = Array2::from_shape_vec((2, 3), qv).unwrap();
            let mut g = Graph::new();
            let zn = g.constant(z.clone()).unwrap();
            let qn = g.constant(q.clone()).unwrap();
            let sg = g.stop_gradient(zn).unwrap();
            let st = g.straight_through(zn, qn).unwrap();
            prop_assert_eq!(g.value(sg), &z);
            prop_assert_eq!(g.value(st), &q);
        }
    }
}
