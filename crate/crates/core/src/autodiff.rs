//! Reverse-mode differentiation over a small, fixed set of matrix primitives.
//!
//! A [`Graph`] is built once (leaves are declared with their shapes, every
//! operation checks its operand shapes when it is added), then evaluated any
//! number of times against fresh leaf bindings. [`Graph::backward`] walks the
//! node list in reverse and accumulates gradients into the differentiable
//! leaves.
//!
//! Index-valued nodes ([`Graph::top_k`]) are not differentiable. Operations that
//! consume indices (`gather_rows`, `gather_cols`, `scatter_cols`,
//! `index_mask`, `cross_entropy` targets) treat them as constants; using an
//! index node as an ordinary numeric operand on a gradient path is an error
//! at backward time.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::linalg::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { name: String, differentiable: bool },
    Constant(Mat),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Transpose(NodeId),
    RowSoftmax(NodeId),
    RmsNorm(NodeId, f64),
    LayerNorm(NodeId, f64),
    Silu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    GatherRows { table: NodeId, indices: NodeId },
    TopK { input: NodeId, k: usize },
    GatherCols { input: NodeId, indices: NodeId },
    ScatterCols { values: NodeId, indices: NodeId },
    IndexMask { indices: NodeId },
    CrossEntropy { logits: NodeId, targets: NodeId },
    SliceCols { input: NodeId, start: usize },
    SliceRows { input: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    MulRow { input: NodeId, row: NodeId },
    MulCol { input: NodeId, col: NodeId },
    Sum(NodeId),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Transpose(_) => "transpose",
            Op::RowSoftmax(_) => "row_softmax",
            Op::RmsNorm(..) => "rms_norm",
            Op::LayerNorm(..) => "layer_norm",
            Op::Silu(_) => "silu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sqrt(_) => "sqrt",
            Op::GatherRows { .. } => "gather_rows",
            Op::TopK { .. } => "top_k",
            Op::GatherCols { .. } => "gather_cols",
            Op::ScatterCols { .. } => "scatter_cols",
            Op::IndexMask { .. } => "index_mask",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::MulRow { .. } => "mul_row",
            Op::MulCol { .. } => "mul_col",
            Op::Sum(_) => "sum",
        }
    }

    /// Operands that carry numeric (potentially differentiable) values.
    fn float_operands(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } | Op::Constant(_) | Op::IndexMask { .. } | Op::TopK { .. } => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::RowSoftmax(a)
            | Op::RmsNorm(a, _)
            | Op::LayerNorm(a, _)
            | Op::Silu(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Sum(a) => vec![*a],
            Op::GatherRows { table, .. } => vec![*table],
            Op::GatherCols { input, .. } => vec![*input],
            Op::ScatterCols { values, .. } => vec![*values],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::SliceCols { input, .. } | Op::SliceRows { input, .. } => vec![*input],
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.clone(),
            Op::MulRow { input, row } => vec![*input, *row],
            Op::MulCol { input, col } => vec![*input, *col],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
}

/// An acyclic list of primitive applications; operands always precede users.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: HashMap<String, NodeId>,
    labels: HashMap<String, NodeId>,
    output: Option<NodeId>,
}

/// Anything that can resolve a leaf name to its value.
pub trait Bindings {
    fn lookup(&self, name: &str) -> Option<&Mat>;
}

impl Bindings for HashMap<String, Mat> {
    fn lookup(&self, name: &str) -> Option<&Mat> {
        self.get(name)
    }
}

impl Bindings for BTreeMap<String, Mat> {
    fn lookup(&self, name: &str) -> Option<&Mat> {
        self.get(name)
    }
}

impl<'a> Bindings for HashMap<&'a str, &'a Mat> {
    fn lookup(&self, name: &str) -> Option<&Mat> {
        self.get(name).copied()
    }
}

/// Forward values for every node of one evaluation.
#[derive(Clone, Debug)]
pub struct Values {
    vals: Vec<Mat>,
    output: Option<NodeId>,
}

impl Values {
    pub fn get(&self, id: NodeId) -> &Mat {
        &self.vals[id.0]
    }

    pub fn output(&self) -> Option<&Mat> {
        self.output.map(|id| &self.vals[id.0])
    }

    /// Scalar value of the designated output (its single entry).
    pub fn scalar(&self) -> Option<f64> {
        self.output().filter(|m| m.len() == 1).map(|m| m.as_slice()[0])
    }
}

/// Gradients keyed by differentiable leaf name.
pub type GradientSet = BTreeMap<String, Mat>;

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

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    /// Attach a name to a node for lookup via [`Graph::labelled`].
    pub fn label(&mut self, id: NodeId, name: impl Into<String>) {
        self.labels.insert(name.into(), id);
    }

    pub fn labelled(&self, name: &str) -> Option<NodeId> {
        self.labels.get(name).copied()
    }

    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    fn describe(&self, id: NodeId) -> String {
        match &self.nodes[id.0].op {
            Op::Leaf { name, .. } => format!("#{} leaf '{}'", id.0, name),
            op => format!("#{} {}", id.0, op.kind()),
        }
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, rows, cols });
        id
    }

    fn check(&self, id: NodeId) -> Result<(usize, usize)> {
        if id.0 >= self.nodes.len() {
            return Err(Error::Structural(format!("unknown node #{}", id.0)));
        }
        Ok(self.shape(id))
    }

    fn leaf(&mut self, name: &str, rows: usize, cols: usize, differentiable: bool) -> Result<NodeId> {
        if self.leaves.contains_key(name) {
            return Err(Error::Structural(format!("duplicate leaf '{name}'")));
        }
        if rows == 0 || cols == 0 {
            return Err(Error::shape(name, "leaf shape must be positive"));
        }
        let id = self.push(
            Op::Leaf {
                name: name.to_string(),
                differentiable,
            },
            rows,
            cols,
        );
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    /// A named, differentiable input.
    pub fn param(&mut self, name: &str, rows: usize, cols: usize) -> Result<NodeId> {
        self.leaf(name, rows, cols, true)
    }

    /// A named input that receives no gradient (token ids, targets, masks).
    pub fn data(&mut self, name: &str, rows: usize, cols: usize) -> Result<NodeId> {
        self.leaf(name, rows, cols, false)
    }

    pub fn constant(&mut self, value: Mat) -> NodeId {
        let (r, c) = value.shape();
        self.push(Op::Constant(value), r, c)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.check(a)?;
        let (br, bc) = self.check(b)?;
        if ac != br {
            return Err(Error::shape(
                format!("matmul of {} and {}", self.describe(a), self.describe(b)),
                format!("{ar}x{ac} by {br}x{bc}"),
            ));
        }
        Ok(self.push(Op::MatMul(a, b), ar, bc))
    }

    fn same_shape(&self, what: &str, a: NodeId, b: NodeId) -> Result<(usize, usize)> {
        let sa = self.check(a)?;
        let sb = self.check(b)?;
        if sa != sb {
            return Err(Error::shape(
                format!("{what} of {} and {}", self.describe(a), self.describe(b)),
                format!("{sa:?} vs {sb:?}"),
            ));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), r, c))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), r, c))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), r, c))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let (r, c) = self.check(a)?;
        Ok(self.push(Op::Scale(a, s), r, c))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.check(a)?;
        Ok(self.push(Op::Transpose(a), c, r))
    }

    fn unary(&mut self, a: NodeId, op: Op) -> Result<NodeId> {
        let (r, c) = self.check(a)?;
        Ok(self.push(op, r, c))
    }

    pub fn row_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::RowSoftmax(a))
    }

    /// Row-wise `x / sqrt(mean(x²) + eps)`, no learned gain.
    pub fn rms_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        self.unary(a, Op::RmsNorm(a, eps))
    }

    /// Row-wise `(x - mean) / sqrt(var + eps)`, no learned gain or bias.
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        self.unary(a, Op::LayerNorm(a, eps))
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Sqrt(a))
    }

    fn index_column(&self, what: &str, idx: NodeId) -> Result<(usize, usize)> {
        let s = self.check(idx)?;
        match &self.nodes[idx.0].op {
            Op::Leaf {
                differentiable: false,
                ..
            }
            | Op::Constant(_)
            | Op::TopK { .. } => Ok(s),
            _ => Err(Error::Structural(format!(
                "{what}: indices must come from a data leaf, constant or top_k, got {}",
                self.describe(idx)
            ))),
        }
    }

    /// Row lookup: `out[t] = table[indices[t]]`; `indices` is a `T×1` column.
    pub fn gather_rows(&mut self, table: NodeId, indices: NodeId) -> Result<NodeId> {
        let (_, tc) = self.check(table)?;
        let (ir, ic) = self.index_column("gather_rows", indices)?;
        if ic != 1 {
            return Err(Error::shape(self.describe(indices), "indices must be a column"));
        }
        Ok(self.push(Op::GatherRows { table, indices }, ir, tc))
    }

    /// Per-row indices of the `k` largest entries, descending; ties go to the
    /// lowest column index. The output is not differentiable.
    pub fn top_k(&mut self, input: NodeId, k: usize) -> Result<NodeId> {
        let (r, c) = self.check(input)?;
        if k == 0 || k > c {
            return Err(Error::Structural(format!(
                "top_k with k={k} over {c} columns at {}",
                self.describe(input)
            )));
        }
        Ok(self.push(Op::TopK { input, k }, r, k))
    }

    /// `out[t, j] = input[t, indices[t, j]]`.
    pub fn gather_cols(&mut self, input: NodeId, indices: NodeId) -> Result<NodeId> {
        let (r, _) = self.check(input)?;
        let (ir, ic) = self.index_column("gather_cols", indices)?;
        if ir != r {
            return Err(Error::shape(self.describe(indices), "row count differs from input"));
        }
        Ok(self.push(Op::GatherCols { input, indices }, r, ic))
    }

    /// Dense `T×width` matrix with `values[t, j]` placed at column `indices[t, j]`.
    pub fn scatter_cols(&mut self, values: NodeId, indices: NodeId, width: usize) -> Result<NodeId> {
        let vs = self.check(values)?;
        let is = self.index_column("scatter_cols", indices)?;
        if vs != is {
            return Err(Error::shape(self.describe(values), "values and indices differ in shape"));
        }
        Ok(self.push(Op::ScatterCols { values, indices }, vs.0, width))
    }

    /// Dense 0/1 `T×width` dispatch mask for `indices`; not differentiable.
    pub fn index_mask(&mut self, indices: NodeId, width: usize) -> Result<NodeId> {
        let (r, _) = self.index_column("index_mask", indices)?;
        Ok(self.push(Op::IndexMask { indices }, r, width))
    }

    /// Mean next-token cross-entropy (nats) of `logits` rows against `T×1` targets.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        let (r, _) = self.check(logits)?;
        let (tr, tc) = self.index_column("cross_entropy", targets)?;
        if tr != r || tc != 1 {
            return Err(Error::shape(self.describe(targets), "targets must be a T×1 column"));
        }
        Ok(self.push(Op::CrossEntropy { logits, targets }, 1, 1))
    }

    pub fn slice_cols(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.check(input)?;
        if len == 0 || start + len > c {
            return Err(Error::shape(self.describe(input), format!("slice_cols {start}+{len} of {c}")));
        }
        Ok(self.push(Op::SliceCols { input, start }, r, len))
    }

    pub fn slice_rows(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.check(input)?;
        if len == 0 || start + len > r {
            return Err(Error::shape(self.describe(input), format!("slice_rows {start}+{len} of {r}")));
        }
        Ok(self.push(Op::SliceRows { input, start }, len, c))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Structural("concat_cols of nothing".into()))?;
        let (r, _) = self.check(first)?;
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.check(p)?;
            if pr != r {
                return Err(Error::shape(self.describe(p), "concat_cols row mismatch"));
            }
            cols += pc;
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), r, cols))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Structural("concat_rows of nothing".into()))?;
        let (_, c) = self.check(first)?;
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.check(p)?;
            if pc != c {
                return Err(Error::shape(self.describe(p), "concat_rows column mismatch"));
            }
            rows += pr;
        }
        Ok(self.push(Op::ConcatRows(parts.to_vec()), rows, c))
    }

    /// Scales column `j` of `input` by `row[0, j]`.
    pub fn mul_row(&mut self, input: NodeId, row: NodeId) -> Result<NodeId> {
        let (r, c) = self.check(input)?;
        if self.check(row)? != (1, c) {
            return Err(Error::shape(self.describe(row), format!("expected 1x{c}")));
        }
        Ok(self.push(Op::MulRow { input, row }, r, c))
    }

    /// Scales row `i` of `input` by `col[i, 0]`.
    pub fn mul_col(&mut self, input: NodeId, col: NodeId) -> Result<NodeId> {
        let (r, c) = self.check(input)?;
        if self.check(col)? != (r, 1) {
            return Err(Error::shape(self.describe(col), format!("expected {r}x1")));
        }
        Ok(self.push(Op::MulCol { input, col }, r, c))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        Ok(self.push(Op::Sum(a), 1, 1))
    }

    /// `x · Wᵀ` for a weight stored as `(d_out, d_in)`.
    pub fn linear(&mut self, x: NodeId, weight: NodeId) -> Result<NodeId> {
        let wt = self.transpose(weight)?;
        self.matmul(x, wt)
    }

    /// Forward pass. Deterministic: identical bindings give identical bits.
    pub fn evaluate<B: Bindings + ?Sized>(&self, inputs: &B) -> Result<Values> {
        let mut vals: Vec<Mat> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let v = self.forward_node(i, node, &vals, inputs)?;
            debug_assert_eq!(v.shape(), (node.rows, node.cols), "node #{i}");
            vals.push(v);
        }
        Ok(Values {
            vals,
            output: self.output,
        })
    }

    fn forward_node<B: Bindings + ?Sized>(
        &self,
        i: usize,
        node: &Node,
        vals: &[Mat],
        inputs: &B,
    ) -> Result<Mat> {
        let v = |id: &NodeId| &vals[id.0];
        Ok(match &node.op {
            Op::Leaf { name, .. } => {
                let m = inputs
                    .lookup(name)
                    .ok_or_else(|| Error::Structural(format!("leaf '{name}' is not bound")))?;
                if m.shape() != (node.rows, node.cols) {
                    return Err(Error::shape(
                        format!("leaf '{name}'"),
                        format!("bound {:?}, declared {:?}", m.shape(), (node.rows, node.cols)),
                    ));
                }
                m.clone()
            }
            Op::Constant(m) => m.clone(),
            Op::MatMul(a, b) => v(a).matmul(v(b)),
            Op::Add(a, b) => v(a).add(v(b)),
            Op::Sub(a, b) => v(a).sub(v(b)),
            Op::Mul(a, b) => v(a).hadamard(v(b)),
            Op::Scale(a, s) => v(a).scale(*s),
            Op::Transpose(a) => v(a).transpose(),
            Op::RowSoftmax(a) => row_softmax(v(a)),
            Op::RmsNorm(a, eps) => rms_norm_rows(v(a), *eps),
            Op::LayerNorm(a, eps) => layer_norm_rows(v(a), *eps),
            Op::Silu(a) => v(a).map(|x| x * sigmoid(x)),
            Op::Sigmoid(a) => v(a).map(sigmoid),
            Op::Exp(a) => v(a).map(f64::exp),
            Op::Log(a) => v(a).map(f64::ln),
            Op::Sqrt(a) => v(a).map(f64::sqrt),
            Op::GatherRows { table, indices } => {
                let t = v(table);
                let idx = v(indices);
                let mut out = Mat::zeros(node.rows, node.cols);
                for r in 0..node.rows {
                    let k = as_index(idx.get(r, 0), t.rows(), i)?;
                    out.row_mut(r).copy_from_slice(t.row(k));
                }
                out
            }
            Op::TopK { input, k } => top_k_indices(v(input), *k),
            Op::GatherCols { input, indices } => {
                let x = v(input);
                let idx = v(indices);
                let mut out = Mat::zeros(node.rows, node.cols);
                for r in 0..node.rows {
                    for j in 0..node.cols {
                        let c = as_index(idx.get(r, j), x.cols(), i)?;
                        out.set(r, j, x.get(r, c));
                    }
                }
                out
            }
            Op::ScatterCols { values, indices } => {
                let x = v(values);
                let idx = v(indices);
                let mut out = Mat::zeros(node.rows, node.cols);
                for r in 0..x.rows() {
                    for j in 0..x.cols() {
                        let c = as_index(idx.get(r, j), node.cols, i)?;
                        out.set(r, c, out.get(r, c) + x.get(r, j));
                    }
                }
                out
            }
            Op::IndexMask { indices } => {
                let idx = v(indices);
                let mut out = Mat::zeros(node.rows, node.cols);
                for r in 0..idx.rows() {
                    for j in 0..idx.cols() {
                        let c = as_index(idx.get(r, j), node.cols, i)?;
                        out.set(r, c, 1.0);
                    }
                }
                out
            }
            Op::CrossEntropy { logits, targets } => {
                let z = v(logits);
                let t = v(targets);
                let mut total = 0.0;
                for r in 0..z.rows() {
                    let k = as_index(t.get(r, 0), z.cols(), i)?;
                    total += log_sum_exp(z.row(r)) - z.get(r, k);
                }
                Mat::filled(1, 1, total / z.rows() as f64)
            }
            Op::SliceCols { input, start } => {
                let x = v(input);
                let mut out = Mat::zeros(node.rows, node.cols);
                for r in 0..node.rows {
                    out.row_mut(r)
                        .copy_from_slice(&x.row(r)[*start..*start + node.cols]);
                }
                out
            }
            Op::SliceRows { input, start } => {
                let x = v(input);
                let c = node.cols;
                Mat::from_vec(
                    node.rows,
                    c,
                    x.as_slice()[start * c..(start + node.rows) * c].to_vec(),
                )?
            }
            Op::ConcatCols(parts) => {
                let mut out = Mat::zeros(node.rows, node.cols);
                let mut off = 0;
                for p in parts {
                    let x = v(p);
                    for r in 0..node.rows {
                        out.row_mut(r)[off..off + x.cols()].copy_from_slice(x.row(r));
                    }
                    off += x.cols();
                }
                out
            }
            Op::ConcatRows(parts) => {
                let mut data = Vec::with_capacity(node.rows * node.cols);
                for p in parts {
                    data.extend_from_slice(v(p).as_slice());
                }
                Mat::from_vec(node.rows, node.cols, data)?
            }
            Op::MulRow { input, row } => {
                let g = v(row).as_slice();
                let mut out = v(input).clone();
                for r in 0..node.rows {
                    for (o, s) in out.row_mut(r).iter_mut().zip(g) {
                        *o *= s;
                    }
                }
                out
            }
            Op::MulCol { input, col } => {
                let s = v(col);
                let mut out = v(input).clone();
                for r in 0..node.rows {
                    let f = s.get(r, 0);
                    out.row_mut(r).iter_mut().for_each(|o| *o *= f);
                }
                out
            }
            Op::Sum(a) => Mat::filled(1, 1, v(a).sum()),
        })
    }

    fn needs_grad(&self) -> Vec<bool> {
        let mut needs = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            needs[i] = match &node.op {
                Op::Leaf { differentiable, .. } => *differentiable,
                // Index outputs never carry gradient; whether their source did
                // is checked separately in `backward`.
                Op::TopK { .. } | Op::IndexMask { .. } | Op::Constant(_) => false,
                op => op.float_operands().iter().any(|o| needs[o.0]),
            };
        }
        needs
    }

    /// Leaves that the output depends on.
    fn reachable_from_output(&self) -> Vec<bool> {
        let mut reach = vec![false; self.nodes.len()];
        if let Some(out) = self.output {
            reach[out.0] = true;
            for i in (0..self.nodes.len()).rev() {
                if !reach[i] {
                    continue;
                }
                let op = &self.nodes[i].op;
                for o in op.float_operands() {
                    reach[o.0] = true;
                }
                if let Op::TopK { input, .. } = op {
                    reach[input.0] = true;
                }
            }
        }
        reach
    }

    /// Reverse accumulation from the designated output with the given seed
    /// (use a 1×1 matrix of 1.0 for a scalar loss).
    pub fn backward(&self, values: &Values, seed: &Mat) -> Result<GradientSet> {
        let out = self
            .output
            .ok_or_else(|| Error::Structural("graph has no designated output".into()))?;
        let out_shape = self.shape(out);
        if seed.shape() != out_shape {
            return Err(Error::shape(
                self.describe(out),
                format!("seed {:?} vs output {:?}", seed.shape(), out_shape),
            ));
        }
        let needs = self.needs_grad();
        let reach = self.reachable_from_output();
        // An index node used as a numeric operand breaks the gradient path.
        for (i, node) in self.nodes.iter().enumerate() {
            if !reach[i] {
                continue;
            }
            for o in node.op.float_operands() {
                if let Op::TopK { input, .. } = &self.nodes[o.0].op {
                    if needs[input.0] {
                        return Err(Error::NonDifferentiable(self.describe(o)));
                    }
                }
            }
        }
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed.clone());

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf { .. } = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, values, &needs, &mut grads);
        }

        let mut set = GradientSet::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf {
                name,
                differentiable: true,
            } = &node.op
            {
                if reach[i] {
                    let g = grads[i]
                        .take()
                        .unwrap_or_else(|| Mat::zeros(node.rows, node.cols));
                    set.insert(name.clone(), g);
                }
            }
        }
        Ok(set)
    }

    fn backward_node(
        &self,
        node: &Node,
        g: &Mat,
        values: &Values,
        needs: &[bool],
        grads: &mut [Option<Mat>],
    ) {
        let v = |id: &NodeId| values.get(*id);
        let mut acc = |id: NodeId, d: Mat| {
            if !needs[id.0] {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => existing.axpy(1.0, &d),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf { .. } | Op::Constant(_) | Op::TopK { .. } | Op::IndexMask { .. } => {}
            Op::MatMul(a, b) => {
                if needs[a.0] {
                    acc(*a, g.matmul_t(v(b)));
                }
                if needs[b.0] {
                    acc(*b, v(a).t_matmul(g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if needs[a.0] {
                    acc(*a, g.hadamard(v(b)));
                }
                if needs[b.0] {
                    acc(*b, g.hadamard(v(a)));
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::RowSoftmax(a) => {
                let y = softmax_of(values, node, a);
                let mut d = Mat::zeros(node.rows, node.cols);
                for r in 0..node.rows {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let inner: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((o, &yv), &gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - inner);
                    }
                }
                acc(*a, d);
            }
            Op::RmsNorm(a, eps) => {
                let x = v(a);
                let n = node.cols as f64;
                let mut d = Mat::zeros(node.rows, node.cols);
                for r in 0..node.rows {
                    let xr = x.row(r);
                    let rms = (xr.iter().map(|t| t * t).sum::<f64>() / n + eps).sqrt();
                    let gr = g.row(r);
                    let inner: f64 = xr.iter().zip(gr).map(|(x, g)| x / rms * g).sum::<f64>() / n;
                    for ((o, &xv), &gv) in d.row_mut(r).iter_mut().zip(xr).zip(gr) {
                        *o = (gv - xv / rms * inner) / rms;
                    }
                }
                acc(*a, d);
            }
            Op::LayerNorm(a, eps) => {
                let x = v(a);
                let n = node.cols as f64;
                let mut d = Mat::zeros(node.rows, node.cols);
                for r in 0..node.rows {
                    let xr = x.row(r);
                    let mean = xr.iter().sum::<f64>() / n;
                    let var = xr.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n;
                    let sigma = (var + eps).sqrt();
                    let gr = g.row(r);
                    let g_mean = gr.iter().sum::<f64>() / n;
                    let gy: f64 = xr
                        .iter()
                        .zip(gr)
                        .map(|(x, g)| (x - mean) / sigma * g)
                        .sum::<f64>()
                        / n;
                    for ((o, &xv), &gv) in d.row_mut(r).iter_mut().zip(xr).zip(gr) {
                        let y = (xv - mean) / sigma;
                        *o = (gv - g_mean - y * gy) / sigma;
                    }
                }
                acc(*a, d);
            }
            Op::Silu(a) => {
                let d = v(a).zip_map(g, |x, g| {
                    let s = sigmoid(x);
                    g * s * (1.0 + x * (1.0 - s))
                });
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let d = v(a).zip_map(g, |x, g| {
                    let s = sigmoid(x);
                    g * s * (1.0 - s)
                });
                acc(*a, d);
            }
            Op::Exp(a) => acc(*a, v(a).zip_map(g, |x, g| g * x.exp())),
            Op::Log(a) => acc(*a, v(a).zip_map(g, |x, g| g / x)),
            Op::Sqrt(a) => acc(
                *a,
                v(a).zip_map(g, |x, g| if x > 0.0 { g / (2.0 * x.sqrt()) } else { 0.0 }),
            ),
            Op::GatherRows { table, indices } => {
                let (tr, tc) = self.shape(*table);
                let idx = v(indices);
                let mut d = Mat::zeros(tr, tc);
                for r in 0..node.rows {
                    let k = idx.get(r, 0) as usize;
                    for (o, &gv) in d.row_mut(k).iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                }
                acc(*table, d);
            }
            Op::GatherCols { input, indices } => {
                let (ir, ic) = self.shape(*input);
                let idx = v(indices);
                let mut d = Mat::zeros(ir, ic);
                for r in 0..node.rows {
                    for j in 0..node.cols {
                        let c = idx.get(r, j) as usize;
                        d.set(r, c, d.get(r, c) + g.get(r, j));
                    }
                }
                acc(*input, d);
            }
            Op::ScatterCols { values, indices } => {
                let (vr, vc) = self.shape(*values);
                let idx = v(indices);
                let mut d = Mat::zeros(vr, vc);
                for r in 0..vr {
                    for j in 0..vc {
                        d.set(r, j, g.get(r, idx.get(r, j) as usize));
                    }
                }
                acc(*values, d);
            }
            Op::CrossEntropy { logits, targets } => {
                let z = v(logits);
                let t = v(targets);
                let scale = g.get(0, 0) / z.rows() as f64;
                let mut d = row_softmax(z);
                for r in 0..z.rows() {
                    let k = t.get(r, 0) as usize;
                    let row = d.row_mut(r);
                    row[k] -= 1.0;
                    row.iter_mut().for_each(|x| *x *= scale);
                }
                acc(*logits, d);
            }
            Op::SliceCols { input, start } => {
                let (ir, ic) = self.shape(*input);
                let mut d = Mat::zeros(ir, ic);
                for r in 0..ir {
                    d.row_mut(r)[*start..*start + node.cols].copy_from_slice(g.row(r));
                }
                acc(*input, d);
            }
            Op::SliceRows { input, start } => {
                let (ir, ic) = self.shape(*input);
                let mut d = Mat::zeros(ir, ic);
                d.as_mut_slice()[start * ic..(start + node.rows) * ic].copy_from_slice(g.as_slice());
                acc(*input, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let (pr, pc) = self.shape(*p);
                    if needs[p.0] {
                        let mut d = Mat::zeros(pr, pc);
                        for r in 0..pr {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + pc]);
                        }
                        acc(*p, d);
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let (pr, pc) = self.shape(*p);
                    if needs[p.0] {
                        let d = Mat::from_vec(pr, pc, g.as_slice()[off * pc..(off + pr) * pc].to_vec())
                            .expect("slice of finite gradient");
                        acc(*p, d);
                    }
                    off += pr;
                }
            }
            Op::MulRow { input, row } => {
                let x = v(input);
                let s = v(row);
                if needs[input.0] {
                    let mut d = g.clone();
                    for r in 0..node.rows {
                        for (o, f) in d.row_mut(r).iter_mut().zip(s.as_slice()) {
                            *o *= f;
                        }
                    }
                    acc(*input, d);
                }
                if needs[row.0] {
                    let mut d = Mat::zeros(1, node.cols);
                    for r in 0..node.rows {
                        for ((o, &gv), &xv) in d.as_mut_slice().iter_mut().zip(g.row(r)).zip(x.row(r)) {
                            *o += gv * xv;
                        }
                    }
                    acc(*row, d);
                }
            }
            Op::MulCol { input, col } => {
                let x = v(input);
                let s = v(col);
                if needs[input.0] {
                    let mut d = g.clone();
                    for r in 0..node.rows {
                        let f = s.get(r, 0);
                        d.row_mut(r).iter_mut().for_each(|o| *o *= f);
                    }
                    acc(*input, d);
                }
                if needs[col.0] {
                    let mut d = Mat::zeros(node.rows, 1);
                    for r in 0..node.rows {
                        let dotv: f64 = g.row(r).iter().zip(x.row(r)).map(|(a, b)| a * b).sum();
                        d.set(r, 0, dotv);
                    }
                    acc(*col, d);
                }
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Mat::filled(r, c, g.get(0, 0)));
            }
        }
    }
}

fn softmax_of(values: &Values, node: &Node, a: &NodeId) -> Mat {
    // The forward value of this node is the softmax itself, but nodes are
    // addressed by id; recompute from the operand to keep the helper local.
    let y = row_softmax(values.get(*a));
    debug_assert_eq!(y.shape(), (node.rows, node.cols));
    y
}

fn as_index(v: f64, bound: usize, node: usize) -> Result<usize> {
    if v < 0.0 || v.fract() != 0.0 || v as usize >= bound {
        return Err(Error::InvalidInput(format!(
            "index {v} out of range 0..{bound} at node #{node}"
        )));
    }
    Ok(v as usize)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log Σ exp(z)` with the max-shift.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn row_softmax(x: &Mat) -> Mat {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

pub fn rms_norm_rows(x: &Mat, eps: f64) -> Mat {
    let n = x.cols() as f64;
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let rms = (row.iter().map(|t| t * t).sum::<f64>() / n + eps).sqrt();
        row.iter_mut().for_each(|v| *v /= rms);
    }
    out
}

pub fn layer_norm_rows(x: &Mat, eps: f64) -> Mat {
    let n = x.cols() as f64;
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n;
        let sigma = (var + eps).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) / sigma);
    }
    out
}

/// Per-row indices of the `k` largest entries, descending, ties to the lowest index.
pub fn top_k_indices(x: &Mat, k: usize) -> Mat {
    let mut out = Mat::zeros(x.rows(), k);
    let mut order: Vec<usize> = Vec::with_capacity(x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        order.clear();
        order.extend(0..x.cols());
        // Stable sort keeps lower indices first among equal scores.
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
        for (j, &col) in order.iter().take(k).enumerate() {
            out.set(r, j, col as f64);
        }
    }
    out
}
