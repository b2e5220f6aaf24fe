//! Reverse-mode tape over dense/sparse matrix primitives.
//!
//! Ops are recorded eagerly (define-by-run). The backward pass emits its
//! adjoint computations as ordinary tape ops, so a gradient is itself a
//! differentiable node and vector-Jacobian products through a recorded
//! gradient (reverse-over-reverse) need no extra machinery. Jacobians are
//! never materialized.
//!
//! Summation order inside every primitive is fixed (ascending index), so
//! replaying a tape from identical leaf values reproduces every node
//! bit-exactly.

use std::rc::Rc;

use super::{DenseMatrix, SparsePattern};
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    MulElem(NodeId, NodeId),
    /// Elementwise product with a constant mask (adjoint routing for the
    /// piecewise-linear ops).
    MulMask(NodeId, Rc<DenseMatrix>),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Clamp01(NodeId),
    /// Mask entries are 0 or 1/(1-rate); recorded so backward and replay
    /// differentiate the same stochastic function that ran forward.
    Dropout(NodeId, Rc<DenseMatrix>),
    Exp(NodeId),
    Recip(NodeId),
    ConcatCols(NodeId, NodeId),
    SliceCols(NodeId, usize, usize),
    /// Embed into a zero matrix with `total` columns at column `offset`.
    PadCols(NodeId, usize, usize),
    RowSum(NodeId),
    ColBroadcast(NodeId, usize),
    Sum(NodeId),
    BroadcastScalar(NodeId, usize, usize),
    LogSumExpRow(NodeId),
    MaskedSumCol(NodeId, Rc<Vec<usize>>),
    ScatterCol(NodeId, Rc<Vec<usize>>, usize),
    /// Sum of x[i, labels[i]] over masked rows.
    GatherLabels(NodeId, Rc<Vec<usize>>, Rc<Vec<usize>>),
    ScatterLabels(NodeId, Rc<Vec<usize>>, Rc<Vec<usize>>, usize, usize),
    /// out[i,:] = sum_{j in row i} vals[e(i,j)] * d[j,:]
    Spmm(Rc<SparsePattern>, NodeId, NodeId),
    /// out[e(i,j)] = dot(a[i,:], b[j,:])
    Sddmm(Rc<SparsePattern>, NodeId, NodeId),
    /// Edge values of the transposed matrix (patterns are symmetric, so
    /// this is the involutive transpose permutation).
    TransposeEdges(NodeId, Rc<SparsePattern>),
}

struct Node {
    op: Op,
    value: Rc<DenseMatrix>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient nodes for a set of leaves, in the order requested.
pub struct GradientMap {
    entries: Vec<(NodeId, NodeId)>,
    second_order: bool,
}

impl GradientMap {
    pub fn entries(&self) -> &[(NodeId, NodeId)] {
        &self.entries
    }

    pub fn grad_of(&self, leaf: NodeId) -> Option<NodeId> {
        self.entries.iter().find(|(l, _)| *l == leaf).map(|(_, g)| *g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SecondOrder {
    Enabled,
    Disabled,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Rc<DenseMatrix> {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: DenseMatrix) -> NodeId {
        self.nodes.push(Node { op, value: Rc::new(value) });
        self.nodes.len() - 1
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        let v = &self.nodes[id].value;
        (v.rows(), v.cols())
    }

    // ── leaves and constants ─────────────────────────────────────────

    pub fn leaf(&mut self, value: DenseMatrix) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn constant(&mut self, value: DenseMatrix) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn constant_shared(&mut self, value: Rc<DenseMatrix>) -> NodeId {
        self.nodes.push(Node { op: Op::Constant, value });
        self.nodes.len() - 1
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes.get(id).map(|n| &n.op), Some(Op::Leaf))
    }

    // ── recorded primitives ──────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.shape(a);
        let (br, _bc) = self.shape(b);
        if ac != br {
            return Err(Error::shape(format!("matmul {}x{} * {}x{}", ar, ac, br, _bc)));
        }
        let op = Op::MatMul(a, b);
        let v = self.eval(&op)?;
        Ok(self.push(op, v))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let op = Op::Transpose(a);
        let v = self.eval(&op)?;
        Ok(self.push(op, v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add")?;
        let op = Op::Add(a, b);
        let v = self.eval(&op)?;
        Ok(self.push(op, v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub")?;
        let op = Op::Sub(a, b);
        let v = self.eval(&op)?;
        Ok(self.push(op, v))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let op = Op::Scale(a, c);
        let v = self.eval(&op)?;
        Ok(self.push(op, v))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul_elem")?;
        let op = Op::MulElem(a, b);
        let v = self.eval(&op)?;
        Ok(self.push(op, v))
    }

    pub fn mul_mask(&mut self, a: NodeId, mask: Rc<DenseMatrix>) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if mask.rows() != r || mask.cols() != c {
            return Err(Error::shape("mul_mask shape"));
        }
        let op = Op::MulMask(a, mask);
        let v = self.eval(&op)?;
        Ok(self.push(op, v))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let op = Op::Relu(a);
        let v = self.eval(&op)?;
        Ok(self.push(op, v))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        let op = Op::LeakyRelu(a, slope);
        let v = self.eval(&op)?;
        Ok(self.push(op, v))
    }

    pub fn clamp01(&mut self, a: NodeId) -> Result<NodeId> {
        let op = Op::Clamp01(a);
        let v = self.eval(&op)?;
        Ok(self.push(op, v))
    }

    /// Apply a pre-drawn dropout mask (entries 0 or 1/(1-rate)).
    pub fn dropout_with_mask(&mut self, a: NodeId, mask: Rc<DenseMatrix>) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if mask.rows() != r || mask.cols() != c {
            return Err(Error::shape("dropout mask shape"));
        }
        let op = Op::Dropout(a, mask);
        let v = self.eval(&op)?;
        Ok(self.push(op, v))
    }

    /// Draw a fresh mask from `rng` and apply it. `rate` in [0,1).
    /// Identity when not training or rate == 0.
    pub fn dropout(
        &mut self,
        a: NodeId,
        rate: f64,
        rng: &mut super::RngStream,
        training: bool,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::contract(format!("dropout rate {} outside [0,1)", rate)));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let (r, c) = self.shape(a);
        let keep_scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..r * c)
            .map(|_| if rng.next_f64() < rate { 0.0 } else { keep_scale })
            .collect();
        self.dropout_with_mask(a, Rc::new(DenseMatrix::from_raw(r, c, mask)))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let op = Op::Exp(a);
        let v = self.eval(&op)?;
        Ok(self.push(op, v))
    }

    pub fn recip(&mut self, a: NodeId) -> Result<NodeId> {
        let op = Op::Recip(a);
        let v = self.eval(&op)?;
        Ok(self.push(op, v))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, _) = self.shape(a);
        let (br, _) = self.shape(b);
        if ar != br {
            return Err(Error::shape(format!("concat_cols rows {} != {}", ar, br)));
        }
        let op = Op::ConcatCols(a, b);
        let v = self.eval(&op)?;
        Ok(self.push(op, v))
    }

    pub fn slice_cols(&mut self, a: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let (_, c) = self.shape(a);
        if lo > hi || hi > c {
            return Err(Error::shape(format!("slice_cols {}..{} of {} cols", lo, hi, c)));
        }
        let op = Op::SliceCols(a, lo, hi);
        let v = self.eval(&op)?;
        Ok(self.push(op, v))
    }

    pub fn pad_cols(&mut self, a: NodeId, offset: usize, total: usize) -> Result<NodeId> {
        let (_, c) = self.shape(a);
        if offset + c > total {
            return Err(Error::shape("pad_cols overflow"));
        }
        let op = Op::PadCols(a, offset, total);
        let v = self.eval(&op)?;
        Ok(self.push(op, v))
    }

    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let op = Op::RowSum(a);
        let v = self.eval(&op)?;
        Ok(self.push(op, v))
    }

    pub fn col_broadcast(&mut self, a: NodeId, cols: usize) -> Result<NodeId> {
        let (_, c) = self.shape(a);
        if c != 1 {
            return Err(Error::shape("col_broadcast input must be a column"));
        }
        let op = Op::ColBroadcast(a, cols);
        let v = self.eval(&op)?;
        Ok(self.push(op, v))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let op = Op::Sum(a);
        let v = self.eval(&op)?;
        Ok(self.push(op, v))
    }

    pub fn broadcast_scalar(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if r * c != 1 {
            return Err(Error::shape("broadcast_scalar input must be 1x1"));
        }
        let op = Op::BroadcastScalar(a, rows, cols);
        let v = self.eval(&op)?;
        Ok(self.push(op, v))
    }

    pub fn logsumexp_row(&mut self, a: NodeId) -> Result<NodeId> {
        let op = Op::LogSumExpRow(a);
        let v = self.eval(&op)?;
        Ok(self.push(op, v))
    }

    pub fn masked_sum_col(&mut self, a: NodeId, mask: Rc<Vec<usize>>) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if c != 1 {
            return Err(Error::shape("masked_sum_col input must be a column"));
        }
        if mask.iter().any(|&i| i >= r) {
            return Err(Error::contract("mask index out of range"));
        }
        let op = Op::MaskedSumCol(a, mask);
        let v = self.eval(&op)?;
        Ok(self.push(op, v))
    }

    pub fn scatter_col(&mut self, a: NodeId, mask: Rc<Vec<usize>>, rows: usize) -> Result<NodeId> {
        let op = Op::ScatterCol(a, mask, rows);
        let v = self.eval(&op)?;
        Ok(self.push(op, v))
    }

    pub fn gather_labels(
        &mut self,
        a: NodeId,
        labels: Rc<Vec<usize>>,
        mask: Rc<Vec<usize>>,
    ) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if labels.len() != r {
            return Err(Error::shape(format!("labels len {} != rows {}", labels.len(), r)));
        }
        if mask.iter().any(|&i| i >= r) || mask.iter().any(|&i| labels[i] >= c) {
            return Err(Error::contract("gather_labels index out of range"));
        }
        let op = Op::GatherLabels(a, labels, mask);
        let v = self.eval(&op)?;
        Ok(self.push(op, v))
    }

    pub fn scatter_labels(
        &mut self,
        a: NodeId,
        labels: Rc<Vec<usize>>,
        mask: Rc<Vec<usize>>,
        rows: usize,
        cols: usize,
    ) -> Result<NodeId> {
        let op = Op::ScatterLabels(a, labels, mask, rows, cols);
        let v = self.eval(&op)?;
        Ok(self.push(op, v))
    }

    pub fn spmm(&mut self, pattern: Rc<SparsePattern>, vals: NodeId, d: NodeId) -> Result<NodeId> {
        let (vr, vc) = self.shape(vals);
        let (dr, _) = self.shape(d);
        if vc != 1 || vr != pattern.nnz() {
            return Err(Error::shape(format!(
                "spmm edge values {}x{} vs nnz {}",
                vr,
                vc,
                pattern.nnz()
            )));
        }
        if dr != pattern.n() {
            return Err(Error::shape(format!("spmm dense rows {} vs n {}", dr, pattern.n())));
        }
        let op = Op::Spmm(pattern, vals, d);
        let v = self.eval(&op)?;
        Ok(self.push(op, v))
    }

    pub fn sddmm(&mut self, pattern: Rc<SparsePattern>, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ar != pattern.n() || br != pattern.n() || ac != bc {
            return Err(Error::shape("sddmm shapes"));
        }
        let op = Op::Sddmm(pattern, a, b);
        let v = self.eval(&op)?;
        Ok(self.push(op, v))
    }

    pub fn transpose_edges(&mut self, vals: NodeId, pattern: Rc<SparsePattern>) -> Result<NodeId> {
        let (vr, vc) = self.shape(vals);
        if vc != 1 || vr != pattern.nnz() {
            return Err(Error::shape("transpose_edges alignment"));
        }
        let op = Op::TransposeEdges(vals, pattern);
        let v = self.eval(&op)?;
        Ok(self.push(op, v))
    }

    /// Mean over masked rows of -log softmax(logits[i])[labels[i]].
    pub fn masked_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: Rc<Vec<usize>>,
        mask: Rc<Vec<usize>>,
    ) -> Result<NodeId> {
        if mask.is_empty() {
            return Err(Error::contract("masked_cross_entropy: empty mask"));
        }
        let lse = self.logsumexp_row(logits)?;
        let lse_sum = self.masked_sum_col(lse, mask.clone())?;
        let picked = self.gather_labels(logits, labels, mask.clone())?;
        let diff = self.sub(lse_sum, picked)?;
        self.scale(diff, 1.0 / mask.len() as f64)
    }

    // ── evaluation ───────────────────────────────────────────────────

    fn binary_same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            let (ar, ac) = self.shape(a);
            let (br, bc) = self.shape(b);
            return Err(Error::shape(format!("{}: {}x{} vs {}x{}", what, ar, ac, br, bc)));
        }
        Ok(())
    }

    fn eval(&self, op: &Op) -> Result<DenseMatrix> {
        let val = |id: NodeId| -> &DenseMatrix { &self.nodes[id].value };
        let out = match op {
            Op::Leaf | Op::Constant => unreachable!("leaves hold their own values"),
            Op::MatMul(a, b) => {
                let (a, b) = (val(*a), val(*b));
                let (n, k, m) = (a.rows(), a.cols(), b.cols());
                let mut out = vec![0.0; n * m];
                for i in 0..n {
                    let arow = a.row(i);
                    for kk in 0..k {
                        let av = arow[kk];
                        if av == 0.0 {
                            continue;
                        }
                        let brow = b.row(kk);
                        let orow = &mut out[i * m..(i + 1) * m];
                        for j in 0..m {
                            orow[j] += av * brow[j];
                        }
                    }
                }
                DenseMatrix::from_raw(n, m, out)
            }
            Op::Transpose(a) => val(*a).transpose(),
            Op::Add(a, b) => {
                let (a, b) = (val(*a), val(*b));
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
                DenseMatrix::from_raw(a.rows(), a.cols(), data)
            }
            Op::Sub(a, b) => {
                let (a, b) = (val(*a), val(*b));
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
                DenseMatrix::from_raw(a.rows(), a.cols(), data)
            }
            Op::Scale(a, c) => {
                let a = val(*a);
                DenseMatrix::from_raw(a.rows(), a.cols(), a.data().iter().map(|x| x * c).collect())
            }
            Op::MulElem(a, b) => {
                let (a, b) = (val(*a), val(*b));
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
                DenseMatrix::from_raw(a.rows(), a.cols(), data)
            }
            Op::MulMask(a, m) | Op::Dropout(a, m) => {
                let a = val(*a);
                let data = a.data().iter().zip(m.data()).map(|(x, y)| x * y).collect();
                DenseMatrix::from_raw(a.rows(), a.cols(), data)
            }
            Op::Relu(a) => {
                let a = val(*a);
                DenseMatrix::from_raw(
                    a.rows(),
                    a.cols(),
                    a.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
                )
            }
            Op::LeakyRelu(a, s) => {
                let a = val(*a);
                DenseMatrix::from_raw(
                    a.rows(),
                    a.cols(),
                    a.data().iter().map(|&x| if x > 0.0 { x } else { s * x }).collect(),
                )
            }
            Op::Clamp01(a) => {
                let a = val(*a);
                DenseMatrix::from_raw(
                    a.rows(),
                    a.cols(),
                    a.data().iter().map(|&x| x.max(0.0).min(1.0)).collect(),
                )
            }
            Op::Exp(a) => {
                let a = val(*a);
                DenseMatrix::from_raw(a.rows(), a.cols(), a.data().iter().map(|x| x.exp()).collect())
            }
            Op::Recip(a) => {
                let a = val(*a);
                DenseMatrix::from_raw(a.rows(), a.cols(), a.data().iter().map(|x| 1.0 / x).collect())
            }
            Op::ConcatCols(a, b) => {
                let (a, b) = (val(*a), val(*b));
                let (n, ac, bc) = (a.rows(), a.cols(), b.cols());
                let mut data = Vec::with_capacity(n * (ac + bc));
                for i in 0..n {
                    data.extend_from_slice(a.row(i));
                    data.extend_from_slice(b.row(i));
                }
                DenseMatrix::from_raw(n, ac + bc, data)
            }
            Op::SliceCols(a, lo, hi) => {
                let a = val(*a);
                let n = a.rows();
                let mut data = Vec::with_capacity(n * (hi - lo));
                for i in 0..n {
                    data.extend_from_slice(&a.row(i)[*lo..*hi]);
                }
                DenseMatrix::from_raw(n, hi - lo, data)
            }
            Op::PadCols(a, offset, total) => {
                let a = val(*a);
                let n = a.rows();
                let mut out = DenseMatrix::zeros(n, *total);
                for i in 0..n {
                    for (j, &v) in a.row(i).iter().enumerate() {
                        out.set(i, offset + j, v);
                    }
                }
                out
            }
            Op::RowSum(a) => {
                let a = val(*a);
                let data = (0..a.rows()).map(|i| a.row(i).iter().sum()).collect();
                DenseMatrix::from_raw(a.rows(), 1, data)
            }
            Op::ColBroadcast(a, cols) => {
                let a = val(*a);
                let n = a.rows();
                let mut data = Vec::with_capacity(n * cols);
                for i in 0..n {
                    data.extend(std::iter::repeat(a.get(i, 0)).take(*cols));
                }
                DenseMatrix::from_raw(n, *cols, data)
            }
            Op::Sum(a) => DenseMatrix::scalar(val(*a).data().iter().sum()),
            Op::BroadcastScalar(a, rows, cols) => {
                let v = val(*a).data()[0];
                DenseMatrix::from_raw(*rows, *cols, vec![v; rows * cols])
            }
            Op::LogSumExpRow(a) => {
                let a = val(*a);
                let data = (0..a.rows())
                    .map(|i| {
                        let row = a.row(i);
                        let m = row.iter().fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
                        let s: f64 = row.iter().map(|&x| (x - m).exp()).sum();
                        m + s.ln()
                    })
                    .collect();
                DenseMatrix::from_raw(a.rows(), 1, data)
            }
            Op::MaskedSumCol(a, mask) => {
                let a = val(*a);
                DenseMatrix::scalar(mask.iter().map(|&i| a.get(i, 0)).sum())
            }
            Op::ScatterCol(a, mask, rows) => {
                let v = val(*a).data()[0];
                let mut out = DenseMatrix::zeros(*rows, 1);
                for &i in mask.iter() {
                    out.set(i, 0, v);
                }
                out
            }
            Op::GatherLabels(a, labels, mask) => {
                let a = val(*a);
                DenseMatrix::scalar(mask.iter().map(|&i| a.get(i, labels[i])).sum())
            }
            Op::ScatterLabels(a, labels, mask, rows, cols) => {
                let v = val(*a).data()[0];
                let mut out = DenseMatrix::zeros(*rows, *cols);
                for &i in mask.iter() {
                    out.set(i, labels[i], v);
                }
                out
            }
            Op::Spmm(p, vals, d) => {
                let (vals, d) = (val(*vals), val(*d));
                let (n, m) = (p.n(), d.cols());
                let mut out = vec![0.0; n * m];
                let cols = p.col_indices();
                for i in 0..n {
                    let orow = &mut out[i * m..(i + 1) * m];
                    for e in p.row_range(i) {
                        let w = vals.data()[e];
                        let drow = d.row(cols[e]);
                        for j in 0..m {
                            orow[j] += w * drow[j];
                        }
                    }
                }
                DenseMatrix::from_raw(n, m, out)
            }
            Op::Sddmm(p, a, b) => {
                let (a, b) = (val(*a), val(*b));
                let mut out = Vec::with_capacity(p.nnz());
                let cols = p.col_indices();
                for i in 0..p.n() {
                    for e in p.row_range(i) {
                        let arow = a.row(i);
                        let brow = b.row(cols[e]);
                        out.push(arow.iter().zip(brow).map(|(x, y)| x * y).sum());
                    }
                }
                DenseMatrix::from_raw(p.nnz(), 1, out)
            }
            Op::TransposeEdges(vals, p) => {
                let vals = val(*vals);
                let perm = p.transpose_perm();
                let data = perm.iter().map(|&e| vals.data()[e]).collect();
                DenseMatrix::from_raw(p.nnz(), 1, data)
            }
        };
        Ok(out)
    }

    /// Recompute every non-leaf node from current leaf/constant values.
    /// Returns the recomputed values in node order.
    pub fn replay(&self) -> Result<Vec<DenseMatrix>> {
        let mut out = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf | Op::Constant => (*node.value).clone(),
                op => self.eval(op)?,
            };
            out.push(v);
        }
        Ok(out)
    }

    // ── reverse pass ─────────────────────────────────────────────────

    /// Reverse-mode gradients of scalar `loss` for each requested leaf.
    /// The adjoints are recorded as ordinary tape nodes, so the result is
    /// itself differentiable (used by [`Tape::vjp_through_gradient`]).
    pub fn gradients(
        &mut self,
        loss: NodeId,
        leaves: &[NodeId],
        second_order: SecondOrder,
    ) -> Result<GradientMap> {
        if loss >= self.nodes.len() {
            return Err(Error::contract("loss node not on tape"));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::contract("loss must be a 1x1 scalar node"));
        }
        for &l in leaves {
            if !self.is_leaf(l) {
                return Err(Error::contract(format!("node {} is not a leaf on this tape", l)));
            }
        }

        let mut adj: Vec<Option<NodeId>> = vec![None; loss + 1];
        adj[loss] = Some(self.constant(DenseMatrix::scalar(1.0)));

        for id in (0..=loss).rev() {
            let Some(g) = adj[id] else { continue };
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf | Op::Constant => {}
                Op::MatMul(a, b) => {
                    let bt = self.transpose(b)?;
                    let da = self.matmul(g, bt)?;
                    self.accumulate(&mut adj, a, da)?;
                    let at = self.transpose(a)?;
                    let db = self.matmul(at, g)?;
                    self.accumulate(&mut adj, b, db)?;
                }
                Op::Transpose(a) => {
                    let da = self.transpose(g)?;
                    self.accumulate(&mut adj, a, da)?;
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut adj, a, g)?;
                    self.accumulate(&mut adj, b, g)?;
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adj, a, g)?;
                    let db = self.scale(g, -1.0)?;
                    self.accumulate(&mut adj, b, db)?;
                }
                Op::Scale(a, c) => {
                    let da = self.scale(g, c)?;
                    self.accumulate(&mut adj, a, da)?;
                }
                Op::MulElem(a, b) => {
                    let da = self.mul_elem(g, b)?;
                    self.accumulate(&mut adj, a, da)?;
                    let db = self.mul_elem(g, a)?;
                    self.accumulate(&mut adj, b, db)?;
                }
                Op::MulMask(a, m) | Op::Dropout(a, m) => {
                    let da = self.mul_mask(g, m)?;
                    self.accumulate(&mut adj, a, da)?;
                }
                Op::Relu(a) => {
                    // subgradient at 0 defined as 0
                    let mask = self.indicator_mask(a, |x| x > 0.0, 0.0);
                    let da = self.mul_mask(g, mask)?;
                    self.accumulate(&mut adj, a, da)?;
                }
                Op::LeakyRelu(a, s) => {
                    let mask = self.indicator_mask(a, |x| x > 0.0, s);
                    let da = self.mul_mask(g, mask)?;
                    self.accumulate(&mut adj, a, da)?;
                }
                Op::Clamp01(a) => {
                    // subgradient 0 exactly at the 0 and 1 boundaries
                    let mask = self.indicator_mask(a, |x| x > 0.0 && x < 1.0, 0.0);
                    let da = self.mul_mask(g, mask)?;
                    self.accumulate(&mut adj, a, da)?;
                }
                Op::Exp(a) => {
                    let da = self.mul_elem(g, id)?;
                    self.accumulate(&mut adj, a, da)?;
                }
                Op::Recip(a) => {
                    let t = self.mul_elem(g, id)?;
                    let t = self.mul_elem(t, id)?;
                    let da = self.scale(t, -1.0)?;
                    self.accumulate(&mut adj, a, da)?;
                }
                Op::ConcatCols(a, b) => {
                    let (_, ac) = self.shape(a);
                    let (_, bc) = self.shape(b);
                    let da = self.slice_cols(g, 0, ac)?;
                    self.accumulate(&mut adj, a, da)?;
                    let db = self.slice_cols(g, ac, ac + bc)?;
                    self.accumulate(&mut adj, b, db)?;
                }
                Op::SliceCols(a, lo, _hi) => {
                    let (_, ac) = self.shape(a);
                    let da = self.pad_cols(g, lo, ac)?;
                    self.accumulate(&mut adj, a, da)?;
                }
                Op::PadCols(a, offset, _total) => {
                    let (_, ac) = self.shape(a);
                    let da = self.slice_cols(g, offset, offset + ac)?;
                    self.accumulate(&mut adj, a, da)?;
                }
                Op::RowSum(a) => {
                    let (_, ac) = self.shape(a);
                    let da = self.col_broadcast(g, ac)?;
                    self.accumulate(&mut adj, a, da)?;
                }
                Op::ColBroadcast(a, _) => {
                    let da = self.row_sum(g)?;
                    self.accumulate(&mut adj, a, da)?;
                }
                Op::Sum(a) => {
                    let (ar, ac) = self.shape(a);
                    let da = self.broadcast_scalar(g, ar, ac)?;
                    self.accumulate(&mut adj, a, da)?;
                }
                Op::BroadcastScalar(a, _, _) => {
                    let da = self.sum(g)?;
                    self.accumulate(&mut adj, a, da)?;
                }
                Op::LogSumExpRow(a) => {
                    // d lse / dx = softmax(x), expressed with tape ops so the
                    // rule stays differentiable
                    let (_, ac) = self.shape(a);
                    let lse_b = self.col_broadcast(id, ac)?;
                    let shifted = self.sub(a, lse_b)?;
                    let softmax = self.exp(shifted)?;
                    let gb = self.col_broadcast(g, ac)?;
                    let da = self.mul_elem(gb, softmax)?;
                    self.accumulate(&mut adj, a, da)?;
                }
                Op::MaskedSumCol(a, mask) => {
                    let (ar, _) = self.shape(a);
                    let da = self.scatter_col(g, mask, ar)?;
                    self.accumulate(&mut adj, a, da)?;
                }
                Op::ScatterCol(a, mask, _) => {
                    let da = self.masked_sum_col(g, mask)?;
                    self.accumulate(&mut adj, a, da)?;
                }
                Op::GatherLabels(a, labels, mask) => {
                    let (ar, ac) = self.shape(a);
                    let da = self.scatter_labels(g, labels, mask, ar, ac)?;
                    self.accumulate(&mut adj, a, da)?;
                }
                Op::ScatterLabels(a, labels, mask, _, _) => {
                    let da = self.gather_labels(g, labels, mask)?;
                    self.accumulate(&mut adj, a, da)?;
                }
                Op::Spmm(p, vals, d) => {
                    let dvals = self.sddmm(p.clone(), g, d)?;
                    self.accumulate(&mut adj, vals, dvals)?;
                    let vt = self.transpose_edges(vals, p.clone())?;
                    let dd = self.spmm(p, vt, g)?;
                    self.accumulate(&mut adj, d, dd)?;
                }
                Op::Sddmm(p, a, b) => {
                    let da = self.spmm(p.clone(), g, b)?;
                    self.accumulate(&mut adj, a, da)?;
                    let gt = self.transpose_edges(g, p.clone())?;
                    let db = self.spmm(p, gt, a)?;
                    self.accumulate(&mut adj, b, db)?;
                }
                Op::TransposeEdges(vals, p) => {
                    let dv = self.transpose_edges(g, p)?;
                    self.accumulate(&mut adj, vals, dv)?;
                }
            }
        }

        let mut entries = Vec::with_capacity(leaves.len());
        for &l in leaves {
            let g = match adj.get(l).copied().flatten() {
                Some(g) => g,
                None => {
                    let (r, c) = self.shape(l);
                    self.constant(DenseMatrix::zeros(r, c))
                }
            };
            entries.push((l, g));
        }
        Ok(GradientMap { entries, second_order: second_order == SecondOrder::Enabled })
    }

    /// Given gradients `g` of some scalar w.r.t. leaves and a cotangent `v`
    /// aligned to those leaves, compute v^T (dg/d leaf) for each leaf in
    /// `wrt` by differentiating sum_k <g_k, v_k>.
    pub fn vjp_through_gradient(
        &mut self,
        grads: &GradientMap,
        cotangents: &[DenseMatrix],
        wrt: &[NodeId],
    ) -> Result<GradientMap> {
        if !grads.second_order {
            return Err(Error::contract(
                "vjp_through_gradient requires second-order recording",
            ));
        }
        if cotangents.len() != grads.entries.len() {
            return Err(Error::shape("one cotangent per gradient entry required"));
        }
        let mut dot: Option<NodeId> = None;
        for ((_, g), v) in grads.entries.iter().zip(cotangents) {
            let gv = self.value(*g);
            if !gv.same_shape(v) {
                return Err(Error::shape("cotangent shape mismatch"));
            }
            let vc = self.constant(v.clone());
            let prod = self.mul_elem(*g, vc)?;
            let s = self.sum(prod)?;
            dot = Some(match dot {
                None => s,
                Some(acc) => self.add(acc, s)?,
            });
        }
        let dot = dot.ok_or_else(|| Error::contract("empty gradient map"))?;
        self.gradients(dot, wrt, SecondOrder::Enabled)
    }

    fn indicator_mask(&self, a: NodeId, pred: impl Fn(f64) -> bool, off_value: f64) -> Rc<DenseMatrix> {
        let v = &self.nodes[a].value;
        let data = v
            .data()
            .iter()
            .map(|&x| if pred(x) { 1.0 } else { off_value })
            .collect();
        Rc::new(DenseMatrix::from_raw(v.rows(), v.cols(), data))
    }

    fn accumulate(
        &mut self,
        adj: &mut [Option<NodeId>],
        target: NodeId,
        contrib: NodeId,
    ) -> Result<()> {
        adj[target] = Some(match adj[target] {
            None => contrib,
            Some(existing) => self.add(existing, contrib)?,
        });
        Ok(())
    }
}
