//! Tape-based reverse-mode differentiation over a closed set of matrix ops.
//!
//! Every op appends a node whose inputs precede it, so the node list is a
//! topological order by construction and [`Tape::backward`] is a single
//! reverse sweep. Leaves are either parameters (gradients wanted) or
//! constants (gradients skipped).

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{dot, sigmoid, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive op kinds, used for fault injection and error reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulT,
    Add,
    Sub,
    Hadamard,
    Affine,
    Sigmoid,
    Silu,
    Relu,
    ConcatCols,
    SelectCols,
    DiagScaleCols,
    LayerNorm,
    Softmax,
    SegmentAttention,
    GatherRows,
    StackFrames,
    AddRowBias,
    Sum,
    Mean,
    SteThreshold,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 21] = [
        OpKind::MatMul,
        OpKind::MatMulT,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Hadamard,
        OpKind::Affine,
        OpKind::Sigmoid,
        OpKind::Silu,
        OpKind::Relu,
        OpKind::ConcatCols,
        OpKind::SelectCols,
        OpKind::DiagScaleCols,
        OpKind::LayerNorm,
        OpKind::Softmax,
        OpKind::SegmentAttention,
        OpKind::GatherRows,
        OpKind::StackFrames,
        OpKind::AddRowBias,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SteThreshold,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::MatMulT => "matmul_t",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Hadamard => "hadamard",
            OpKind::Affine => "affine",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Silu => "silu",
            OpKind::Relu => "relu",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SelectCols => "select_cols",
            OpKind::DiagScaleCols => "diag_scale_cols",
            OpKind::LayerNorm => "layernorm",
            OpKind::Softmax => "softmax",
            OpKind::SegmentAttention => "segment_attention",
            OpKind::GatherRows => "gather_rows",
            OpKind::StackFrames => "stack_frames",
            OpKind::AddRowBias => "add_row_bias",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SteThreshold => "ste_threshold",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::DIFFERENTIABLE
            .iter()
            .copied()
            .chain(std::iter::once(OpKind::Leaf))
            .find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Pointwise kinds accepted by [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Hadamard,
    Scale(f64),
    Sigmoid,
    Silu,
    Relu,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Silu(Var),
    Relu(Var),
    ConcatCols(Var, Var),
    SelectCols(Var, Vec<usize>),
    DiagScaleCols(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    SegmentAttention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<(usize, usize)>,
        scale: f64,
        probs: Vec<Matrix>,
    },
    GatherRows {
        sources: Vec<Var>,
        index: Vec<Option<(usize, usize)>>,
    },
    StackFrames {
        x: Var,
        seq_len: usize,
        factor: usize,
    },
    AddRowBias(Var, Var),
    Sum(Var),
    Mean(Var),
    SteThreshold(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulT(..) => OpKind::MatMulT,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Hadamard(..) => OpKind::Hadamard,
            Op::Affine(..) => OpKind::Affine,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Silu(..) => OpKind::Silu,
            Op::Relu(..) => OpKind::Relu,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::SelectCols(..) => OpKind::SelectCols,
            Op::DiagScaleCols(..) => OpKind::DiagScaleCols,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Softmax(..) => OpKind::Softmax,
            Op::SegmentAttention { .. } => OpKind::SegmentAttention,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::StackFrames { .. } => OpKind::StackFrames,
            Op::AddRowBias(..) => OpKind::AddRowBias,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::SteThreshold(..) => OpKind::SteThreshold,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Hadamard(a, b)
            | Op::ConcatCols(a, b)
            | Op::DiagScaleCols(a, b)
            | Op::AddRowBias(a, b) => vec![*a, *b],
            Op::Affine(a, _)
            | Op::Sigmoid(a)
            | Op::Silu(a)
            | Op::Relu(a)
            | Op::SelectCols(a, _)
            | Op::Softmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SteThreshold(a) => vec![*a],
            Op::StackFrames { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::SegmentAttention { q, k, v, .. } => vec![*q, *k, *v],
            Op::GatherRows { sources, .. } => sources.clone(),
        }
    }
}

struct Node {
    op: Op,
    value: Matrix,
    needs_grad: bool,
}

/// Records a forward computation for one backward sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
    ste_anchors: Option<std::collections::VecDeque<Matrix>>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` when no path reaches it from the loss.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.adjoints.get(v.0).and_then(|a| a.as_ref())
    }

    /// Adjoint of `v`, with zeros for unreached nodes.
    pub fn get_or_zeros(&self, v: Var) -> Matrix {
        match self.get(v) {
            Some(m) => m.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Matrix {
        match self.adjoints[v.0].take() {
            Some(m) => m,
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
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

    /// Test hook: perturbs the backward rule of `kind` so gradient checks must fail.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    /// Test hook: the i-th [`Tape::ste_threshold`] call evaluates to
    /// `1[x0 ≥ tau] + (x − x0)` with `x0 = anchors[i]`, an identity gate pinned
    /// at the recorded operating point. Finite differences of that surrogate
    /// are the oracle for straight-through gradients.
    #[doc(hidden)]
    pub fn anchor_ste(&mut self, anchors: Vec<Matrix>) {
        self.ste_anchors = Some(anchors.into());
    }

    /// Inputs of every straight-through gate, in recording order.
    pub fn ste_inputs(&self) -> Vec<Matrix> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::SteThreshold(x) => Some(self.nodes[x.0].value.clone()),
                _ => None,
            })
            .collect()
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(Op::MatMulT(a, b), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(Op::Hadamard(a, b), value))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.affine(a, c, 0.0)
    }

    /// `c·a + shift`, pointwise.
    pub fn affine(&mut self, a: Var, c: f64, shift: f64) -> Var {
        let value = self.value(a).map(|v| c * v + shift);
        self.push(Op::Affine(a, c), value)
    }

    /// `1 − a`, pointwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), value)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        self.push(Op::Silu(a), value)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), value)
    }

    pub fn elementwise(&mut self, kind: Elementwise, operands: &[Var]) -> Result<Var> {
        let arity = match kind {
            Elementwise::Add | Elementwise::Sub | Elementwise::Hadamard => 2,
            _ => 1,
        };
        if operands.len() != arity {
            return Err(Error::Contract(format!(
                "{kind:?} takes {arity} operand(s), got {}",
                operands.len()
            )));
        }
        Ok(match kind {
            Elementwise::Add => self.add(operands[0], operands[1])?,
            Elementwise::Sub => self.sub(operands[0], operands[1])?,
            Elementwise::Hadamard => self.hadamard(operands[0], operands[1])?,
            Elementwise::Scale(c) => self.scale(operands[0], c),
            Elementwise::Sigmoid => self.sigmoid(operands[0]),
            Elementwise::Silu => self.silu(operands[0]),
            Elementwise::Relu => self.relu(operands[0]),
        })
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).concat_cols(self.value(b))?;
        Ok(self.push(Op::ConcatCols(a, b), value))
    }

    pub fn select_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let value = self.value(a).select_cols(idx)?;
        Ok(self.push(Op::SelectCols(a, idx.to_vec()), value))
    }

    /// Scales column `i` of `m` by entry `i` of the `1×cols` row `w`.
    pub fn diag_scale_cols(&mut self, m: Var, w: Var) -> Result<Var> {
        let (wr, wc) = self.shape(w);
        if wr != 1 {
            return Err(Error::shape("diag_scale_cols", self.shape(m), (wr, wc)));
        }
        let value = self.value(m).diag_scale_cols(self.value(w).data())?;
        Ok(self.push(Op::DiagScaleCols(m, w), value))
    }

    /// Row-wise LayerNorm with `1×cols` affine rows `gamma` and `beta`.
    pub fn layernorm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.shape(x);
        if self.shape(gamma) != (1, d) || self.shape(beta) != (1, d) {
            return Err(Error::shape("layernorm", (n, d), self.shape(gamma)));
        }
        if !(eps > 0.0) {
            return Err(Error::Contract(format!("layernorm eps must be positive, got {eps}")));
        }
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Matrix::zeros(n, d);
        let mut out = Matrix::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat.set(r, c, h);
                out.set(r, c, h * g[c] + b[c]);
            }
        }
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            out,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(Op::Softmax(x), out)
    }

    /// Single-head scaled dot-product attention restricted to row segments.
    ///
    /// Each `(start, len)` segment attends only within itself; rows outside
    /// every segment produce zeros.
    pub fn segment_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[(usize, usize)],
        scale: f64,
    ) -> Result<Var> {
        let (n, d) = self.shape(q);
        if self.shape(k) != (n, d) {
            return Err(Error::shape("segment_attention", (n, d), self.shape(k)));
        }
        let (vn, dv) = self.shape(v);
        if vn != n {
            return Err(Error::shape("segment_attention", (n, d), (vn, dv)));
        }
        for &(s, len) in segments {
            if len == 0 || s + len > n {
                return Err(Error::Contract(format!(
                    "attention segment ({s}, {len}) outside {n} rows"
                )));
            }
        }
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Matrix::zeros(n, dv);
        let mut probs = Vec::with_capacity(segments.len());
        for &(s, len) in segments {
            let mut p = Matrix::zeros(len, len);
            for i in 0..len {
                let qi = qv.row(s + i);
                let row = p.row_mut(i);
                for (j, slot) in row.iter_mut().enumerate() {
                    *slot = scale * dot(qi, kv.row(s + j));
                }
                softmax_in_place(row);
            }
            for i in 0..len {
                let out_row = out.row_mut(s + i);
                for j in 0..len {
                    let w = p.get(i, j);
                    for (o, x) in out_row.iter_mut().zip(vv.row(s + j)) {
                        *o += w * x;
                    }
                }
            }
            probs.push(p);
        }
        Ok(self.push(
            Op::SegmentAttention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                scale,
                probs,
            },
            out,
        ))
    }

    /// Builds a matrix whose rows are copied from `sources`; `None` yields a zero row.
    pub fn gather_rows(&mut self, sources: &[Var], index: Vec<Option<(usize, usize)>>) -> Result<Var> {
        let cols = match sources.first() {
            Some(v) => self.shape(*v).1,
            None => return Err(Error::Contract("gather_rows needs a source".into())),
        };
        for s in sources {
            if self.shape(*s).1 != cols {
                return Err(Error::shape("gather_rows", self.shape(sources[0]), self.shape(*s)));
            }
        }
        let mut out = Matrix::zeros(index.len(), cols);
        for (r, entry) in index.iter().enumerate() {
            if let Some((src, row)) = *entry {
                let m = self.value(*sources.get(src).ok_or_else(|| {
                    Error::Contract(format!("gather_rows source {src} out of range"))
                })?);
                if row >= m.rows() {
                    return Err(Error::shape("gather_rows", m.shape(), (row, cols)));
                }
                out.row_mut(r).copy_from_slice(m.row(row));
            }
        }
        Ok(self.push(
            Op::GatherRows {
                sources: sources.to_vec(),
                index,
            },
            out,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mut index = Vec::new();
        for (i, p) in parts.iter().enumerate() {
            for r in 0..self.shape(*p).0 {
                index.push(Some((i, r)));
            }
        }
        self.gather_rows(parts, index)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        if start + len > self.shape(x).0 {
            return Err(Error::shape("slice_rows", self.shape(x), (start, len)));
        }
        self.gather_rows(&[x], (start..start + len).map(|r| Some((0, r))).collect())
    }

    /// Concatenates each run of `factor` consecutive frames into one wider row.
    ///
    /// `x` holds back-to-back sequences of `seq_len` rows; each sequence maps to
    /// `⌈seq_len/factor⌉` rows of width `factor·cols`, zero-padding the last group.
    pub fn stack_frames(&mut self, x: Var, seq_len: usize, factor: usize) -> Result<Var> {
        let (n, d) = self.shape(x);
        if seq_len == 0 || factor == 0 || n % seq_len != 0 {
            return Err(Error::Contract(format!(
                "stack_frames: {n} rows not divisible into sequences of {seq_len} (factor {factor})"
            )));
        }
        let batches = n / seq_len;
        let groups = seq_len.div_ceil(factor);
        let xv = self.value(x);
        let mut out = Matrix::zeros(batches * groups, factor * d);
        for b in 0..batches {
            for g in 0..groups {
                let row = out.row_mut(b * groups + g);
                for i in 0..factor {
                    let t = g * factor + i;
                    if t < seq_len {
                        row[i * d..(i + 1) * d].copy_from_slice(xv.row(b * seq_len + t));
                    }
                }
            }
        }
        Ok(self.push(
            Op::StackFrames {
                x,
                seq_len,
                factor,
            },
            out,
        ))
    }

    /// Adds the `1×cols` row `bias` to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.shape(x);
        if self.shape(bias) != (1, d) {
            return Err(Error::shape("add_row_bias", (n, d), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for r in 0..n {
            for (o, bb) in out.row_mut(r).iter_mut().zip(&b) {
                *o += bb;
            }
        }
        Ok(self.push(Op::AddRowBias(x, bias), out))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Op::Sum(x), Matrix::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let s = self.value(x).mean();
        self.push(Op::Mean(x), Matrix::scalar(s))
    }

    /// Mean squared difference between `pred` and the constant `target`.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let diff = self.sub(pred, target)?;
        let sq = self.hadamard(diff, diff)?;
        Ok(self.mean(sq))
    }

    /// Forward: `1[x ≥ tau]`. Backward: identity (straight-through).
    pub fn ste_threshold(&mut self, x: Var, tau: f64) -> Var {
        let gate = |v: f64| if v >= tau { 1.0 } else { 0.0 };
        let anchor = self.ste_anchors.as_mut().and_then(|a| a.pop_front());
        let value = match anchor {
            Some(x0) if x0.shape() == self.shape(x) => {
                Matrix::from_fn(x0.rows(), x0.cols(), |r, c| gate(x0.get(r, c)) + self.value(x).get(r, c) - x0.get(r, c))
            }
            _ => self.value(x).map(gate),
        };
        self.push(Op::SteThreshold(x), value)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                let fault = if self.fault == Some(node.op.kind()) { 1.5 } else { 1.0 };
                self.propagate(&node.op, &node.value, &g, fault, &mut adj)?;
            }
            adj[idx] = Some(g);
        }
        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Matrix,
        g: &Matrix,
        fault: f64,
        adj: &mut [Option<Matrix>],
    ) -> Result<()> {
        let mut acc = |v: Var, m: Matrix| -> Result<()> {
            let m = if fault != 1.0 { m.scale(fault) } else { m };
            match &mut adj[v.0] {
                Some(a) => a.add_assign(&m),
                slot @ None => {
                    *slot = Some(m);
                    Ok(())
                }
            }
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.matmul_t(self.value(*b))?)?;
                }
                if self.wants(*b) {
                    acc(*b, self.value(*a).t_matmul(g)?)?;
                }
            }
            Op::MatMulT(a, b) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                if self.wants(*a) {
                    acc(*a, g.matmul(self.value(*b))?)?;
                }
                if self.wants(*b) {
                    acc(*b, g.t_matmul(self.value(*a))?)?;
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone())?;
                }
                if self.wants(*b) {
                    acc(*b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone())?;
                }
                if self.wants(*b) {
                    acc(*b, g.scale(-1.0))?;
                }
            }
            Op::Hadamard(a, b) => {
                if a == b {
                    acc(*a, g.hadamard(self.value(*a))?.scale(2.0))?;
                } else {
                    if self.wants(*a) {
                        acc(*a, g.hadamard(self.value(*b))?)?;
                    }
                    if self.wants(*b) {
                        acc(*b, g.hadamard(self.value(*a))?)?;
                    }
                }
            }
            Op::Affine(a, c) => acc(*a, g.scale(*c))?,
            Op::Sigmoid(a) => acc(*a, g.hadamard(&out.map(|s| s * (1.0 - s)))?)?,
            Op::Silu(a) => {
                let d = self.value(*a).map(|x| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                });
                acc(*a, g.hadamard(&d)?)?
            }
            Op::Relu(a) => {
                let mask = self.value(*a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                acc(*a, g.hadamard(&mask)?)?
            }
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a).1;
                let cb = self.shape(*b).1;
                if self.wants(*a) {
                    acc(*a, g.select_cols(&(0..ca).collect::<Vec<_>>())?)?;
                }
                if self.wants(*b) {
                    acc(*b, g.select_cols(&(ca..ca + cb).collect::<Vec<_>>())?)?;
                }
            }
            Op::SelectCols(a, idx) => {
                let (r, c) = self.shape(*a);
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    for (j, &src) in idx.iter().enumerate() {
                        d.set(i, src, d.get(i, src) + g.get(i, j));
                    }
                }
                acc(*a, d)?
            }
            Op::DiagScaleCols(m, w) => {
                if self.wants(*m) {
                    acc(*m, g.diag_scale_cols(self.value(*w).data())?)?;
                }
                if self.wants(*w) {
                    let mv = self.value(*m);
                    let mut dw = Matrix::zeros(1, mv.cols());
                    for i in 0..mv.rows() {
                        for j in 0..mv.cols() {
                            dw.data_mut()[j] += g.get(i, j) * mv.get(i, j);
                        }
                    }
                    acc(*w, dw)?;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, d) = xhat.shape();
                if self.wants(*beta) {
                    let mut db = Matrix::zeros(1, d);
                    for r in 0..n {
                        for (o, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(*beta, db)?;
                }
                if self.wants(*gamma) {
                    let mut dg = Matrix::zeros(1, d);
                    for r in 0..n {
                        for c in 0..d {
                            dg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                        }
                    }
                    acc(*gamma, dg)?;
                }
                if self.wants(*x) {
                    let gam = self.value(*gamma).data();
                    let mut dx = Matrix::zeros(n, d);
                    for r in 0..n {
                        let dxhat: Vec<f64> = (0..d).map(|c| g.get(r, c) * gam[c]).collect();
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = (0..d).map(|c| dxhat[c] * xhat.get(r, c)).sum::<f64>() / d as f64;
                        for c in 0..d {
                            dx.set(r, c, inv_std[r] * (dxhat[c] - m1 - xhat.get(r, c) * m2));
                        }
                    }
                    acc(*x, dx)?;
                }
            }
            Op::Softmax(a) => {
                let mut d = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let p = out.row(r);
                    let gr = g.row(r);
                    let s = dot(p, gr);
                    for (c, slot) in d.row_mut(r).iter_mut().enumerate() {
                        *slot = p[c] * (gr[c] - s);
                    }
                }
                acc(*a, d)?
            }
            Op::SegmentAttention {
                q,
                k,
                v,
                segments,
                scale,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, d) = qv.shape();
                let dv_cols = vv.cols();
                let mut dq = Matrix::zeros(n, d);
                let mut dk = Matrix::zeros(n, d);
                let mut dvm = Matrix::zeros(n, dv_cols);
                for (&(s, len), p) in segments.iter().zip(probs) {
                    // dV_j += Σ_i P_ij dO_i ; dP_ij = dO_i · V_j
                    let mut ds = Matrix::zeros(len, len);
                    for i in 0..len {
                        let go = g.row(s + i);
                        let mut row_dp = vec![0.0; len];
                        for j in 0..len {
                            let pij = p.get(i, j);
                            for (o, gg) in dvm.row_mut(s + j).iter_mut().zip(go) {
                                *o += pij * gg;
                            }
                            row_dp[j] = dot(go, vv.row(s + j));
                        }
                        let sdot = (0..len).map(|j| p.get(i, j) * row_dp[j]).sum::<f64>();
                        for j in 0..len {
                            ds.set(i, j, p.get(i, j) * (row_dp[j] - sdot) * scale);
                        }
                    }
                    for i in 0..len {
                        for j in 0..len {
                            let w = ds.get(i, j);
                            if w == 0.0 {
                                continue;
                            }
                            let kj = kv.row(s + j).to_vec();
                            for (o, x) in dq.row_mut(s + i).iter_mut().zip(&kj) {
                                *o += w * x;
                            }
                            let qi = qv.row(s + i).to_vec();
                            for (o, x) in dk.row_mut(s + j).iter_mut().zip(&qi) {
                                *o += w * x;
                            }
                        }
                    }
                }
                if self.wants(*q) {
                    acc(*q, dq)?;
                }
                if self.wants(*k) {
                    acc(*k, dk)?;
                }
                if self.wants(*v) {
                    acc(*v, dvm)?;
                }
            }
            Op::GatherRows { sources, index } => {
                let mut parts: Vec<Option<Matrix>> = sources
                    .iter()
                    .map(|s| {
                        if self.wants(*s) {
                            let (r, c) = self.shape(*s);
                            Some(Matrix::zeros(r, c))
                        } else {
                            None
                        }
                    })
                    .collect();
                for (r, entry) in index.iter().enumerate() {
                    if let Some((src, row)) = *entry {
                        if let Some(m) = &mut parts[src] {
                            for (o, v) in m.row_mut(row).iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                    }
                }
                for (s, part) in sources.iter().zip(parts) {
                    if let Some(m) = part {
                        acc(*s, m)?;
                    }
                }
            }
            Op::StackFrames {
                x,
                seq_len,
                factor,
            } => {
                let (n, d) = self.shape(*x);
                let batches = n / seq_len;
                let groups = seq_len.div_ceil(*factor);
                let mut dx = Matrix::zeros(n, d);
                for b in 0..batches {
                    for gi in 0..groups {
                        let grow = g.row(b * groups + gi);
                        for i in 0..*factor {
                            let t = gi * factor + i;
                            if t < *seq_len {
                                dx.row_mut(b * seq_len + t)
                                    .copy_from_slice(&grow[i * d..(i + 1) * d]);
                            }
                        }
                    }
                }
                acc(*x, dx)?
            }
            Op::AddRowBias(x, b) => {
                if self.wants(*x) {
                    acc(*x, g.clone())?;
                }
                if self.wants(*b) {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(*b, db)?;
                }
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Matrix::filled(r, c, g.get(0, 0)))?
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Matrix::filled(r, c, g.get(0, 0) / (r * c) as f64))?
            }
            Op::SteThreshold(a) => acc(*a, g.clone())?,
        }
        Ok(())
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
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
    use crate::gradcheck::{finite_diff_grad, rel_error};
    use crate::rng::Rng;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut t = Tape::new();
        let x = t.param(Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]));
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Matrix::filled(2, 2, 1.0));
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut t = Tape::new();
        let x = t.param(Matrix::zeros(2, 2));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn low_rank_quadratic_matches_finite_differences() {
        // loss = ||B A x||²
        let mut rng = Rng::seed(11);
        let b = rng.uniform_matrix(4, 2, -1.0, 1.0);
        let a = rng.uniform_matrix(2, 5, -1.0, 1.0);
        let x = rng.uniform_matrix(5, 1, -1.0, 1.0);
        let f = |a: &Matrix| -> Matrix {
            let mut t = Tape::new();
            let bv = t.constant(b.clone());
            let av = t.param(a.clone());
            let xv = t.constant(x.clone());
            let ax = t.matmul(av, xv).unwrap();
            let y = t.matmul(bv, ax).unwrap();
            let sq = t.hadamard(y, y).unwrap();
            let loss = t.sum(sq);
            let g = t.backward(loss).unwrap();
            g.get_or_zeros(av)
        };
        let loss = |a: &Matrix| b.matmul(&a.matmul(&x).unwrap()).unwrap().data().iter().map(|v| v * v).sum();
        let fd = finite_diff_grad(loss, &a, 1e-5);
        assert!(rel_error(&f(&a), &fd) < 1e-5);
    }

    #[test]
    fn topological_order_and_adjoint_shapes() {
        let mut rng = Rng::seed(2);
        let mut t = Tape::new();
        let a = t.param(rng.uniform_matrix(3, 4, -1.0, 1.0));
        let b = t.param(rng.uniform_matrix(4, 2, -1.0, 1.0));
        let c = t.matmul(a, b).unwrap();
        let s = t.sigmoid(c);
        let l = t.mean(s);
        for i in 0..t.len() {
            for inp in t.inputs(Var(i)) {
                assert!(inp.index() < i);
            }
        }
        let g = t.backward(l).unwrap();
        for i in 0..t.len() {
            assert_eq!(g.get(Var(i)).unwrap().shape(), t.shape(Var(i)));
        }
    }

    #[test]
    fn ste_backward_is_identity() {
        let mut t = Tape::new();
        let p = t.param(Matrix::row_vector(&[0.2, 0.5, 0.9]));
        let s = t.ste_threshold(p, 0.5);
        assert_eq!(t.value(s).data(), &[0.0, 1.0, 1.0]);
        let w = t.constant(Matrix::row_vector(&[3.0, -1.0, 2.0]));
        let y = t.hadamard(s, w).unwrap();
        let l = t.sum(y);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[3.0, -1.0, 2.0]);
    }

    #[test]
    fn elementwise_arity_checked() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::zeros(1, 1));
        assert!(t.elementwise(Elementwise::Add, &[a]).is_err());
        let s = t.elementwise(Elementwise::Sigmoid, &[a]).unwrap();
        assert_eq!(t.value(s).get(0, 0), 0.5);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::filled(2, 2, 1.0));
        let b = t.param(Matrix::filled(2, 2, 2.0));
        let c = t.matmul(a, b).unwrap();
        let l = t.sum(c);
        let g = t.backward(l).unwrap();
        assert!(g.get(a).is_none());
        assert!(g.get(b).is_some());
    }

    #[test]
    fn attention_segments_do_not_mix() {
        let mut rng = Rng::seed(5);
        let mut t = Tape::new();
        let x = rng.uniform_matrix(6, 3, -1.0, 1.0);
        let xv = t.param(x.clone());
        let o = t.segment_attention(xv, xv, xv, &[(0, 3), (3, 3)], 0.5).unwrap();
        let mut x2 = x.clone();
        for c in 0..3 {
            x2.set(0, c, 5.0);
        }
        let mut t2 = Tape::new();
        let xv2 = t2.param(x2);
        let o2 = t2.segment_attention(xv2, xv2, xv2, &[(0, 3), (3, 3)], 0.5).unwrap();
        for r in 3..6 {
            assert_eq!(t.value(o).row(r), t2.value(o2).row(r));
        }
    }
}
