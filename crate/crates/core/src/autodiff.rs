//! Reverse-mode automatic differentiation on an eager tape.
//!
//! Every operation computes its value immediately and appends a node to the
//! [`Graph`]. Node ids are assigned in creation order, so parents always
//! precede children and the reverse pass is a single backwards sweep.
//!
//! The selective scan and the causal convolution are recorded as single
//! fused nodes with their own backward kernels (see [`crate::mamba`]), which
//! keeps the tape length independent of the sequence length.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::linalg::{self, gemm, BlockLayout, MapKind, Matrix, Trans};
use crate::mamba::{conv, ssm};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Trans, Var, Trans),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Hadamard(Var, Var),
    Map(Var, MapKind),
    Transpose(Var),
    RowScale { s: Var, m: Var },
    ColScale { m: Var, s: Var },
    ColNormalize { m: Var, norms: Vec<f64> },
    Sum(Var),
    Mean(Var),
    SegmentMean { x: Var, seg: usize },
    SquaredError(Var, Var),
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Matrix },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    GatherRows { table: Var, idx: Vec<usize> },
    BlockDiag { stacked: Var, layout: BlockLayout },
    CausalConv { u: Var, kernel: Var, bias: Var, seq_len: usize },
    Scan { inputs: ssm::ScanVars<Var>, seq_len: usize, states: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Hadamard(..) => "hadamard",
            Op::Map(_, MapKind::Relu) => "relu",
            Op::Map(_, MapKind::Silu) => "silu",
            Op::Map(_, MapKind::Softplus) => "softplus",
            Op::Map(_, MapKind::Exp) => "exp",
            Op::Transpose(..) => "transpose",
            Op::RowScale { .. } => "row_scale",
            Op::ColScale { .. } => "col_scale",
            Op::ColNormalize { .. } => "col_normalize",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SegmentMean { .. } => "segment_mean",
            Op::SquaredError(..) => "squared_error",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::BlockDiag { .. } => "block_diag",
            Op::CausalConv { .. } => "causal_conv1d",
            Op::Scan { .. } => "selective_scan",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, _, b, _)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::AddRow(a, b)
            | Op::Hadamard(a, b)
            | Op::SquaredError(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Map(a, _)
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::ColNormalize { m: a, .. }
            | Op::SegmentMean { x: a, .. }
            | Op::SoftmaxCrossEntropy { logits: a, .. }
            | Op::SliceCols { x: a, .. }
            | Op::GatherRows { table: a, .. }
            | Op::BlockDiag { stacked: a, .. } => vec![*a],
            Op::RowScale { s, m } | Op::ColScale { m, s } => vec![*s, *m],
            Op::ConcatRows(vs) => vs.clone(),
            Op::CausalConv { u, kernel, bias, .. } => vec![*u, *kernel, *bias],
            Op::Scan { inputs, .. } => inputs.to_vec(),
        }
    }
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// An eagerly evaluated computation graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of the loss with respect to the leaves that require them.
#[derive(Debug, Default, Clone)]
pub struct GradientMap {
    grads: HashMap<Var, Matrix>,
}

impl GradientMap {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(&v)
    }

    pub fn remove(&mut self, v: Var) -> Option<Matrix> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// The scalar held by a `1x1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents()
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        let requires_grad = op
            .parents()
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.gemm(a, Trans::No, b, Trans::No)
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.gemm(a, Trans::No, b, Trans::Yes)
    }

    pub fn gemm(&mut self, a: Var, ta: Trans, b: Var, tb: Trans) -> Result<Var> {
        let v = gemm(self.value(a), ta, self.value(b), tb)?;
        Ok(self.push(Op::MatMul(a, ta, b, tb), v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    /// Adds a `1 x c` row to every row of an `r x c` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(Error::shape(format!(
                "add_row: {}x{} onto {}x{}",
                rv.rows(),
                rv.cols(),
                xv.rows(),
                xv.cols()
            )));
        }
        let mut v = xv.clone();
        for i in 0..v.rows() {
            for (o, r) in v.row_mut(i).iter_mut().zip(rv.data()) {
                *o += r;
            }
        }
        Ok(self.push(Op::AddRow(x, row), v))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).scale(k);
        self.push(Op::Scale(a, k), v)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(Op::Hadamard(a, b), v))
    }

    pub fn map(&mut self, a: Var, kind: MapKind) -> Var {
        let v = linalg::elementwise(kind, self.value(a));
        self.push(Op::Map(a, kind), v)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, MapKind::Relu)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.map(a, MapKind::Silu)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, MapKind::Softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, MapKind::Exp)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    /// Row `i` of `m` times `s[i]`; `s` is a vector (either orientation)
    /// with one entry per row.
    pub fn row_scale(&mut self, s: Var, m: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.rows() != 1 && sv.cols() != 1 {
            return Err(Error::shape("row_scale: factors must be a vector"));
        }
        let v = self.value(m).row_scale(sv.data())?;
        Ok(self.push(Op::RowScale { s, m }, v))
    }

    /// Column `j` of `m` times `s[j]`.
    pub fn col_scale(&mut self, m: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.rows() != 1 && sv.cols() != 1 {
            return Err(Error::shape("col_scale: factors must be a vector"));
        }
        let v = self.value(m).col_scale(sv.data())?;
        Ok(self.push(Op::ColScale { m, s }, v))
    }

    /// Divides every column by its Euclidean norm.
    pub fn col_normalize(&mut self, m: Var) -> Result<Var> {
        let mv = self.value(m);
        let norms = mv.col_norms();
        if norms.iter().any(|&n| n == 0.0) {
            return Err(Error::Numerical("col_normalize: zero column".into()));
        }
        let inv: Vec<f64> = norms.iter().map(|n| 1.0 / n).collect();
        let v = mv.col_scale(&inv)?;
        Ok(self.push(Op::ColNormalize { m, norms }, v))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::filled(1, 1, self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Matrix::filled(1, 1, x.sum() / x.len() as f64);
        self.push(Op::Mean(a), v)
    }

    /// Mean over consecutive groups of `seg` rows: `(B*seg) x c -> B x c`.
    pub fn segment_mean(&mut self, x: Var, seg: usize) -> Result<Var> {
        let xv = self.value(x);
        if seg == 0 || xv.rows() % seg != 0 {
            return Err(Error::shape(format!(
                "segment_mean: {} rows not divisible into segments of {seg}",
                xv.rows()
            )));
        }
        let b = xv.rows() / seg;
        let mut v = Matrix::zeros(b, xv.cols());
        for r in 0..xv.rows() {
            let dst = r / seg;
            for (o, a) in v.row_mut(dst).iter_mut().zip(xv.row(r)) {
                *o += a;
            }
        }
        let v = v.scale(1.0 / seg as f64);
        Ok(self.push(Op::SegmentMean { x, seg }, v))
    }

    /// Mean of squared differences.
    pub fn squared_error(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.value(pred).sub(self.value(target))?;
        let v = Matrix::filled(1, 1, d.data().iter().map(|x| x * x).sum::<f64>() / d.len() as f64);
        Ok(self.push(Op::SquaredError(pred, target), v))
    }

    /// Mean softmax cross-entropy of row-wise logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if labels.len() != lv.rows() {
            return Err(Error::shape(format!(
                "cross entropy: {} labels for {} rows",
                labels.len(),
                lv.rows()
            )));
        }
        let mut probs = Matrix::zeros(lv.rows(), lv.cols());
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            if label >= lv.cols() {
                return Err(Error::contract(format!(
                    "label {label} out of range for {} classes",
                    lv.cols()
                )));
            }
            let row = lv.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + z.ln();
            total += log_z - row[label];
            for (p, v) in probs.row_mut(i).iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
        }
        let v = Matrix::filled(1, 1, total / labels.len() as f64);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            v,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).slice_cols(start, len)?;
        Ok(self.push(Op::SliceCols { x, start }, v))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows of nothing"))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.value(*p);
            if pv.cols() != cols {
                return Err(Error::shape(format!(
                    "concat_rows: {} vs {} columns",
                    pv.cols(),
                    cols
                )));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let v = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), v))
    }

    /// Row lookup, as in an embedding table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let mut v = Matrix::zeros(idx.len(), tv.cols());
        for (r, &i) in idx.iter().enumerate() {
            if i >= tv.rows() {
                return Err(Error::contract(format!(
                    "index {i} out of range for table with {} rows",
                    tv.rows()
                )));
            }
            v.row_mut(r).copy_from_slice(tv.row(i));
        }
        Ok(self.push(
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            v,
        ))
    }

    /// Assembles a block-diagonal matrix from blocks stacked vertically.
    pub fn block_diag(&mut self, stacked: Var, layout: BlockLayout) -> Result<Var> {
        let v = linalg::block_diag_from_stacked(self.value(stacked), layout)?;
        Ok(self.push(Op::BlockDiag { stacked, layout }, v))
    }

    /// Depthwise causal convolution applied independently to each run of
    /// `seq_len` rows.
    pub fn causal_conv1d(&mut self, u: Var, kernel: Var, bias: Var, seq_len: usize) -> Result<Var> {
        let v = conv::causal_conv1d_forward(
            self.value(u),
            self.value(kernel),
            self.value(bias),
            seq_len,
        )?;
        Ok(self.push(
            Op::CausalConv {
                u,
                kernel,
                bias,
                seq_len,
            },
            v,
        ))
    }

    /// ZOH-discretised selective scan over each run of `seq_len` rows.
    pub fn selective_scan(&mut self, inputs: ssm::ScanVars<Var>, seq_len: usize) -> Result<Var> {
        let vals = inputs.map(|v| self.value(v));
        let (y, states) = ssm::fused_scan_forward(&vals, seq_len)?;
        Ok(self.push(
            Op::Scan {
                inputs,
                seq_len,
                states,
            },
            y,
        ))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<GradientMap> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a 1x1 loss, got {}x{}",
                lv.rows(),
                lv.cols()
            )));
        }
        let mut out = GradientMap::default();
        if !self.nodes[loss.0].requires_grad {
            return Ok(out);
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::ones(1, 1));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if !g.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient at node {id} ({})",
                    node.op.name()
                )));
            }
            if let Op::Leaf = node.op {
                out.grads.insert(Var(id), g);
                continue;
            }
            self.propagate(id, &g, &mut grads)?;
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_scaled_assign(&g, 1.0)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, id: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, ta, b, tb) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    // C = op(A) op(B)  =>  dop(A) = G op(B)^T
                    let ga = match (ta, tb) {
                        (Trans::No, Trans::No) => gemm(g, Trans::No, bv, Trans::Yes)?,
                        (Trans::No, Trans::Yes) => gemm(g, Trans::No, bv, Trans::No)?,
                        (Trans::Yes, Trans::No) => gemm(bv, Trans::No, g, Trans::Yes)?,
                        (Trans::Yes, Trans::Yes) => gemm(bv, Trans::Yes, g, Trans::Yes)?,
                    };
                    self.accumulate(grads, *a, ga)?;
                }
                if self.wants(*b) {
                    let gb = match (ta, tb) {
                        (Trans::No, Trans::No) => gemm(av, Trans::Yes, g, Trans::No)?,
                        (Trans::Yes, Trans::No) => gemm(av, Trans::No, g, Trans::No)?,
                        (Trans::No, Trans::Yes) => gemm(g, Trans::Yes, av, Trans::No)?,
                        (Trans::Yes, Trans::Yes) => gemm(g, Trans::Yes, av, Trans::Yes)?,
                    };
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone())?;
                if self.wants(*row) {
                    let mut gr = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, v) in gr.data_mut().iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *row, gr)?;
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.scale(*k))?,
            Op::Hadamard(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.hadamard(self.value(*b))?)?;
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.hadamard(self.value(*a))?)?;
                }
            }
            Op::Map(a, kind) => {
                let x = self.value(*a);
                let mut ga = g.clone();
                for (o, &xv) in ga.data_mut().iter_mut().zip(x.data()) {
                    *o *= kind.derivative(xv);
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose())?,
            Op::RowScale { s, m } => {
                let (sv, mv) = (self.value(*s), self.value(*m));
                if self.wants(*m) {
                    self.accumulate(grads, *m, g.row_scale(sv.data())?)?;
                }
                if self.wants(*s) {
                    let vals: Vec<f64> = (0..mv.rows())
                        .map(|i| g.row(i).iter().zip(mv.row(i)).map(|(a, b)| a * b).sum())
                        .collect();
                    let gs = Matrix::from_vec(sv.rows(), sv.cols(), vals)?;
                    self.accumulate(grads, *s, gs)?;
                }
            }
            Op::ColScale { m, s } => {
                let (sv, mv) = (self.value(*s), self.value(*m));
                if self.wants(*m) {
                    self.accumulate(grads, *m, g.col_scale(sv.data())?)?;
                }
                if self.wants(*s) {
                    let mut vals = vec![0.0; mv.cols()];
                    for i in 0..mv.rows() {
                        for ((o, a), b) in vals.iter_mut().zip(g.row(i)).zip(mv.row(i)) {
                            *o += a * b;
                        }
                    }
                    let gs = Matrix::from_vec(sv.rows(), sv.cols(), vals)?;
                    self.accumulate(grads, *s, gs)?;
                }
            }
            Op::ColNormalize { m, norms } => {
                // u = v/|v|  =>  dv = (g - u (u.g)) / |v|, per column
                let u = &node.value;
                let mut dots = vec![0.0; u.cols()];
                for i in 0..u.rows() {
                    for ((d, a), b) in dots.iter_mut().zip(g.row(i)).zip(u.row(i)) {
                        *d += a * b;
                    }
                }
                let gm = Matrix::from_fn(u.rows(), u.cols(), |i, j| {
                    (g.get(i, j) - u.get(i, j) * dots[j]) / norms[j]
                });
                self.accumulate(grads, *m, gm)?;
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(grads, *a, Matrix::filled(r, c, g.data()[0]))?;
            }
            Op::Mean(a) => {
                let (r, c) = self.value(*a).shape();
                let k = g.data()[0] / (r * c) as f64;
                self.accumulate(grads, *a, Matrix::filled(r, c, k))?;
            }
            Op::SegmentMean { x, seg } => {
                let (r, c) = self.value(*x).shape();
                let k = 1.0 / *seg as f64;
                let gx = Matrix::from_fn(r, c, |i, j| g.get(i / seg, j) * k);
                self.accumulate(grads, *x, gx)?;
            }
            Op::SquaredError(p, t) => {
                let d = self.value(*p).sub(self.value(*t))?;
                let k = 2.0 * g.data()[0] / d.len() as f64;
                let gp = d.scale(k);
                if self.wants(*t) {
                    self.accumulate(grads, *t, gp.scale(-1.0))?;
                }
                self.accumulate(grads, *p, gp)?;
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = g.data()[0] / labels.len() as f64;
                let mut gl = probs.clone();
                for (i, &label) in labels.iter().enumerate() {
                    gl.row_mut(i)[label] -= 1.0;
                }
                self.accumulate(grads, *logits, gl.scale(k))?;
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.value(*x).shape();
                let mut gx = Matrix::zeros(r, c);
                for i in 0..r {
                    gx.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (r, c) = self.value(*p).shape();
                    if self.wants(*p) {
                        let slice = g.data()[offset * c..(offset + r) * c].to_vec();
                        self.accumulate(grads, *p, Matrix::from_vec(r, c, slice)?)?;
                    }
                    offset += r;
                }
            }
            Op::GatherRows { table, idx } => {
                let (r, c) = self.value(*table).shape();
                let mut gt = Matrix::zeros(r, c);
                for (row, &i) in idx.iter().enumerate() {
                    for (o, v) in gt.row_mut(i).iter_mut().zip(g.row(row)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *table, gt)?;
            }
            Op::BlockDiag { stacked, layout } => {
                let gs = linalg::block_diag_to_stacked(g, *layout)?;
                self.accumulate(grads, *stacked, gs)?;
            }
            Op::CausalConv {
                u,
                kernel,
                bias,
                seq_len,
            } => {
                let (gu, gk, gb) = conv::causal_conv1d_backward(
                    self.value(*u),
                    self.value(*kernel),
                    g,
                    *seq_len,
                )?;
                self.accumulate(grads, *u, gu)?;
                self.accumulate(grads, *kernel, gk)?;
                self.accumulate(grads, *bias, gb)?;
            }
            Op::Scan {
                inputs,
                seq_len,
                states,
            } => {
                let vals = inputs.map(|v| self.value(v));
                let gr = ssm::fused_scan_backward(&vals, states, g, *seq_len)?;
                for (v, gv) in inputs.to_vec().into_iter().zip(gr.into_vec()) {
                    self.accumulate(grads, v, gv)?;
                }
            }
        }
        Ok(())
    }
}

/// Compares tape gradients against central finite differences.
///
/// `f` builds a scalar loss from leaves holding `params`. Returns the largest
/// `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)` over all coordinates.
pub fn finite_diff_check<F>(params: &[Matrix], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if h.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::contract("finite difference step must be positive"));
    }
    let eval = |point: &[Matrix], track: bool| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = point.iter().map(|m| g.leaf(m.clone(), track)).collect();
        let loss = f(&mut g, &vars)?;
        Ok((g, vars, loss))
    };

    let (g, vars, loss) = eval(params, true)?;
    let f0 = g.scalar(loss);
    if !f0.is_finite() {
        return Err(Error::Numerical("objective is non-finite at the base point".into()));
    }
    let mut grads = g.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut point: Vec<Matrix> = params.to_vec();
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads
            .remove(*var)
            .unwrap_or_else(|| Matrix::zeros(params[p].rows(), params[p].cols()));
        for k in 0..params[p].len() {
            let orig = params[p].data()[k];
            point[p].data_mut()[k] = orig + h;
            let (gp, _, lp) = eval(&point, false)?;
            point[p].data_mut()[k] = orig - h;
            let (gm, _, lm) = eval(&point, false)?;
            point[p].data_mut()[k] = orig;
            let (fp, fm) = (gp.scalar(lp), gm.scalar(lm));
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::Numerical(format!(
                    "objective non-finite when probing parameter {p}, entry {k}"
                )));
            }
            let fd = (fp - fm) / (2.0 * h);
            let ad = analytic.data()[k];
            let err = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
