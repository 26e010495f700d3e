use crate::error::{Error, Result};
use crate::ndgrad::kernels::{gemm_nn, gemm_nt, gemm_tn, sigmoid, transpose};
use crate::ndgrad::{ParamId, ParamStore, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row reduction used by [`Graph::pool_rows`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Mean,
    Min,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    MatMulTN(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Maximum(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    SelectRows(Vec<bool>, Var, Var),
    MaskedFill(Var, Vec<bool>),
    PoolRows {
        x: Var,
        groups: Vec<Vec<usize>>,
        kind: PoolKind,
        // source row per output element (max/min only)
        arg: Vec<usize>,
    },
    Softmax(Var, usize),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    NormalizeRows(Var, Vec<f64>),
    GradReverse(Var, f64),
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::MatMulTN(..) => "matmul_tn",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Maximum(..) => "maximum",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::SelectRows(..) => "select_rows",
            Op::MaskedFill(..) => "masked_fill",
            Op::PoolRows { .. } => "pool_rows",
            Op::Softmax(..) => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumSquares(..) => "sum_squares",
            Op::NormalizeRows(..) => "normalize_rows",
            Op::GradReverse(..) => "grad_reverse",
            Op::Reshape(..) => "reshape",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

const NORM_FLOOR: f64 = 1e-12;

/// Define-by-run compute graph.
///
/// Nodes are appended in evaluation order, so insertion order is a topological
/// order and [`Graph::backward`] simply walks it in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
    frozen_params: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose bound parameters do not require gradients (evaluation only).
    pub fn inference() -> Self {
        Graph {
            frozen_params: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf holding a copy of a stored parameter; repeated calls reuse one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.bound.len() <= id.0 {
            self.bound.resize(id.0 + 1, None);
        }
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let frozen = self.frozen_params;
        let v = self.leaf(store.get(id).clone(), !frozen);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bound_param(&self, id: ParamId) -> Option<Var> {
        self.bound.get(id.0).copied().flatten()
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(Error::dim(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (n, k2) = self.dims(b)?;
        if k != k2 {
            return Err(Error::dim(format!("matmul_nt {m}x{k} by ({n}x{k2})ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulNT(a, b), ng))
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let (k, m) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(Error::dim(format!("matmul_tn ({k}x{m})ᵀ by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm_tn(self.value(a).data(), self.value(b).data(), &mut out, k, m, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulTN(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        let out = transpose(self.value(a).data(), r, c);
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::matrix(c, r, out)?, Op::Transpose(a), ng))
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, op, ng))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(&[a]);
        Ok(self.push(t, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise maximum; ties take the value (and gradient) of `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Maximum(a, b), |x, y| if x >= y { x } else { y })
    }

    /// Adds a row vector to every row of a matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        if self.value(row).len() != c {
            return Err(Error::dim(format!(
                "add_row: {} values for {c} columns",
                self.value(row).len()
            )));
        }
        let rv = self.value(row).data();
        let mut out = self.value(x).data().to_vec();
        for i in 0..r {
            for (o, &b) in out[i * c..(i + 1) * c].iter_mut().zip(rv) {
                *o += b;
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let ng = self.ng(&[x, row]);
        Ok(self.push(t, Op::AddRow(x, row), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    /// Identity on the forward pass; scales the incoming gradient by `-lambda`.
    pub fn grad_reverse(&mut self, a: Var, lambda: f64) -> Result<Var> {
        self.map(a, Op::GradReverse(a, lambda), |x| x)
    }

    /// Replaces the positions where `mask` is true by `value`.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], value: f64) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(Error::dim("masked_fill: mask length differs from tensor"));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::MaskedFill(a, mask.to_vec()), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    // ---- structural -----------------------------------------------------

    /// Concatenates along the last axis. All parts must have the same row count;
    /// vectors in, vector out.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat_cols of nothing"));
        }
        let vector = self.shape(parts[0]).len() == 1;
        let rows = self.dims(parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p)?;
            if r != rows || (self.shape(p).len() == 1) != vector {
                return Err(Error::dim("concat_cols: row counts differ"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let shape = if vector { vec![total] } else { vec![rows, total] };
        let t = Tensor::new(shape, out)?;
        let ng = self.ng(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Stacks matrices (or vectors as rows) vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat_rows of nothing"));
        }
        let cols = self.dims(parts[0])?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p)?;
            if c != cols {
                return Err(Error::dim("concat_rows: column counts differ"));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::matrix(rows, cols, out)?;
        let ng = self.ng(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Columns `start..end` of every row.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        if start >= end || end > c {
            return Err(Error::dim(format!("slice_cols {start}..{end} of width {c}")));
        }
        let w = end - start;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let shape = if self.shape(a).len() == 1 {
            vec![w]
        } else {
            vec![r, w]
        };
        let t = Tensor::new(shape, out)?;
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::SliceCols(a, start), ng))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        if rows.is_empty() {
            return Err(Error::dim("gather_rows with no rows"));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::dim(format!("gather_rows: row {i} of {r}")));
            }
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let t = Tensor::matrix(rows.len(), c, out)?;
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::GatherRows(a, rows.to_vec()), ng))
    }

    /// Row `i` comes from `a` where `take_a[i]`, otherwise from `b`. No arithmetic
    /// is performed, so selected rows are bit-identical to their source.
    pub fn select_rows(&mut self, take_a: &[bool], a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "select_rows")?;
        let (r, c) = self.dims(a)?;
        if take_a.len() != r {
            return Err(Error::dim("select_rows: mask length differs from row count"));
        }
        let mut out = Vec::with_capacity(r * c);
        for (i, &t) in take_a.iter().enumerate() {
            let src = if t { a } else { b };
            out.extend_from_slice(&self.value(src).data()[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::SelectRows(take_a.to_vec(), a, b), ng))
    }

    /// Reduces groups of rows to one output row each. Max and min route their
    /// gradient to the first row (in group order) attaining the extremum.
    pub fn pool_rows(&mut self, x: Var, groups: &[Vec<usize>], kind: PoolKind) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        if groups.is_empty() {
            return Err(Error::dim("pool_rows with no groups"));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; groups.len() * c];
        let mut arg = Vec::new();
        if kind != PoolKind::Mean {
            arg = vec![0; groups.len() * c];
        }
        for (g, rows) in groups.iter().enumerate() {
            if rows.is_empty() {
                return Err(Error::arg(format!("pool_rows: group {g} has no rows")));
            }
            if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
                return Err(Error::dim(format!("pool_rows: row {bad} of {r}")));
            }
            for j in 0..c {
                match kind {
                    PoolKind::Mean => {
                        let s: f64 = rows.iter().map(|&i| src[i * c + j]).sum();
                        out[g * c + j] = s / rows.len() as f64;
                    }
                    PoolKind::Max | PoolKind::Min => {
                        let mut best = rows[0];
                        for &i in &rows[1..] {
                            let v = src[i * c + j];
                            let b = src[best * c + j];
                            let better = if kind == PoolKind::Max { v > b } else { v < b };
                            if better {
                                best = i;
                            }
                        }
                        out[g * c + j] = src[best * c + j];
                        arg[g * c + j] = best;
                    }
                }
            }
        }
        let shape = if self.shape(x).len() == 1 {
            vec![c]
        } else {
            vec![groups.len(), c]
        };
        let t = Tensor::new(shape, out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(
            t,
            Op::PoolRows {
                x,
                groups: groups.to_vec(),
                kind,
                arg,
            },
            ng,
        ))
    }

    // ---- normalizations and losses ---------------------------------------

    /// Softmax along `axis` (0 = down columns, last axis = along rows).
    /// Entries equal to `-inf` receive probability zero.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let lanes = lanes(self.value(a), axis)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for (start, stride, len) in lanes {
            softmax_lane(src, &mut out, start, stride, len)?;
        }
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::Softmax(a, axis), ng))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.dims(logits)?;
        if labels.len() != b {
            return Err(Error::dim(format!("cross_entropy: {} labels for {b} rows", labels.len())));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; b * c];
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::arg(format!("label {y} out of range for {c} classes")));
            }
            let row = &src[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - row[y];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        let loss = total / b as f64;
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), ng))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), ng))
    }

    /// Sum of squared entries (squared Frobenius norm for matrices).
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().map(|v| v * v).sum();
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::SumSquares(a), ng))
    }

    /// Divides each row by its L2 norm (floored at 1e-12).
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
            for j in 0..c {
                out[i * c + j] = row[j] / n;
            }
            norms.push(n);
        }
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::NormalizeRows(a, norms), ng))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.value(loss).has_nan() {
            return Err(Error::Numerical("loss is NaN".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_deref() else { continue };
            if g.iter().any(|v| v.is_nan()) {
                return Err(Error::Numerical(format!(
                    "NaN gradient at node {i} ({})",
                    node.op.name()
                )));
            }
            self.propagate(node, g, lo);
        }
        Ok(Gradients { grads })
    }

    fn acc<'a>(&self, lo: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(lo[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    fn propagate(&self, node: &Node, g: &[f64], lo: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a).unwrap();
                let n = self.dims(*b).unwrap().1;
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                if let Some(ga) = self.acc(lo, *a) {
                    gemm_nt(g, bv, ga, m, n, k);
                }
                if let Some(gb) = self.acc(lo, *b) {
                    gemm_tn(av, g, gb, m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.dims(*a).unwrap();
                let n = self.dims(*b).unwrap().0;
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                if let Some(ga) = self.acc(lo, *a) {
                    gemm_nn(g, bv, ga, m, n, k);
                }
                if let Some(gb) = self.acc(lo, *b) {
                    gemm_tn(g, av, gb, m, n, k);
                }
            }
            Op::MatMulTN(a, b) => {
                let (k, m) = self.dims(*a).unwrap();
                let n = self.dims(*b).unwrap().1;
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                if let Some(ga) = self.acc(lo, *a) {
                    // dA[k×m] = B[k×n] · Gᵀ
                    gemm_nt(bv, g, ga, k, n, m);
                }
                if let Some(gb) = self.acc(lo, *b) {
                    gemm_nn(av, g, gb, k, m, n);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims(*a).unwrap();
                if let Some(ga) = self.acc(lo, *a) {
                    let t = transpose(g, c, r);
                    add_into(ga, &t);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(lo, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(lo, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(lo, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(lo, *b) {
                    for (o, &v) in gb.iter_mut().zip(g) {
                        *o -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.acc(lo, *a) {
                    for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gv * x;
                    }
                }
                if let Some(gb) = self.acc(lo, *b) {
                    for ((o, &gv), &x) in gb.iter_mut().zip(g).zip(av) {
                        *o += gv * x;
                    }
                }
            }
            Op::AddRow(x, row) => {
                if let Some(gx) = self.acc(lo, *x) {
                    add_into(gx, g);
                }
                let c = self.value(*row).len();
                if let Some(gr) = self.acc(lo, *row) {
                    for chunk in g.chunks(c) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(lo, *a) {
                    for (o, &gv) in ga.iter_mut().zip(g) {
                        *o += gv * c;
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.acc(lo, *a) {
                    for ((o, &gv), &s) in ga.iter_mut().zip(g).zip(y) {
                        *o += gv * s * (1.0 - s);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.acc(lo, *a) {
                    for ((o, &gv), &t) in ga.iter_mut().zip(g).zip(y) {
                        *o += gv * (1.0 - t * t);
                    }
                }
            }
            Op::GradReverse(a, lambda) => {
                if let Some(ga) = self.acc(lo, *a) {
                    for (o, &gv) in ga.iter_mut().zip(g) {
                        *o += -lambda * gv;
                    }
                }
            }
            Op::Maximum(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.acc(lo, *a) {
                    for i in 0..g.len() {
                        if av[i] >= bv[i] {
                            ga[i] += g[i];
                        }
                    }
                }
                if let Some(gb) = self.acc(lo, *b) {
                    for i in 0..g.len() {
                        if av[i] < bv[i] {
                            gb[i] += g[i];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(gp) = self.acc(lo, p) {
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.acc(lo, p) {
                        add_into(gp, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.dims(*a).unwrap();
                let w = node.value.cols();
                if let Some(ga) = self.acc(lo, *a) {
                    for i in 0..r {
                        add_into(&mut ga[i * c + start..i * c + start + w], &g[i * w..(i + 1) * w]);
                    }
                }
            }
            Op::GatherRows(a, rows) => {
                let c = self.value(*a).cols();
                if let Some(ga) = self.acc(lo, *a) {
                    for (k, &i) in rows.iter().enumerate() {
                        add_into(&mut ga[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                }
            }
            Op::SelectRows(take_a, a, b) => {
                let c = node.value.cols();
                for (src, want) in [(*a, true), (*b, false)] {
                    if let Some(gs) = self.acc(lo, src) {
                        for (i, &t) in take_a.iter().enumerate() {
                            if t == want {
                                add_into(&mut gs[i * c..(i + 1) * c], &g[i * c..(i + 1) * c]);
                            }
                        }
                    }
                }
            }
            Op::MaskedFill(a, mask) => {
                if let Some(ga) = self.acc(lo, *a) {
                    for i in 0..g.len() {
                        if !mask[i] {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::PoolRows { x, groups, kind, arg } => {
                let c = self.value(*x).cols();
                if let Some(gx) = self.acc(lo, *x) {
                    for (gi, rows) in groups.iter().enumerate() {
                        for j in 0..c {
                            let up = g[gi * c + j];
                            match kind {
                                PoolKind::Mean => {
                                    let share = up / rows.len() as f64;
                                    for &r in rows {
                                        gx[r * c + j] += share;
                                    }
                                }
                                PoolKind::Max | PoolKind::Min => {
                                    gx[arg[gi * c + j] * c + j] += up;
                                }
                            }
                        }
                    }
                }
            }
            Op::Softmax(a, axis) => {
                if let Some(ga) = self.acc(lo, *a) {
                    for (start, stride, len) in lanes(&node.value, *axis).unwrap() {
                        let mut dot = 0.0;
                        for k in 0..len {
                            let idx = start + k * stride;
                            dot += g[idx] * y[idx];
                        }
                        for k in 0..len {
                            let idx = start + k * stride;
                            ga[idx] += y[idx] * (g[idx] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (b, c) = self.dims(*logits).unwrap();
                let scale = g[0] / b as f64;
                if let Some(gl) = self.acc(lo, *logits) {
                    for (i, &lab) in labels.iter().enumerate() {
                        for j in 0..c {
                            let target = if j == lab { 1.0 } else { 0.0 };
                            gl[i * c + j] += scale * (probs[i * c + j] - target);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(lo, *a) {
                    for o in ga.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.acc(lo, *a) {
                    let share = g[0] / ga.len() as f64;
                    for o in ga.iter_mut() {
                        *o += share;
                    }
                }
            }
            Op::SumSquares(a) => {
                let av = self.value(*a).data();
                if let Some(ga) = self.acc(lo, *a) {
                    for (o, &x) in ga.iter_mut().zip(av) {
                        *o += 2.0 * x * g[0];
                    }
                }
            }
            Op::NormalizeRows(a, norms) => {
                let c = node.value.cols();
                if let Some(ga) = self.acc(lo, *a) {
                    for (i, &n) in norms.iter().enumerate() {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let out = &mut ga[i * c..(i + 1) * c];
                        if n > NORM_FLOOR {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                out[j] += (gr[j] - yr[j] * dot) / n;
                            }
                        } else {
                            for j in 0..c {
                                out[j] += gr[j] / n;
                            }
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(lo, *a) {
                    add_into(ga, g);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// (start, stride, len) of every 1-D lane along `axis`.
fn lanes(t: &Tensor, axis: usize) -> Result<Vec<(usize, usize, usize)>> {
    match (t.shape(), axis) {
        ([n], 0) => Ok(vec![(0, 1, *n)]),
        ([r, c], 1) => Ok((0..*r).map(|i| (i * c, 1, *c)).collect()),
        ([r, c], 0) => Ok((0..*c).map(|j| (j, *c, *r)).collect()),
        (s, a) => Err(Error::dim(format!("softmax axis {a} invalid for shape {s:?}"))),
    }
}

fn softmax_lane(src: &[f64], out: &mut [f64], start: usize, stride: usize, len: usize) -> Result<()> {
    let mut m = f64::NEG_INFINITY;
    for k in 0..len {
        m = m.max(src[start + k * stride]);
    }
    if m == f64::NEG_INFINITY {
        return Err(Error::arg("softmax over a lane with no finite entries"));
    }
    let mut z = 0.0;
    for k in 0..len {
        let e = (src[start + k * stride] - m).exp();
        out[start + k * stride] = e;
        z += e;
    }
    for k in 0..len {
        out[start + k * stride] /= z;
    }
    Ok(())
}

/// Result of [`Graph::backward`]: one optional gradient buffer per node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to any node reached by the sweep.
    pub fn get(&self, graph: &Graph, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(graph.shape(v).to_vec(), g.clone()).ok()
    }

    /// Gradient w.r.t. every stored parameter, zero where the parameter was unused.
    pub fn param_grads(&self, graph: &Graph, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| {
                graph
                    .bound_param(id)
                    .and_then(|v| self.get(graph, v))
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect()
    }
}
