//! Dense f64 matrices with tape-based reverse-mode automatic differentiation.
//!
//! Every quantity in the toolkit is a row-major matrix (vectors are 1×n).
//! Persistent parameters live in [`Tensor`]; per-step computations run on a
//! [`Tape`] which records each primitive so [`Tape::backward`] can replay the
//! chain rule in reverse. The tape is rebuilt every training step, so variable
//! sentence lengths need no graph surgery.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense matrix of f64 values with an optional gradient slot.
///
/// Parameters set `requires_grad`; inputs and masks do not.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("from_vec", (rows, cols), data.len()));
        }
        Ok(Tensor {
            rows,
            cols,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    /// Uniform random entries in `(low, high)`.
    pub fn uniform(
        rows: usize,
        cols: usize,
        low: f64,
        high: f64,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(low..high)).collect();
        Tensor {
            rows,
            cols,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Add `delta` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.data.len(), "gradient length mismatch");
        let g = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// One recorded primitive: output value, accumulated output gradient, and the
/// backward rule (operation kind plus input node ids).
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

enum Op {
    Leaf,
    Matmul(usize, usize),
    Add(usize, usize),
    /// Bias row (1×c) added to every row of an r×c matrix.
    AddRow(usize, usize),
    /// Column vector (r×1) added to every column of an r×c matrix.
    AddCol(usize, usize),
    Mul(usize, usize),
    ConcatCols(usize, usize),
    ConcatRows(Vec<usize>),
    /// (input, start column); width is the node's own column count.
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    Ln(usize),
    /// Row-wise softmax.
    Softmax(usize),
    /// Row-wise log-sum-exp, r×c → r×1.
    LogSumExp(usize),
    /// Mean over rows, r×c → 1×c.
    MeanRows(usize),
    /// Sum of all entries → 1×1.
    Sum(usize),
    Scale(usize, f64),
    Transpose(usize),
    /// Row gather: output row k is input row indices[k].
    GatherRows(usize, Vec<usize>),
    /// Sum of the selected entries → 1×1; duplicates accumulate.
    PickSum(usize, Vec<(usize, usize)>),
}

/// Records a computation so it can be differentiated in reverse.
///
/// A tape is confined to one thread and discarded after its backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value on a tape. Cheap to copy; shape is cached for checks.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
    rows: usize,
    cols: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, rows: usize, cols: usize, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert_eq!(value.len(), rows * cols);
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            rows,
            cols,
            value,
            grad: vec![0.0; rows * cols],
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id,
            rows,
            cols,
        }
    }

    /// Put a tensor on the tape as a leaf; `requires_grad` is inherited.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push(
            t.rows,
            t.cols,
            t.data.clone(),
            Op::Leaf,
            t.requires_grad,
        )
    }

    /// A leaf that never receives gradients (inputs, dropout masks).
    pub fn constant(&self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var<'_>> {
        if data.len() != rows * cols {
            return Err(Error::shape("constant", (rows, cols), data.len()));
        }
        Ok(self.push(rows, cols, data, Op::Leaf, false))
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.push(1, 1, vec![v], Op::Leaf, false)
    }

    fn req(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Reverse sweep from a scalar loss. Every reachable node accumulates
    /// ∂loss/∂node; leaf gradients are read back with [`Var::grad`].
    pub fn backward(&self, loss: Var) -> Result<()> {
        if loss.rows != 1 || loss.cols != 1 {
            return Err(Error::Invalid(format!(
                "backward requires a scalar loss, got {}x{}",
                loss.rows, loss.cols
            )));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes[loss.id].grad[0] = 1.0;
        for k in (0..=loss.id).rev() {
            if !nodes[k].requires_grad && !matches!(nodes[k].op, Op::Leaf) {
                continue;
            }
            // Split the slice so the output node and its inputs can be
            // borrowed at the same time (inputs always precede outputs).
            let (before, after) = nodes.split_at_mut(k);
            let node = &mut after[0];
            if node.grad.iter().all(|g| *g == 0.0) {
                continue;
            }
            backward_step(node, before);
        }
        Ok(())
    }
}

/// Propagate `node.grad` into the gradients of its inputs.
fn backward_step(node: &Node, inputs: &mut [Node]) {
    let (r, c) = (node.rows, node.cols);
    let dy = &node.grad;
    match &node.op {
        Op::Leaf => {}
        Op::Matmul(a, b) => {
            let k = inputs[*a].cols;
            // dA += dC · Bᵀ
            {
                let bv = inputs[*b].value.clone();
                let ga = &mut inputs[*a];
                for i in 0..r {
                    for j in 0..k {
                        let mut s = 0.0;
                        for l in 0..c {
                            s += dy[i * c + l] * bv[j * c + l];
                        }
                        ga.grad[i * k + j] += s;
                    }
                }
            }
            // dB += Aᵀ · dC
            {
                let av = inputs[*a].value.clone();
                let gb = &mut inputs[*b];
                for i in 0..k {
                    for j in 0..c {
                        let mut s = 0.0;
                        for l in 0..r {
                            s += av[l * k + i] * dy[l * c + j];
                        }
                        gb.grad[i * c + j] += s;
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for (g, d) in inputs[*a].grad.iter_mut().zip(dy) {
                *g += d;
            }
            for (g, d) in inputs[*b].grad.iter_mut().zip(dy) {
                *g += d;
            }
        }
        Op::AddRow(a, bias) => {
            for (g, d) in inputs[*a].grad.iter_mut().zip(dy) {
                *g += d;
            }
            let gb = &mut inputs[*bias].grad;
            for i in 0..r {
                for j in 0..c {
                    gb[j] += dy[i * c + j];
                }
            }
        }
        Op::AddCol(a, col) => {
            for (g, d) in inputs[*a].grad.iter_mut().zip(dy) {
                *g += d;
            }
            let gc = &mut inputs[*col].grad;
            for i in 0..r {
                for j in 0..c {
                    gc[i] += dy[i * c + j];
                }
            }
        }
        Op::Mul(a, b) => {
            let bv = inputs[*b].value.clone();
            for (i, d) in dy.iter().enumerate() {
                inputs[*a].grad[i] += d * bv[i];
            }
            let av = inputs[*a].value.clone();
            for (i, d) in dy.iter().enumerate() {
                inputs[*b].grad[i] += d * av[i];
            }
        }
        Op::ConcatCols(a, b) => {
            let ca = inputs[*a].cols;
            let cb = inputs[*b].cols;
            for i in 0..r {
                for j in 0..ca {
                    inputs[*a].grad[i * ca + j] += dy[i * c + j];
                }
                for j in 0..cb {
                    inputs[*b].grad[i * cb + j] += dy[i * c + ca + j];
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut row = 0;
            for &p in parts {
                let pr = inputs[p].rows;
                let n = pr * c;
                for (g, d) in inputs[p].grad.iter_mut().zip(&dy[row * c..row * c + n]) {
                    *g += d;
                }
                row += pr;
            }
        }
        Op::SliceCols(a, start) => {
            let ca = inputs[*a].cols;
            for i in 0..r {
                for j in 0..c {
                    inputs[*a].grad[i * ca + start + j] += dy[i * c + j];
                }
            }
        }
        Op::SliceRows(a, start) => {
            for i in 0..r {
                for j in 0..c {
                    inputs[*a].grad[(start + i) * c + j] += dy[i * c + j];
                }
            }
        }
        Op::Sigmoid(a) => {
            for (i, y) in node.value.iter().enumerate() {
                inputs[*a].grad[i] += dy[i] * y * (1.0 - y);
            }
        }
        Op::Tanh(a) => {
            for (i, y) in node.value.iter().enumerate() {
                inputs[*a].grad[i] += dy[i] * (1.0 - y * y);
            }
        }
        Op::Ln(a) => {
            let node_a = &mut inputs[*a];
            for i in 0..dy.len() {
                node_a.grad[i] += dy[i] / node_a.value[i];
            }
        }
        Op::Softmax(a) => {
            // dx_j = y_j (dy_j − Σ_l dy_l y_l), per row
            for i in 0..r {
                let row = &node.value[i * c..(i + 1) * c];
                let drow = &dy[i * c..(i + 1) * c];
                let dot: f64 = row.iter().zip(drow).map(|(y, d)| y * d).sum();
                for j in 0..c {
                    inputs[*a].grad[i * c + j] += row[j] * (drow[j] - dot);
                }
            }
        }
        Op::LogSumExp(a) => {
            // dx_{ij} = dy_i · softmax(x_i)_j = dy_i · exp(x_{ij} − lse_i)
            let ca = inputs[*a].cols;
            let av = inputs[*a].value.clone();
            for i in 0..inputs[*a].rows {
                let lse = node.value[i];
                for j in 0..ca {
                    inputs[*a].grad[i * ca + j] += dy[i] * (av[i * ca + j] - lse).exp();
                }
            }
        }
        Op::MeanRows(a) => {
            let ra = inputs[*a].rows;
            let inv = 1.0 / ra as f64;
            for i in 0..ra {
                for j in 0..c {
                    inputs[*a].grad[i * c + j] += dy[j] * inv;
                }
            }
        }
        Op::Sum(a) => {
            let d = dy[0];
            for g in inputs[*a].grad.iter_mut() {
                *g += d;
            }
        }
        Op::Scale(a, s) => {
            for (g, d) in inputs[*a].grad.iter_mut().zip(dy) {
                *g += s * d;
            }
        }
        Op::Transpose(a) => {
            let ca = inputs[*a].cols;
            for i in 0..r {
                for j in 0..c {
                    inputs[*a].grad[j * ca + i] += dy[i * c + j];
                }
            }
        }
        Op::GatherRows(a, idx) => {
            for (k, &src) in idx.iter().enumerate() {
                for j in 0..c {
                    inputs[*a].grad[src * c + j] += dy[k * c + j];
                }
            }
        }
        Op::PickSum(a, picks) => {
            let ca = inputs[*a].cols;
            let d = dy[0];
            for &(i, j) in picks {
                inputs[*a].grad[i * ca + j] += d;
            }
        }
    }
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn scalar_value(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        debug_assert_eq!(nodes[self.id].value.len(), 1);
        nodes[self.id].value[0]
    }

    /// Accumulated gradient after [`Tape::backward`].
    pub fn grad(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.value(),
            grad: None,
            requires_grad: false,
        }
    }

    fn unary(&self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var<'t> {
        let req = self.tape.req(&[self.id]);
        self.tape.push(rows, cols, value, op, req)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                (self.rows, self.cols),
                (other.rows, other.cols),
            ));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let a = self.value();
        let b = other.value();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                let av = a[i * k + l];
                if av == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += av * b[l * n + j];
                }
            }
        }
        let req = self.tape.req(&[self.id, other.id]);
        Ok(self
            .tape
            .push(m, n, out, Op::Matmul(self.id, other.id), req))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape(
                "add",
                (self.rows, self.cols),
                (other.rows, other.cols),
            ));
        }
        let out = self
            .value()
            .iter()
            .zip(other.value())
            .map(|(a, b)| a + b)
            .collect();
        let req = self.tape.req(&[self.id, other.id]);
        Ok(self
            .tape
            .push(self.rows, self.cols, out, Op::Add(self.id, other.id), req))
    }

    /// Add a 1×c bias row to every row.
    pub fn add_row(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::shape(
                "add_row",
                (self.rows, self.cols),
                (bias.rows, bias.cols),
            ));
        }
        let b = bias.value();
        let mut out = self.value();
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[i * self.cols + j] += b[j];
            }
        }
        let req = self.tape.req(&[self.id, bias.id]);
        Ok(self.tape.push(
            self.rows,
            self.cols,
            out,
            Op::AddRow(self.id, bias.id),
            req,
        ))
    }

    /// Add an r×1 column vector to every column.
    pub fn add_col(&self, col: &Var<'t>) -> Result<Var<'t>> {
        if col.cols != 1 || col.rows != self.rows {
            return Err(Error::shape(
                "add_col",
                (self.rows, self.cols),
                (col.rows, col.cols),
            ));
        }
        let cv = col.value();
        let mut out = self.value();
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[i * self.cols + j] += cv[i];
            }
        }
        let req = self.tape.req(&[self.id, col.id]);
        Ok(self.tape.push(
            self.rows,
            self.cols,
            out,
            Op::AddCol(self.id, col.id),
            req,
        ))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape(
                "elementwise_mul",
                (self.rows, self.cols),
                (other.rows, other.cols),
            ));
        }
        let out = self
            .value()
            .iter()
            .zip(other.value())
            .map(|(a, b)| a * b)
            .collect();
        let req = self.tape.req(&[self.id, other.id]);
        Ok(self
            .tape
            .push(self.rows, self.cols, out, Op::Mul(self.id, other.id), req))
    }

    pub fn concat_cols(&self, other: &Var<'t>) -> Result<Var<'t>> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "concat_cols",
                (self.rows, self.cols),
                (other.rows, other.cols),
            ));
        }
        let (a, b) = (self.value(), other.value());
        let c = self.cols + other.cols;
        let mut out = vec![0.0; self.rows * c];
        for i in 0..self.rows {
            out[i * c..i * c + self.cols].copy_from_slice(&a[i * self.cols..(i + 1) * self.cols]);
            out[i * c + self.cols..(i + 1) * c]
                .copy_from_slice(&b[i * other.cols..(i + 1) * other.cols]);
        }
        let req = self.tape.req(&[self.id, other.id]);
        Ok(self
            .tape
            .push(self.rows, c, out, Op::ConcatCols(self.id, other.id), req))
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat_rows of empty list".into()))?;
        let cols = first.cols;
        let tape = first.tape;
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::shape("concat_rows", (first.rows, cols), (p.rows, p.cols)));
            }
            out.extend(p.value());
            rows += p.rows;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let req = tape.req(&ids);
        Ok(tape.push(rows, cols, out, Op::ConcatRows(ids), req))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'t>> {
        if start + len > self.cols {
            return Err(Error::shape("slice_cols", (self.rows, self.cols), (start, len)));
        }
        let v = self.value();
        let mut out = Vec::with_capacity(self.rows * len);
        for i in 0..self.rows {
            out.extend_from_slice(&v[i * self.cols + start..i * self.cols + start + len]);
        }
        Ok(self.unary(self.rows, len, out, Op::SliceCols(self.id, start)))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<'t>> {
        if start + len > self.rows {
            return Err(Error::shape("slice_rows", (self.rows, self.cols), (start, len)));
        }
        let v = self.value();
        let out = v[start * self.cols..(start + len) * self.cols].to_vec();
        Ok(self.unary(len, self.cols, out, Op::SliceRows(self.id, start)))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let out = self
            .value()
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        self.unary(self.rows, self.cols, out, Op::Sigmoid(self.id))
    }

    pub fn tanh(&self) -> Var<'t> {
        let out = self.value().iter().map(|x| x.tanh()).collect();
        self.unary(self.rows, self.cols, out, Op::Tanh(self.id))
    }

    pub fn ln(&self) -> Var<'t> {
        let out = self.value().iter().map(|x| x.ln()).collect();
        self.unary(self.rows, self.cols, out, Op::Ln(self.id))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&self) -> Var<'t> {
        let v = self.value();
        let mut out = vec![0.0; v.len()];
        for i in 0..self.rows {
            let row = &v[i * self.cols..(i + 1) * self.cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..self.cols {
                out[i * self.cols + j] = exps[j] / sum;
            }
        }
        self.unary(self.rows, self.cols, out, Op::Softmax(self.id))
    }

    /// Row-wise log-sum-exp with max subtraction, r×c → r×1.
    pub fn log_sum_exp(&self) -> Var<'t> {
        let v = self.value();
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = &v[i * self.cols..(i + 1) * self.cols];
            out[i] = log_sum_exp_slice(row);
        }
        self.unary(self.rows, 1, out, Op::LogSumExp(self.id))
    }

    /// Mean over rows, r×c → 1×c.
    pub fn mean_rows(&self) -> Var<'t> {
        let v = self.value();
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j] += v[i * self.cols + j];
            }
        }
        let inv = 1.0 / self.rows as f64;
        for o in out.iter_mut() {
            *o *= inv;
        }
        self.unary(1, self.cols, out, Op::MeanRows(self.id))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().iter().sum();
        self.unary(1, 1, vec![s], Op::Sum(self.id))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let out = self.value().iter().map(|x| x * s).collect();
        self.unary(self.rows, self.cols, out, Op::Scale(self.id, s))
    }

    pub fn transpose(&self) -> Var<'t> {
        let v = self.value();
        let mut out = vec![0.0; v.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = v[i * self.cols + j];
            }
        }
        self.unary(self.cols, self.rows, out, Op::Transpose(self.id))
    }

    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let mut out = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::Invalid(format!(
                    "gather_rows: index {i} out of range for {} rows",
                    self.rows
                )));
            }
            out.extend_from_slice(&v[i * self.cols..(i + 1) * self.cols]);
        }
        Ok(self.unary(
            indices.len(),
            self.cols,
            out,
            Op::GatherRows(self.id, indices.to_vec()),
        ))
    }

    /// Sum of the entries at `picks` (row, col), as a scalar.
    pub fn pick_sum(&self, picks: &[(usize, usize)]) -> Result<Var<'t>> {
        let v = self.value();
        let mut s = 0.0;
        for &(i, j) in picks {
            if i >= self.rows || j >= self.cols {
                return Err(Error::Invalid(format!(
                    "pick_sum: entry ({i},{j}) out of range for {}x{}",
                    self.rows, self.cols
                )));
            }
            s += v[i * self.cols + j];
        }
        Ok(self.unary(1, 1, vec![s], Op::PickSum(self.id, picks.to_vec())))
    }
}

/// Overflow-safe log Σ exp over a slice.
pub fn log_sum_exp_slice(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Central-difference gradient oracle: (f(θ+εe_i) − f(θ−εe_i)) / 2ε.
///
/// Independent of the tape; used to check [`Tape::backward`].
pub fn finite_difference_gradient<F>(f: F, params: &Tensor, epsilon: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if epsilon <= 0.0 {
        return Err(Error::Invalid("epsilon must be positive".into()));
    }
    let mut probe = params.clone();
    let mut grad = vec![0.0; params.len()];
    for i in 0..params.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + epsilon;
        let fp = f(&probe)?;
        probe.data[i] = orig - epsilon;
        let fm = f(&probe)?;
        probe.data[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite("finite_difference_gradient"));
        }
        grad[i] = (fp - fm) / (2.0 * epsilon);
    }
    Tensor::from_vec(params.rows, params.cols, grad)
}

/// Max relative error between two gradients, with an absolute floor for
/// near-zero entries.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sigmoid_at_zero() {
        let tape = Tape::new();
        let x = tape.constant(1, 1, vec![0.0]).unwrap();
        assert_eq!(x.sigmoid().scalar_value(), 0.5);
    }

    #[test]
    fn log_sum_exp_closed_form() {
        let tape = Tape::new();
        let x = tape.constant(1, 4, vec![0.0; 4]).unwrap();
        let got = x.log_sum_exp().scalar_value();
        assert!((got - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_overflow_safe() {
        let tape = Tape::new();
        let x = tape.constant(1, 2, vec![1000.0, 1000.0]).unwrap();
        let got = x.log_sum_exp().scalar_value();
        assert!((got - (1000.0 + 2.0f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn matmul_row_sums() {
        let tape = Tape::new();
        let a = tape
            .constant(2, 3, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0])
            .unwrap();
        let b = tape.constant(3, 1, vec![1.0, 1.0, 1.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.value(), vec![3.0, 3.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_op() {
        let tape = Tape::new();
        let a = tape.constant(2, 3, vec![0.0; 6]).unwrap();
        let b = tape.constant(2, 3, vec![0.0; 6]).unwrap();
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("(2, 3)"), "{err}");
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::new();
        let t = Tensor::from_vec(1, 3, vec![1.0, 2.0, 3.0])
            .unwrap()
            .with_grad();
        let x = tape.leaf(&t);
        let loss = x.sum();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_sigmoid_at_zero() {
        let tape = Tape::new();
        let t = Tensor::from_vec(1, 1, vec![0.0]).unwrap().with_grad();
        let x = tape.leaf(&t);
        let loss = x.sigmoid().sum();
        tape.backward(loss).unwrap();
        assert!((x.grad()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.constant(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn gradient_accumulates_across_uses() {
        let tape = Tape::new();
        let t = Tensor::from_vec(1, 2, vec![0.3, -0.7]).unwrap().with_grad();
        let x = tape.leaf(&t);
        // loss = sum(x) + sum(x ⊙ x): grad = 1 + 2x, exactly
        let loss = x.sum().add(&x.mul(&x).unwrap().sum()).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad(), vec![1.0 + 0.6, 1.0 - 1.4]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = Tensor::uniform(5, 6, -3.0, 3.0, &mut rng);
        let x = tape.leaf(&t);
        let p = x.softmax();
        let v = p.value();
        for i in 0..5 {
            let s: f64 = v[i * 6..(i + 1) * 6].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(v[i * 6..(i + 1) * 6].iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn finite_difference_on_square() {
        let t = Tensor::from_vec(1, 1, vec![3.0]).unwrap();
        let g = finite_difference_gradient(|p| Ok(p.data()[0] * p.data()[0]), &t, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn finite_difference_on_constant() {
        let t = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = finite_difference_gradient(|_| Ok(5.0), &t, 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn finite_difference_rejects_non_finite() {
        let t = Tensor::from_vec(1, 1, vec![0.0]).unwrap();
        assert!(finite_difference_gradient(|_| Ok(f64::NAN), &t, 1e-5).is_err());
    }

    #[test]
    fn backward_matches_finite_differences_on_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let w1 = Tensor::uniform(3, 4, -0.5, 0.5, &mut rng).with_grad();
        let w2 = Tensor::uniform(4, 2, -0.5, 0.5, &mut rng).with_grad();
        let x = Tensor::uniform(2, 3, -1.0, 1.0, &mut rng);

        let eval = |w1t: &Tensor, w2t: &Tensor| -> Result<f64> {
            let tape = Tape::new();
            let xin = tape.leaf(&x);
            let a = tape.leaf(w1t);
            let b = tape.leaf(w2t);
            let h = xin.matmul(&a)?.tanh();
            let y = h.matmul(&b)?.sigmoid();
            Ok(y.sum().scalar_value())
        };

        let tape = Tape::new();
        let xin = tape.leaf(&x);
        let a = tape.leaf(&w1);
        let b = tape.leaf(&w2);
        let h = xin.matmul(&a).unwrap().tanh();
        let y = h.matmul(&b).unwrap().sigmoid();
        tape.backward(y.sum()).unwrap();

        let fd1 = finite_difference_gradient(|p| eval(p, &w2), &w1, 1e-5).unwrap();
        let fd2 = finite_difference_gradient(|p| eval(&w1, p), &w2, 1e-5).unwrap();
        assert!(max_relative_error(&a.grad(), fd1.data()) < 1e-4);
        assert!(max_relative_error(&b.grad(), fd2.data()) < 1e-4);
    }
}
