//! Gradient tape: records every operation of one forward pass and replays them
//! in reverse to accumulate gradients.
//!
//! Nodes are appended in execution order, so every node's parents have a
//! smaller index than the node itself. Backward walks the indices downwards
//! from the root and only ever touches nodes that (a) require a gradient and
//! (b) received one from a consumer.

use std::borrow::Cow;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Pointwise operations exposed through [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Tanh,
    Sigmoid,
    Abs,
    Exp,
    Log,
    Neg,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Tanh,
    Sigmoid,
    Relu,
    Elu,
    Abs,
    Exp,
    Log,
    LogClamped(f64),
    Scale(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Unary(Unary, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    SumCols(Var),
    GatherCols(Var, Vec<usize>),
    SoftmaxRows(Var),
    RowBmm(Var, Var),
    StraightThrough(Var),
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
///
/// Inputs may be borrowed (`leaf_ref`, `constant_ref`) so that binding a
/// parameter set does not copy it.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the node is off the path to the root or is a constant.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_cow(Cow::Owned(value), op, requires_grad)
    }

    fn push_cow(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Trainable input borrowed from outside the tape.
    pub fn leaf_ref(&mut self, value: &'a Tensor) -> Var {
        self.push_cow(Cow::Borrowed(value), Op::Leaf, true)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.push_cow(Cow::Borrowed(value), Op::Constant, false)
    }

    /// Constant copy of `v`'s current value (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push_cow(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let out = match kind {
            Unary::Tanh => v.map(f64::tanh),
            Unary::Sigmoid => v.map(sigmoid),
            Unary::Relu => v.map(|a| a.max(0.0)),
            Unary::Elu => v.map(|a| if a > 0.0 { a } else { a.exp_m1() }),
            Unary::Abs => v.map(f64::abs),
            Unary::Exp => v.map(f64::exp),
            Unary::Log => v.map(f64::ln),
            Unary::LogClamped(floor) => v.map(|a| a.max(floor).ln()),
            Unary::Scale(c) => v.map(|a| a * c),
        };
        let rg = self.rg(x);
        self.push(out, Op::Unary(kind, x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    /// ELU with unit slope for negative inputs.
    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(Unary::Elu, x)
    }

    /// Absolute value; the subgradient at exactly zero is zero.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Unary::Abs, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&a| a <= 0.0 || a.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("argument {bad} is not positive"),
            });
        }
        Ok(self.unary(Unary::Log, x))
    }

    /// `ln(max(x, floor))`; entries at or below the floor pass no gradient.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Var {
        self.unary(Unary::LogClamped(floor), x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(Unary::Scale(c), x)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Scale(-1.0), x)
    }

    fn binary_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(dim_err(name, va, vb));
        }
        let out = va.zip_map(vb, f);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Dispatches one of the named pointwise operations.
    pub fn elementwise(&mut self, op: Elementwise, inputs: &[Var]) -> Result<Var> {
        let arity = match op {
            Elementwise::Add | Elementwise::Mul => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::Contract(format!(
                "{op:?} takes {arity} operand(s), got {}",
                inputs.len()
            )));
        }
        match op {
            Elementwise::Add => self.add(inputs[0], inputs[1]),
            Elementwise::Mul => self.mul(inputs[0], inputs[1]),
            Elementwise::Tanh => Ok(self.tanh(inputs[0])),
            Elementwise::Sigmoid => Ok(self.sigmoid(inputs[0])),
            Elementwise::Abs => Ok(self.abs(inputs[0])),
            Elementwise::Exp => Ok(self.exp(inputs[0])),
            Elementwise::Log => self.log(inputs[0]),
            Elementwise::Neg => Ok(self.neg(inputs[0])),
        }
    }

    /// `x + row` with `row` (`1 × C`) broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (vx, vr) = (&self.nodes[x.0].value, &self.nodes[row.0].value);
        if vr.rows() != 1 || vr.cols() != vx.cols() {
            return Err(dim_err("add_row", vx, vr));
        }
        let mut out = vx.as_ref().clone();
        let c = vx.cols();
        for chunk in out.data_mut().chunks_mut(c.max(1)) {
            for (o, b) in chunk.iter_mut().zip(vr.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    /// Scales row `r` of `x` by `col[r]` (`col` is `R × 1`).
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (vx, vc) = (&self.nodes[x.0].value, &self.nodes[col.0].value);
        if vc.cols() != 1 || vc.rows() != vx.rows() {
            return Err(dim_err("mul_col", vx, vc));
        }
        let mut out = vx.as_ref().clone();
        let c = vx.cols();
        if c > 0 {
            for (chunk, s) in out.data_mut().chunks_mut(c).zip(vc.data()) {
                chunk.iter_mut().for_each(|o| *o *= s);
            }
        }
        let rg = self.rg(x) || self.rg(col);
        Ok(self.push(out, Op::MulCol(x, col), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.transpose();
        let rg = self.rg(x);
        self.push(out, Op::Transpose(x), rg)
    }

    /// Reinterprets the row-major buffer with a new shape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.len() != rows * cols {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: v.shape(),
                rhs: [rows, cols],
            });
        }
        let out = Tensor::new(rows, cols, v.data().to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if start + len > v.cols() {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: v.shape(),
                rhs: [start, len],
            });
        }
        let mut data = Vec::with_capacity(v.rows() * len);
        for r in 0..v.rows() {
            data.extend_from_slice(&v.row_slice(r)[start..start + len]);
        }
        let out = Tensor::new(v.rows(), len, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols(x, start), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if start + len > v.rows() {
            return Err(Error::Dimension {
                op: "slice_rows",
                lhs: v.shape(),
                rhs: [start, len],
            });
        }
        let c = v.cols();
        let out = Tensor::new(len, c, v.data()[start * c..(start + len) * c].to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceRows(x, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let rows = self.value(*first).rows();
        for p in parts {
            if self.value(*p).rows() != rows {
                return Err(dim_err("concat_cols", self.value(*first), self.value(*p)));
            }
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        let out = Tensor::new(rows, cols, data)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let cols = self.value(*first).cols();
        for p in parts {
            if self.value(*p).cols() != cols {
                return Err(dim_err("concat_rows", self.value(*first), self.value(*p)));
            }
        }
        let rows: usize = parts.iter().map(|p| self.value(*p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        let out = Tensor::new(rows, cols, data)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Sum of every entry, as a `1 × 1` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Row sums, `R × C -> R × 1`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = (0..v.rows()).map(|r| v.row_slice(r).iter().sum()).collect();
        let out = Tensor::new(v.rows(), 1, data).expect("row count");
        let rg = self.rg(x);
        self.push(out, Op::SumCols(x), rg)
    }

    /// Picks `x[r, index[r]]` for every row, giving `R × 1`.
    pub fn gather_cols(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if index.len() != v.rows() {
            return Err(Error::Dimension {
                op: "gather_cols",
                lhs: v.shape(),
                rhs: [index.len(), 1],
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= v.cols()) {
            return Err(Error::Contract(format!(
                "gather index {bad} out of range for {} columns",
                v.cols()
            )));
        }
        let data = index.iter().enumerate().map(|(r, &c)| v.get(r, c)).collect();
        let out = Tensor::new(v.rows(), 1, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::GatherCols(x, index.to_vec()), rg))
    }

    /// Row-wise softmax, computed with the row maximum subtracted.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mut out = v.clone();
        let c = v.cols();
        if c > 0 {
            for row in out.data_mut().chunks_mut(c) {
                softmax_in_place(row);
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    /// Batched row-vector by matrix product: `q` is `B × n`, `w` is `B × (n·h)`
    /// holding one row-major `n × h` matrix per row; the result is `B × h`.
    pub fn row_bmm(&mut self, q: Var, w: Var) -> Result<Var> {
        let (vq, vw) = (self.value(q), self.value(w));
        let n = vq.cols();
        if vq.rows() != vw.rows() || n == 0 || vw.cols() % n != 0 {
            return Err(dim_err("row_bmm", vq, vw));
        }
        let h = vw.cols() / n;
        let mut out = Tensor::zeros(vq.rows(), h);
        for b in 0..vq.rows() {
            let qr = vq.row_slice(b);
            let wr = vw.row_slice(b);
            let o = &mut out.data_mut()[b * h..(b + 1) * h];
            for (i, &qi) in qr.iter().enumerate() {
                for (oj, wij) in o.iter_mut().zip(&wr[i * h..(i + 1) * h]) {
                    *oj += qi * wij;
                }
            }
        }
        let rg = self.rg(q) || self.rg(w);
        Ok(self.push(out, Op::RowBmm(q, w), rg))
    }

    /// Forward value `hard`, backward identity into `soft`.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(dim_err("straight_through", &hard, self.value(soft)));
        }
        let rg = self.rg(soft);
        Ok(self.push(hard, Op::StraightThrough(soft), rg))
    }

    /// Reverse pass from a `1 × 1` root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.shape() != [1, 1] {
            return Err(Error::Dimension {
                op: "backward",
                lhs: rv.shape(),
                rhs: [1, 1],
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::scalar(1.0));
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contribution: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<'a>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Unary(kind, x) => {
                let xv = self.value(*x);
                let y = &node.value;
                let dx = match *kind {
                    Unary::Tanh => zip3(g, y, y, |g, y, _| g * (1.0 - y * y)),
                    Unary::Sigmoid => zip3(g, y, y, |g, y, _| g * y * (1.0 - y)),
                    Unary::Relu => zip3(g, xv, y, |g, x, _| if x > 0.0 { g } else { 0.0 }),
                    Unary::Elu => zip3(g, xv, y, |g, x, y| if x > 0.0 { g } else { g * (y + 1.0) }),
                    Unary::Abs => zip3(g, xv, y, |g, x, _| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    }),
                    Unary::Exp => zip3(g, y, y, |g, y, _| g * y),
                    Unary::Log => zip3(g, xv, y, |g, x, _| g / x),
                    Unary::LogClamped(floor) => {
                        zip3(g, xv, y, |g, x, _| if x > floor { g / x } else { 0.0 })
                    }
                    Unary::Scale(c) => g.map(|g| g * c),
                };
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |g, y| g * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |g, x| g * x));
                }
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*row) {
                    let mut dr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, v) in dr.data_mut().iter_mut().zip(g.row_slice(r)) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *row, dr);
                }
            }
            Op::MulCol(x, col) => {
                let (vx, vc) = (self.value(*x), self.value(*col));
                if self.wants(*x) {
                    let mut dx = g.clone();
                    let c = g.cols();
                    if c > 0 {
                        for (chunk, s) in dx.data_mut().chunks_mut(c).zip(vc.data()) {
                            chunk.iter_mut().for_each(|o| *o *= s);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*col) {
                    let data = (0..g.rows())
                        .map(|r| {
                            g.row_slice(r)
                                .iter()
                                .zip(vx.row_slice(r))
                                .map(|(a, b)| a * b)
                                .sum()
                        })
                        .collect();
                    self.accumulate(grads, *col, Tensor::new(g.rows(), 1, data).expect("rows"));
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut da = Tensor::zeros(va.rows(), va.cols());
                    gemm(g, false, vb, true, &mut da, false);
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(vb.rows(), vb.cols());
                    gemm(va, true, g, false, &mut db, false);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()),
            Op::Reshape(x) => {
                let s = self.shape(*x);
                let dx = Tensor::new(s[0], s[1], g.data().to_vec()).expect("same size");
                self.accumulate(grads, *x, dx);
            }
            Op::SliceCols(x, start) => {
                let s = self.shape(*x);
                let mut dx = Tensor::zeros(s[0], s[1]);
                let len = g.cols();
                for r in 0..s[0] {
                    dx.data_mut()[r * s[1] + start..r * s[1] + start + len]
                        .copy_from_slice(g.row_slice(r));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SliceRows(x, start) => {
                let s = self.shape(*x);
                let mut dx = Tensor::zeros(s[0], s[1]);
                let c = s[1];
                dx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let s = self.shape(*p);
                    if self.wants(*p) {
                        let mut dp = Tensor::zeros(s[0], s[1]);
                        for r in 0..s[0] {
                            dp.data_mut()[r * s[1]..(r + 1) * s[1]]
                                .copy_from_slice(&g.row_slice(r)[offset..offset + s[1]]);
                        }
                        self.accumulate(grads, *p, dp);
                    }
                    offset += s[1];
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let s = self.shape(*p);
                    let n = s[0] * s[1];
                    if self.wants(*p) {
                        let dp = Tensor::new(s[0], s[1], g.data()[offset..offset + n].to_vec())
                            .expect("same size");
                        self.accumulate(grads, *p, dp);
                    }
                    offset += n;
                }
            }
            Op::Sum(x) => {
                let s = self.shape(*x);
                self.accumulate(grads, *x, Tensor::filled(s[0], s[1], g.item()));
            }
            Op::SumCols(x) => {
                let s = self.shape(*x);
                let mut dx = Tensor::zeros(s[0], s[1]);
                for r in 0..s[0] {
                    let gr = g.get(r, 0);
                    dx.data_mut()[r * s[1]..(r + 1) * s[1]].iter_mut().for_each(|d| *d = gr);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GatherCols(x, index) => {
                let s = self.shape(*x);
                let mut dx = Tensor::zeros(s[0], s[1]);
                for (r, &c) in index.iter().enumerate() {
                    dx.set(r, c, g.get(r, 0));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..y.cols() {
                        dx.set(r, c, yr[c] * (gr[c] - dot));
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::RowBmm(q, w) => {
                let (vq, vw) = (self.value(*q), self.value(*w));
                let (n, h) = (vq.cols(), g.cols());
                if self.wants(*q) {
                    let mut dq = Tensor::zeros(vq.rows(), n);
                    for b in 0..vq.rows() {
                        let (gr, wr) = (g.row_slice(b), vw.row_slice(b));
                        for i in 0..n {
                            let s: f64 = gr.iter().zip(&wr[i * h..(i + 1) * h]).map(|(a, c)| a * c).sum();
                            dq.set(b, i, s);
                        }
                    }
                    self.accumulate(grads, *q, dq);
                }
                if self.wants(*w) {
                    let mut dw = Tensor::zeros(vw.rows(), vw.cols());
                    for b in 0..vq.rows() {
                        let gr = g.row_slice(b);
                        for i in 0..n {
                            let qi = vq.get(b, i);
                            let row = &mut dw.data_mut()[b * n * h + i * h..b * n * h + (i + 1) * h];
                            for (d, gj) in row.iter_mut().zip(gr) {
                                *d = qi * gj;
                            }
                        }
                    }
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::StraightThrough(soft) => self.accumulate(grads, *soft, g.clone()),
        }
    }
}

fn zip3(g: &Tensor, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
    let data = g
        .data()
        .iter()
        .zip(a.data())
        .zip(b.data())
        .map(|((&g, &a), &b)| f(g, a, b))
        .collect();
    Tensor::new(g.rows(), g.cols(), data).expect("same shape")
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable softmax of a slice, overwriting it.
pub fn softmax_in_place(row: &mut [f64]) {
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

    #[test]
    fn matmul_identity_and_zero() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::identity(2));
        let b = t.constant(Tensor::from_rows(&[&[3.0], &[4.0]]));
        let y = t.matmul(i, b).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, 4.0]);

        let a = t.constant(Tensor::row(&[1.0, 2.0]));
        let z = t.constant(Tensor::zeros(2, 1));
        let y = t.matmul(a, z).unwrap();
        assert_eq!(t.value(y).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 3));
        let b = t.constant(Tensor::zeros(2, 3));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(&[1.0, 0.0]));
        assert!(matches!(t.log(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn pointwise_fixed_points() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0));
        let th = t.tanh(x);
        let sg = t.sigmoid(x);
        assert_eq!(t.value(th).item(), 0.0);
        assert_eq!(t.value(sg).item(), 0.5);
    }

    #[test]
    fn abs_subgradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(&[0.0, -2.0, 3.0]));
        let a = t.abs(x);
        let s = t.sum(a);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, -1.0, 1.0]);
    }

    #[test]
    fn softmax_equal_logits_and_overflow() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(&[7.5; 4]));
        let p = t.softmax_rows(x);
        assert!(t.value(p).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let x = t.constant(Tensor::row(&[1000.0, 0.0]));
        let p = t.softmax_rows(x);
        let v = t.value(p).data();
        assert!(v.iter().all(|x| x.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-300);
    }

    #[test]
    fn softmax_one_zero_matches_closed_form() {
        // e/(e+1) and 1/(e+1) to 17 significant digits.
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(&[1.0, 0.0]));
        let p = t.softmax_rows(x);
        let v = t.value(p).data();
        assert!((v[0] - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!((v[1] - 0.268_941_421_369_995_1).abs() < 1e-15);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unreachable_nodes_get_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(2.0));
        let y = t.leaf(Tensor::scalar(3.0));
        let _unused = t.mul(x, y).unwrap();
        let z = t.tanh(x);
        let g = t.backward(z).unwrap();
        assert!(g.get(x).is_some());
        assert!(g.get(y).is_none());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(2.0));
        let c = t.constant(Tensor::scalar(3.0));
        let y = t.mul(x, c).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 3.0);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn straight_through_forward_is_hard() {
        let mut t = Tape::new();
        let s = t.leaf(Tensor::row(&[0.2, 0.8]));
        let h = t.straight_through(Tensor::row(&[0.0, 1.0]), s).unwrap();
        assert_eq!(t.value(h).data(), &[0.0, 1.0]);
        let w = t.constant(Tensor::row(&[2.0, 5.0]));
        let p = t.mul(h, w).unwrap();
        let l = t.sum(p);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(s).unwrap().data(), &[2.0, 5.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(&[1.0, 2.0]));
        assert!(t.backward(x).is_err());
    }
}
