//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every operation appends a node holding its forward value. Parents are
//! always recorded before their children, so a reverse sweep over the node
//! list is a valid topological order and visits each node once.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    XLogX(usize),
    Sum(usize),
    Mean(usize),
    Softmax(usize),
    LogSoftmax(usize),
    MeanRows(usize),
    Select(usize, usize),
    MulScalar(usize, usize),
    DivScalar(usize, usize),
    GatherCols(usize, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`, if it reached it.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }

    /// Like [`Gradients::wrt`] but yields zeros for unreached leaves.
    pub fn wrt_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.wrt(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, var: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.check(var)?].value)
    }

    fn check(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(var.index)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn rg(&self, indices: &[usize]) -> bool {
        indices.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn unary(&mut self, a: Var, op: impl FnOnce(usize) -> Op, f: impl FnOnce(&Tensor) -> Tensor) -> Result<Var> {
        let ia = self.check(a)?;
        let value = f(&self.nodes[ia].value);
        let rg = self.rg(&[ia]);
        Ok(self.push(op(ia), value, rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: impl FnOnce(usize, usize) -> Op,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = f(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(op(ia, ib), value, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::MatMul, |x, y| x.matmul(y))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.binary(x, bias, Op::AddBias, |x, b| x.add_bias(b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add, |x, y| x.zip_with(y, "add", |p, q| p + q))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub, |x, y| x.zip_with(y, "sub", |p, q| p - q))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul, |x, y| x.zip_with(y, "mul", |p, q| p * q))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |i| Op::Scale(i, c), |x| x.map(|v| v * c))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu, Tensor::relu)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp, |x| x.map(f64::exp))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        if let Some(bad) = self.nodes[ia].value.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        self.unary(a, Op::Log, |x| x.map(f64::ln))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid, |x| x.map(sigmoid))
    }

    /// Elementwise `v ln v` with `0 ln 0 = 0`; inputs must be nonnegative.
    pub fn xlogx(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        if let Some(bad) = self.nodes[ia].value.data().iter().find(|&&v| v < 0.0 || v.is_nan()) {
            return Err(Error::Domain(format!("xlogx of negative value {bad}")));
        }
        self.unary(a, Op::XLogX, |x| x.map(xlogx))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sum, |x| Tensor::scalar(x.sum()))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Mean, |x| Tensor::scalar(x.mean()))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Softmax, Tensor::softmax)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::LogSoftmax, Tensor::log_softmax)
    }

    /// Column means of a matrix.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::MeanRows, Tensor::mean_rows)
    }

    /// Extracts element `index` of a flat tensor as a scalar.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let len = self.nodes[ia].value.len();
        if index >= len {
            return Err(Error::InvalidArgument(format!(
                "select index {index} out of range for {len} values"
            )));
        }
        self.unary(a, |i| Op::Select(i, index), |x| Tensor::scalar(x.data()[index]))
    }

    /// Multiplies every element of `t` by the scalar `s`.
    pub fn mul_scalar(&mut self, t: Var, s: Var) -> Result<Var> {
        self.binary(t, s, Op::MulScalar, |x, s| {
            ensure_scalar(s, "mul_scalar")?;
            let c = s.item();
            Ok(x.map(|v| v * c))
        })
    }

    pub fn div_scalar(&mut self, t: Var, s: Var) -> Result<Var> {
        self.binary(t, s, Op::DivScalar, |x, s| {
            ensure_scalar(s, "div_scalar")?;
            let c = s.item();
            if c == 0.0 {
                return Err(Error::Domain("division by zero".into()));
            }
            Ok(x.map(|v| v / c))
        })
    }

    /// Picks `a[i, columns[i]]` for every row `i`.
    pub fn gather_cols(&mut self, a: Var, columns: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let x = &self.nodes[ia].value;
        if x.shape().len() != 2 || x.rows() != columns.len() {
            return Err(Error::ShapeMismatch {
                left: x.shape().to_vec(),
                right: vec![columns.len()],
                context: "gather_cols",
            });
        }
        let k = x.cols();
        if let Some(&bad) = columns.iter().find(|&&c| c >= k) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: k,
            });
        }
        let data = columns.iter().enumerate().map(|(i, &c)| x.get(i, c)).collect();
        let value = Tensor::vector(data)?;
        let rg = self.rg(&[ia]);
        Ok(self.push(Op::GatherCols(ia, columns.to_vec()), value, rg))
    }

    /// Runs the reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let ir = self.check(root)?;
        let root_value = &self.nodes[ir].value;
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; ir + 1];
        grads[ir] = Some(Tensor::full(root_value.shape(), 1.0));

        for i in (0..=ir).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], index: usize, delta: Tensor) -> Result<()> {
        if !self.nodes[index].requires_grad {
            return Ok(());
        }
        match &mut grads[index] {
            Some(existing) => existing.add_scaled(&delta, 1.0)?,
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a].requires_grad {
                    let ga = g.matmul(&self.val(b).transpose()?)?;
                    self.accumulate(grads, a, ga)?;
                }
                if self.nodes[b].requires_grad {
                    let gb = self.val(a).transpose()?.matmul(g)?;
                    self.accumulate(grads, b, gb)?;
                }
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, x, g.clone())?;
                if self.nodes[b].requires_grad {
                    let n = g.cols();
                    let mut gb = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, b, Tensor::vector(gb)?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone())?;
                self.accumulate(grads, b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone())?;
                self.accumulate(grads, b, g.map(|v| -v))?;
            }
            Op::Mul(a, b) => {
                let ga = g.zip_with(self.val(b), "mul", |p, q| p * q)?;
                let gb = g.zip_with(self.val(a), "mul", |p, q| p * q)?;
                self.accumulate(grads, a, ga)?;
                self.accumulate(grads, b, gb)?;
            }
            Op::Scale(a, c) => self.accumulate(grads, a, g.map(|v| v * c))?,
            Op::Relu(a) => {
                let ga = g.zip_with(self.val(a), "relu", |p, x| if x > 0.0 { p } else { 0.0 })?;
                self.accumulate(grads, a, ga)?;
            }
            Op::Exp(a) => self.accumulate(grads, a, g.zip_with(out, "exp", |p, y| p * y)?)?,
            Op::Log(a) => self.accumulate(grads, a, g.zip_with(self.val(a), "log", |p, x| p / x)?)?,
            Op::Sigmoid(a) => {
                self.accumulate(grads, a, g.zip_with(out, "sigmoid", |p, y| p * y * (1.0 - y))?)?
            }
            Op::XLogX(a) => {
                let ga = g.zip_with(self.val(a), "xlogx", |p, x| p * (x.max(f64::MIN_POSITIVE).ln() + 1.0))?;
                self.accumulate(grads, a, ga)?;
            }
            Op::Sum(a) => {
                let shape = self.val(a).shape().to_vec();
                self.accumulate(grads, a, Tensor::full(&shape, g.item()))?;
            }
            Op::Mean(a) => {
                let x = self.val(a);
                let shape = x.shape().to_vec();
                self.accumulate(grads, a, Tensor::full(&shape, g.item() / x.len() as f64))?;
            }
            Op::Softmax(a) => {
                let k = out.cols();
                let mut ga = g.clone();
                for (grow, yrow) in ga.data_mut().chunks_mut(k).zip(out.data().chunks(k)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(p, y)| p * y).sum();
                    for (gv, &y) in grow.iter_mut().zip(yrow) {
                        *gv = y * (*gv - dot);
                    }
                }
                self.accumulate(grads, a, ga)?;
            }
            Op::LogSoftmax(a) => {
                let k = out.cols();
                let mut ga = g.clone();
                for (grow, lrow) in ga.data_mut().chunks_mut(k).zip(out.data().chunks(k)) {
                    let total: f64 = grow.iter().sum();
                    for (gv, &l) in grow.iter_mut().zip(lrow) {
                        *gv -= l.exp() * total;
                    }
                }
                self.accumulate(grads, a, ga)?;
            }
            Op::MeanRows(a) => {
                let x = self.val(a);
                let m = x.rows() as f64;
                let mut ga = Tensor::zeros(x.shape());
                let n = x.cols();
                for row in ga.data_mut().chunks_mut(n) {
                    for (o, &v) in row.iter_mut().zip(g.data()) {
                        *o = v / m;
                    }
                }
                self.accumulate(grads, a, ga)?;
            }
            Op::Select(a, index) => {
                let mut ga = Tensor::zeros(self.val(a).shape());
                ga.data_mut()[index] = g.item();
                self.accumulate(grads, a, ga)?;
            }
            Op::MulScalar(t, s) => {
                let c = self.val(s).item();
                self.accumulate(grads, t, g.map(|v| v * c))?;
                if self.nodes[s].requires_grad {
                    let dot: f64 = g.data().iter().zip(self.val(t).data()).map(|(p, x)| p * x).sum();
                    self.accumulate(grads, s, Tensor::scalar(dot))?;
                }
            }
            Op::DivScalar(t, s) => {
                let c = self.val(s).item();
                self.accumulate(grads, t, g.map(|v| v / c))?;
                if self.nodes[s].requires_grad {
                    let dot: f64 = g.data().iter().zip(self.val(t).data()).map(|(p, x)| p * x).sum();
                    self.accumulate(grads, s, Tensor::scalar(-dot / (c * c)))?;
                }
            }
            Op::GatherCols(a, ref columns) => {
                let mut ga = Tensor::zeros(self.val(a).shape());
                let k = ga.cols();
                for (i, (&c, &p)) in columns.iter().zip(g.data()).enumerate() {
                    ga.data_mut()[i * k + c] += p;
                }
                self.accumulate(grads, a, ga)?;
            }
        }
        Ok(())
    }
}

fn ensure_scalar(t: &Tensor, context: &'static str) -> Result<()> {
    if !t.is_scalar() {
        return Err(Error::ShapeMismatch {
            left: t.shape().to_vec(),
            right: vec![1],
            context,
        });
    }
    Ok(())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `x ln x` with the convention `0 ln 0 = 0`.
pub fn xlogx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}
