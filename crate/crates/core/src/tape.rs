//! Dense-matrix computation record with reverse-mode differentiation.
//!
//! Every intermediate matrix of a forward pass is appended to a [`Tape`] and
//! addressed through a copyable [`Var`] handle. Nodes are stored in creation
//! order, so the tape is already a topological order and [`Tape::backward`]
//! is a single reverse sweep.
//!
//! Shapes are never broadcast implicitly. The one place a row is replicated
//! ([`Tape::broadcast_rows`]) is an explicit operation with its own backward
//! rule.

use ndarray::{Array2, Axis, Zip};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    /// Handle of the `i`-th node. Only meaningful on a tape whose first
    /// nodes were laid out by [`Tape::with_params`].
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

/// Pointwise operations available through [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Hadamard,
    Scale(f64),
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `aᵀ b`.
    MatMulTn(Var, Var),
    /// `pᵀ a p` with operands `(p, a)`.
    Congruence(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    /// `scale * x + shift`; only the scale matters for the backward rule.
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    /// `x^{-1/2}` for positive entries, `1` elsewhere.
    RsqrtOrOne(Var),
    ConcatCols(Var, Var),
    RowSoftmax(Var),
    /// `softmax(relu(x))` row by row.
    ReluRowSoftmax(Var),
    /// `−D^{-1/2} A D^{-1/2}` with zero degrees treated as one.
    NegNormalized(Var),
    Transpose(Var),
    RowSums(Var),
    SumAll(Var),
    BroadcastRows(Var),
}

impl Op {
    fn parents(&self) -> (Option<Var>, Option<Var>) {
        use Op::*;
        match *self {
            Leaf => (None, None),
            MatMul(a, b)
            | MatMulTn(a, b)
            | Congruence(a, b)
            | Add(a, b)
            | Sub(a, b)
            | Hadamard(a, b)
            | ConcatCols(a, b) => (Some(a), Some(b)),
            Affine(a, ..) | Sigmoid(a) | Tanh(a) | Relu(a) | RsqrtOrOne(a) | RowSoftmax(a)
            | ReluRowSoftmax(a) | NegNormalized(a) | Transpose(a) | RowSums(a) | SumAll(a) | BroadcastRows(a) => (Some(a), None),
        }
    }
}

/// One recorded matrix: its value, accumulated gradient and provenance.
#[derive(Clone, Debug)]
pub struct Value {
    data: Matrix,
    grad: Option<Matrix>,
    op: Op,
    requires_grad: bool,
}

impl Value {
    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn grad(&self) -> Option<&Matrix> {
        self.grad.as_ref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.op, Op::Leaf)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Value>,
    macs: u64,
}

fn dims(m: &Matrix) -> (usize, usize) {
    m.dim()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape whose first `params.len()` nodes are trainable leaves holding
    /// the parameters in order, so `params.var(i)` addresses them.
    pub fn with_params(params: &crate::params::ParamSet) -> Self {
        let mut tape = Self::new();
        for m in params.values() {
            tape.param(m.clone());
        }
        tape
    }

    /// Gradients of the first `count` leaves, zero where none accumulated.
    pub fn leading_grads(&self, count: usize) -> Vec<Matrix> {
        self.nodes[..count]
            .iter()
            .map(|n| n.grad.clone().unwrap_or_else(|| Array2::zeros(n.data.dim())))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations performed by matrix products so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Floats held by non-leaf nodes, i.e. the activations retained for the
    /// backward sweep.
    pub fn activation_floats(&self) -> u64 {
        self.nodes
            .iter()
            .filter(|n| !n.is_leaf())
            .map(|n| n.data.len() as u64)
            .sum()
    }

    pub fn node(&self, v: Var) -> &Value {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        dims(&self.nodes[v.0].data)
    }

    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].data[[0, 0]]
    }

    pub fn leaf(&mut self, data: Matrix, requires_grad: bool) -> Var {
        self.push(data, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, data: Matrix) -> Var {
        self.leaf(data, true)
    }

    pub fn constant(&mut self, data: Matrix) -> Var {
        self.leaf(data, false)
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, data: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Value {
            data,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, data: Matrix, op: Op) -> Var {
        let requires_grad = match op.parents() {
            (Some(a), Some(b)) => self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad,
            (Some(a), None) => self.nodes[a.0].requires_grad,
            _ => false,
        };
        self.push(data, op, requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(Error::shape("matmul", (m, k), (k2, n)));
        }
        self.macs += (m * k * n) as u64;
        let data = self.value(a).dot(self.value(b));
        Ok(self.push_op(data, Op::MatMul(a, b)))
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
        let a = operands[0];
        match kind {
            Elementwise::Add => self.add(a, operands[1]),
            Elementwise::Sub => self.sub(a, operands[1]),
            Elementwise::Hadamard => self.hadamard(a, operands[1]),
            Elementwise::Scale(c) => Ok(self.scale(a, c)),
            Elementwise::Sigmoid => Ok(self.sigmoid(a)),
            Elementwise::Tanh => Ok(self.tanh(a)),
            Elementwise::Relu => Ok(self.relu(a)),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a) + self.value(b);
        Ok(self.push_op(data, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.value(a) - self.value(b);
        Ok(self.push_op(data, Op::Sub(a, b)))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        let data = self.value(a) * self.value(b);
        Ok(self.push_op(data, Op::Hadamard(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.affine(a, c, 0.0)
    }

    /// `scale * a + shift`, pointwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let data = self.value(a).mapv(|x| scale * x + shift);
        self.push_op(data, Op::Affine(a, scale))
    }

    /// `1 - a`, pointwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.value(a).mapv(sigmoid);
        self.push_op(data, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let data = self.value(a).mapv(f64::tanh);
        self.push_op(data, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).mapv(|x| x.max(0.0));
        self.push_op(data, Op::Relu(a))
    }

    /// Inverse square root of positive entries; non-positive entries map to 1.
    pub fn rsqrt_or_one(&mut self, a: Var) -> Var {
        let data = self
            .value(a)
            .mapv(|x| if x > 0.0 { x.sqrt().recip() } else { 1.0 });
        self.push_op(data, Op::RsqrtOrOne(a))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.0 != sb.0 {
            return Err(Error::shape("concat_cols", sa, sb));
        }
        let data = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("row counts checked");
        Ok(self.push_op(data, Op::ConcatCols(a, b)))
    }

    /// Concatenates any number of blocks left to right.
    pub fn concat_cols_all(&mut self, parts: &[Var]) -> Result<Var> {
        let (&first, rest) = parts
            .split_first()
            .ok_or_else(|| Error::Contract("concat of zero blocks".into()))?;
        rest.iter().try_fold(first, |acc, &p| self.concat_cols(acc, p))
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("row_softmax input contains NaN".into()));
        }
        let mut data = x.clone();
        softmax_rows_in_place(&mut data);
        Ok(self.push_op(data, Op::RowSoftmax(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let data = self.value(a).t().to_owned();
        self.push_op(data, Op::Transpose(a))
    }

    /// n×m → n×1 row sums.
    /// `softmax(relu(a))` row by row as a single node.
    pub fn relu_row_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("relu_row_softmax input contains NaN".into()));
        }
        let mut data = x.mapv(|v| v.max(0.0));
        softmax_rows_in_place(&mut data);
        Ok(self.push_op(data, Op::ReluRowSoftmax(a)))
    }

    /// `aᵀ b` without materializing the transpose.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let (k, m) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul_tn", (m, k), (k2, n)));
        }
        self.macs += (m * k * n) as u64;
        let data = self.value(a).t().dot(self.value(b));
        Ok(self.push_op(data, Op::MatMulTn(a, b)))
    }

    /// `pᵀ a p` for a square `a`, as a single node.
    pub fn congruence(&mut self, p: Var, a: Var) -> Result<Var> {
        let (n, m) = self.shape(p);
        let sa = self.shape(a);
        if sa != (n, n) {
            return Err(Error::shape("congruence", sa, (n, m)));
        }
        self.macs += (n * n * m + m * n * m) as u64;
        let ap = self.value(a).dot(self.value(p));
        let data = self.value(p).t().dot(&ap);
        Ok(self.push_op(data, Op::Congruence(p, a)))
    }

    /// `−D^{-1/2} A D^{-1/2}` of a square nonnegative matrix, with `D` the
    /// row sums and zero sums treated as one.
    pub fn neg_normalized(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.shape(a);
        if n != m {
            return Err(Error::shape("neg_normalized", (n, m), (n, n)));
        }
        let x = self.value(a);
        let s = inv_sqrt_degrees(x);
        let data = Array2::from_shape_fn((n, n), |(i, j)| -s[i] * x[[i, j]] * s[j]);
        Ok(self.push_op(data, Op::NegNormalized(a)))
    }

    pub fn row_sums(&mut self, a: Var) -> Var {
        let data = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push_op(data, Op::RowSums(a))
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let data = Array2::from_elem((1, 1), self.value(a).sum());
        self.push_op(data, Op::SumAll(a))
    }

    /// Mean of all entries as a 1×1 node.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let count = self.value(a).len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / count)
    }

    /// Replicates a 1×m row into an n×m matrix.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let (r, m) = self.shape(a);
        if r != 1 {
            return Err(Error::shape("broadcast_rows", (r, m), (1, m)));
        }
        let data = self.value(a).broadcast((n, m)).expect("1×m row").to_owned();
        Ok(self.push_op(data, Op::BroadcastRows(a)))
    }

    /// Adds ∂loss/∂leaf into the gradient buffer of every leaf that requires
    /// a gradient. Calling twice without [`Tape::zero_grad`] accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {shape:?}"
            )));
        }
        let mut pending: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let node = &self.nodes[i];
            let op = node.op.clone();
            let mut send = |p: Var, contrib: Matrix, nodes: &[Value]| {
                if !nodes[p.0].requires_grad {
                    return;
                }
                match &mut pending[p.0] {
                    Some(acc) => *acc += &contrib,
                    slot => *slot = Some(contrib),
                }
            };
            match op {
                Op::Leaf => {
                    let node = &mut self.nodes[i];
                    match &mut node.grad {
                        Some(acc) => *acc += &g,
                        slot => *slot = Some(g),
                    }
                }
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        let ga = g.dot(&self.nodes[b.0].data.t());
                        send(a, ga, &self.nodes);
                    }
                    if self.nodes[b.0].requires_grad {
                        let gb = self.nodes[a.0].data.t().dot(&g);
                        send(b, gb, &self.nodes);
                    }
                }
                Op::MatMulTn(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        let ga = self.nodes[b.0].data.dot(&g.t());
                        send(a, ga, &self.nodes);
                    }
                    if self.nodes[b.0].requires_grad {
                        let gb = self.nodes[a.0].data.dot(&g);
                        send(b, gb, &self.nodes);
                    }
                }
                Op::Congruence(p, a) => {
                    let pm = &self.nodes[p.0].data;
                    let am = &self.nodes[a.0].data;
                    if self.nodes[p.0].requires_grad {
                        let gp = am.dot(&pm.dot(&g.t())) + am.t().dot(&pm.dot(&g));
                        send(p, gp, &self.nodes);
                    }
                    if self.nodes[a.0].requires_grad {
                        let ga = pm.dot(&g).dot(&pm.t());
                        send(a, ga, &self.nodes);
                    }
                }
                Op::Add(a, b) => {
                    send(a, g.clone(), &self.nodes);
                    send(b, g, &self.nodes);
                }
                Op::Sub(a, b) => {
                    send(b, -&g, &self.nodes);
                    send(a, g, &self.nodes);
                }
                Op::Hadamard(a, b) => {
                    let ga = &g * &self.nodes[b.0].data;
                    let gb = &g * &self.nodes[a.0].data;
                    send(a, ga, &self.nodes);
                    send(b, gb, &self.nodes);
                }
                Op::Affine(a, scale) => send(a, g * scale, &self.nodes),
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&self.nodes[i].data)
                        .for_each(|g, &y| *g *= y * (1.0 - y));
                    send(a, ga, &self.nodes);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&self.nodes[i].data)
                        .for_each(|g, &y| *g *= 1.0 - y * y);
                    send(a, ga, &self.nodes);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&self.nodes[a.0].data)
                        .for_each(|g, &x| {
                            if x <= 0.0 {
                                *g = 0.0
                            }
                        });
                    send(a, ga, &self.nodes);
                }
                Op::RsqrtOrOne(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&self.nodes[a.0].data)
                        .for_each(|g, &x| {
                            *g *= if x > 0.0 { -0.5 * x.powf(-1.5) } else { 0.0 }
                        });
                    send(a, ga, &self.nodes);
                }
                Op::ConcatCols(a, b) => {
                    let split = self.nodes[a.0].data.ncols();
                    let ga = g.slice(ndarray::s![.., ..split]).to_owned();
                    let gb = g.slice(ndarray::s![.., split..]).to_owned();
                    send(a, ga, &self.nodes);
                    send(b, gb, &self.nodes);
                }
                Op::RowSoftmax(a) => {
                    let y = &self.nodes[i].data;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = y * &(&g - &dot);
                    send(a, ga, &self.nodes);
                }
                Op::ReluRowSoftmax(a) => {
                    let y = &self.nodes[i].data;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let mut ga = y * &(&g - &dot);
                    Zip::from(&mut ga)
                        .and(&self.nodes[a.0].data)
                        .for_each(|g, &x| {
                            if x <= 0.0 {
                                *g = 0.0
                            }
                        });
                    send(a, ga, &self.nodes);
                }
                Op::NegNormalized(a) => {
                    // L_ij = −s_i A_ij s_j with s = d^{-1/2}, d = row sums of A.
                    let x = &self.nodes[a.0].data;
                    let n = x.nrows();
                    let s = inv_sqrt_degrees(x);
                    let gl = &g * x;
                    let mut coef = vec![0.0; n];
                    for i in 0..n {
                        if x.row(i).sum() > 0.0 {
                            // ∂/∂s_i collects row i and column i terms.
                            let ds: f64 = (0..n).map(|j| -(gl[[i, j]] + gl[[j, i]]) * s[j]).sum();
                            coef[i] = ds * -0.5 * s[i].powi(3);
                        }
                    }
                    let ga = Array2::from_shape_fn((n, n), |(i, j)| -g[[i, j]] * s[i] * s[j] + coef[i]);
                    send(a, ga, &self.nodes);
                }
                Op::Transpose(a) => send(a, g.t().to_owned(), &self.nodes),
                Op::RowSums(a) => {
                    let shape = self.nodes[a.0].data.dim();
                    let ga = g.broadcast(shape).expect("n×1 column").to_owned();
                    send(a, ga, &self.nodes);
                }
                Op::SumAll(a) => {
                    let shape = self.nodes[a.0].data.dim();
                    send(a, Array2::from_elem(shape, g[[0, 0]]), &self.nodes);
                }
                Op::BroadcastRows(a) => {
                    let ga = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    send(a, ga, &self.nodes);
                }
            }
        }
        Ok(())
    }
}

fn softmax_rows_in_place(data: &mut Matrix) {
    for mut row in data.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
}

fn inv_sqrt_degrees(a: &Matrix) -> Vec<f64> {
    a.rows()
        .into_iter()
        .map(|r| {
            let d = r.sum();
            if d > 0.0 { d.sqrt().recip() } else { 1.0 }
        })
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
