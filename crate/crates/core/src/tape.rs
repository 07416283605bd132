//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node propagates gradients to all
//! ancestors. [`Tape::detach`] copies a value into a fresh leaf, which is
//! how stop-gradient is expressed: nothing upstream of a detached node can
//! receive gradient through it.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, Grid, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    MatMul(Var, Var),
    Transpose(Var),
    AddRowBias(Var, Var),
    MulRowBroadcast(Var, Var),
    Relu(Var),
    Conv3x3 { x: Var, w: Var, b: Var, grid: Grid },
    ConvT2x { x: Var, w: Var, b: Var, grid: Grid },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    NormalizeRows(Var),
    SelectRow(Var, usize),
    StackRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Diag(Var),
    Reshape(Var),
    Correlate(Var, Var),
    ConcatRows(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Registers a parameter. Frozen parameters become constants; trainable ones
    /// are gradient-tracked leaves. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let op = if store.is_trainable(id) {
            Op::Param
        } else {
            Op::Leaf
        };
        let v = self.push(store.get(id).clone(), op);
        self.params.insert(id, v);
        v
    }

    /// Same value, no gradient path to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v * v);
        self.push(value, Op::Square(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.push(value, Op::Transpose(a)))
    }

    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let value = self.value(a).add_row_bias(self.value(bias))?;
        Ok(self.push(value, Op::AddRowBias(a, bias)))
    }

    pub fn mul_row_broadcast(&mut self, a: Var, v: Var) -> Result<Var> {
        let value = self.value(a).mul_row_broadcast(self.value(v))?;
        Ok(self.push(value, Op::MulRowBroadcast(a, v)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).relu();
        self.push(value, Op::Relu(a))
    }

    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var, grid: Grid) -> Result<Var> {
        let value = tensor::conv3x3_forward(self.value(x), self.value(w), self.value(b), grid)?;
        Ok(self.push(value, Op::Conv3x3 { x, w, b, grid }))
    }

    pub fn conv_transpose2x(&mut self, x: Var, w: Var, b: Var, grid: Grid) -> Result<Var> {
        let value =
            tensor::conv_transpose2x_forward(self.value(x), self.value(w), self.value(b), grid)?;
        Ok(self.push(value, Op::ConvT2x { x, w, b, grid }))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).softmax_rows();
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).log_softmax_rows();
        self.push(value, Op::LogSoftmaxRows(a))
    }

    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).normalize_rows()?;
        Ok(self.push(value, Op::NormalizeRows(a)))
    }

    pub fn select_row(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = self.value(a);
        if i >= t.rows() {
            return Err(Error::Dimension(format!("row {i} of {:?}", t.shape())));
        }
        let value = Tensor::vector(t.row(i).to_vec());
        Ok(self.push(value, Op::SelectRow(a, i)))
    }

    /// Stacks equal-length vectors into a `[n, d]` matrix.
    pub fn stack_rows(&mut self, vs: &[Var]) -> Result<Var> {
        if vs.is_empty() {
            return Err(Error::Argument("stack of zero rows".into()));
        }
        let d = self.value(vs[0]).len();
        let mut data = Vec::with_capacity(vs.len() * d);
        for &v in vs {
            let t = self.value(v);
            if t.len() != d {
                return Err(Error::Dimension(format!(
                    "stack rows of length {d} and {}",
                    t.len()
                )));
            }
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![vs.len(), d], data)?;
        Ok(self.push(value, Op::StackRows(vs.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        self.push(value, Op::Mean(a))
    }

    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 || t.rows() != t.cols() {
            return Err(Error::Dimension(format!("diag of {:?}", t.shape())));
        }
        let n = t.rows();
        let value = Tensor::vector((0..n).map(|i| t.data()[i * n + i]).collect());
        Ok(self.push(value, Op::Diag(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Mean of several same-shaped nodes.
    /// Channel-wise products of one `[c, d]` map with each of `n` prototypes `[n, d]`,
    /// stacked into `[n*c, d]`.
    pub fn correlate(&mut self, x: Var, protos: Var) -> Result<Var> {
        let value = correlate_values(self.value(x), self.value(protos))?;
        Ok(self.push(value, Op::Correlate(x, protos)))
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(&mut self, vs: &[Var]) -> Result<Var> {
        let first = vs
            .first()
            .ok_or_else(|| Error::Argument("concat of zero blocks".into()))?;
        let d = self.value(*first).cols();
        let mut data = Vec::new();
        for &v in vs {
            let t = self.value(v);
            if t.shape().len() != 2 || t.cols() != d {
                return Err(Error::Dimension(format!(
                    "concat rows of width {d} and {:?}",
                    t.shape()
                )));
            }
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![data.len() / d, d], data)?;
        Ok(self.push(value, Op::ConcatRows(vs.to_vec())))
    }

    pub fn average(&mut self, vs: &[Var]) -> Result<Var> {
        let (&first, rest) = vs
            .split_first()
            .ok_or_else(|| Error::Argument("average of an empty list".into()))?;
        let mut acc = first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        Ok(self.scale(acc, 1.0 / vs.len() as f64))
    }

    /// Back-propagates from the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward from non-scalar {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing
                    .add_assign(&g)
                    .expect("gradient shape matches node shape"),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param => {
                    // keep the gradient of leaves for inspection
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, g.mul(self.value(*b))?);
                    acc(&mut grads, *b, g.mul(self.value(*a))?);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.scale(*s)),
                Op::Square(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, g.mul(&x.scale(2.0))?);
                }
                Op::MatMul(a, b) => {
                    let bt = self.value(*b).transpose()?;
                    let at = self.value(*a).transpose()?;
                    acc(&mut grads, *a, g.matmul(&bt)?);
                    acc(&mut grads, *b, at.matmul(&g)?);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()?),
                Op::AddRowBias(a, b) => {
                    let m = g.cols();
                    let mut gb = vec![0.0; m];
                    for row in g.data().chunks(m) {
                        for (s, v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    let gb = Tensor::new(self.value(*b).shape().to_vec(), gb)?;
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *b, gb);
                }
                Op::MulRowBroadcast(a, v) => {
                    let av = self.value(*a);
                    let vv = self.value(*v);
                    let d = av.cols();
                    let ga = g.mul_row_broadcast(vv)?;
                    let mut gv = vec![0.0; d];
                    for (grow, arow) in g.data().chunks(d).zip(av.data().chunks(d)) {
                        for j in 0..d {
                            gv[j] += grow[j] * arow[j];
                        }
                    }
                    let gv = Tensor::new(vv.shape().to_vec(), gv)?;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *v, gv);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    for (gv, &xv) in ga.data_mut().iter_mut().zip(x.data()) {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Conv3x3 { x, w, b, grid } => {
                    let (dx, dw, db) =
                        tensor::conv3x3_backward(self.value(*x), self.value(*w), &g, *grid);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *b, db.reshape(self.value(*b).shape())?);
                }
                Op::ConvT2x { x, w, b, grid } => {
                    let (dx, dw, db) = tensor::conv_transpose2x_backward(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        *grid,
                    );
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *b, db.reshape(self.value(*b).shape())?);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let m = y.cols();
                    let mut ga = g.clone();
                    for (grow, yrow) in ga.data_mut().chunks_mut(m).zip(y.data().chunks(m)) {
                        let s: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for (gv, &yv) in grow.iter_mut().zip(yrow) {
                            *gv = yv * (*gv - s);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let m = y.cols();
                    let mut ga = g.clone();
                    for (grow, yrow) in ga.data_mut().chunks_mut(m).zip(y.data().chunks(m)) {
                        let s: f64 = grow.iter().sum();
                        for (gv, &yv) in grow.iter_mut().zip(yrow) {
                            *gv -= yv.exp() * s;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::NormalizeRows(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let m = y.cols();
                    let mut ga = g.clone();
                    for ((grow, yrow), xrow) in ga
                        .data_mut()
                        .chunks_mut(m)
                        .zip(y.data().chunks(m))
                        .zip(x.data().chunks(m))
                    {
                        let n = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let s: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for (gv, &yv) in grow.iter_mut().zip(yrow) {
                            *gv = (*gv - yv * s) / n;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SelectRow(a, r) => {
                    let x = self.value(*a);
                    let mut ga = Tensor::zeros(x.shape());
                    let c = x.cols();
                    ga.data_mut()[r * c..(r + 1) * c].copy_from_slice(g.data());
                    acc(&mut grads, *a, ga);
                }
                Op::StackRows(vs) => {
                    let d = g.cols();
                    for (k, v) in vs.iter().enumerate() {
                        let row = g.data()[k * d..(k + 1) * d].to_vec();
                        let shape = self.value(*v).shape().to_vec();
                        acc(&mut grads, *v, Tensor::new(shape, row)?);
                    }
                }
                Op::Sum(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, Tensor::full(x.shape(), g.item()));
                }
                Op::Mean(a) => {
                    let x = self.value(*a);
                    acc(
                        &mut grads,
                        *a,
                        Tensor::full(x.shape(), g.item() / x.len() as f64),
                    );
                }
                Op::Diag(a) => {
                    let x = self.value(*a);
                    let n = x.rows();
                    let mut ga = Tensor::zeros(x.shape());
                    for k in 0..n {
                        ga.data_mut()[k * n + k] = g.data()[k];
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Correlate(x, p) => {
                    let (xv, pv) = (self.value(*x), self.value(*p));
                    let (c, d) = (xv.rows(), xv.cols());
                    let mut gx = vec![0.0; c * d];
                    let mut gp = vec![0.0; pv.len()];
                    for n in 0..pv.rows() {
                        let prow = pv.row(n);
                        for i in 0..c {
                            let grow = &g.data()[(n * c + i) * d..(n * c + i + 1) * d];
                            let xrow = xv.row(i);
                            for j in 0..d {
                                gx[i * d + j] += grow[j] * prow[j];
                                gp[n * d + j] += grow[j] * xrow[j];
                            }
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
                    acc(&mut grads, *p, Tensor::new(pv.shape().to_vec(), gp)?);
                }
                Op::ConcatRows(vs) => {
                    let mut off = 0;
                    for v in vs {
                        let shape = self.value(*v).shape().to_vec();
                        let len = self.value(*v).len();
                        let part = g.data()[off..off + len].to_vec();
                        acc(&mut grads, *v, Tensor::new(shape, part)?);
                        off += len;
                    }
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    acc(&mut grads, *a, g.reshape(&shape)?);
                }
            }
        }

        let mut params = HashMap::new();
        for (&id, &v) in &self.params {
            if let Op::Param = self.nodes[v.0].op {
                if let Some(Some(g)) = grads.get(v.0) {
                    params.insert(id, g.clone());
                }
            }
        }
        Ok(Gradients {
            leaves: grads,
            params,
        })
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient with respect to a leaf node; `None` when no path reached it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &HashMap<ParamId, Tensor> {
        &self.params
    }
}

/// Forward rule of [`Tape::correlate`].
pub fn correlate_values(x: &Tensor, protos: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 || protos.shape().len() != 2 || x.cols() != protos.cols() {
        return Err(Error::Dimension(format!(
            "correlate map {:?} with prototypes {:?}",
            x.shape(),
            protos.shape()
        )));
    }
    let (c, d) = (x.rows(), x.cols());
    let mut out = Vec::with_capacity(protos.rows() * c * d);
    for n in 0..protos.rows() {
        let p = protos.row(n);
        for i in 0..c {
            out.extend(x.row(i).iter().zip(p).map(|(a, b)| a * b));
        }
    }
    Tensor::new(vec![protos.rows() * c, d], out)
}
