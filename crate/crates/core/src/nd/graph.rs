//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and the backward pass is a single reverse sweep.

use crate::error::{Error, Result};
use crate::nd::tensor::{gemm, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    /// `[m, n] + [1, n]`, bias broadcast over rows.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    /// Heaviside step; no gradient flows through it.
    Step,
    Sum(Var),
    Mean(Var),
    /// Column sums, `[m, n] -> [1, n]`.
    SumRows(Var),
    LogSumExp(Var),
    LogSoftmaxRows(Var),
    Reshape(Var),
    ConcatCols(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`]: one gradient per node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`. Leaves the output does not depend on
    /// get an all-zero gradient of the leaf's shape.
    pub fn wrt(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn wrt_ref(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
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

fn softplus(x: f64) -> f64 {
    // log(1 + e^x) without overflow
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Stable `log(sum(exp(values)))`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Differentiable leaf (a parameter or an input we want gradients for).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.needs(a);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::Shape(format!(
                "add_row: {:?} + {:?}",
                av.shape(),
                rv.shape()
            )));
        }
        let cols = av.cols();
        let mut value = av.clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += rv.data()[i % cols];
        }
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(value, Op::AddRow(a, row), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| c * x);
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.needs(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        let ng = self.needs(a);
        self.push(value, Op::Softplus(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let ng = self.needs(a);
        self.push(value, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let ng = self.needs(a);
        self.push(value, Op::Log(a), ng)
    }

    pub fn step(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.push(value, Op::Step, false)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        let ng = self.needs(a);
        self.push(value, Op::Mean(a), ng)
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let cols = t.cols();
        let mut out = vec![0.0; cols];
        for (i, v) in t.data().iter().enumerate() {
            out[i % cols] += v;
        }
        let ng = self.needs(a);
        self.push(Tensor::row(out), Op::SumRows(a), ng)
    }

    /// `log(sum(exp(a)))` over every entry, max-subtracted.
    pub fn log_sum_exp(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(log_sum_exp(self.value(a).data()));
        let ng = self.needs(a);
        self.push(value, Op::LogSumExp(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let cols = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let ng = self.needs(a);
        self.push(value, Op::LogSoftmaxRows(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    /// `[m, p] ++ [m, q] -> [m, p + q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::Shape(format!(
                "concat_cols: {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, p, q) = (av.rows(), av.cols(), bv.cols());
        let mut out = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            out.extend_from_slice(av.row_slice(i));
            out.extend_from_slice(bv.row_slice(i));
        }
        let value = Tensor::matrix(m, p + q, out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::ConcatCols(a, b), ng))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if !out.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let shapes = self.nodes[..n]
            .iter()
            .map(|nd| nd.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        match node.op {
            Op::Leaf | Op::Step => {}
            Op::MatMul(a, b) => {
                if self.needs(a) {
                    let ga = gemm(g, false, self.value(b), true)?;
                    self.accumulate(grads, a, ga);
                }
                if self.needs(b) {
                    let gb = gemm(self.value(a), true, g, false)?;
                    self.accumulate(grads, b, gb);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, a, g.clone());
                if self.needs(row) {
                    let cols = g.cols();
                    let mut acc = vec![0.0; cols];
                    for (i, v) in g.data().iter().enumerate() {
                        acc[i % cols] += v;
                    }
                    self.accumulate(grads, row, Tensor::row(acc));
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    self.accumulate(grads, a, g.zip_map(self.value(b), |gi, bi| gi * bi));
                }
                if self.needs(b) {
                    self.accumulate(grads, b, g.zip_map(self.value(a), |gi, ai| gi * ai));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, a, g.map(|v| c * v)),
            Op::Relu(a) => {
                let gx = g.zip_map(self.value(a), |gi, x| if x > 0.0 { gi } else { 0.0 });
                self.accumulate(grads, a, gx);
            }
            Op::Sigmoid(a) => {
                self.accumulate(grads, a, g.zip_map(y, |gi, s| gi * s * (1.0 - s)));
            }
            Op::Softplus(a) => {
                let gx = g.zip_map(self.value(a), |gi, x| gi * sigmoid(x));
                self.accumulate(grads, a, gx);
            }
            Op::Exp(a) => self.accumulate(grads, a, g.zip_map(y, |gi, e| gi * e)),
            Op::Log(a) => {
                self.accumulate(grads, a, g.zip_map(self.value(a), |gi, x| gi / x));
            }
            Op::Sum(a) => {
                let s = g.item();
                self.accumulate(grads, a, Tensor::full(self.value(a).shape(), s));
            }
            Op::Mean(a) => {
                let x = self.value(a);
                let s = g.item() / x.len() as f64;
                self.accumulate(grads, a, Tensor::full(x.shape(), s));
            }
            Op::SumRows(a) => {
                let x = self.value(a);
                let cols = x.cols();
                let data = (0..x.len()).map(|i| g.data()[i % cols]).collect();
                self.accumulate(grads, a, Tensor::new(x.shape().to_vec(), data)?);
            }
            Op::LogSumExp(a) => {
                let lse = y.item();
                let s = g.item();
                let gx = self.value(a).map(|x| s * (x - lse).exp());
                self.accumulate(grads, a, gx);
            }
            Op::LogSoftmaxRows(a) => {
                // d/dx_i = g_i - softmax_i * sum_j g_j
                let cols = y.cols();
                let mut out = g.data().to_vec();
                for (orow, yrow) in out.chunks_mut(cols).zip(y.data().chunks(cols)) {
                    let total: f64 = orow.iter().sum();
                    for (o, ly) in orow.iter_mut().zip(yrow) {
                        *o -= ly.exp() * total;
                    }
                }
                self.accumulate(grads, a, Tensor::new(y.shape().to_vec(), out)?);
            }
            Op::Reshape(a) => {
                let shape = self.value(a).shape().to_vec();
                self.accumulate(grads, a, g.clone().reshape(shape)?);
            }
            Op::ConcatCols(a, b) => {
                let p = self.value(a).cols();
                let q = self.value(b).cols();
                let m = g.rows();
                let mut ga = Vec::with_capacity(m * p);
                let mut gb = Vec::with_capacity(m * q);
                for i in 0..m {
                    let r = g.row_slice(i);
                    ga.extend_from_slice(&r[..p]);
                    gb.extend_from_slice(&r[p..]);
                }
                if self.needs(a) {
                    self.accumulate(grads, a, Tensor::matrix(m, p, ga)?);
                }
                if self.needs(b) {
                    self.accumulate(grads, b, Tensor::matrix(m, q, gb)?);
                }
            }
        }
        Ok(())
    }
}
